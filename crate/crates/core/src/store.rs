//! Durable per-user context and the append-only claim log.
//!
//! Channels keep no conversational state; everything needed to continue a
//! conversation after a restart lives in the [`UserContext`] document.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use percent_encoding::{utf8_percent_encode, AsciiSet, NON_ALPHANUMERIC};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::claims::{ClaimFrame, ClaimRecord};
use crate::engine::DialogControl;
use crate::responder::UserProfile;
use crate::Language;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum StoreError {
    #[error("storage unavailable: {0}")]
    StorageUnavailable(String),
    #[error("claim already stored as {existing_id}")]
    DuplicateClaim { existing_id: String },
    #[error("context violates an invariant: {0}")]
    InvalidContext(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Inbound,
    Outbound,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub turn: u64,
    pub direction: Direction,
    pub summary: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intent: Option<String>,
    /// Callback of the rule that fired for an inbound message.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub callback: Option<String>,
    pub at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserContext {
    pub user_id: String,
    pub profile: UserProfile,
    #[serde(flatten)]
    pub dialog: DialogControl,
    /// The claim being collected, if any.
    #[serde(default)]
    pub frame: Option<ClaimFrame>,
    #[serde(default)]
    pub completed_claims: Vec<String>,
    #[serde(default)]
    pub transcript: Vec<TranscriptEntry>,
}

impl UserContext {
    pub fn new(user_id: &str, language: Language) -> Self {
        UserContext {
            user_id: user_id.to_string(),
            profile: UserProfile::new(language),
            dialog: DialogControl::default(),
            frame: None,
            completed_claims: Vec::new(),
            transcript: Vec::new(),
        }
    }

    pub fn check(&self) -> Result<(), StoreError> {
        if self.dialog.active_states.has_duplicates() {
            return Err(StoreError::InvalidContext(format!(
                "duplicate active states for {}",
                self.user_id
            )));
        }
        if self.dialog.active_states.iter().any(|s| s.lifetime == Some(0)) {
            return Err(StoreError::InvalidContext(format!(
                "expired state kept for {}",
                self.user_id
            )));
        }
        Ok(())
    }
}

pub trait ContextStore: Send + Sync {
    /// The stored context, or a fresh one if the user is unknown.
    fn load_context(&self, user_id: &str, language: Language) -> Result<UserContext, StoreError>;

    fn peek_context(&self, user_id: &str) -> Result<Option<UserContext>, StoreError>;

    fn save_context(&self, context: &UserContext) -> Result<(), StoreError>;

    /// Appends a claim and returns its assigned id. A record whose
    /// `transcript_ref` is already stored yields [`StoreError::DuplicateClaim`].
    fn persist_claim(&self, record: &ClaimRecord) -> Result<String, StoreError>;

    fn claims(&self) -> Result<Vec<ClaimRecord>, StoreError>;
}

fn claim_id(seq: usize) -> String {
    format!("C-{seq:06}")
}

fn assign(existing: &[ClaimRecord], record: &ClaimRecord) -> Result<ClaimRecord, StoreError> {
    if let Some(prev) = existing.iter().find(|c| c.transcript_ref == record.transcript_ref) {
        return Err(StoreError::DuplicateClaim {
            existing_id: prev.claim_id.clone(),
        });
    }
    let mut stored = record.clone();
    stored.claim_id = claim_id(existing.len() + 1);
    Ok(stored)
}

#[derive(Serialize, Deserialize)]
struct ContextDocument {
    schema_version: u32,
    context: UserContext,
}

/// Keeps contexts as `contexts/<user>.json` and claims as
/// `claims/claims.jsonl` below a root directory.
#[derive(Debug)]
pub struct FileStore {
    root: PathBuf,
    claims_lock: Mutex<()>,
}

const FILE_NAME_SET: &AsciiSet = &NON_ALPHANUMERIC.remove(b'-').remove(b'_');

fn unavailable(what: &str, path: &Path, e: impl std::fmt::Display) -> StoreError {
    StoreError::StorageUnavailable(format!("{what} {}: {e}", path.display()))
}

impl FileStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        for dir in [root.join("contexts"), root.join("claims")] {
            fs::create_dir_all(&dir).map_err(|e| unavailable("cannot create", &dir, e))?;
        }
        Ok(FileStore {
            root,
            claims_lock: Mutex::new(()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn context_path(&self, user_id: &str) -> PathBuf {
        let name: String = utf8_percent_encode(user_id, FILE_NAME_SET).collect();
        self.root.join("contexts").join(format!("{name}.json"))
    }

    fn claims_path(&self) -> PathBuf {
        self.root.join("claims").join("claims.jsonl")
    }

    fn read_claims(&self) -> Result<Vec<ClaimRecord>, StoreError> {
        let path = self.claims_path();
        let file = match File::open(&path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(unavailable("cannot read", &path, e)),
        };
        let mut out = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| unavailable("cannot read", &path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let record = serde_json::from_str(&line)
                .map_err(|e| unavailable("corrupted claim log", &path, format!("line {}: {e}", n + 1)))?;
            out.push(record);
        }
        Ok(out)
    }
}

impl ContextStore for FileStore {
    fn load_context(&self, user_id: &str, language: Language) -> Result<UserContext, StoreError> {
        Ok(self
            .peek_context(user_id)?
            .unwrap_or_else(|| UserContext::new(user_id, language)))
    }

    fn peek_context(&self, user_id: &str) -> Result<Option<UserContext>, StoreError> {
        let path = self.context_path(user_id);
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(unavailable("cannot read", &path, e)),
        };
        let doc: ContextDocument =
            serde_json::from_str(&text).map_err(|e| unavailable("corrupted context record", &path, e))?;
        if doc.schema_version != SCHEMA_VERSION {
            return Err(unavailable(
                "unsupported context schema",
                &path,
                format!("version {} (expected {SCHEMA_VERSION})", doc.schema_version),
            ));
        }
        if doc.context.user_id != user_id {
            return Err(unavailable(
                "context record belongs to another user",
                &path,
                &doc.context.user_id,
            ));
        }
        Ok(Some(doc.context))
    }

    fn save_context(&self, context: &UserContext) -> Result<(), StoreError> {
        context.check()?;
        let path = self.context_path(&context.user_id);
        let dir = path.parent().expect("context path has a parent");
        let doc = ContextDocument {
            schema_version: SCHEMA_VERSION,
            context: context.clone(),
        };
        let body = serde_json::to_vec_pretty(&doc).map_err(|e| unavailable("cannot encode", &path, e))?;
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| unavailable("cannot write", &path, e))?;
        tmp.write_all(&body)
            .map_err(|e| unavailable("cannot write", &path, e))?;
        tmp.as_file()
            .sync_all()
            .map_err(|e| unavailable("cannot sync", &path, e))?;
        tmp.persist(&path)
            .map_err(|e| unavailable("cannot replace", &path, e.error))?;
        Ok(())
    }

    fn persist_claim(&self, record: &ClaimRecord) -> Result<String, StoreError> {
        let _guard = self.claims_lock.lock().unwrap_or_else(|p| p.into_inner());
        let existing = self.read_claims()?;
        let stored = assign(&existing, record)?;
        let path = self.claims_path();
        let mut line = serde_json::to_string(&stored).map_err(|e| unavailable("cannot encode", &path, e))?;
        line.push('\n');
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| unavailable("cannot open", &path, e))?;
        file.write_all(line.as_bytes())
            .and_then(|_| file.sync_all())
            .map_err(|e| unavailable("cannot append", &path, e))?;
        Ok(stored.claim_id)
    }

    fn claims(&self) -> Result<Vec<ClaimRecord>, StoreError> {
        let _guard = self.claims_lock.lock().unwrap_or_else(|p| p.into_inner());
        self.read_claims()
    }
}

/// In-process store with switches to simulate outages.
#[derive(Debug, Default)]
pub struct MemoryStore {
    contexts: Mutex<HashMap<String, UserContext>>,
    claims: Mutex<Vec<ClaimRecord>>,
    fail_loads: AtomicBool,
    fail_saves: AtomicBool,
    fail_claims: AtomicBool,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_fail_loads(&self, fail: bool) {
        self.fail_loads.store(fail, Ordering::SeqCst);
    }

    pub fn set_fail_saves(&self, fail: bool) {
        self.fail_saves.store(fail, Ordering::SeqCst);
    }

    pub fn set_fail_claims(&self, fail: bool) {
        self.fail_claims.store(fail, Ordering::SeqCst);
    }
}

fn injected(what: &str) -> StoreError {
    StoreError::StorageUnavailable(format!("{what} failed (injected)"))
}

impl ContextStore for MemoryStore {
    fn load_context(&self, user_id: &str, language: Language) -> Result<UserContext, StoreError> {
        Ok(self
            .peek_context(user_id)?
            .unwrap_or_else(|| UserContext::new(user_id, language)))
    }

    fn peek_context(&self, user_id: &str) -> Result<Option<UserContext>, StoreError> {
        if self.fail_loads.load(Ordering::SeqCst) {
            return Err(injected("load"));
        }
        let contexts = self.contexts.lock().unwrap_or_else(|p| p.into_inner());
        Ok(contexts.get(user_id).cloned())
    }

    fn save_context(&self, context: &UserContext) -> Result<(), StoreError> {
        if self.fail_saves.load(Ordering::SeqCst) {
            return Err(injected("save"));
        }
        context.check()?;
        let mut contexts = self.contexts.lock().unwrap_or_else(|p| p.into_inner());
        contexts.insert(context.user_id.clone(), context.clone());
        Ok(())
    }

    fn persist_claim(&self, record: &ClaimRecord) -> Result<String, StoreError> {
        if self.fail_claims.load(Ordering::SeqCst) {
            return Err(injected("claim append"));
        }
        let mut claims = self.claims.lock().unwrap_or_else(|p| p.into_inner());
        let stored = assign(&claims, record)?;
        let id = stored.claim_id.clone();
        claims.push(stored);
        Ok(id)
    }

    fn claims(&self) -> Result<Vec<ClaimRecord>, StoreError> {
        Ok(self.claims.lock().unwrap_or_else(|p| p.into_inner()).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{apply_push, StatePush};
    use crate::nlu::{DamageType, EntityValue};
    use chrono::TimeZone;
    use std::collections::BTreeMap;

    fn record(tref: &str) -> ClaimRecord {
        ClaimRecord {
            claim_id: String::new(),
            user_id: "u1".into(),
            language: Language::En,
            slots: BTreeMap::from([("damage_type".to_string(), EntityValue::DamageType(DamageType::Theft))]),
            completed_at: Utc.with_ymd_and_hms(2024, 5, 10, 9, 0, 0).unwrap(),
            transcript_ref: tref.into(),
            attachments: Vec::new(),
        }
    }

    fn busy_context(user: &str) -> UserContext {
        let mut ctx = UserContext::new(user, Language::De);
        ctx.dialog.turn_counter = 4;
        apply_push(
            &mut ctx.dialog.active_states,
            &StatePush {
                name: "QUESTIONNAIRE".into(),
                priority: -10,
                lifetime: None,
            },
            1,
        );
        ctx
    }

    #[test]
    fn unknown_user_gets_fresh_context() {
        let dir = tempfile::tempdir().unwrap();
        let store = FileStore::open(dir.path()).unwrap();
        let ctx = store.load_context("nobody", Language::En).unwrap();
        assert_eq!(ctx.dialog.turn_counter, 0);
        assert_eq!(ctx.profile.language, Language::En);
        assert!(ctx.frame.is_none());
    }

    #[test]
    fn file_round_trip_and_last_writer_wins() {
        let dir = tempfile::tempdir().unwrap();
        let store = FileStore::open(dir.path()).unwrap();
        let mut ctx = busy_context("user/with spaces");
        store.save_context(&ctx).unwrap();
        assert_eq!(store.load_context("user/with spaces", Language::En).unwrap(), ctx);
        ctx.dialog.turn_counter = 5;
        store.save_context(&ctx).unwrap();
        assert_eq!(
            store
                .load_context("user/with spaces", Language::En)
                .unwrap()
                .dialog
                .turn_counter,
            5
        );
        let path = store.context_path("user/with spaces");
        assert!(path
            .file_name()
            .unwrap()
            .to_str()
            .unwrap()
            .starts_with("user%2Fwith%20spaces"));
        let raw: serde_json::Value = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
        assert_eq!(raw["schema_version"], 1);
    }

    #[test]
    fn corrupted_record_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let store = FileStore::open(dir.path()).unwrap();
        fs::write(store.context_path("u"), "{not json").unwrap();
        match store.load_context("u", Language::En) {
            Err(StoreError::StorageUnavailable(msg)) => assert!(msg.contains("corrupted"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn duplicate_states_are_rejected() {
        let store = MemoryStore::new();
        let mut ctx = busy_context("u");
        let mut raw = serde_json::to_value(&ctx).unwrap();
        let dup = raw["active_states"][0].clone();
        raw["active_states"].as_array_mut().unwrap().push(dup);
        ctx = serde_json::from_value(raw).unwrap();
        assert!(matches!(store.save_context(&ctx), Err(StoreError::InvalidContext(_))));
    }

    #[test]
    fn claim_ids_are_sequential_and_refs_unique() {
        let dir = tempfile::tempdir().unwrap();
        let store = FileStore::open(dir.path()).unwrap();
        assert_eq!(store.persist_claim(&record("a")).unwrap(), "C-000001");
        assert_eq!(store.persist_claim(&record("b")).unwrap(), "C-000002");
        assert_eq!(
            store.persist_claim(&record("a")).unwrap_err(),
            StoreError::DuplicateClaim {
                existing_id: "C-000001".into()
            }
        );
        let reopened = FileStore::open(dir.path()).unwrap();
        let ids: Vec<String> = reopened.claims().unwrap().into_iter().map(|c| c.claim_id).collect();
        assert_eq!(ids, ["C-000001", "C-000002"]);
    }

    #[test]
    fn memory_store_failure_injection() {
        let store = MemoryStore::new();
        store.set_fail_claims(true);
        assert!(matches!(
            store.persist_claim(&record("a")),
            Err(StoreError::StorageUnavailable(_))
        ));
        store.set_fail_claims(false);
        assert_eq!(store.persist_claim(&record("a")).unwrap(), "C-000001");
        store.set_fail_saves(true);
        assert!(store.save_context(&busy_context("u")).is_err());
        store.set_fail_loads(true);
        assert!(store.load_context("u", Language::En).is_err());
    }
}
