//! Scripted conversations.
//!
//! A script is a YAML document with a persona and a list of user steps, each
//! optionally carrying expectations about the bot's answer and the stored
//! context. Scripts run over the loopback channel against a fresh in-memory
//! service, on a simulated clock, so reports are byte-for-byte reproducible.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use chrono::{DateTime, TimeZone, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::messaging::{Capabilities, ChatAction, LoopbackAdapter, MessagingError};
use crate::nlu::EntityValue;
use crate::pack::PackSet;
use crate::service::{ChatService, ServiceError};
use crate::store::{Direction, MemoryStore, UserContext};
use crate::Language;

/// Seconds of simulated time between two user steps.
pub const STEP_SECONDS: i64 = 30;

pub const SHIPPED_SCRIPTS: &[(&str, &str)] = &[
    (
        "01_regular_direct_de",
        include_str!("../scripts/01_regular_direct_de.yaml"),
    ),
    (
        "02_regular_prefilled_en",
        include_str!("../scripts/02_regular_prefilled_en.yaml"),
    ),
    (
        "03_regular_console_de",
        include_str!("../scripts/03_regular_console_de.yaml"),
    ),
    (
        "04_regular_informal_de",
        include_str!("../scripts/04_regular_informal_de.yaml"),
    ),
    (
        "05_occasional_smalltalk_de",
        include_str!("../scripts/05_occasional_smalltalk_de.yaml"),
    ),
    (
        "06_occasional_help_en",
        include_str!("../scripts/06_occasional_help_en.yaml"),
    ),
    (
        "07_occasional_correction_de",
        include_str!("../scripts/07_occasional_correction_de.yaml"),
    ),
    (
        "08_occasional_photo_en",
        include_str!("../scripts/08_occasional_photo_en.yaml"),
    ),
    (
        "09_occasional_emoji_de",
        include_str!("../scripts/09_occasional_emoji_de.yaml"),
    ),
    (
        "10_never_verbose_de",
        include_str!("../scripts/10_never_verbose_de.yaml"),
    ),
    (
        "11_never_confused_en",
        include_str!("../scripts/11_never_confused_en.yaml"),
    ),
    (
        "12_never_invalid_imei_de",
        include_str!("../scripts/12_never_invalid_imei_de.yaml"),
    ),
    (
        "13_never_cancel_restart_en",
        include_str!("../scripts/13_never_cancel_restart_en.yaml"),
    ),
    (
        "14_never_adversarial_de",
        include_str!("../scripts/14_never_adversarial_de.yaml"),
    ),
];

pub fn reference_time() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2024, 5, 10, 9, 0, 0)
        .single()
        .expect("valid reference time")
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("cannot read {origin}: {message}")]
    Io { origin: String, message: String },
    #[error("cannot parse script {origin}: {message}")]
    Parse { origin: String, message: String },
    #[error("script '{script}' step {step}: {message}")]
    InvalidStep {
        script: String,
        step: usize,
        message: String,
    },
    #[error(transparent)]
    Messaging(#[from] MessagingError),
    #[error(transparent)]
    Service(#[from] ServiceError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Script {
    pub name: String,
    pub persona: String,
    pub language: Language,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channel: Option<Capabilities>,
    /// Whether the script is expected to end with a stored claim.
    #[serde(default = "yes")]
    pub expect_completed: bool,
    pub steps: Vec<Step>,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Step {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub say: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub choose: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub media: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expect: Option<Expect>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Expect {
    /// Some action of this kind was sent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<String>,
    /// Some action text contains this, ignoring case.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_contains: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub callback: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state_absent: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slot_filled: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slot_absent: Option<String>,
    /// Slot name and canonical value.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slot_equals: Option<(String, String)>,
}

impl Script {
    pub fn from_yaml(text: &str, origin: &str) -> Result<Script, HarnessError> {
        let script: Script = serde_yaml::from_str(text).map_err(|e| HarnessError::Parse {
            origin: origin.to_string(),
            message: e.to_string(),
        })?;
        for (i, step) in script.steps.iter().enumerate() {
            let inputs = [&step.say, &step.choose, &step.media]
                .iter()
                .filter(|s| s.is_some())
                .count();
            if inputs != 1 {
                return Err(HarnessError::InvalidStep {
                    script: script.name.clone(),
                    step: i + 1,
                    message: "needs exactly one of say, choose, media".into(),
                });
            }
        }
        Ok(script)
    }

    pub fn load(path: &Path) -> Result<Script, HarnessError> {
        let text = fs::read_to_string(path).map_err(|e| HarnessError::Io {
            origin: path.display().to_string(),
            message: e.to_string(),
        })?;
        Script::from_yaml(&text, &path.display().to_string())
    }

    pub fn user_id(&self) -> String {
        format!("harness-{}", self.name)
    }
}

/// The shipped suite, parsed.
pub fn shipped_scripts() -> Vec<Script> {
    SHIPPED_SCRIPTS
        .iter()
        .map(|(name, text)| Script::from_yaml(text, name).expect("shipped script parses"))
        .collect()
}

/// A script file, or every `*.yaml` of a directory in name order.
pub fn load_scripts(path: &Path) -> Result<Vec<Script>, HarnessError> {
    if !path.is_dir() {
        return Ok(vec![Script::load(path)?]);
    }
    let mut files: Vec<_> = fs::read_dir(path)
        .map_err(|e| HarnessError::Io {
            origin: path.display().to_string(),
            message: e.to_string(),
        })?
        .flatten()
        .map(|e| e.path())
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("yaml" | "yml")))
        .collect();
    files.sort();
    files.iter().map(|f| Script::load(f)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnRecord {
    pub step: usize,
    pub user: String,
    pub bot: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptReport {
    pub name: String,
    pub persona: String,
    pub language: Language,
    pub turns: usize,
    pub completed: bool,
    pub expect_completed: bool,
    pub claim_ids: Vec<String>,
    pub expectation_failures: Vec<String>,
    pub simulated_seconds: i64,
    pub digest: String,
    pub transcript: Vec<TurnRecord>,
}

impl TranscriptReport {
    pub fn passed(&self) -> bool {
        self.expectation_failures.is_empty() && self.completed == self.expect_completed
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub scripts: usize,
    pub completed: usize,
    pub completion_rate: f64,
    pub passed: usize,
    pub max_turns: usize,
    pub mean_turns: f64,
    pub simulated_seconds: i64,
    pub reports: Vec<TranscriptReport>,
}

impl SuiteReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Human summary. Wall time is shown here only, never in the JSON.
    pub fn to_text(&self, wall: Option<Duration>) -> String {
        let mut out = String::new();
        for r in &self.reports {
            let _ = writeln!(
                out,
                "{:<32} {:>3} turns  {:<9} {}",
                r.name,
                r.turns,
                if r.completed { "completed" } else { "open" },
                if r.passed() { "ok" } else { "FAILED" }
            );
            for f in &r.expectation_failures {
                let _ = writeln!(out, "    {f}");
            }
        }
        let _ = writeln!(
            out,
            "{} scripts, {} completed ({:.2}), {} passed, max {} turns, mean {:.1}",
            self.scripts, self.completed, self.completion_rate, self.passed, self.max_turns, self.mean_turns
        );
        if let Some(w) = wall {
            let _ = writeln!(out, "wall time {:.3}s", w.as_secs_f64());
        }
        out
    }
}

fn describe(action: &ChatAction) -> String {
    format!("{}: {}", action.kind().as_str(), action.summary())
}

fn check(expect: &Expect, actions: &[ChatAction], ctx: Option<&UserContext>) -> Vec<String> {
    let mut failures = Vec::new();
    if let Some(kind) = &expect.kind {
        if !actions.iter().any(|a| a.kind().as_str() == kind) {
            failures.push(format!("no {kind} action"));
        }
    }
    if let Some(needle) = &expect.text_contains {
        let n = needle.to_lowercase();
        if !actions
            .iter()
            .any(|a| a.text().is_some_and(|t| t.to_lowercase().contains(&n)))
        {
            failures.push(format!("no text containing '{needle}'"));
        }
    }
    let states = ctx.map(|c| c.dialog.active_states.names()).unwrap_or_default();
    if let Some(cb) = &expect.callback {
        let fired = ctx
            .and_then(|c| c.transcript.iter().rev().find(|e| e.direction == Direction::Inbound))
            .and_then(|e| e.callback.clone());
        if fired.as_deref() != Some(cb.as_str()) {
            failures.push(format!("callback {fired:?}, expected {cb}"));
        }
    }
    if let Some(s) = &expect.state {
        if !states.contains(s) {
            failures.push(format!("state {s} not active (active: {states:?})"));
        }
    }
    if let Some(s) = &expect.state_absent {
        if states.contains(s) {
            failures.push(format!("state {s} still active"));
        }
    }
    let slot = |name: &str| -> Option<EntityValue> { ctx?.frame.as_ref()?.slots.get(name).cloned() };
    if let Some(name) = &expect.slot_filled {
        if slot(name).is_none() {
            failures.push(format!("slot {name} not filled"));
        }
    }
    if let Some(name) = &expect.slot_absent {
        if slot(name).is_some() {
            failures.push(format!("slot {name} unexpectedly filled"));
        }
    }
    if let Some((name, want)) = &expect.slot_equals {
        let got = slot(name).map(|v| v.canonical());
        if got.as_deref() != Some(want.as_str()) {
            failures.push(format!("slot {name} is {got:?}, expected {want}"));
        }
    }
    failures
}

/// Runs a script against `service` over a loopback channel.
pub fn run_script_with(script: &Script, service: &ChatService) -> Result<TranscriptReport, HarnessError> {
    let user = script.user_id();
    let caps = script.channel.unwrap_or(Capabilities::LOOPBACK);
    let mut tick: i64 = 0;
    let start = reference_time();
    let mut adapter = LoopbackAdapter::new(service, user.clone(), caps).with_clock(|| {
        let at = start + chrono::Duration::seconds(tick * STEP_SECONDS);
        tick += 1;
        at
    });
    let claims_before = service.context(&user)?.map_or(0, |c| c.completed_claims.len());

    let mut transcript = Vec::with_capacity(script.steps.len());
    let mut failures = Vec::new();
    for (i, step) in script.steps.iter().enumerate() {
        let (said, actions) = if let Some(text) = &step.say {
            (text.clone(), adapter.say(text)?)
        } else if let Some(id) = &step.choose {
            (format!("[choice] {id}"), adapter.choose(id)?)
        } else if let Some(uri) = &step.media {
            (format!("[media] {uri}"), adapter.send_media(uri)?)
        } else {
            return Err(HarnessError::InvalidStep {
                script: script.name.clone(),
                step: i + 1,
                message: "no input".into(),
            });
        };
        if let Some(expect) = &step.expect {
            let ctx = service.context(&user)?;
            for f in check(expect, &actions, ctx.as_ref()) {
                failures.push(format!("step {}: {f}", i + 1));
            }
        }
        transcript.push(TurnRecord {
            step: i + 1,
            user: said,
            bot: actions.iter().map(describe).collect(),
        });
    }
    drop(adapter);

    let claim_ids: Vec<String> = service
        .context(&user)?
        .map(|c| c.completed_claims.into_iter().skip(claims_before).collect())
        .unwrap_or_default();
    let mut hasher = Sha256::new();
    hasher.update(serde_json::to_vec(&transcript).expect("transcript serializes"));
    let digest = format!("{:x}", hasher.finalize());
    Ok(TranscriptReport {
        name: script.name.clone(),
        persona: script.persona.clone(),
        language: script.language,
        turns: script.steps.len(),
        completed: !claim_ids.is_empty(),
        expect_completed: script.expect_completed,
        claim_ids,
        expectation_failures: failures,
        simulated_seconds: script.steps.len() as i64 * STEP_SECONDS,
        digest,
        transcript,
    })
}

/// Runs a script against a fresh in-memory service.
pub fn run_script(script: &Script, packs: &PackSet) -> Result<TranscriptReport, HarnessError> {
    let service = ChatService::new(packs.clone(), Arc::new(MemoryStore::new()), script.language)?;
    run_script_with(script, &service)
}

pub fn run_suite(scripts: &[Script], packs: &PackSet) -> Result<SuiteReport, HarnessError> {
    let reports = scripts
        .iter()
        .map(|s| run_script(s, packs))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(summarize(reports))
}

/// Runs every script on its own thread against services sharing one store.
/// Claim ids depend on completion order, so only the sequential report is
/// byte-stable.
pub fn run_suite_parallel(scripts: &[Script], packs: &PackSet) -> Result<SuiteReport, HarnessError> {
    let store = Arc::new(MemoryStore::new());
    let mut services = std::collections::BTreeMap::new();
    for s in scripts {
        if let std::collections::btree_map::Entry::Vacant(e) = services.entry(s.language) {
            let service = ChatService::new(packs.clone(), store.clone(), s.language)?;
            e.insert(service);
        }
    }
    let reports = std::thread::scope(|scope| {
        let handles: Vec<_> = scripts
            .iter()
            .map(|s| {
                let service = &services[&s.language];
                scope.spawn(move || run_script_with(s, service))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("script thread panicked"))
            .collect::<Result<Vec<_>, _>>()
    })?;
    Ok(summarize(reports))
}

fn summarize(reports: Vec<TranscriptReport>) -> SuiteReport {
    let n = reports.len();
    let completed = reports.iter().filter(|r| r.completed).count();
    let total_turns: usize = reports.iter().map(|r| r.turns).sum();
    SuiteReport {
        scripts: n,
        completed,
        completion_rate: if n == 0 { 0.0 } else { completed as f64 / n as f64 },
        passed: reports.iter().filter(|r| r.passed()).count(),
        max_turns: reports.iter().map(|r| r.turns).max().unwrap_or(0),
        mean_turns: if n == 0 { 0.0 } else { total_turns as f64 / n as f64 },
        simulated_seconds: reports.iter().map(|r| r.simulated_seconds).sum(),
        reports,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn steps_need_exactly_one_input() {
        let text = "name: x\npersona: p\nlanguage: en\nsteps:\n  - say: hi\n    choose: a\n";
        assert!(matches!(
            Script::from_yaml(text, "t"),
            Err(HarnessError::InvalidStep { step: 1, .. })
        ));
    }

    #[test]
    fn shipped_scripts_parse_and_have_unique_names() {
        let scripts = shipped_scripts();
        assert_eq!(scripts.len(), 14);
        let mut names: Vec<&str> = scripts.iter().map(|s| s.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), 14);
    }

    #[test]
    fn failed_expectations_are_reported() {
        let text = "name: x\npersona: p\nlanguage: en\nexpect_completed: false\nsteps:\n  - say: hello\n    expect:\n      callback: repair\n      state: QUESTIONNAIRE\n";
        let script = Script::from_yaml(text, "t").unwrap();
        let report = run_script(&script, &PackSet::shipped()).unwrap();
        assert_eq!(
            report.expectation_failures.len(),
            2,
            "{:?}",
            report.expectation_failures
        );
        assert!(!report.passed());
    }
}
