//! The message pipeline.
//!
//! For each inbound message: wait for the user's FIFO turn, load the context,
//! understand, plan, persist a finished claim, realize the replies, save the
//! context, and degrade the actions for the channel. Messages of one user are
//! processed strictly in arrival order; different users run in parallel.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::PathBuf;
use std::sync::{Arc, Condvar, Mutex};

use thiserror::Error;

use crate::claims::{self, ClaimFlow};
use crate::engine::{classify_emoji_sentiment, EngineError, Router};
use crate::messaging::{
    degrade_action_with, Capabilities, ChatAction, ChatMessage, Conversation, MessagingError, Payload,
};
use crate::nlu::{Nlu, NluError};
use crate::pack::{ContentPack, PackError, PackSet};
use crate::responder::{Reply, Responder, ResponderError, UserProfile};
use crate::store::{ContextStore, Direction, FileStore, MemoryStore, StoreError, TranscriptEntry, UserContext};
use crate::Language;

const LAST_RESORT_APOLOGY: &str = "Sorry, something went wrong on our side. Please try again in a moment.";

#[derive(Debug, Clone, PartialEq)]
pub struct ServiceConfig {
    pub port: u16,
    /// A pack file or a directory of packs; the shipped packs when unset.
    pub content_pack_path: Option<PathBuf>,
    /// Root of the file store; an in-memory store when unset.
    pub storage_path: Option<PathBuf>,
    pub default_language: Language,
    pub fallback_threshold: Option<f64>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            port: 8080,
            content_pack_path: None,
            storage_path: None,
            default_language: Language::De,
            fallback_threshold: None,
        }
    }
}

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error(transparent)]
    Pack(#[from] PackError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Nlu(#[from] NluError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Responder(#[from] ResponderError),
    #[error(transparent)]
    Messaging(#[from] MessagingError),
}

struct Runtime {
    pack: ContentPack,
    nlu: Nlu,
    router: Router,
    responder: Responder,
}

#[derive(Default)]
struct Queue {
    next: u64,
    serving: u64,
    abandoned: BTreeSet<u64>,
}

/// Per-user ticket lock: tickets are served in the order they were drawn.
#[derive(Default)]
struct FifoGate {
    queues: Mutex<HashMap<String, Queue>>,
    turn: Condvar,
}

impl FifoGate {
    fn draw(&self, user: &str) -> u64 {
        let mut queues = self.queues.lock().unwrap_or_else(|p| p.into_inner());
        let q = queues.entry(user.to_string()).or_default();
        let t = q.next;
        q.next += 1;
        t
    }

    fn wait(&self, user: &str, ticket: u64) {
        let mut queues = self.queues.lock().unwrap_or_else(|p| p.into_inner());
        while queues.get(user).is_some_and(|q| q.serving != ticket) {
            queues = self.turn.wait(queues).unwrap_or_else(|p| p.into_inner());
        }
    }

    fn release(&self, user: &str, ticket: u64) {
        let mut queues = self.queues.lock().unwrap_or_else(|p| p.into_inner());
        if let Some(q) = queues.get_mut(user) {
            if q.serving == ticket {
                q.serving += 1;
                while q.abandoned.remove(&q.serving) {
                    q.serving += 1;
                }
            } else {
                q.abandoned.insert(ticket);
            }
            if q.serving == q.next {
                queues.remove(user);
            }
        }
        self.turn.notify_all();
    }
}

/// A message that has its place in the user's queue but is not processed yet.
pub struct PendingMessage {
    service: Arc<ChatService>,
    message: ChatMessage,
    caps: Capabilities,
    ticket: u64,
    done: bool,
}

impl PendingMessage {
    /// Blocks until earlier messages of the same user are done, then runs
    /// the pipeline.
    pub fn process(mut self) -> Vec<ChatAction> {
        let user = self.message.user_id.clone();
        self.service.gate.wait(&user, self.ticket);
        let actions = self.service.run_pipeline(&self.message, self.caps);
        self.service.gate.release(&user, self.ticket);
        self.done = true;
        actions
    }
}

impl Drop for PendingMessage {
    fn drop(&mut self) {
        if !self.done {
            self.service.gate.release(&self.message.user_id, self.ticket);
        }
    }
}

pub struct ChatService {
    runtimes: BTreeMap<Language, Runtime>,
    default_language: Language,
    store: Arc<dyn ContextStore>,
    gate: FifoGate,
}

impl std::fmt::Debug for ChatService {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ChatService")
            .field("languages", &self.runtimes.keys().collect::<Vec<_>>())
            .field("default_language", &self.default_language)
            .finish()
    }
}

impl ChatService {
    pub fn new(packs: PackSet, store: Arc<dyn ContextStore>, default_language: Language) -> Result<Self, ServiceError> {
        let mut runtimes = BTreeMap::new();
        for pack in packs.packs() {
            runtimes.insert(
                pack.language,
                Runtime {
                    nlu: Nlu::from_pack(pack)?,
                    router: Router::from_pack(pack).map_err(|e| PackError::Invalid {
                        language: pack.language.to_string(),
                        violations: vec![e.to_string()],
                    })?,
                    responder: Responder::from_pack(pack),
                    pack: pack.clone(),
                },
            );
        }
        if !runtimes.contains_key(&default_language) {
            return Err(PackError::MissingLanguage(default_language).into());
        }
        Ok(ChatService {
            runtimes,
            default_language,
            store,
            gate: FifoGate::default(),
        })
    }

    pub fn from_config(config: &ServiceConfig) -> Result<Self, ServiceError> {
        let mut packs = match &config.content_pack_path {
            Some(path) => PackSet::load(path)?,
            None => PackSet::shipped(),
        };
        if let Some(t) = config.fallback_threshold {
            packs = packs.with_threshold(t)?;
        }
        let store: Arc<dyn ContextStore> = match &config.storage_path {
            Some(root) => Arc::new(FileStore::open(root)?),
            None => Arc::new(MemoryStore::new()),
        };
        ChatService::new(packs, store, config.default_language)
    }

    pub fn store(&self) -> &Arc<dyn ContextStore> {
        &self.store
    }

    pub fn default_language(&self) -> Language {
        self.default_language
    }

    pub fn languages(&self) -> impl Iterator<Item = Language> + '_ {
        self.runtimes.keys().copied()
    }

    fn runtime(&self, language: Language) -> &Runtime {
        self.runtimes
            .get(&language)
            .or_else(|| self.runtimes.get(&self.default_language))
            .expect("default language is loaded")
    }

    /// Takes a place in the user's queue without blocking.
    pub fn submit(self: &Arc<Self>, message: ChatMessage, caps: Capabilities) -> PendingMessage {
        let ticket = self.gate.draw(&message.user_id);
        PendingMessage {
            service: Arc::clone(self),
            message,
            caps,
            ticket,
            done: false,
        }
    }

    /// Processes one message in the user's FIFO order.
    pub fn process_message(&self, message: &ChatMessage, caps: Capabilities) -> Vec<ChatAction> {
        let ticket = self.gate.draw(&message.user_id);
        self.gate.wait(&message.user_id, ticket);
        let actions = self.run_pipeline(message, caps);
        self.gate.release(&message.user_id, ticket);
        actions
    }

    /// The stored context of a user, if any.
    pub fn context(&self, user_id: &str) -> Result<Option<UserContext>, ServiceError> {
        Ok(self.store.peek_context(user_id)?)
    }

    fn run_pipeline(&self, message: &ChatMessage, caps: Capabilities) -> Vec<ChatAction> {
        match self.try_process(message, caps) {
            Ok(actions) => actions,
            Err(e) => {
                tracing::error!(user = %message.user_id, message_id = %message.message_id, error = %e, "message failed");
                self.apology(&message.user_id)
            }
        }
    }

    /// The localized apology sent when a message cannot be processed.
    pub fn apology(&self, user_id: &str) -> Vec<ChatAction> {
        let language = self
            .store
            .peek_context(user_id)
            .ok()
            .flatten()
            .map_or(self.default_language, |c| c.profile.language);
        let rt = self.runtime(language);
        let text = rt
            .responder
            .render("apology", &BTreeMap::new(), &UserProfile::new(rt.pack.language), 0)
            .unwrap_or_else(|_| LAST_RESORT_APOLOGY.to_string());
        vec![ChatAction::SendText { text }]
    }

    fn try_process(&self, message: &ChatMessage, caps: Capabilities) -> Result<Vec<ChatAction>, ServiceError> {
        message.validate()?;
        let mut ctx = self.store.load_context(&message.user_id, self.default_language)?;
        let rt = self.runtime(ctx.profile.language);
        let now = message.received_at;

        let u = match &message.payload {
            Payload::Text { text } => rt.nlu.understand(text, now),
            Payload::Choice { choice_id } => rt.nlu.understand_choice(choice_id, now),
            Payload::Media { kind, uri } => rt.nlu.understand_media(*kind, uri, now),
        };
        if !u.emojis.is_empty() {
            ctx.profile.mood = classify_emoji_sentiment(&u.emojis, rt.router.lexicon());
        }

        let plan = {
            let UserContext {
                user_id,
                profile,
                dialog,
                frame,
                ..
            } = &mut ctx;
            let formality = profile.formality;
            let mut flow = ClaimFlow::new(&rt.pack, rt.nlu.extractor(), &rt.router, user_id, profile, frame);
            rt.router.plan(dialog, &u, formality, &mut flow)?
        };
        let turn = ctx.dialog.turn_counter;
        ctx.transcript.push(TranscriptEntry {
            turn,
            direction: Direction::Inbound,
            summary: message.summary(),
            intent: Some(u.intent.clone()),
            callback: Some(plan.fired.callback.clone()),
            at: now,
        });

        let mut replies = Vec::with_capacity(plan.replies.len() + 1);
        for reply in plan.replies {
            match reply {
                Reply::StoreClaim(mut record) => match self.store.persist_claim(&record) {
                    Ok(id) | Err(StoreError::DuplicateClaim { existing_id: id }) => {
                        record.claim_id = id.clone();
                        replies.push(Reply::StoreClaim(record));
                        replies.push(claims::complete_claim(&mut ctx, &id));
                    }
                    Err(e) => {
                        tracing::warn!(user = %ctx.user_id, error = %e, "claim not stored");
                        replies.push(Reply::text("claim_store_failed"));
                    }
                },
                other => replies.push(other),
            }
        }

        let mut actions = vec![ChatAction::TypingOn];
        for reply in &replies {
            let action = rt.responder.realize(reply, &ctx.profile, turn)?;
            if !(action == ChatAction::TypingOn && actions.last() == Some(&ChatAction::TypingOn)) {
                actions.push(action);
            }
        }
        for action in actions.iter().filter(|a| **a != ChatAction::TypingOn) {
            ctx.transcript.push(TranscriptEntry {
                turn,
                direction: Direction::Outbound,
                summary: action.summary(),
                intent: None,
                callback: None,
                at: now,
            });
        }
        self.store.save_context(&ctx)?;

        let instruction = rt
            .responder
            .render("reply_with_number", &BTreeMap::new(), &ctx.profile, turn)?;
        Ok(actions
            .into_iter()
            .flat_map(|a| degrade_action_with(a, caps, &instruction))
            .collect())
    }

    fn instruction_for(&self, user_id: &str) -> String {
        let profile = self
            .store
            .peek_context(user_id)
            .ok()
            .flatten()
            .map(|c| c.profile)
            .unwrap_or_else(|| UserProfile::new(self.default_language));
        self.runtime(profile.language)
            .responder
            .render("reply_with_number", &BTreeMap::new(), &profile, 0)
            .unwrap_or_else(|_| crate::messaging::DEFAULT_CHOICE_INSTRUCTION.to_string())
    }
}

impl Conversation for ChatService {
    fn handle(&self, message: ChatMessage, caps: Capabilities) -> Vec<ChatAction> {
        self.process_message(&message, caps)
    }

    fn choice_instruction(&self, user_id: &str) -> String {
        self.instruction_for(user_id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::{TimeZone, Utc};
    use std::thread;
    use std::time::Duration;

    fn service(lang: Language) -> Arc<ChatService> {
        Arc::new(ChatService::new(PackSet::shipped(), Arc::new(MemoryStore::new()), lang).unwrap())
    }

    fn text(user: &str, id: usize, t: &str) -> ChatMessage {
        ChatMessage::new(
            "test",
            user,
            format!("{user}-{id}"),
            Utc.with_ymd_and_hms(2024, 5, 10, 9, 0, 0).unwrap(),
            Payload::Text { text: t.into() },
        )
        .unwrap()
    }

    #[test]
    fn typing_first_then_text() {
        let s = service(Language::De);
        let actions = s.process_message(&text("u", 0, "Hallo"), Capabilities::WEB);
        assert_eq!(actions[0], ChatAction::TypingOn);
        assert_eq!(actions[1].text(), Some("Guten Tag! Wie kann ich Ihnen helfen?"));
        let console = s.process_message(&text("u", 1, "Hallo"), Capabilities::CONSOLE);
        assert!(console.iter().all(|a| *a != ChatAction::TypingOn));
    }

    #[test]
    fn turn_counter_increments_per_message() {
        let s = service(Language::En);
        for i in 0..4 {
            s.process_message(&text("u", i, "hello"), Capabilities::WEB);
        }
        assert_eq!(s.context("u").unwrap().unwrap().dialog.turn_counter, 4);
    }

    #[test]
    fn storage_outage_yields_apology_and_no_state_change() {
        let store = Arc::new(MemoryStore::new());
        let s = ChatService::new(PackSet::shipped(), store.clone(), Language::En).unwrap();
        s.process_message(&text("u", 0, "hello"), Capabilities::WEB);
        store.set_fail_saves(true);
        let actions = s.process_message(&text("u", 1, "I want to report a claim"), Capabilities::WEB);
        assert_eq!(actions.len(), 1);
        assert!(actions[0].text().unwrap().to_lowercase().contains("sorry"));
        store.set_fail_saves(false);
        let ctx = s.context("u").unwrap().unwrap();
        assert_eq!(ctx.dialog.turn_counter, 1);
        assert!(ctx.frame.is_none());
    }

    #[test]
    fn submitted_messages_run_in_arrival_order() {
        let s = service(Language::En);
        let first = s.submit(text("u", 0, "I want to report a claim"), Capabilities::WEB);
        let second = s.submit(text("u", 1, "my display is cracked"), Capabilities::WEB);
        // the second message is started first but must wait
        let late = thread::spawn(move || second.process());
        thread::sleep(Duration::from_millis(50));
        let early = thread::spawn(move || first.process());
        early.join().unwrap();
        late.join().unwrap();
        let ctx = s.context("u").unwrap().unwrap();
        let inbound: Vec<&str> = ctx
            .transcript
            .iter()
            .filter(|e| e.direction == Direction::Inbound)
            .map(|e| e.summary.as_str())
            .collect();
        assert_eq!(inbound, ["I want to report a claim", "my display is cracked"]);
    }

    #[test]
    fn abandoned_ticket_does_not_block() {
        let s = service(Language::En);
        let dropped = s.submit(text("u", 0, "hello"), Capabilities::WEB);
        let next = s.submit(text("u", 1, "hello"), Capabilities::WEB);
        drop(dropped);
        assert!(!next.process().is_empty());
    }
}
