#![allow(dead_code)]

use std::sync::Arc;

use chrono::{DateTime, Duration, Utc};
use claimflow::harness::reference_time;
use claimflow::messaging::{Capabilities, ChatAction, ChatMessage, Payload};
use claimflow::pack::PackSet;
use claimflow::store::{ContextStore, Direction, MemoryStore, UserContext};
use claimflow::{ChatService, Language};

/// Drives one user through a service on a 30 s simulated clock.
pub struct Driver {
    pub service: ChatService,
    pub user: String,
    pub caps: Capabilities,
    pub step: i64,
}

impl Driver {
    pub fn new(language: Language) -> Self {
        Self::with_packs(PackSet::shipped(), language)
    }

    pub fn with_packs(packs: PackSet, language: Language) -> Self {
        let service = ChatService::new(packs, Arc::new(MemoryStore::new()), language).unwrap();
        Self::with_service(service, "tester")
    }

    pub fn with_store(store: Arc<dyn ContextStore>, language: Language) -> Self {
        let service = ChatService::new(PackSet::shipped(), store, language).unwrap();
        Self::with_service(service, "tester")
    }

    pub fn with_service(service: ChatService, user: &str) -> Self {
        Driver {
            service,
            user: user.to_string(),
            caps: Capabilities::LOOPBACK,
            step: 0,
        }
    }

    pub fn now(&self) -> DateTime<Utc> {
        reference_time() + Duration::seconds(self.step * 30)
    }

    pub fn send(&mut self, payload: Payload) -> Vec<ChatAction> {
        let msg = ChatMessage::new("test", &self.user, format!("m{}", self.step), self.now(), payload).unwrap();
        self.step += 1;
        self.service
            .process_message(&msg, self.caps)
            .into_iter()
            .filter(|a| !matches!(a, ChatAction::TypingOn))
            .collect()
    }

    pub fn say(&mut self, text: &str) -> Vec<ChatAction> {
        self.send(Payload::Text { text: text.into() })
    }

    pub fn choose(&mut self, id: &str) -> Vec<ChatAction> {
        self.send(Payload::Choice { choice_id: id.into() })
    }

    pub fn ctx(&self) -> UserContext {
        self.service.context(&self.user).unwrap().expect("context exists")
    }

    pub fn last_callback(&self) -> String {
        self.ctx()
            .transcript
            .iter()
            .rev()
            .find(|e| e.direction == Direction::Inbound)
            .and_then(|e| e.callback.clone())
            .unwrap_or_default()
    }

    pub fn slot(&self, name: &str) -> Option<String> {
        self.ctx().frame?.slots.get(name).map(|v| v.canonical())
    }

    pub fn current_question(&self) -> Option<String> {
        self.ctx().frame?.current
    }

    pub fn states(&self) -> Vec<String> {
        self.ctx().dialog.active_states.names()
    }
}

pub fn texts(actions: &[ChatAction]) -> Vec<String> {
    actions.iter().filter_map(|a| a.text().map(str::to_string)).collect()
}

pub fn joined(actions: &[ChatAction]) -> String {
    texts(actions).join("\n")
}
