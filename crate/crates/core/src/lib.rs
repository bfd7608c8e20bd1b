//! Rule-based conversational agent for smartphone damage claims.
//!
//! The crate is organised along the processing pipeline of a single inbound
//! message:
//!
//! - [`messaging`]: the channel-neutral message format and adapters
//! - [`nlu`]: rule-based intent classification and entity extraction
//! - [`engine`]: the layered-state dialog controller
//! - [`responder`]: template realization with formality and mood
//! - [`claims`]: the damage-claim questionnaire callbacks
//! - [`store`]: durable per-user context and the claim log
//! - [`service`]: wires the stages together behind a per-user FIFO gate
//! - [`harness`]: scripted conversations and suite reports
//!
//! Conversational content (intents, entities, states, rules, questions and
//! templates) lives in content packs, see [`pack`].

pub mod claims;
pub mod engine;
pub mod harness;
pub mod messaging;
pub mod nlu;
pub mod pack;
pub mod responder;
pub mod service;
pub mod store;

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Languages a content pack can be written in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Language {
    De,
    En,
}

impl Language {
    pub fn code(self) -> &'static str {
        match self {
            Language::De => "de",
            Language::En => "en",
        }
    }
}

impl fmt::Display for Language {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for Language {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "de" => Ok(Language::De),
            "en" => Ok(Language::En),
            other => Err(format!("unsupported language '{other}' (expected de or en)")),
        }
    }
}

pub use messaging::{Capabilities, ChatAction, ChatMessage};
pub use nlu::MessageUnderstanding;
pub use service::{ChatService, ServiceConfig};
pub use store::UserContext;
