//! Channel-neutral message records and channel adapters.
//!
//! Every channel converts its own payloads into a [`ChatMessage`] and renders
//! the engine's [`ChatAction`]s back. No conversational state is kept inside
//! adapters; the store owns all of it.

use std::collections::{HashMap, HashSet};
use std::io::{self, BufRead, Write};
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::claims::ClaimRecord;

/// Instruction appended to numbered choice lists on channels without buttons.
pub const DEFAULT_CHOICE_INSTRUCTION: &str = "Reply with a number.";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MessagingError {
    #[error("malformed payload: {0}")]
    MalformedPayload(String),
    #[error("message text is empty")]
    EmptyMessage,
    #[error("invalid action: {0}")]
    InvalidAction(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MediaKind {
    Image,
    Audio,
    Other,
}

impl MediaKind {
    /// Guesses the media kind from the extension of a URI.
    pub fn from_uri(uri: &str) -> MediaKind {
        let path = uri.split(['?', '#']).next().unwrap_or(uri);
        let ext = path
            .rsplit_once('.')
            .map(|(_, ext)| ext.to_ascii_lowercase())
            .unwrap_or_default();
        match ext.as_str() {
            "jpg" | "jpeg" | "png" | "gif" | "webp" | "heic" | "bmp" => MediaKind::Image,
            "mp3" | "ogg" | "oga" | "wav" | "m4a" | "aac" | "opus" => MediaKind::Audio,
            _ => MediaKind::Other,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Payload {
    Text { text: String },
    Media { kind: MediaKind, uri: String },
    Choice { choice_id: String },
}

/// One inbound user message in the unified format.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub channel_id: String,
    pub user_id: String,
    pub message_id: String,
    pub received_at: DateTime<Utc>,
    pub payload: Payload,
}

impl ChatMessage {
    /// Builds a message, enforcing the payload invariants.
    pub fn new(
        channel_id: impl Into<String>,
        user_id: impl Into<String>,
        message_id: impl Into<String>,
        received_at: DateTime<Utc>,
        payload: Payload,
    ) -> Result<Self, MessagingError> {
        let msg = ChatMessage {
            channel_id: channel_id.into(),
            user_id: user_id.into(),
            message_id: message_id.into(),
            received_at,
            payload,
        };
        msg.validate()?;
        Ok(msg)
    }

    pub fn validate(&self) -> Result<(), MessagingError> {
        if self.user_id.trim().is_empty() {
            return Err(MessagingError::MalformedPayload("user_id is empty".into()));
        }
        if self.channel_id.trim().is_empty() {
            return Err(MessagingError::MalformedPayload("channel_id is empty".into()));
        }
        match &self.payload {
            Payload::Text { text } if text.trim().is_empty() => Err(MessagingError::EmptyMessage),
            Payload::Media { uri, .. } if uri.trim().is_empty() => {
                Err(MessagingError::MalformedPayload("media_uri is empty".into()))
            }
            Payload::Choice { choice_id } if choice_id.trim().is_empty() => {
                Err(MessagingError::MalformedPayload("choice_id is empty".into()))
            }
            _ => Ok(()),
        }
    }

    /// Short human-readable rendering used in transcripts.
    pub fn summary(&self) -> String {
        match &self.payload {
            Payload::Text { text } => text.clone(),
            Payload::Media { kind, uri } => format!("[media:{kind:?}] {uri}").to_lowercase(),
            Payload::Choice { choice_id } => format!("[choice] {choice_id}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Choice {
    pub choice_id: String,
    pub label: String,
}

impl Choice {
    pub fn new(choice_id: impl Into<String>, label: impl Into<String>) -> Self {
        Choice {
            choice_id: choice_id.into(),
            label: label.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    SendText,
    SendChoices,
    TypingOn,
    RequestMedia,
    StoreClaim,
}

impl ActionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ActionKind::SendText => "send_text",
            ActionKind::SendChoices => "send_choices",
            ActionKind::TypingOn => "typing_on",
            ActionKind::RequestMedia => "request_media",
            ActionKind::StoreClaim => "store_claim",
        }
    }
}

/// One outbound action for a channel to perform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ChatAction {
    SendText {
        text: String,
    },
    SendChoices {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        text: Option<String>,
        choices: Vec<Choice>,
    },
    TypingOn,
    RequestMedia {
        text: String,
    },
    StoreClaim {
        claim: ClaimRecord,
    },
}

impl ChatAction {
    pub fn send_text(text: impl Into<String>) -> Result<Self, MessagingError> {
        let action = ChatAction::SendText { text: text.into() };
        action.validate()?;
        Ok(action)
    }

    pub fn send_choices(text: Option<String>, choices: Vec<Choice>) -> Result<Self, MessagingError> {
        let action = ChatAction::SendChoices { text, choices };
        action.validate()?;
        Ok(action)
    }

    pub fn kind(&self) -> ActionKind {
        match self {
            ChatAction::SendText { .. } => ActionKind::SendText,
            ChatAction::SendChoices { .. } => ActionKind::SendChoices,
            ChatAction::TypingOn => ActionKind::TypingOn,
            ChatAction::RequestMedia { .. } => ActionKind::RequestMedia,
            ChatAction::StoreClaim { .. } => ActionKind::StoreClaim,
        }
    }

    /// The user-visible text of the action, if any.
    pub fn text(&self) -> Option<&str> {
        match self {
            ChatAction::SendText { text } | ChatAction::RequestMedia { text } => Some(text),
            ChatAction::SendChoices { text, .. } => text.as_deref(),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), MessagingError> {
        match self {
            ChatAction::SendText { text } | ChatAction::RequestMedia { text } => {
                if text.trim().is_empty() {
                    return Err(MessagingError::InvalidAction(format!(
                        "{} requires non-empty text",
                        self.kind().as_str()
                    )));
                }
            }
            ChatAction::SendChoices { choices, .. } => {
                if choices.len() < 2 {
                    return Err(MessagingError::InvalidAction(
                        "send_choices requires at least two choices".into(),
                    ));
                }
                let mut seen = HashSet::new();
                for choice in choices {
                    if !seen.insert(choice.choice_id.as_str()) {
                        return Err(MessagingError::InvalidAction(format!(
                            "duplicate choice_id '{}'",
                            choice.choice_id
                        )));
                    }
                }
            }
            ChatAction::TypingOn | ChatAction::StoreClaim { .. } => {}
        }
        Ok(())
    }

    /// Transcript rendering of the action.
    pub fn summary(&self) -> String {
        match self {
            ChatAction::SendText { text } => text.clone(),
            ChatAction::SendChoices { text, choices } => {
                let labels: Vec<&str> = choices.iter().map(|c| c.label.as_str()).collect();
                format!("{} [{}]", text.as_deref().unwrap_or(""), labels.join(" | "))
            }
            ChatAction::TypingOn => "[typing]".into(),
            ChatAction::RequestMedia { text } => format!("[request_media] {text}"),
            ChatAction::StoreClaim { claim } => format!("[store_claim] {}", claim.claim_id),
        }
    }
}

/// What a channel can render natively.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capabilities {
    pub supports_choices: bool,
    pub supports_typing: bool,
}

impl Capabilities {
    pub const CONSOLE: Capabilities = Capabilities {
        supports_choices: false,
        supports_typing: false,
    };
    pub const WEB: Capabilities = Capabilities {
        supports_choices: true,
        supports_typing: true,
    };
    pub const LOOPBACK: Capabilities = Capabilities {
        supports_choices: true,
        supports_typing: true,
    };

    /// True if the channel may receive this action unchanged.
    pub fn permits(&self, action: &ChatAction) -> bool {
        match action {
            ChatAction::SendChoices { .. } => self.supports_choices,
            ChatAction::TypingOn => self.supports_typing,
            _ => true,
        }
    }
}

/// Maps an action onto what the channel supports, using the default English
/// instruction for numbered choices.
pub fn degrade_action(action: ChatAction, caps: Capabilities) -> Vec<ChatAction> {
    degrade_action_with(action, caps, DEFAULT_CHOICE_INSTRUCTION)
}

/// Like [`degrade_action`] with a localized instruction line.
pub fn degrade_action_with(action: ChatAction, caps: Capabilities, instruction: &str) -> Vec<ChatAction> {
    match action {
        ChatAction::SendChoices { text, choices } if !caps.supports_choices => {
            let mut lines = Vec::with_capacity(choices.len() + 2);
            if let Some(text) = text.filter(|t| !t.trim().is_empty()) {
                lines.push(text);
            }
            for (idx, choice) in choices.iter().enumerate() {
                lines.push(format!("{}) {}", idx + 1, choice.label));
            }
            lines.push(instruction.to_string());
            vec![ChatAction::SendText { text: lines.join("\n") }]
        }
        ChatAction::TypingOn if !caps.supports_typing => Vec::new(),
        other => vec![other],
    }
}

/// Inbound web wire record. Exactly one of `text`, `choice_id` and `media_uri`
/// must be present.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WebInbound {
    pub user_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channel: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub choice_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub media_uri: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireAction {
    pub kind: ActionKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub choices: Option<Vec<Choice>>,
}

/// Outbound web wire record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WebOutbound {
    pub actions: Vec<WireAction>,
}

impl From<&ChatAction> for WireAction {
    fn from(action: &ChatAction) -> Self {
        match action {
            ChatAction::SendText { text } | ChatAction::RequestMedia { text } => WireAction {
                kind: action.kind(),
                text: Some(text.clone()),
                choices: None,
            },
            ChatAction::SendChoices { text, choices } => WireAction {
                kind: ActionKind::SendChoices,
                text: text.clone(),
                choices: Some(choices.clone()),
            },
            ChatAction::TypingOn => WireAction {
                kind: ActionKind::TypingOn,
                text: None,
                choices: None,
            },
            ChatAction::StoreClaim { claim } => WireAction {
                kind: ActionKind::StoreClaim,
                text: Some(claim.claim_id.clone()),
                choices: None,
            },
        }
    }
}

impl WebOutbound {
    pub fn from_actions(actions: &[ChatAction]) -> Self {
        WebOutbound {
            actions: actions.iter().map(WireAction::from).collect(),
        }
    }
}

/// A raw payload as received by one of the shipped channels.
#[derive(Debug, Clone, Copy)]
pub enum RawPayload<'a> {
    /// A JSON document following the web wire schema.
    WebJson(&'a str),
    /// One line typed on the console.
    ConsoleLine { user_id: &'a str, line: &'a str },
}

/// Per-user monotonically increasing message ids for channels that do not
/// supply their own.
#[derive(Debug, Default)]
pub struct MessageIds {
    counters: Mutex<HashMap<String, u64>>,
}

impl MessageIds {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn next(&self, user_id: &str) -> String {
        let mut counters = self.counters.lock().unwrap_or_else(|e| e.into_inner());
        let counter = counters.entry(user_id.to_string()).or_insert(0);
        *counter += 1;
        format!("{user_id}-{:06}", *counter)
    }
}

/// Converts a channel payload into a [`ChatMessage`].
pub fn normalize_incoming(
    raw: RawPayload<'_>,
    channel_id: &str,
    received_at: DateTime<Utc>,
    ids: &MessageIds,
) -> Result<ChatMessage, MessagingError> {
    match raw {
        RawPayload::WebJson(json) => {
            let wire: WebInbound =
                serde_json::from_str(json).map_err(|e| MessagingError::MalformedPayload(e.to_string()))?;
            normalize_web(wire, channel_id, received_at, ids)
        }
        RawPayload::ConsoleLine { user_id, line } => {
            let message_id = ids.next(user_id);
            ChatMessage::new(
                channel_id,
                user_id,
                message_id,
                received_at,
                Payload::Text {
                    text: line.trim_end_matches(['\r', '\n']).to_string(),
                },
            )
        }
    }
}

/// Converts an already-parsed web wire record.
pub fn normalize_web(
    wire: WebInbound,
    channel_id: &str,
    received_at: DateTime<Utc>,
    ids: &MessageIds,
) -> Result<ChatMessage, MessagingError> {
    if let Some(channel) = &wire.channel {
        if channel != "web" {
            return Err(MessagingError::MalformedPayload(format!(
                "channel must be \"web\", got \"{channel}\""
            )));
        }
    }
    let payload = match (wire.text, wire.choice_id, wire.media_uri) {
        (Some(text), None, None) => Payload::Text { text },
        (None, Some(choice_id), None) => Payload::Choice { choice_id },
        (None, None, Some(uri)) => Payload::Media {
            kind: MediaKind::from_uri(&uri),
            uri,
        },
        _ => {
            return Err(MessagingError::MalformedPayload(
                "exactly one of text, choice_id, media_uri is required".into(),
            ))
        }
    };
    let message_id = ids.next(&wire.user_id);
    ChatMessage::new(channel_id, wire.user_id, message_id, received_at, payload)
}

/// Encodes a message back into the web wire schema.
pub fn to_web_wire(message: &ChatMessage) -> WebInbound {
    let mut wire = WebInbound {
        user_id: message.user_id.clone(),
        channel: Some("web".into()),
        text: None,
        choice_id: None,
        media_uri: None,
    };
    match &message.payload {
        Payload::Text { text } => wire.text = Some(text.clone()),
        Payload::Choice { choice_id } => wire.choice_id = Some(choice_id.clone()),
        Payload::Media { uri, .. } => wire.media_uri = Some(uri.clone()),
    }
    wire
}

/// Entry point of the dialog stack as seen by an adapter.
pub trait Conversation: Sync {
    /// Processes one message and returns the actions, already degraded for
    /// `caps`, in dispatch order.
    fn handle(&self, message: ChatMessage, caps: Capabilities) -> Vec<ChatAction>;

    /// Localized instruction for numbered choice lists.
    fn choice_instruction(&self, _user_id: &str) -> String {
        DEFAULT_CHOICE_INSTRUCTION.to_string()
    }
}

/// Outbound half of a channel.
pub trait ChannelAdapter {
    fn capabilities(&self) -> Capabilities;

    /// Performs the actions in list order.
    fn dispatch(&mut self, actions: &[ChatAction]) -> io::Result<()>;
}

/// Line-oriented REPL channel. Has neither buttons nor a typing indicator.
pub struct ConsoleAdapter<W: Write> {
    user_id: String,
    out: W,
    ids: MessageIds,
    clock: Box<dyn Fn() -> DateTime<Utc> + Send>,
}

impl<W: Write> ConsoleAdapter<W> {
    pub fn new(user_id: impl Into<String>, out: W) -> Self {
        ConsoleAdapter {
            user_id: user_id.into(),
            out,
            ids: MessageIds::new(),
            clock: Box::new(Utc::now),
        }
    }

    pub fn with_clock(mut self, clock: impl Fn() -> DateTime<Utc> + Send + 'static) -> Self {
        self.clock = Box::new(clock);
        self
    }

    pub fn into_inner(self) -> W {
        self.out
    }

    /// Reads lines until end of input, handing each to the conversation.
    /// Blank lines are ignored.
    pub fn run<R: BufRead>(&mut self, conversation: &dyn Conversation, input: R) -> io::Result<()> {
        for line in input.lines() {
            let line = line?;
            let message = match normalize_incoming(
                RawPayload::ConsoleLine {
                    user_id: &self.user_id,
                    line: &line,
                },
                "console",
                (self.clock)(),
                &self.ids,
            ) {
                Ok(message) => message,
                Err(MessagingError::EmptyMessage) => continue,
                Err(e) => {
                    writeln!(self.out, "! {e}")?;
                    continue;
                }
            };
            let actions = conversation.handle(message, self.capabilities());
            self.dispatch(&actions)?;
        }
        self.out.flush()
    }
}

impl<W: Write> ChannelAdapter for ConsoleAdapter<W> {
    fn capabilities(&self) -> Capabilities {
        Capabilities::CONSOLE
    }

    fn dispatch(&mut self, actions: &[ChatAction]) -> io::Result<()> {
        for action in actions {
            match action {
                ChatAction::SendText { text } | ChatAction::RequestMedia { text } => writeln!(self.out, "{text}")?,
                ChatAction::StoreClaim { claim } => writeln!(self.out, "(claim {} stored)", claim.claim_id)?,
                // never produced for this channel after degradation
                ChatAction::TypingOn => {}
                ChatAction::SendChoices { .. } => {
                    for degraded in degrade_action(action.clone(), self.capabilities()) {
                        if let Some(text) = degraded.text() {
                            writeln!(self.out, "{text}")?;
                        }
                    }
                }
            }
        }
        self.out.flush()
    }
}

/// Runs the console REPL on the given streams for a fixed user id.
pub fn console_adapter_loop<R: BufRead, W: Write>(
    conversation: &dyn Conversation,
    user_id: &str,
    input: R,
    output: W,
) -> io::Result<W> {
    let mut adapter = ConsoleAdapter::new(user_id, output);
    adapter.run(conversation, input)?;
    Ok(adapter.into_inner())
}

/// In-process channel used by the harness; records everything it dispatches.
pub struct LoopbackAdapter<'a> {
    conversation: &'a dyn Conversation,
    user_id: String,
    caps: Capabilities,
    ids: MessageIds,
    clock: Box<dyn FnMut() -> DateTime<Utc> + 'a>,
    log: Vec<ChatAction>,
}

impl<'a> LoopbackAdapter<'a> {
    pub fn new(conversation: &'a dyn Conversation, user_id: impl Into<String>, caps: Capabilities) -> Self {
        LoopbackAdapter {
            conversation,
            user_id: user_id.into(),
            caps,
            ids: MessageIds::new(),
            clock: Box::new(Utc::now),
            log: Vec::new(),
        }
    }

    pub fn with_clock(mut self, clock: impl FnMut() -> DateTime<Utc> + 'a) -> Self {
        self.clock = Box::new(clock);
        self
    }

    pub fn user_id(&self) -> &str {
        &self.user_id
    }

    pub fn say(&mut self, text: &str) -> Result<Vec<ChatAction>, MessagingError> {
        self.send(Payload::Text { text: text.to_string() })
    }

    pub fn choose(&mut self, choice_id: &str) -> Result<Vec<ChatAction>, MessagingError> {
        self.send(Payload::Choice {
            choice_id: choice_id.to_string(),
        })
    }

    pub fn send_media(&mut self, uri: &str) -> Result<Vec<ChatAction>, MessagingError> {
        self.send(Payload::Media {
            kind: MediaKind::from_uri(uri),
            uri: uri.to_string(),
        })
    }

    pub fn send(&mut self, payload: Payload) -> Result<Vec<ChatAction>, MessagingError> {
        let message_id = self.ids.next(&self.user_id);
        let received_at = (self.clock)();
        let message = ChatMessage::new("loopback", self.user_id.clone(), message_id, received_at, payload)?;
        let actions = self.conversation.handle(message, self.caps);
        // an in-memory sink cannot fail
        let _ = self.dispatch(&actions);
        Ok(actions)
    }

    pub fn log(&self) -> &[ChatAction] {
        &self.log
    }
}

impl ChannelAdapter for LoopbackAdapter<'_> {
    fn capabilities(&self) -> Capabilities {
        self.caps
    }

    fn dispatch(&mut self, actions: &[ChatAction]) -> io::Result<()> {
        self.log.extend_from_slice(actions);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;
    use proptest::prelude::*;

    fn t0() -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2024, 5, 10, 9, 0, 0).unwrap()
    }

    fn web(json: &str) -> Result<ChatMessage, MessagingError> {
        normalize_incoming(RawPayload::WebJson(json), "web", t0(), &MessageIds::new())
    }

    #[test]
    fn web_text_maps_to_text_payload() {
        let msg = web(r#"{"user_id":"u1","text":"hello"}"#).unwrap();
        assert_eq!(msg.payload, Payload::Text { text: "hello".into() });
        assert_eq!(msg.user_id, "u1");
        assert_eq!(msg.channel_id, "web");
    }

    #[test]
    fn web_choice_maps_to_choice_payload() {
        let msg = web(r#"{"user_id":"u1","choice_id":"model_3"}"#).unwrap();
        assert_eq!(
            msg.payload,
            Payload::Choice {
                choice_id: "model_3".into()
            }
        );
    }

    #[test]
    fn whitespace_text_is_empty_message() {
        assert_eq!(
            web(r#"{"user_id":"u1","text":"   "}"#),
            Err(MessagingError::EmptyMessage)
        );
    }

    #[test]
    fn schema_violations_are_malformed() {
        for bad in [
            r#"{"user_id":"u1"}"#,
            r#"{"user_id":"u1","text":"a","choice_id":"b"}"#,
            r#"{"user_id":"","text":"a"}"#,
            r#"{"user_id":"u1","text":"a","colour":"red"}"#,
            r#"{"user_id":"u1","channel":"telegram","text":"a"}"#,
            r#"not json"#,
        ] {
            assert!(
                matches!(web(bad), Err(MessagingError::MalformedPayload(_))),
                "{bad} should be malformed"
            );
        }
    }

    #[test]
    fn media_kind_is_guessed_from_extension() {
        let msg = web(r#"{"user_id":"u1","media_uri":"https://x/y/photo.JPG?size=2"}"#).unwrap();
        assert_eq!(
            msg.payload,
            Payload::Media {
                kind: MediaKind::Image,
                uri: "https://x/y/photo.JPG?size=2".into()
            }
        );
        assert_eq!(MediaKind::from_uri("voice.ogg"), MediaKind::Audio);
        assert_eq!(MediaKind::from_uri("doc"), MediaKind::Other);
    }

    #[test]
    fn generated_ids_increase_per_user() {
        let ids = MessageIds::new();
        assert_eq!(ids.next("a"), "a-000001");
        assert_eq!(ids.next("a"), "a-000002");
        assert_eq!(ids.next("b"), "b-000001");
    }

    fn choices(labels: &[&str]) -> Vec<Choice> {
        labels
            .iter()
            .enumerate()
            .map(|(i, l)| Choice::new(format!("c{i}"), *l))
            .collect()
    }

    #[test]
    fn choices_pass_through_when_supported() {
        let action = ChatAction::send_choices(None, choices(&["a", "b", "c"])).unwrap();
        assert_eq!(degrade_action(action.clone(), Capabilities::WEB), vec![action]);
    }

    #[test]
    fn choices_degrade_to_numbered_text() {
        let action = ChatAction::send_choices(None, choices(&["iPhone 7", "Galaxy S8"])).unwrap();
        assert_eq!(
            degrade_action(action, Capabilities::CONSOLE),
            vec![ChatAction::SendText {
                text: "1) iPhone 7\n2) Galaxy S8\nReply with a number.".into()
            }]
        );
    }

    #[test]
    fn degraded_choices_keep_their_prompt() {
        let action = ChatAction::send_choices(Some("Which one?".into()), choices(&["x", "y"])).unwrap();
        let out = degrade_action_with(action, Capabilities::CONSOLE, "Antworten Sie mit einer Zahl.");
        assert_eq!(
            out[0].text(),
            Some("Which one?\n1) x\n2) y\nAntworten Sie mit einer Zahl.")
        );
    }

    #[test]
    fn typing_vanishes_without_support() {
        assert!(degrade_action(ChatAction::TypingOn, Capabilities::CONSOLE).is_empty());
        assert_eq!(
            degrade_action(ChatAction::TypingOn, Capabilities::WEB),
            vec![ChatAction::TypingOn]
        );
    }

    #[test]
    fn action_invariants() {
        assert!(ChatAction::send_text("  ").is_err());
        assert!(ChatAction::send_choices(None, choices(&["only"])).is_err());
        let dup = vec![Choice::new("x", "a"), Choice::new("x", "b")];
        assert!(ChatAction::send_choices(None, dup).is_err());
    }

    #[test]
    fn wire_encoding_of_actions() {
        let actions = vec![
            ChatAction::TypingOn,
            ChatAction::send_text("hi").unwrap(),
            ChatAction::send_choices(Some("pick".into()), choices(&["a", "b"])).unwrap(),
        ];
        let json = serde_json::to_value(WebOutbound::from_actions(&actions)).unwrap();
        assert_eq!(
            json,
            serde_json::json!({"actions": [
                {"kind": "typing_on"},
                {"kind": "send_text", "text": "hi"},
                {"kind": "send_choices", "text": "pick",
                 "choices": [{"choice_id": "c0", "label": "a"}, {"choice_id": "c1", "label": "b"}]}
            ]})
        );
    }

    fn arb_payload() -> impl Strategy<Value = Payload> {
        prop_oneof![
            "[^\\s]\\PC{0,40}".prop_map(|text| Payload::Text { text }),
            "[a-z0-9_]{1,12}".prop_map(|choice_id| Payload::Choice { choice_id }),
            "https://[a-z]{1,8}/[a-z]{1,8}\\.(jpg|ogg|pdf)".prop_map(|uri| Payload::Media {
                kind: MediaKind::from_uri(&uri),
                uri
            }),
        ]
    }

    proptest! {
        #[test]
        fn web_wire_round_trip(user in "[a-zA-Z0-9_-]{1,16}", payload in arb_payload()) {
            let ids = MessageIds::new();
            let original = ChatMessage::new("web", user, "m-1", t0(), payload).unwrap();
            let json = serde_json::to_string(&to_web_wire(&original)).unwrap();
            let again = normalize_incoming(RawPayload::WebJson(&json), "web", t0(), &ids).unwrap();
            prop_assert_eq!(ChatMessage { message_id: original.message_id.clone(), ..again }, original);
        }

        #[test]
        fn degraded_actions_respect_capabilities(
            n in 2usize..6, typing in any::<bool>(), buttons in any::<bool>()
        ) {
            let caps = Capabilities { supports_choices: buttons, supports_typing: typing };
            let labels: Vec<String> = (0..n).map(|i| format!("opt{i}")).collect();
            let refs: Vec<&str> = labels.iter().map(String::as_str).collect();
            for action in [
                ChatAction::TypingOn,
                ChatAction::send_text("x").unwrap(),
                ChatAction::send_choices(None, choices(&refs)).unwrap(),
            ] {
                for out in degrade_action(action, caps) {
                    prop_assert!(caps.permits(&out));
                    prop_assert!(out.validate().is_ok());
                }
            }
        }
    }
}
