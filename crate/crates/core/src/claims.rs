//! The smartphone damage-claim questionnaire.
//!
//! [`ClaimFlow`] implements the engine callbacks named in the content pack's
//! rules. It fills a [`ClaimFrame`] one question at a time: typed answers are
//! echoed back for confirmation, button presses commit directly, optional
//! questions can be skipped, and once every question is settled the flow asks
//! the service to store a [`ClaimRecord`].

use std::collections::{BTreeMap, BTreeSet};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::engine::{ActiveStates, Callbacks, EngineError, Invocation, Outcome, Router, StatePush};
use crate::messaging::Choice;
use crate::nlu::{
    extract_datetime, tokenize, validate_imei, EntityExtractor, EntityType, EntityValue, ImeiCheck, ImeiReason,
    MessageUnderstanding, ModelLookup, CHOICE_PARAM,
};
use crate::pack::{ContentPack, QuestionSpec};
use crate::responder::{detect_formality, Polarity, Reply, UserProfile};
use crate::store::UserContext;
use crate::Language;

pub const QUESTIONNAIRE: &str = "QUESTIONNAIRE";
pub const USER_CONFIRMING_ANSWER: &str = "USER_CONFIRMING_ANSWER";
pub const CHOOSING_OPTION: &str = "CHOOSING_OPTION";
pub const AWAITING_DETAILS: &str = "AWAITING_DETAILS";
pub const CONFIRMING_CANCEL: &str = "CONFIRMING_CANCEL";
pub const CLAIM_FINALIZING: &str = "CLAIM_FINALIZING";

pub const REQUIRED_STATES: &[&str] = &[
    QUESTIONNAIRE,
    USER_CONFIRMING_ANSWER,
    CHOOSING_OPTION,
    AWAITING_DETAILS,
    CONFIRMING_CANCEL,
    CLAIM_FINALIZING,
];

/// States that belong to the question currently being asked.
const QUESTION_STATES: &[&str] = &[USER_CONFIRMING_ANSWER, CHOOSING_OPTION, AWAITING_DETAILS];

pub const CALLBACK_IDS: &[&str] = &[
    "start_claim",
    "answer",
    "answer_text",
    "confirm_answer",
    "reject_answer",
    "choose",
    "choose_number",
    "choose_affirm",
    "choose_negate",
    "skip",
    "help_details",
    "help_example",
    "cancel_request",
    "cancel_confirm",
    "cancel_decline",
    "reopen",
    "finalize_retry",
    "switch_formality",
    "remember_name",
    "greet",
    "static_response",
    "acknowledge",
    "media_received",
    "emoji_feedback",
    "repair",
];

/// Callbacks that answer with the rule's own `template`.
pub const TEMPLATE_CALLBACKS: &[&str] = &["static_response"];

pub const REQUIRED_TEMPLATES: &[&str] = &[
    "greet",
    "intro",
    "ack",
    "claim_start",
    "claim_resume",
    "confirm_value",
    "answer_not_understood",
    "retry_question",
    "repair",
    "repair_reset",
    "help_generic",
    "skip_refused",
    "cancel_prompt",
    "cancel_done",
    "cancel_declined",
    "nothing_to_cancel",
    "choose_model",
    "choice_invalid",
    "formality_ack",
    "name_ack",
    "claim_stored",
    "claim_store_failed",
    "reopen_ack",
    "nothing_to_reopen",
    "media_received",
    "media_no_claim",
    "emoji_positive",
    "emoji_negative",
    "imei_wrong_length",
    "imei_checksum_failed",
    "date_in_future",
    "reply_with_number",
    "apology",
];

/// A completed claim as handed to the store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClaimRecord {
    /// Assigned by the store; empty until persisted.
    pub claim_id: String,
    pub user_id: String,
    pub language: Language,
    pub slots: BTreeMap<String, EntityValue>,
    pub completed_at: DateTime<Utc>,
    /// Identifies the conversation that produced the claim.
    pub transcript_ref: String,
    #[serde(default)]
    pub attachments: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendingConfirmation {
    pub slot: String,
    pub value: EntityValue,
    pub display: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OfferedChoice {
    pub choice_id: String,
    pub label: String,
    pub value: EntityValue,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditSource {
    Confirmed,
    Choice,
    Prefilled,
    Skipped,
    Reopened,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub turn: u64,
    pub slot: String,
    pub source: AuditSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<String>,
}

/// The partially filled claim.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClaimFrame {
    pub started_turn: u64,
    pub slots: BTreeMap<String, EntityValue>,
    /// Id of the question being asked.
    #[serde(default)]
    pub current: Option<String>,
    #[serde(default)]
    pub pending: Option<PendingConfirmation>,
    #[serde(default)]
    pub offered: Option<Vec<OfferedChoice>>,
    #[serde(default)]
    pub failures: BTreeMap<String, u32>,
    #[serde(default)]
    pub skipped: BTreeSet<String>,
    #[serde(default)]
    pub reopened: Option<String>,
    #[serde(default)]
    pub attachments: Vec<String>,
    #[serde(default)]
    pub audit: Vec<AuditEntry>,
    #[serde(default)]
    pub finalizing: bool,
}

impl ClaimFrame {
    fn new(started_turn: u64) -> Self {
        ClaimFrame {
            started_turn,
            slots: BTreeMap::new(),
            current: None,
            pending: None,
            offered: None,
            failures: BTreeMap::new(),
            skipped: BTreeSet::new(),
            reopened: None,
            attachments: Vec::new(),
            audit: Vec::new(),
            finalizing: false,
        }
    }
}

/// Called by the service once the store accepted the claim.
pub fn complete_claim(context: &mut UserContext, claim_id: &str) -> Reply {
    context.frame = None;
    context.dialog.active_states.clear();
    context.completed_claims.push(claim_id.to_string());
    Reply::text("claim_stored").with("claim_id", claim_id)
}

/// Human-readable rendering of a slot value.
pub fn display_value(pack: &ContentPack, slot: &str, value: &EntityValue) -> String {
    match value {
        EntityValue::DamageType(d) => pack
            .entities
            .damage_types
            .get(d)
            .map(|e| e.label.clone())
            .unwrap_or_else(|| d.as_str().to_string()),
        EntityValue::Text(t) => pack
            .questions
            .iter()
            .find(|q| q.slot == slot)
            .and_then(|q| q.clarification_choices.as_ref())
            .and_then(|cs| cs.iter().find(|c| &c.canonical_value == t))
            .map(|c| c.label.clone())
            .unwrap_or_else(|| t.clone()),
        other => other.canonical(),
    }
}

enum Extracted {
    Value(EntityValue),
    Ambiguous(Vec<OfferedChoice>),
    Invalid(&'static str),
    Nothing,
}

/// Callback implementation over one user's context.
pub struct ClaimFlow<'a> {
    pack: &'a ContentPack,
    extractor: &'a EntityExtractor,
    router: &'a Router,
    user_id: &'a str,
    profile: &'a mut UserProfile,
    frame: &'a mut Option<ClaimFrame>,
    pushes: Vec<StatePush>,
}

type Step = Result<Vec<Reply>, EngineError>;

impl<'a> ClaimFlow<'a> {
    pub fn new(
        pack: &'a ContentPack,
        extractor: &'a EntityExtractor,
        router: &'a Router,
        user_id: &'a str,
        profile: &'a mut UserProfile,
        frame: &'a mut Option<ClaimFrame>,
    ) -> Self {
        ClaimFlow {
            pack,
            extractor,
            router,
            user_id,
            profile,
            frame,
            pushes: Vec::new(),
        }
    }

    fn push(&mut self, state: &str, lifetime: Option<Option<u32>>) {
        if let Some(mut p) = self.router.state_defaults(state) {
            if let Some(l) = lifetime {
                p.lifetime = l;
            }
            self.pushes.retain(|q| q.name != p.name);
            self.pushes.push(p);
        }
    }

    fn question(&self, id: &str) -> Option<&'a QuestionSpec> {
        self.pack.questions.iter().find(|q| q.id == id)
    }

    fn current_question(&self) -> Option<&'a QuestionSpec> {
        let id = self.frame.as_ref()?.current.clone()?;
        self.question(&id)
    }

    /// Drops question sub-state whose dialog state has expired.
    fn sync(&mut self, states: &ActiveStates) {
        if let Some(f) = self.frame.as_mut() {
            if !states.contains(USER_CONFIRMING_ANSWER) {
                f.pending = None;
            }
            if !states.contains(CHOOSING_OPTION) {
                f.offered = None;
            }
        }
    }

    fn clear_question(&mut self, states: &mut ActiveStates) {
        for s in QUESTION_STATES {
            states.pop(s);
        }
        self.pushes.retain(|p| !QUESTION_STATES.contains(&p.name.as_str()));
        if let Some(f) = self.frame.as_mut() {
            f.pending = None;
            f.offered = None;
        }
    }

    fn slot_params(&self) -> BTreeMap<String, String> {
        let Some(f) = self.frame.as_ref() else {
            return BTreeMap::new();
        };
        f.slots
            .iter()
            .map(|(slot, v)| (slot.clone(), display_value(self.pack, slot, v)))
            .collect()
    }

    fn choices_of(offered: &[OfferedChoice]) -> Vec<Choice> {
        offered.iter().map(|c| Choice::new(&c.choice_id, &c.label)).collect()
    }

    fn offer(&mut self, key: &str, offered: Vec<OfferedChoice>, lifetime: Option<Option<u32>>) -> Reply {
        let choices = Self::choices_of(&offered);
        if let Some(f) = self.frame.as_mut() {
            f.offered = Some(offered);
        }
        self.push(CHOOSING_OPTION, lifetime);
        let mut reply = Reply::choices(key, choices);
        for (k, v) in self.slot_params() {
            reply = reply.with(&k, v);
        }
        reply
    }

    fn catalog_choices(q: &QuestionSpec) -> Vec<OfferedChoice> {
        q.clarification_choices
            .iter()
            .flatten()
            .map(|c| OfferedChoice {
                choice_id: c.choice_id.clone(),
                label: c.label.clone(),
                value: match q.entity_type {
                    EntityType::PhoneModel => EntityValue::PhoneModel(c.canonical_value.clone()),
                    _ => EntityValue::Text(c.canonical_value.clone()),
                },
            })
            .collect()
    }

    /// Prompts for question `q`, pushing whatever state its answer needs.
    fn ask(&mut self, q: &QuestionSpec) -> Vec<Reply> {
        let failures = self
            .frame
            .as_ref()
            .and_then(|f| f.failures.get(&q.id).copied())
            .unwrap_or(0);
        if q.entity_type == EntityType::Choice {
            let offered = Self::catalog_choices(q);
            return vec![self.offer(&q.prompt_key, offered, Some(None))];
        }
        if q.entity_type == EntityType::PhoneModel && failures >= 2 && q.clarification_choices.is_some() {
            let offered = Self::catalog_choices(q);
            return vec![self.offer("choose_model", offered, None)];
        }
        let mut reply = if q.accepts_media {
            self.push(AWAITING_DETAILS, None);
            Reply::request_media(&q.prompt_key)
        } else {
            Reply::text(&q.prompt_key)
        };
        for (k, v) in self.slot_params() {
            reply = reply.with(&k, v);
        }
        vec![reply]
    }

    /// Repeats whatever the user is expected to answer right now.
    fn restate(&mut self) -> Vec<Reply> {
        let Some(f) = self.frame.as_ref() else {
            return Vec::new();
        };
        if f.finalizing {
            return Vec::new();
        }
        if let Some(p) = &f.pending {
            return vec![Reply::text("confirm_value").with("value", p.display.clone())];
        }
        if let Some(offered) = f.offered.clone() {
            let key = self
                .current_question()
                .filter(|q| q.entity_type == EntityType::Choice)
                .map(|q| q.prompt_key.clone())
                .unwrap_or_else(|| "choose_model".to_string());
            let mut reply = Reply::choices(&key, Self::choices_of(&offered));
            for (k, v) in self.slot_params() {
                reply = reply.with(&k, v);
            }
            return vec![reply];
        }
        match self.current_question() {
            Some(q) => self.ask(q),
            None => Vec::new(),
        }
    }

    /// Counts a failed attempt at the current question and re-asks it,
    /// adding the help text on every third failure.
    fn fail(&mut self, lead: Reply) -> Vec<Reply> {
        let mut replies = vec![lead];
        let Some(q) = self.current_question() else {
            return replies;
        };
        let count = {
            let f = self.frame.as_mut().expect("current question implies a frame");
            let c = f.failures.entry(q.id.clone()).or_insert(0);
            *c += 1;
            *c
        };
        if count % 3 == 0 {
            replies.push(Reply::text(&q.help_key));
        }
        replies.extend(self.ask(q));
        replies
    }

    fn commit(&mut self, slot: &str, value: EntityValue, source: AuditSource, turn: u64) {
        let display = display_value(self.pack, slot, &value);
        if let Some(f) = self.frame.as_mut() {
            f.slots.insert(slot.to_string(), value);
            f.audit.push(AuditEntry {
                turn,
                slot: slot.to_string(),
                source,
                value: Some(display),
            });
        }
    }

    fn next_question(&self) -> Option<&'a QuestionSpec> {
        let f = self.frame.as_ref()?;
        if let Some(id) = &f.reopened {
            return self.question(id);
        }
        self.pack
            .questions
            .iter()
            .find(|q| !f.slots.contains_key(&q.slot) && !f.skipped.contains(&q.slot))
    }

    fn ask_next(&mut self, states: &mut ActiveStates, now: DateTime<Utc>) -> Step {
        self.clear_question(states);
        match self.next_question() {
            Some(q) => {
                if let Some(f) = self.frame.as_mut() {
                    f.current = Some(q.id.clone());
                    f.reopened = None;
                }
                Ok(self.ask(q))
            }
            None => self.finalize(states, now),
        }
    }

    fn record(&self, now: DateTime<Utc>) -> Result<ClaimRecord, EngineError> {
        let f = self
            .frame
            .as_ref()
            .ok_or_else(|| defect("finalize", "no claim in progress"))?;
        if let Some(q) = self
            .pack
            .questions
            .iter()
            .find(|q| !q.optional && !f.slots.contains_key(&q.slot))
        {
            return Err(defect("finalize", &format!("required slot '{}' is empty", q.slot)));
        }
        Ok(ClaimRecord {
            claim_id: String::new(),
            user_id: self.user_id.to_string(),
            language: self.pack.language,
            slots: f.slots.clone(),
            completed_at: now,
            transcript_ref: format!("{}#{}", self.user_id, f.started_turn),
            attachments: f.attachments.clone(),
        })
    }

    fn finalize(&mut self, states: &mut ActiveStates, now: DateTime<Utc>) -> Step {
        let record = self.record(now)?;
        for s in QUESTION_STATES.iter().chain([&QUESTIONNAIRE]) {
            states.pop(s);
        }
        self.pushes.clear();
        if let Some(f) = self.frame.as_mut() {
            f.finalizing = true;
            f.current = None;
        }
        self.push(CLAIM_FINALIZING, None);
        Ok(vec![Reply::StoreClaim(record)])
    }

    fn extract(&self, q: &QuestionSpec, u: &MessageUnderstanding) -> Extracted {
        let raw = u.raw_text.as_str();
        let typed = |ty: EntityType| {
            u.parameters.values().find(|v| {
                matches!(
                    (ty, v),
                    (EntityType::DamageType, EntityValue::DamageType(_))
                        | (EntityType::Datetime, EntityValue::Datetime { .. })
                        | (EntityType::Imei, EntityValue::Imei(_))
                        | (EntityType::PhoneNumber, EntityValue::PhoneNumber(_))
                )
            })
        };
        match q.entity_type {
            EntityType::DamageType => match typed(EntityType::DamageType) {
                Some(v) => Extracted::Value(v.clone()),
                None => self
                    .extractor
                    .damage_type(&tokenize(raw))
                    .map_or(Extracted::Nothing, |d| Extracted::Value(EntityValue::DamageType(d))),
            },
            EntityType::PhoneModel | EntityType::PhoneFamily => match self.extractor.lookup_phone_model(raw) {
                ModelLookup::Unique(m) => Extracted::Value(EntityValue::PhoneModel(m.name)),
                ModelLookup::Ambiguous(models) => Extracted::Ambiguous(
                    models
                        .into_iter()
                        .map(|m| OfferedChoice {
                            choice_id: m.id,
                            label: m.name.clone(),
                            value: EntityValue::PhoneModel(m.name),
                        })
                        .collect(),
                ),
                ModelLookup::None => Extracted::Nothing,
            },
            EntityType::PhoneNumber => self
                .extractor
                .phone_number(raw)
                .map_or(Extracted::Nothing, |p| Extracted::Value(EntityValue::PhoneNumber(p))),
            EntityType::Imei => {
                if let Some(i) = self.extractor.imei(raw) {
                    return Extracted::Value(EntityValue::Imei(i));
                }
                let long = self.extractor.digit_runs(raw).into_iter().find(|d| d.len() >= 4);
                match long.map(|d| validate_imei(&d)) {
                    Some(ImeiCheck::Invalid(ImeiReason::ChecksumFailed)) => Extracted::Invalid("imei_checksum_failed"),
                    Some(ImeiCheck::Invalid(_)) => Extracted::Invalid("imei_wrong_length"),
                    _ => Extracted::Nothing,
                }
            }
            EntityType::Datetime => {
                let value = typed(EntityType::Datetime)
                    .cloned()
                    .or_else(|| extract_datetime(raw, u.received_at));
                match value {
                    Some(EntityValue::Datetime { at, .. }) if at.date_naive() > u.received_at.date_naive() => {
                        Extracted::Invalid("date_in_future")
                    }
                    Some(v) => Extracted::Value(v),
                    None => Extracted::Nothing,
                }
            }
            EntityType::Text => {
                let t = raw.trim();
                if !t.chars().any(char::is_alphanumeric) {
                    Extracted::Nothing
                } else {
                    Extracted::Value(EntityValue::Text(t.to_string()))
                }
            }
            EntityType::Choice => {
                let tokens = tokenize(raw);
                Self::catalog_choices(q)
                    .into_iter()
                    .find(|c| tokenize(&c.label) == tokens || tokenize(&c.choice_id) == tokens)
                    .map_or(Extracted::Nothing, |c| Extracted::Value(c.value))
            }
            EntityType::PersonName => self
                .extractor
                .person_name(raw)
                .map_or(Extracted::Nothing, |n| Extracted::Value(EntityValue::Text(n))),
        }
    }

    /// Interprets `u` as an answer to the current question.
    fn take_answer(&mut self, u: &MessageUnderstanding, states: &mut ActiveStates, turn: u64) -> Step {
        let Some(q) = self.current_question() else {
            return Ok(self.restate());
        };
        match self.extract(q, u) {
            Extracted::Value(value) if q.entity_type == EntityType::Choice => {
                self.commit(&q.slot, value, AuditSource::Choice, turn);
                self.ask_next(states, u.received_at)
            }
            Extracted::Value(value) => {
                let mut display = display_value(self.pack, &q.slot, &value);
                if q.entity_type == EntityType::Text {
                    display = format!("\"{display}\"");
                }
                self.clear_question(states);
                if let Some(f) = self.frame.as_mut() {
                    f.pending = Some(PendingConfirmation {
                        slot: q.slot.clone(),
                        value,
                        display: display.clone(),
                    });
                }
                self.push(USER_CONFIRMING_ANSWER, None);
                Ok(vec![Reply::text("confirm_value").with("value", display)])
            }
            Extracted::Ambiguous(offered) => {
                self.clear_question(states);
                Ok(vec![self.offer("choose_model", offered, None)])
            }
            Extracted::Invalid(key) => Ok(self.fail(Reply::text(key))),
            Extracted::Nothing => Ok(self.fail(Reply::text("answer_not_understood"))),
        }
    }

    fn start_claim(&mut self, call: &Invocation<'_>, states: &mut ActiveStates) -> Step {
        let u = call.understanding;
        if self.frame.is_some() {
            // the trigger may also carry the answer to the current question
            if let Some(q) = self.current_question() {
                if matches!(self.extract(q, u), Extracted::Value(_) | Extracted::Ambiguous(_))
                    && q.entity_type != EntityType::Text
                {
                    return self.take_answer(u, states, call.turn);
                }
            }
            let mut replies = vec![Reply::text("claim_resume")];
            replies.extend(self.restate());
            return Ok(replies);
        }
        *self.frame = Some(ClaimFrame::new(call.turn));
        let intent = self.pack.intent(&u.intent);
        for (name, value) in &u.parameters {
            let ty = intent
                .and_then(|i| i.parameters.iter().find(|p| &p.name == name))
                .map(|p| p.entity_type);
            let Some(ty) = ty else { continue };
            if matches!(ty, EntityType::Text | EntityType::Choice | EntityType::PhoneFamily) {
                continue;
            }
            if let Some(q) = self.pack.questions.iter().find(|q| q.entity_type == ty) {
                self.commit(&q.slot, value.clone(), AuditSource::Prefilled, call.turn);
            }
        }
        self.push(QUESTIONNAIRE, None);
        let mut replies = vec![Reply::text("claim_start")];
        replies.extend(self.ask_next(states, u.received_at)?);
        Ok(replies)
    }

    fn confirm_answer(&mut self, call: &Invocation<'_>, states: &mut ActiveStates) -> Step {
        let pending = self.frame.as_mut().and_then(|f| f.pending.take());
        let Some(p) = pending else {
            return Ok(self.restate());
        };
        self.commit(&p.slot, p.value, AuditSource::Confirmed, call.turn);
        let mut replies = vec![Reply::text("ack")];
        replies.extend(self.ask_next(states, call.understanding.received_at)?);
        Ok(replies)
    }

    fn reject_answer(&mut self, call: &Invocation<'_>, states: &mut ActiveStates) -> Step {
        if let Some(q) = self.current_question() {
            // "no, it was 2 days ago" carries the corrected value
            if q.entity_type != EntityType::Text {
                if let Extracted::Value(_) = self.extract(q, call.understanding) {
                    return self.take_answer(call.understanding, states, call.turn);
                }
            }
        }
        self.clear_question(states);
        Ok(self.fail(Reply::text("retry_question")))
    }

    fn choose_offered(
        &mut self,
        pick: Option<OfferedChoice>,
        call: &Invocation<'_>,
        states: &mut ActiveStates,
    ) -> Step {
        let Some(choice) = pick else {
            let mut replies = vec![Reply::text("choice_invalid")];
            replies.extend(self.restate());
            return Ok(replies);
        };
        let Some(q) = self.current_question() else {
            self.clear_question(states);
            return Ok(Vec::new());
        };
        self.commit(&q.slot, choice.value, AuditSource::Choice, call.turn);
        self.ask_next(states, call.understanding.received_at)
    }

    fn offered(&self) -> Vec<OfferedChoice> {
        self.frame.as_ref().and_then(|f| f.offered.clone()).unwrap_or_default()
    }

    fn choose(&mut self, call: &Invocation<'_>, states: &mut ActiveStates) -> Step {
        let id = match call.understanding.parameter(CHOICE_PARAM) {
            Some(EntityValue::Text(id)) => id.clone(),
            _ => String::new(),
        };
        let pick = self.offered().into_iter().find(|c| c.choice_id == id);
        self.choose_offered(pick, call, states)
    }

    fn choose_number(&mut self, call: &Invocation<'_>, states: &mut ActiveStates) -> Step {
        let n: usize = call
            .understanding
            .raw_text
            .trim()
            .trim_end_matches(['.', ')'])
            .trim()
            .parse()
            .unwrap_or(0);
        let pick = n.checked_sub(1).and_then(|i| self.offered().get(i).cloned());
        self.choose_offered(pick, call, states)
    }

    fn choose_canonical(&mut self, canonical: &str, call: &Invocation<'_>, states: &mut ActiveStates) -> Step {
        let pick = self
            .offered()
            .into_iter()
            .find(|c| matches!(&c.value, EntityValue::Text(t) if t == canonical));
        if pick.is_some() {
            return self.choose_offered(pick, call, states);
        }
        if canonical == "no" {
            // none of the offered models
            self.clear_question(states);
            return Ok(self.fail(Reply::text("retry_question")));
        }
        self.choose_offered(None, call, states)
    }

    fn skip(&mut self, call: &Invocation<'_>, states: &mut ActiveStates) -> Step {
        let Some(q) = self.current_question() else {
            return Ok(self.restate());
        };
        if !q.optional {
            let mut replies = vec![Reply::text("skip_refused")];
            replies.extend(self.restate());
            return Ok(replies);
        }
        if let Some(f) = self.frame.as_mut() {
            f.skipped.insert(q.slot.clone());
            f.audit.push(AuditEntry {
                turn: call.turn,
                slot: q.slot.clone(),
                source: AuditSource::Skipped,
                value: None,
            });
        }
        self.ask_next(states, call.understanding.received_at)
    }

    fn help(&mut self, example: bool) -> Vec<Reply> {
        match self.current_question() {
            Some(q) if !self.frame.as_ref().is_some_and(|f| f.finalizing) => {
                vec![Reply::text(if example { &q.example_key } else { &q.help_key })]
            }
            _ => vec![Reply::text("help_generic")],
        }
    }

    fn cancel_request(&mut self) -> Vec<Reply> {
        if self.frame.is_none() {
            return vec![Reply::text("nothing_to_cancel")];
        }
        self.push(CONFIRMING_CANCEL, None);
        vec![Reply::text("cancel_prompt")]
    }

    fn cancel_confirm(&mut self, states: &mut ActiveStates) -> Vec<Reply> {
        *self.frame = None;
        states.clear();
        self.pushes.clear();
        vec![Reply::text("cancel_done")]
    }

    fn cancel_decline(&mut self, states: &mut ActiveStates) -> Vec<Reply> {
        states.pop(CONFIRMING_CANCEL);
        let mut replies = vec![Reply::text("cancel_declined")];
        replies.extend(self.restate());
        replies
    }

    fn reopen(&mut self, call: &Invocation<'_>, states: &mut ActiveStates) -> Step {
        let last = self.frame.as_ref().and_then(|f| {
            f.audit
                .iter()
                .rev()
                .find(|a| {
                    a.source != AuditSource::Skipped
                        && a.source != AuditSource::Reopened
                        && f.slots.contains_key(&a.slot)
                })
                .map(|a| a.slot.clone())
        });
        let Some(slot) = last else {
            let mut replies = vec![Reply::text("nothing_to_reopen")];
            replies.extend(self.restate());
            return Ok(replies);
        };
        let qid = self
            .pack
            .questions
            .iter()
            .find(|q| q.slot == slot)
            .map(|q| q.id.clone());
        if let Some(f) = self.frame.as_mut() {
            f.slots.remove(&slot);
            f.reopened = qid;
            f.audit.push(AuditEntry {
                turn: call.turn,
                slot,
                source: AuditSource::Reopened,
                value: None,
            });
        }
        let mut replies = vec![Reply::text("reopen_ack")];
        replies.extend(self.ask_next(states, call.understanding.received_at)?);
        Ok(replies)
    }

    fn finalize_retry(&mut self, call: &Invocation<'_>, states: &mut ActiveStates) -> Step {
        if self.frame.as_ref().is_some_and(|f| f.finalizing) {
            let record = self.record(call.understanding.received_at)?;
            self.push(CLAIM_FINALIZING, None);
            return Ok(vec![Reply::StoreClaim(record)]);
        }
        states.pop(CLAIM_FINALIZING);
        Ok(self.restate())
    }

    fn switch_formality(&mut self, u: &MessageUnderstanding) -> Vec<Reply> {
        if let Some(f) = detect_formality(&u.raw_text, u.language) {
            self.profile.formality = f;
        }
        let mut replies = vec![Reply::text("formality_ack")];
        replies.extend(self.restate());
        replies
    }

    fn remember_name(&mut self, u: &MessageUnderstanding) -> Vec<Reply> {
        let name = u.parameters.values().find_map(|v| match v {
            EntityValue::Text(t) => Some(t.clone()),
            _ => None,
        });
        if let Some(name) = name {
            self.profile.first_name = Some(name);
        }
        let mut replies = vec![if self.profile.first_name.is_some() {
            Reply::text("name_ack")
        } else {
            Reply::text("ack")
        }];
        replies.extend(self.restate());
        replies
    }

    fn media_received(&mut self, u: &MessageUnderstanding) -> Vec<Reply> {
        let Some(f) = self.frame.as_mut() else {
            return vec![Reply::text("media_no_claim")];
        };
        if let Some(uri) = &u.media_uri {
            f.attachments.push(uri.clone());
        }
        let mut replies = vec![Reply::text("media_received")];
        replies.extend(self.restate());
        replies
    }

    /// The open question when nothing else (confirmation, choice list,
    /// finalizing) is pending.
    fn bare_question(&self) -> Option<&'a QuestionSpec> {
        let f = self.frame.as_ref()?;
        if f.pending.is_some() || f.offered.is_some() || f.finalizing {
            return None;
        }
        self.current_question()
    }

    fn repair(&mut self, call: &Invocation<'_>, states: &mut ActiveStates) -> Step {
        let lead = if call.consecutive_fallbacks > 0 && call.consecutive_fallbacks.is_multiple_of(3) {
            Reply::text("repair_reset")
        } else {
            Reply::text("repair")
        };
        if self.frame.is_none() {
            return Ok(vec![lead]);
        }
        if self.frame.as_ref().is_some_and(|f| f.pending.is_some()) {
            self.clear_question(states);
            return Ok(self.fail(lead));
        }
        let Some(q) = self.bare_question() else {
            return Ok(self.with_restate(lead));
        };
        match self.extract(q, call.understanding) {
            Extracted::Invalid(key) => Ok(self.fail(Reply::text(key))),
            Extracted::Value(_) | Extracted::Ambiguous(_) if q.entity_type != EntityType::Text => {
                self.take_answer(call.understanding, states, call.turn)
            }
            _ => Ok(self.fail(lead)),
        }
    }

    fn acknowledge(&mut self, call: &Invocation<'_>, states: &mut ActiveStates) -> Step {
        if self.frame.is_none() {
            return Ok(vec![Reply::text("ack"), Reply::text("intro")]);
        }
        // "ok, it is 4901..." answers the open question
        if let Some(q) = self.bare_question() {
            if q.entity_type != EntityType::Text && !matches!(self.extract(q, call.understanding), Extracted::Nothing) {
                return self.take_answer(call.understanding, states, call.turn);
            }
        }
        Ok(self.restate())
    }

    fn with_restate(&mut self, first: Reply) -> Vec<Reply> {
        let mut replies = vec![first];
        replies.extend(self.restate());
        replies
    }
}

fn defect(callback: &str, message: &str) -> EngineError {
    EngineError::Callback {
        callback: callback.to_string(),
        message: message.to_string(),
    }
}

impl Callbacks for ClaimFlow<'_> {
    fn invoke(&mut self, call: &Invocation<'_>, states: &mut ActiveStates) -> Result<Outcome, EngineError> {
        self.pushes.clear();
        self.sync(states);
        let u = call.understanding;
        let replies = match call.rule.callback.as_str() {
            "start_claim" => self.start_claim(call, states)?,
            "answer" | "answer_text" => self.take_answer(u, states, call.turn)?,
            "confirm_answer" => self.confirm_answer(call, states)?,
            "reject_answer" => self.reject_answer(call, states)?,
            "choose" => self.choose(call, states)?,
            "choose_number" => self.choose_number(call, states)?,
            "choose_affirm" => self.choose_canonical("yes", call, states)?,
            "choose_negate" => self.choose_canonical("no", call, states)?,
            "skip" => self.skip(call, states)?,
            "help_details" => self.help(false),
            "help_example" => self.help(true),
            "cancel_request" => self.cancel_request(),
            "cancel_confirm" => self.cancel_confirm(states),
            "cancel_decline" => self.cancel_decline(states),
            "reopen" => self.reopen(call, states)?,
            "finalize_retry" => self.finalize_retry(call, states)?,
            "switch_formality" => self.switch_formality(u),
            "remember_name" => self.remember_name(u),
            "greet" => self.with_restate(Reply::text("greet")),
            "static_response" => {
                let key = call
                    .rule
                    .template
                    .clone()
                    .ok_or_else(|| defect("static_response", "rule has no template"))?;
                self.with_restate(Reply::text(&key))
            }
            "acknowledge" => self.acknowledge(call, states)?,
            "media_received" => self.media_received(u),
            "emoji_feedback" => {
                let key = if self.profile.mood == Polarity::Negative {
                    "emoji_negative"
                } else {
                    "emoji_positive"
                };
                self.with_restate(Reply::text(key))
            }
            "repair" => self.repair(call, states)?,
            other => return Err(defect(other, "unknown callback")),
        };
        Ok(Outcome {
            replies,
            push: std::mem::take(&mut self.pushes),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_lists_are_consistent() {
        for cb in TEMPLATE_CALLBACKS {
            assert!(CALLBACK_IDS.contains(cb));
        }
        let mut ids = CALLBACK_IDS.to_vec();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), CALLBACK_IDS.len());
    }

    #[test]
    fn question_order_matches_the_questionnaire() {
        for lang in [Language::De, Language::En] {
            let pack = ContentPack::shipped(lang);
            let slots: Vec<&str> = pack.questions.iter().map(|q| q.slot.as_str()).collect();
            assert_eq!(
                slots,
                [
                    "damage_type",
                    "phone_model",
                    "phone_number",
                    "imei",
                    "damage_time",
                    "damage_details",
                    "contact_confirmation"
                ]
            );
            let optional: Vec<&str> = pack
                .questions
                .iter()
                .filter(|q| q.optional)
                .map(|q| q.slot.as_str())
                .collect();
            assert_eq!(optional, ["damage_details"]);
        }
    }

    #[test]
    fn display_uses_labels() {
        let pack = ContentPack::shipped(Language::En);
        let d = display_value(
            &pack,
            "damage_type",
            &EntityValue::DamageType(crate::nlu::DamageType::DisplayDamage),
        );
        assert_eq!(d, "display damage");
        let c = display_value(&pack, "contact_confirmation", &EntityValue::Text("yes".into()));
        assert_eq!(c, "Yes");
    }

    #[test]
    fn completing_clears_the_frame() {
        let mut ctx = UserContext::new("u", Language::En);
        ctx.frame = Some(ClaimFrame::new(1));
        let reply = complete_claim(&mut ctx, "C-000007");
        assert!(ctx.frame.is_none());
        assert!(ctx.dialog.active_states.is_empty());
        assert_eq!(ctx.completed_claims, ["C-000007"]);
        assert_eq!(reply, Reply::text("claim_stored").with("claim_id", "C-000007"));
    }
}
