//! Layered-state dialog control.
//!
//! A message is routed through three tiers: stateless rules, then the rules of
//! every active state from the highest priority down, then the fallback rules.
//! The first matching rule fires and no other. The last fallback rule matches
//! everything, so every message fires exactly one rule.

use std::collections::BTreeMap;
use std::fmt;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nlu::{MessageUnderstanding, FALLBACK_INTENT};
use crate::pack::{ContentPack, EmitSpec, EmojiLexicon, HandlerSpec, RuleSpec};
use crate::responder::{Formality, Polarity, Reply};

/// Emitting this pseudo-state clears every active state.
pub const DONE_STATE: &str = "DONE";

/// One active state instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogState {
    pub name: String,
    pub priority: i32,
    /// Remaining lifetime in turns; `None` never expires.
    pub lifetime: Option<u32>,
    pub created_turn: u64,
}

/// The set of active states. Names are unique.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ActiveStates(Vec<DialogState>);

impl ActiveStates {
    pub fn new() -> Self {
        ActiveStates(Vec::new())
    }

    /// Adds a state, replacing an active instance of the same name.
    pub fn push(&mut self, state: DialogState) {
        self.0.retain(|s| s.name != state.name);
        self.0.push(state);
    }

    pub fn pop(&mut self, name: &str) -> bool {
        let before = self.0.len();
        self.0.retain(|s| s.name != name);
        self.0.len() != before
    }

    pub fn clear(&mut self) {
        self.0.clear();
    }

    pub fn contains(&self, name: &str) -> bool {
        self.0.iter().any(|s| s.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&DialogState> {
        self.0.iter().find(|s| s.name == name)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &DialogState> {
        self.0.iter()
    }

    /// Routing order: priority descending, then newest first, then name.
    pub fn ordered(&self) -> Vec<&DialogState> {
        let mut v: Vec<&DialogState> = self.0.iter().collect();
        v.sort_by(|a, b| {
            b.priority
                .cmp(&a.priority)
                .then(b.created_turn.cmp(&a.created_turn))
                .then(a.name.cmp(&b.name))
        });
        v
    }

    pub fn names(&self) -> Vec<String> {
        self.ordered().into_iter().map(|s| s.name.clone()).collect()
    }

    /// Ages every finite state by one turn, removing those that reach zero.
    pub fn tick(&mut self) {
        for s in &mut self.0 {
            if let Some(l) = s.lifetime.as_mut() {
                *l = l.saturating_sub(1);
            }
        }
        self.0.retain(|s| s.lifetime != Some(0));
    }

    /// Used by the store to reject inconsistent records.
    pub fn has_duplicates(&self) -> bool {
        let mut names: Vec<&str> = self.0.iter().map(|s| s.name.as_str()).collect();
        names.sort_unstable();
        names.windows(2).any(|w| w[0] == w[1])
    }
}

/// Lifetime ticking. Misunderstood messages do not age states, so a user who
/// needs several attempts does not lose the question's context.
pub fn tick_lifetimes(states: &mut ActiveStates, understanding: &MessageUnderstanding) {
    if understanding.intent != FALLBACK_INTENT {
        states.tick();
    }
}

/// Per-user dialog bookkeeping kept in the stored context.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogControl {
    pub active_states: ActiveStates,
    pub turn_counter: u64,
    pub consecutive_fallbacks: u32,
}

/// Majority vote of the emoji lexicon. Ties and unknown emojis are neutral.
pub fn classify_emoji_sentiment(emojis: &[char], lexicon: &EmojiLexicon) -> Polarity {
    let has = |list: &[String], c: char| list.iter().any(|e| e.trim_end_matches('\u{fe0f}').chars().eq([c]));
    let (mut pos, mut neu, mut neg) = (0usize, 0usize, 0usize);
    for &c in emojis {
        if has(&lexicon.positive, c) {
            pos += 1;
        } else if has(&lexicon.negative, c) {
            neg += 1;
        } else if has(&lexicon.neutral, c) {
            neu += 1;
        }
    }
    if pos > neg && pos > neu {
        Polarity::Positive
    } else if neg > pos && neg > neu {
        Polarity::Negative
    } else {
        Polarity::Neutral
    }
}

/// What a handler may look at besides the understanding.
#[derive(Debug, Clone, Copy)]
pub struct MatchContext<'a> {
    pub affirmations: &'a [String],
    pub negations: &'a [String],
    pub lexicon: &'a EmojiLexicon,
    pub formality: Formality,
}

#[derive(Debug, Clone)]
pub enum Handler {
    Intent {
        intent: String,
        required_parameters: Vec<String>,
    },
    Affirmation,
    Negation,
    Media,
    EmojiSentiment(Polarity),
    /// Matches the raw text. With a target, only while the user's formality
    /// differs from it.
    Regex {
        regex: Regex,
        target: Option<Formality>,
    },
}

impl Handler {
    pub fn from_spec(spec: &HandlerSpec) -> Result<Handler, RouterError> {
        Ok(match spec {
            HandlerSpec::Intent {
                intent,
                required_parameters,
            } => Handler::Intent {
                intent: intent.clone(),
                required_parameters: required_parameters.clone(),
            },
            HandlerSpec::Affirmation => Handler::Affirmation,
            HandlerSpec::Negation => Handler::Negation,
            HandlerSpec::Media => Handler::Media,
            HandlerSpec::EmojiSentiment { polarity } => Handler::EmojiSentiment(*polarity),
            HandlerSpec::Regex { pattern, target } => Handler::Regex {
                regex: Regex::new(pattern).map_err(|e| RouterError::BadPattern {
                    pattern: pattern.clone(),
                    message: e.to_string(),
                })?,
                target: *target,
            },
        })
    }

    pub fn intent(intent: &str) -> Handler {
        Handler::Intent {
            intent: intent.to_string(),
            required_parameters: Vec::new(),
        }
    }

    /// A handler that matches every message.
    pub fn always() -> Handler {
        Handler::Regex {
            regex: Regex::new("").expect("empty pattern"),
            target: None,
        }
    }

    pub fn matches(&self, u: &MessageUnderstanding, ctx: &MatchContext<'_>) -> bool {
        match self {
            Handler::Intent {
                intent,
                required_parameters,
            } => &u.intent == intent && required_parameters.iter().all(|p| u.parameters.contains_key(p)),
            Handler::Affirmation => ctx.affirmations.contains(&u.intent),
            Handler::Negation => ctx.negations.contains(&u.intent),
            Handler::Media => u.media_kind.is_some(),
            Handler::EmojiSentiment(p) => {
                !u.emojis.is_empty() && classify_emoji_sentiment(&u.emojis, ctx.lexicon) == *p
            }
            Handler::Regex { regex, target } => {
                regex.is_match(&u.raw_text) && target.is_none_or(|t| t != ctx.formality)
            }
        }
    }

    fn is_catch_all(&self) -> bool {
        matches!(self, Handler::Regex { regex, target: None } if regex.is_match(""))
    }
}

/// A state to push after a rule fires.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StatePush {
    pub name: String,
    pub priority: i32,
    pub lifetime: Option<u32>,
}

#[derive(Debug, Clone)]
pub struct Rule {
    pub handler: Handler,
    pub callback: String,
    pub emits: Vec<StatePush>,
    pub template: Option<String>,
}

impl Rule {
    pub fn new(handler: Handler, callback: &str) -> Self {
        Rule {
            handler,
            callback: callback.to_string(),
            emits: Vec::new(),
            template: None,
        }
    }

    pub fn emitting(mut self, push: StatePush) -> Self {
        self.emits.push(push);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    Stateless,
    State,
    Fallback,
}

/// Which rule fired.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleRef {
    pub tier: Tier,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state: Option<String>,
    pub index: usize,
    pub callback: String,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RouterError {
    #[error("the last fallback rule must match every message")]
    NoCatchAll,
    #[error("rules reference undeclared state '{0}'")]
    UndeclaredState(String),
    #[error("state '{0}' is emitted but has no rules")]
    StateWithoutRules(String),
    #[error("pattern '{pattern}' does not compile: {message}")]
    BadPattern { pattern: String, message: String },
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("callback '{callback}' failed: {message}")]
    Callback { callback: String, message: String },
}

/// Data passed to a callback.
#[derive(Debug)]
pub struct Invocation<'a> {
    pub rule: &'a Rule,
    pub fired: &'a RuleRef,
    pub understanding: &'a MessageUnderstanding,
    pub turn: u64,
    pub consecutive_fallbacks: u32,
}

/// Result of a callback. `push` is applied after `rule.emits`.
#[derive(Debug, Default)]
pub struct Outcome {
    pub replies: Vec<Reply>,
    pub push: Vec<StatePush>,
}

impl Outcome {
    pub fn reply(reply: Reply) -> Self {
        Outcome {
            replies: vec![reply],
            push: Vec::new(),
        }
    }
}

/// Application side of the engine. Callbacks may pop states directly.
pub trait Callbacks {
    fn invoke(&mut self, call: &Invocation<'_>, states: &mut ActiveStates) -> Result<Outcome, EngineError>;
}

/// Result of one planning step.
#[derive(Debug)]
pub struct Plan {
    pub fired: RuleRef,
    pub replies: Vec<Reply>,
}

#[derive(Debug, Clone)]
pub struct Router {
    stateless: Vec<Rule>,
    states: BTreeMap<String, Vec<Rule>>,
    fallback: Vec<Rule>,
    declared: BTreeMap<String, (i32, Option<u32>)>,
    affirmations: Vec<String>,
    negations: Vec<String>,
    lexicon: EmojiLexicon,
}

impl Router {
    pub fn builder() -> RouterBuilder {
        RouterBuilder::default()
    }

    pub fn from_pack(pack: &ContentPack) -> Result<Router, RouterError> {
        let mut b = Router::builder()
            .affirmations(pack.affirmation_intents.clone())
            .negations(pack.negation_intents.clone())
            .lexicon(pack.entities.emoji_sentiment.clone());
        for s in &pack.states {
            b = b.state(&s.name, s.priority, s.lifetime);
        }
        let declared: BTreeMap<String, (i32, Option<u32>)> = pack
            .states
            .iter()
            .map(|s| (s.name.clone(), (s.priority, s.lifetime)))
            .collect();
        let compile = |spec: &RuleSpec| -> Result<Rule, RouterError> {
            let emits = spec
                .emits
                .iter()
                .map(|e| resolve_emit(e, &declared))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(Rule {
                handler: Handler::from_spec(&spec.handler)?,
                callback: spec.callback.clone(),
                emits,
                template: spec.template.clone(),
            })
        };
        for spec in &pack.rules.stateless {
            b = b.stateless(compile(spec)?);
        }
        for (state, specs) in &pack.rules.states {
            for spec in specs {
                b = b.state_rule(state, compile(spec)?);
            }
        }
        for spec in &pack.rules.fallback {
            b = b.fallback(compile(spec)?);
        }
        b.build()
    }

    fn ctx(&self, formality: Formality) -> MatchContext<'_> {
        MatchContext {
            affirmations: &self.affirmations,
            negations: &self.negations,
            lexicon: &self.lexicon,
            formality,
        }
    }

    pub fn lexicon(&self) -> &EmojiLexicon {
        &self.lexicon
    }

    /// The declared priority and lifetime of a state.
    pub fn state_defaults(&self, name: &str) -> Option<StatePush> {
        self.declared.get(name).map(|(priority, lifetime)| StatePush {
            name: name.to_string(),
            priority: *priority,
            lifetime: *lifetime,
        })
    }

    /// The rule that fires for `u`. Never fails: the fallback tier ends in a
    /// catch-all.
    pub fn select<'r>(
        &'r self,
        states: &ActiveStates,
        u: &MessageUnderstanding,
        formality: Formality,
    ) -> (RuleRef, &'r Rule) {
        let ctx = self.ctx(formality);
        let found = |rules: &'r [Rule]| first_match(rules, u, &ctx);
        if let Some((index, rule)) = found(&self.stateless) {
            return (rule_ref(Tier::Stateless, None, index, rule), rule);
        }
        for state in states.ordered() {
            if let Some((index, rule)) = self.states.get(&state.name).and_then(|rules| found(rules)) {
                return (rule_ref(Tier::State, Some(&state.name), index, rule), rule);
            }
        }
        let (index, rule) = found(&self.fallback).unwrap_or_else(|| {
            let last = self.fallback.len() - 1;
            (last, &self.fallback[last])
        });
        (rule_ref(Tier::Fallback, None, index, rule), rule)
    }

    pub fn is_repair(&self, fired: &RuleRef) -> bool {
        fired.tier == Tier::Fallback && fired.index + 1 == self.fallback.len()
    }

    /// Runs one turn: select, invoke, tick, push.
    pub fn plan(
        &self,
        control: &mut DialogControl,
        u: &MessageUnderstanding,
        formality: Formality,
        callbacks: &mut dyn Callbacks,
    ) -> Result<Plan, EngineError> {
        control.turn_counter += 1;
        let (fired, rule) = self.select(&control.active_states, u, formality);
        if self.is_repair(&fired) {
            control.consecutive_fallbacks += 1;
        } else {
            control.consecutive_fallbacks = 0;
        }
        let call = Invocation {
            rule,
            fired: &fired,
            understanding: u,
            turn: control.turn_counter,
            consecutive_fallbacks: control.consecutive_fallbacks,
        };
        let outcome = callbacks.invoke(&call, &mut control.active_states)?;
        tick_lifetimes(&mut control.active_states, u);
        for push in rule.emits.iter().chain(outcome.push.iter()) {
            apply_push(&mut control.active_states, push, control.turn_counter);
        }
        Ok(Plan {
            fired,
            replies: outcome.replies,
        })
    }
}

fn first_match<'r>(rules: &'r [Rule], u: &MessageUnderstanding, ctx: &MatchContext) -> Option<(usize, &'r Rule)> {
    rules.iter().enumerate().find(|(_, r)| r.handler.matches(u, ctx))
}

fn rule_ref(tier: Tier, state: Option<&str>, index: usize, rule: &Rule) -> RuleRef {
    RuleRef {
        tier,
        state: state.map(str::to_string),
        index,
        callback: rule.callback.clone(),
    }
}

fn resolve_emit(e: &EmitSpec, declared: &BTreeMap<String, (i32, Option<u32>)>) -> Result<StatePush, RouterError> {
    if e.state == DONE_STATE {
        return Ok(StatePush {
            name: DONE_STATE.to_string(),
            priority: 0,
            lifetime: None,
        });
    }
    let (priority, lifetime) = declared
        .get(&e.state)
        .ok_or_else(|| RouterError::UndeclaredState(e.state.clone()))?;
    Ok(StatePush {
        name: e.state.clone(),
        priority: e.priority.unwrap_or(*priority),
        lifetime: e.lifetime.or(*lifetime),
    })
}

pub fn apply_push(states: &mut ActiveStates, push: &StatePush, turn: u64) {
    if push.name == DONE_STATE {
        states.clear();
    } else {
        states.push(DialogState {
            name: push.name.clone(),
            priority: push.priority,
            lifetime: push.lifetime,
            created_turn: turn,
        });
    }
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Tier::Stateless => "stateless",
            Tier::State => "state",
            Tier::Fallback => "fallback",
        })
    }
}

/// Programmatic construction, mainly for tests and tools.
#[derive(Debug, Default)]
pub struct RouterBuilder {
    stateless: Vec<Rule>,
    states: BTreeMap<String, Vec<Rule>>,
    fallback: Vec<Rule>,
    declared: BTreeMap<String, (i32, Option<u32>)>,
    affirmations: Vec<String>,
    negations: Vec<String>,
    lexicon: EmojiLexicon,
}

impl RouterBuilder {
    pub fn state(mut self, name: &str, priority: i32, lifetime: Option<u32>) -> Self {
        self.declared.insert(name.to_string(), (priority, lifetime));
        self
    }

    pub fn stateless(mut self, rule: Rule) -> Self {
        self.stateless.push(rule);
        self
    }

    pub fn state_rule(mut self, state: &str, rule: Rule) -> Self {
        self.states.entry(state.to_string()).or_default().push(rule);
        self
    }

    pub fn fallback(mut self, rule: Rule) -> Self {
        self.fallback.push(rule);
        self
    }

    pub fn affirmations(mut self, intents: Vec<String>) -> Self {
        self.affirmations = intents;
        self
    }

    pub fn negations(mut self, intents: Vec<String>) -> Self {
        self.negations = intents;
        self
    }

    pub fn lexicon(mut self, lexicon: EmojiLexicon) -> Self {
        self.lexicon = lexicon;
        self
    }

    pub fn build(self) -> Result<Router, RouterError> {
        if !self.fallback.last().is_some_and(|r| r.handler.is_catch_all()) {
            return Err(RouterError::NoCatchAll);
        }
        for state in self.states.keys() {
            if !self.declared.contains_key(state) {
                return Err(RouterError::UndeclaredState(state.clone()));
            }
        }
        let all = self
            .stateless
            .iter()
            .chain(self.states.values().flatten())
            .chain(self.fallback.iter());
        for rule in all {
            for push in &rule.emits {
                if push.name == DONE_STATE {
                    continue;
                }
                if !self.declared.contains_key(&push.name) {
                    return Err(RouterError::UndeclaredState(push.name.clone()));
                }
                if !self.states.contains_key(&push.name) {
                    return Err(RouterError::StateWithoutRules(push.name.clone()));
                }
            }
        }
        Ok(Router {
            stateless: self.stateless,
            states: self.states,
            fallback: self.fallback,
            declared: self.declared,
            affirmations: self.affirmations,
            negations: self.negations,
            lexicon: self.lexicon,
        })
    }
}
