//! Content packs: the data that turns the generic engine into the claim bot.
//!
//! A pack is one YAML document per language with the top-level sections
//! `intents`, `entities`, `states`, `rules`, `questions` and `templates`, plus a
//! few scalar settings. [`ContentPack::validate`] rejects packs that would
//! break an invariant at runtime; the service refuses to start with one.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::claims;
use crate::engine::{Router, DONE_STATE};
use crate::nlu::{self, DamageType, EntityType};
use crate::responder::{self, Formality, Polarity};
use crate::Language;

pub const DEFAULT_FALLBACK_THRESHOLD: f64 = 0.5;

const SHIPPED_DE: &str = include_str!("../packs/de.yaml");
const SHIPPED_EN: &str = include_str!("../packs/en.yaml");

#[derive(Debug, Error)]
pub enum PackError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse content pack {origin}: {message}")]
    Parse { origin: String, message: String },
    #[error("content pack {language} is invalid: {}", .violations.join("; "))]
    Invalid { language: String, violations: Vec<String> },
    #[error("no content pack for language {0}")]
    MissingLanguage(Language),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContentPack {
    pub language: Language,
    /// Shown in the greeting when non-empty. Ships empty.
    #[serde(default)]
    pub persona_name: String,
    #[serde(default = "default_threshold")]
    pub fallback_threshold: f64,
    #[serde(default)]
    pub stopwords: Vec<String>,
    pub affirmation_intents: Vec<String>,
    pub negation_intents: Vec<String>,
    pub intents: Vec<IntentSpec>,
    pub entities: EntitySpec,
    pub states: Vec<StateSpec>,
    pub rules: RuleTable,
    pub questions: Vec<QuestionSpec>,
    pub templates: Vec<TemplateSpec>,
}

fn default_threshold() -> f64 {
    DEFAULT_FALLBACK_THRESHOLD
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntentSpec {
    pub name: String,
    pub patterns: Vec<String>,
    #[serde(default)]
    pub parameters: Vec<ParameterSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParameterSpec {
    pub name: String,
    pub entity_type: EntityType,
    #[serde(default)]
    pub required: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EntitySpec {
    pub damage_types: BTreeMap<DamageType, DamageTypeEntry>,
    pub phone_models: Vec<PhoneModelEntry>,
    pub emoji_sentiment: EmojiLexicon,
    #[serde(default)]
    pub name_patterns: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DamageTypeEntry {
    pub label: String,
    pub synonyms: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhoneModelEntry {
    pub id: String,
    pub name: String,
    pub family: String,
    #[serde(default)]
    pub aliases: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmojiLexicon {
    #[serde(default)]
    pub positive: Vec<String>,
    #[serde(default)]
    pub neutral: Vec<String>,
    #[serde(default)]
    pub negative: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateSpec {
    pub name: String,
    #[serde(default)]
    pub priority: i32,
    #[serde(default)]
    pub lifetime: Option<u32>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuleTable {
    #[serde(default)]
    pub stateless: Vec<RuleSpec>,
    #[serde(default)]
    pub states: BTreeMap<String, Vec<RuleSpec>>,
    #[serde(default)]
    pub fallback: Vec<RuleSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuleSpec {
    pub handler: HandlerSpec,
    pub callback: String,
    #[serde(default)]
    pub emits: Vec<EmitSpec>,
    /// Template key for callbacks that answer with a fixed response.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum HandlerSpec {
    Intent {
        intent: String,
        #[serde(default)]
        required_parameters: Vec<String>,
    },
    Affirmation,
    Negation,
    Media,
    EmojiSentiment {
        polarity: Polarity,
    },
    Regex {
        pattern: String,
        /// When set, the rule only matches users whose formality differs.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        target: Option<Formality>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmitSpec {
    pub state: String,
    #[serde(default)]
    pub lifetime: Option<u32>,
    #[serde(default)]
    pub priority: Option<i32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuestionSpec {
    pub id: String,
    pub slot: String,
    pub prompt_key: String,
    pub entity_type: EntityType,
    #[serde(default)]
    pub optional: bool,
    pub help_key: String,
    pub example_key: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clarification_choices: Option<Vec<ChoiceSpec>>,
    /// The question also invites a photo upload.
    #[serde(default)]
    pub accepts_media: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChoiceSpec {
    pub choice_id: String,
    pub label: String,
    pub canonical_value: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplateSpec {
    pub key: String,
    /// Placeholders the caller must supply.
    #[serde(default)]
    pub params: Vec<String>,
    /// Placeholders that collapse away when absent.
    #[serde(default)]
    pub optional_params: Vec<String>,
    pub variants: Variants,
    /// Softer alternatives used while the user's mood is negative.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub negative_mood: Option<Variants>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variants {
    pub formal: Vec<String>,
    pub informal: Vec<String>,
}

impl Variants {
    pub fn get(&self, formality: Formality) -> &[String] {
        match formality {
            Formality::Formal => &self.formal,
            Formality::Informal => &self.informal,
        }
    }

    fn all(&self) -> impl Iterator<Item = &String> {
        self.formal.iter().chain(self.informal.iter())
    }
}

impl ContentPack {
    pub fn from_yaml(text: &str, origin: &str) -> Result<Self, PackError> {
        serde_yaml::from_str(text).map_err(|e| PackError::Parse {
            origin: origin.to_string(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, PackError> {
        let text = fs::read_to_string(path).map_err(|source| PackError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_yaml(&text, &path.display().to_string())
    }

    /// The pack compiled into the binary for `language`.
    pub fn shipped(language: Language) -> Self {
        let (text, origin) = match language {
            Language::De => (SHIPPED_DE, "packs/de.yaml"),
            Language::En => (SHIPPED_EN, "packs/en.yaml"),
        };
        Self::from_yaml(text, origin).expect("shipped content pack parses")
    }

    pub fn template(&self, key: &str) -> Option<&TemplateSpec> {
        self.templates.iter().find(|t| t.key == key)
    }

    pub fn state(&self, name: &str) -> Option<&StateSpec> {
        self.states.iter().find(|s| s.name == name)
    }

    pub fn intent(&self, name: &str) -> Option<&IntentSpec> {
        self.intents.iter().find(|i| i.name == name)
    }

    /// Checks every load-time invariant. Returns all violations at once.
    pub fn validate(&self) -> Result<(), PackError> {
        let violations = self.violations();
        if violations.is_empty() {
            Ok(())
        } else {
            Err(PackError::Invalid {
                language: self.language.to_string(),
                violations,
            })
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        self.check_settings(&mut v);
        self.check_intents(&mut v);
        self.check_entities(&mut v);
        self.check_templates(&mut v);
        self.check_router(&mut v);
        self.check_questions(&mut v);
        v
    }

    fn check_settings(&self, v: &mut Vec<String>) {
        if !(0.0..=1.0).contains(&self.fallback_threshold) {
            v.push(format!("fallback_threshold {} outside [0,1]", self.fallback_threshold));
        }
        for (family, list) in [
            ("affirmation_intents", &self.affirmation_intents),
            ("negation_intents", &self.negation_intents),
        ] {
            if list.is_empty() {
                v.push(format!("{family} is empty"));
            }
            for name in list {
                if self.intent(name).is_none() {
                    v.push(format!("{family} names undeclared intent '{name}'"));
                }
            }
        }
    }

    fn check_intents(&self, v: &mut Vec<String>) {
        let mut names = HashSet::new();
        for intent in &self.intents {
            if intent.name.trim().is_empty() {
                v.push("intent with empty name".into());
            }
            if nlu::RESERVED_INTENTS.contains(&intent.name.as_str()) {
                v.push(format!("intent '{}' uses a reserved name", intent.name));
            }
            if !names.insert(intent.name.as_str()) {
                v.push(format!("duplicate intent '{}'", intent.name));
            }
            if intent.patterns.is_empty() {
                v.push(format!("intent '{}' has no patterns", intent.name));
            }
            let mut params = HashSet::new();
            for p in &intent.parameters {
                if !params.insert(p.name.as_str()) {
                    v.push(format!(
                        "intent '{}' declares parameter '{}' twice",
                        intent.name, p.name
                    ));
                }
            }
            for pattern in &intent.patterns {
                if nlu::pattern_tokens(pattern).is_empty() {
                    v.push(format!("intent '{}' has an empty pattern", intent.name));
                }
                for ph in nlu::pattern_placeholders(pattern) {
                    if !params.contains(ph.as_str()) {
                        v.push(format!(
                            "intent '{}' pattern '{}' uses undeclared parameter '{}'",
                            intent.name, pattern, ph
                        ));
                    }
                }
            }
        }
    }

    fn check_entities(&self, v: &mut Vec<String>) {
        for dt in DamageType::ALL {
            match self.entities.damage_types.get(&dt) {
                None => v.push(format!("damage type '{}' has no entry", dt.as_str())),
                Some(entry) if entry.synonyms.is_empty() => {
                    v.push(format!("damage type '{}' has no synonyms", dt.as_str()))
                }
                _ => {}
            }
        }
        let mut ids = HashSet::new();
        for model in &self.entities.phone_models {
            if !ids.insert(model.id.as_str()) {
                v.push(format!("duplicate phone model id '{}'", model.id));
            }
            if model.name.trim().is_empty() || model.family.trim().is_empty() {
                v.push(format!("phone model '{}' needs a name and a family", model.id));
            }
        }
        for pattern in &self.entities.name_patterns {
            match Regex::new(pattern) {
                Ok(re) if re.captures_len() < 2 => v.push(format!("name pattern '{pattern}' has no capture group")),
                Ok(_) => {}
                Err(e) => v.push(format!("name pattern '{pattern}' does not compile: {e}")),
            }
        }
    }

    fn check_templates(&self, v: &mut Vec<String>) {
        let mut keys = HashSet::new();
        for t in &self.templates {
            if !keys.insert(t.key.as_str()) {
                v.push(format!("duplicate template '{}'", t.key));
            }
            if t.variants.formal.is_empty() {
                v.push(format!("template '{}' lacks a formal variant", t.key));
            }
            if t.variants.informal.is_empty() {
                v.push(format!("template '{}' lacks an informal variant", t.key));
            }
            let declared: BTreeSet<&str> = t
                .params
                .iter()
                .chain(t.optional_params.iter())
                .map(String::as_str)
                .collect();
            let mood = t.negative_mood.iter().flat_map(|m| m.all());
            for text in t.variants.all().chain(mood) {
                match responder::placeholders(text) {
                    Ok(found) => {
                        for ph in found {
                            if !declared.contains(ph.as_str()) {
                                v.push(format!("template '{}' uses undocumented placeholder '{}'", t.key, ph));
                            }
                        }
                    }
                    Err(e) => v.push(format!("template '{}': {e}", t.key)),
                }
            }
            if declared.contains(responder::FIRST_NAME) && !responder::NAME_TEMPLATE_KEYS.contains(&t.key.as_str()) {
                v.push(format!("template '{}' may not address the user by first name", t.key));
            }
        }
        for key in claims::REQUIRED_TEMPLATES {
            if !keys.contains(key) {
                v.push(format!("missing template '{key}'"));
            }
        }
    }

    fn check_router(&self, v: &mut Vec<String>) {
        let mut names = HashSet::new();
        for s in &self.states {
            if !names.insert(s.name.as_str()) {
                v.push(format!("duplicate state '{}'", s.name));
            }
            if s.lifetime == Some(0) {
                v.push(format!("state '{}' has lifetime 0", s.name));
            }
            if s.name == DONE_STATE {
                v.push(format!("state name '{DONE_STATE}' is reserved"));
            }
        }
        for state in claims::REQUIRED_STATES {
            if !names.contains(state) {
                v.push(format!("missing state '{state}'"));
            } else if !self.rules.states.contains_key(*state) {
                v.push(format!("state '{state}' has no rules"));
            }
        }
        let all_rules = self
            .rules
            .stateless
            .iter()
            .chain(self.rules.states.values().flatten())
            .chain(self.rules.fallback.iter());
        for rule in all_rules {
            if !claims::CALLBACK_IDS.contains(&rule.callback.as_str()) {
                v.push(format!("unknown callback '{}'", rule.callback));
            }
            if claims::TEMPLATE_CALLBACKS.contains(&rule.callback.as_str()) {
                match &rule.template {
                    None => v.push(format!("callback '{}' needs a template", rule.callback)),
                    Some(key) if self.template(key).is_none() => {
                        v.push(format!("rule references unknown template '{key}'"))
                    }
                    _ => {}
                }
            }
            if let HandlerSpec::Intent {
                intent,
                required_parameters,
            } = &rule.handler
            {
                match self.intent(intent) {
                    Some(def) => {
                        for p in required_parameters {
                            if !def.parameters.iter().any(|d| &d.name == p) {
                                v.push(format!("handler requires parameter '{p}' not declared by '{intent}'"));
                            }
                        }
                    }
                    None if nlu::RESERVED_INTENTS.contains(&intent.as_str()) => {}
                    None => v.push(format!("handler references unknown intent '{intent}'")),
                }
            }
        }
        if let Err(e) = Router::from_pack(self) {
            v.push(e.to_string());
        }
    }

    fn check_questions(&self, v: &mut Vec<String>) {
        if self.questions.is_empty() {
            v.push("questionnaire is empty".into());
        }
        let mut slots = HashSet::new();
        let mut ids = HashSet::new();
        for q in &self.questions {
            if !slots.insert(q.slot.as_str()) {
                v.push(format!("duplicate question slot '{}'", q.slot));
            }
            if !ids.insert(q.id.as_str()) {
                v.push(format!("duplicate question id '{}'", q.id));
            }
            for key in [&q.prompt_key, &q.help_key, &q.example_key] {
                if self.template(key).is_none() {
                    v.push(format!("question '{}' references unknown template '{}'", q.id, key));
                }
            }
            let needs_choices = matches!(q.entity_type, EntityType::PhoneModel | EntityType::Choice);
            match &q.clarification_choices {
                Some(choices) => {
                    if choices.len() < 2 {
                        v.push(format!("question '{}' needs at least two choices", q.id));
                    }
                    let mut seen = HashSet::new();
                    for c in choices {
                        if !seen.insert(c.choice_id.as_str()) {
                            v.push(format!("question '{}' repeats choice '{}'", q.id, c.choice_id));
                        }
                        if q.entity_type == EntityType::PhoneModel
                            && !self.entities.phone_models.iter().any(|m| m.name == c.canonical_value)
                        {
                            v.push(format!(
                                "choice '{}' of question '{}' is not a catalog model",
                                c.choice_id, q.id
                            ));
                        }
                    }
                }
                None if needs_choices => v.push(format!("question '{}' needs clarification_choices", q.id)),
                None => {}
            }
        }
    }
}

/// All languages the service can talk, validated together.
#[derive(Debug, Clone)]
pub struct PackSet {
    packs: BTreeMap<Language, ContentPack>,
}

impl PackSet {
    pub fn new(packs: impl IntoIterator<Item = ContentPack>) -> Result<Self, PackError> {
        let packs: BTreeMap<Language, ContentPack> = packs.into_iter().map(|p| (p.language, p)).collect();
        let set = PackSet { packs };
        set.validate()?;
        Ok(set)
    }

    pub fn shipped() -> Self {
        PackSet::new([ContentPack::shipped(Language::De), ContentPack::shipped(Language::En)])
            .expect("shipped content packs validate")
    }

    /// Loads a single pack file, or every `*.yaml` file of a directory.
    pub fn load(path: &Path) -> Result<Self, PackError> {
        let mut files = Vec::new();
        if path.is_dir() {
            let entries = fs::read_dir(path).map_err(|source| PackError::Io {
                path: path.to_path_buf(),
                source,
            })?;
            for entry in entries.flatten() {
                let p = entry.path();
                if matches!(p.extension().and_then(|e| e.to_str()), Some("yaml" | "yml")) {
                    files.push(p);
                }
            }
            files.sort();
        } else {
            files.push(path.to_path_buf());
        }
        let packs = files
            .iter()
            .map(|f| ContentPack::load(f))
            .collect::<Result<Vec<_>, _>>()?;
        PackSet::new(packs)
    }

    pub fn validate(&self) -> Result<(), PackError> {
        for pack in self.packs.values() {
            pack.validate()?;
        }
        // every template key must exist in every language
        let mut all_keys: BTreeSet<&str> = BTreeSet::new();
        for pack in self.packs.values() {
            all_keys.extend(pack.templates.iter().map(|t| t.key.as_str()));
        }
        for pack in self.packs.values() {
            let missing: Vec<String> = all_keys
                .iter()
                .filter(|k| pack.template(k).is_none())
                .map(|k| format!("missing template '{k}' (present in another language)"))
                .collect();
            if !missing.is_empty() {
                return Err(PackError::Invalid {
                    language: pack.language.to_string(),
                    violations: missing,
                });
            }
        }
        Ok(())
    }

    pub fn get(&self, language: Language) -> Result<&ContentPack, PackError> {
        self.packs.get(&language).ok_or(PackError::MissingLanguage(language))
    }

    pub fn languages(&self) -> impl Iterator<Item = Language> + '_ {
        self.packs.keys().copied()
    }

    pub fn packs(&self) -> impl Iterator<Item = &ContentPack> {
        self.packs.values()
    }

    /// Applies a threshold override to every pack.
    pub fn with_threshold(mut self, threshold: f64) -> Result<Self, PackError> {
        for pack in self.packs.values_mut() {
            pack.fallback_threshold = threshold;
        }
        self.validate()?;
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_packs_validate() {
        for lang in [Language::De, Language::En] {
            let pack = ContentPack::shipped(lang);
            assert_eq!(pack.violations(), Vec::<String>::new(), "{lang}");
        }
        PackSet::shipped();
    }

    #[test]
    fn missing_formal_variant_is_named() {
        let mut pack = ContentPack::shipped(Language::De);
        let t = pack.templates.iter_mut().find(|t| t.key == "greet").unwrap();
        t.variants.formal.clear();
        let err = pack.validate().unwrap_err().to_string();
        assert!(err.contains("template 'greet' lacks a formal variant"), "{err}");
    }

    #[test]
    fn undocumented_placeholder_is_rejected() {
        let mut pack = ContentPack::shipped(Language::En);
        let t = pack.templates.iter_mut().find(|t| t.key == "intro").unwrap();
        t.variants.formal[0].push_str(" {mystery}");
        assert!(pack
            .violations()
            .iter()
            .any(|v| v.contains("undocumented placeholder 'mystery'")));
    }

    #[test]
    fn first_name_is_limited_to_greeting_and_thanks() {
        let mut pack = ContentPack::shipped(Language::En);
        let t = pack.templates.iter_mut().find(|t| t.key == "ask_imei").unwrap();
        t.optional_params.push("first_name".into());
        assert!(pack
            .violations()
            .iter()
            .any(|v| v.contains("'ask_imei' may not address the user by first name")));
    }

    #[test]
    fn unknown_callback_fails_fast() {
        let mut pack = ContentPack::shipped(Language::En);
        pack.rules.fallback[0].callback = "does_not_exist".into();
        assert!(pack
            .violations()
            .iter()
            .any(|v| v.contains("unknown callback 'does_not_exist'")));
    }

    #[test]
    fn emitted_state_must_have_rules() {
        let mut pack = ContentPack::shipped(Language::En);
        pack.rules.fallback[0].emits.push(EmitSpec {
            state: "NOWHERE".into(),
            lifetime: None,
            priority: None,
        });
        assert!(pack.violations().iter().any(|v| v.contains("NOWHERE")));
    }

    #[test]
    fn phone_model_question_needs_choices() {
        let mut pack = ContentPack::shipped(Language::En);
        let q = pack.questions.iter_mut().find(|q| q.slot == "phone_model").unwrap();
        q.clarification_choices = None;
        assert!(pack
            .violations()
            .iter()
            .any(|v| v.contains("needs clarification_choices")));
    }

    #[test]
    fn duplicate_slots_are_rejected() {
        let mut pack = ContentPack::shipped(Language::En);
        let first = pack.questions[0].clone();
        pack.questions.push(QuestionSpec {
            id: "again".into(),
            ..first
        });
        assert!(pack.violations().iter().any(|v| v.contains("duplicate question slot")));
    }

    #[test]
    fn cross_language_key_sets_must_agree() {
        let mut en = ContentPack::shipped(Language::En);
        let mut extra = en.templates[0].clone();
        extra.key = "only_in_english".into();
        en.templates.push(extra);
        let err = PackSet::new([ContentPack::shipped(Language::De), en]).unwrap_err();
        assert!(err.to_string().contains("only_in_english"), "{err}");
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let text = format!("{}\nsurprise: 1\n", SHIPPED_EN);
        assert!(ContentPack::from_yaml(&text, "test").is_err());
    }
}
