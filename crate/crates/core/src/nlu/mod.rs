//! Rule-based natural language understanding.
//!
//! Utterances are tokenized (lowercase, split on anything that is not a letter
//! or digit, no stemming) and scored against every intent of the content
//! pack. A pattern is a phrase whose words may include `{parameter}`
//! placeholders; a placeholder counts as present when an entity of the
//! parameter's type was extracted from the utterance.

mod emoji;
mod entities;
mod imei;

use std::collections::{BTreeMap, BTreeSet, HashSet};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::messaging::MediaKind;
use crate::pack::{ContentPack, IntentSpec};
use crate::Language;

pub use emoji::{extract_emojis, is_emoji};
pub use entities::{extract_datetime, EntityExtractor, ModelLookup};
pub use imei::{luhn_valid, validate_imei, Imei, ImeiCheck, ImeiReason};

/// Intent reported when no intent scores at or above the threshold.
pub const FALLBACK_INTENT: &str = "fallback";
/// Intent of a media payload.
pub const MEDIA_INTENT: &str = "media";
/// Intent of a button press; carries the [`CHOICE_PARAM`] parameter.
pub const CHOICE_INTENT: &str = "select_choice";
pub const CHOICE_PARAM: &str = "choice";

/// Intents the engine produces itself; packs may not declare them.
pub const RESERVED_INTENTS: &[&str] = &[FALLBACK_INTENT, MEDIA_INTENT, CHOICE_INTENT];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum NluError {
    #[error("content pack has no intents")]
    ContentPackMissing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityType {
    Datetime,
    DamageType,
    PhoneModel,
    PhoneFamily,
    Imei,
    PhoneNumber,
    PersonName,
    Choice,
    Text,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DamageType {
    DisplayDamage,
    WaterDamage,
    Theft,
    Other,
}

impl DamageType {
    pub const ALL: [DamageType; 4] = [
        DamageType::DisplayDamage,
        DamageType::WaterDamage,
        DamageType::Theft,
        DamageType::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DamageType::DisplayDamage => "display_damage",
            DamageType::WaterDamage => "water_damage",
            DamageType::Theft => "theft",
            DamageType::Other => "other",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    Day,
    Hour,
    Minute,
}

/// A typed value extracted from an utterance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", content = "value", rename_all = "snake_case")]
pub enum EntityValue {
    Datetime {
        at: DateTime<Utc>,
        granularity: Granularity,
    },
    DamageType(DamageType),
    PhoneModel(String),
    Imei(Imei),
    PhoneNumber(String),
    Text(String),
}

impl EntityValue {
    /// Canonical plain rendering (dates as `YYYY-MM-DD` at day granularity).
    pub fn canonical(&self) -> String {
        match self {
            EntityValue::Datetime { at, granularity } => match granularity {
                Granularity::Day => at.format("%Y-%m-%d").to_string(),
                Granularity::Hour => at.format("%Y-%m-%d %H:00").to_string(),
                Granularity::Minute => at.format("%Y-%m-%d %H:%M").to_string(),
            },
            EntityValue::DamageType(d) => d.as_str().to_string(),
            EntityValue::PhoneModel(s) | EntityValue::PhoneNumber(s) | EntityValue::Text(s) => s.clone(),
            EntityValue::Imei(imei) => imei.as_str().to_string(),
        }
    }
}

/// The interpretation of one user utterance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MessageUnderstanding {
    pub intent: String,
    pub confidence: f64,
    pub parameters: BTreeMap<String, EntityValue>,
    pub raw_text: String,
    pub language: Language,
    #[serde(default)]
    pub media_kind: Option<MediaKind>,
    #[serde(default)]
    pub media_uri: Option<String>,
    pub emojis: Vec<char>,
    /// The reference time relative dates were resolved against.
    pub received_at: DateTime<Utc>,
}

impl MessageUnderstanding {
    pub fn is_fallback(&self) -> bool {
        self.intent == FALLBACK_INTENT
    }

    pub fn parameter(&self, name: &str) -> Option<&EntityValue> {
        self.parameters.get(name)
    }
}

/// Lowercases and splits on every character that is neither a letter nor a
/// digit. Umlauts and other non-ASCII letters are kept.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PatternToken {
    Word(String),
    Placeholder(String),
}

pub fn pattern_tokens(pattern: &str) -> Vec<PatternToken> {
    let mut out = Vec::new();
    for piece in pattern.split_whitespace() {
        if let Some(name) = piece.strip_prefix('{').and_then(|p| p.strip_suffix('}')) {
            out.push(PatternToken::Placeholder(name.to_string()));
        } else {
            out.extend(tokenize(piece).into_iter().map(PatternToken::Word));
        }
    }
    out
}

pub fn pattern_placeholders(pattern: &str) -> Vec<String> {
    pattern_tokens(pattern)
        .into_iter()
        .filter_map(|t| match t {
            PatternToken::Placeholder(name) => Some(name),
            PatternToken::Word(_) => None,
        })
        .collect()
}

fn contains_run(haystack: &[String], needle: &[&str]) -> bool {
    !needle.is_empty()
        && haystack.len() >= needle.len()
        && haystack
            .windows(needle.len())
            .any(|w| w.iter().zip(needle).all(|(a, b)| a == b))
}

/// Scores one pattern: 1.0 on an exact phrase match, otherwise the fraction
/// of the pattern's content tokens present anywhere in the utterance.
pub fn score_pattern(
    tokens: &[String],
    pattern: &str,
    stopwords: &HashSet<String>,
    satisfied: &dyn Fn(&str) -> bool,
) -> f64 {
    let parts = pattern_tokens(pattern);
    let words: Vec<&str> = parts
        .iter()
        .filter_map(|t| match t {
            PatternToken::Word(w) => Some(w.as_str()),
            PatternToken::Placeholder(_) => None,
        })
        .collect();
    let slots: Vec<&str> = parts
        .iter()
        .filter_map(|t| match t {
            PatternToken::Placeholder(p) => Some(p.as_str()),
            PatternToken::Word(_) => None,
        })
        .collect();
    if slots.is_empty() && contains_run(tokens, &words) {
        return 1.0;
    }
    let mut content: Vec<&str> = words.iter().copied().filter(|w| !stopwords.contains(*w)).collect();
    if content.is_empty() {
        content = words;
    }
    let total = content.len() + slots.len();
    if total == 0 {
        return 0.0;
    }
    let present_words: HashSet<&str> = tokens.iter().map(String::as_str).collect();
    let present =
        content.iter().filter(|w| present_words.contains(*w)).count() + slots.iter().filter(|s| satisfied(s)).count();
    present as f64 / total as f64
}

/// Scores an intent as its best pattern. An intent whose required
/// parameters were not extracted scores zero.
pub fn score_intent(
    tokens: &[String],
    definition: &IntentSpec,
    stopwords: &HashSet<String>,
    extracted: &BTreeSet<EntityType>,
) -> f64 {
    let param_type = |name: &str| {
        definition
            .parameters
            .iter()
            .find(|p| p.name == name)
            .map(|p| p.entity_type)
    };
    let satisfied = |name: &str| param_type(name).is_some_and(|ty| extracted.contains(&ty));
    if definition
        .parameters
        .iter()
        .any(|p| p.required && !extracted.contains(&p.entity_type))
    {
        return 0.0;
    }
    definition
        .patterns
        .iter()
        .map(|p| score_pattern(tokens, p, stopwords, &satisfied))
        .fold(0.0, f64::max)
}

/// Understanding for one content pack (and therefore one language).
#[derive(Debug, Clone)]
pub struct Nlu {
    language: Language,
    threshold: f64,
    stopwords: HashSet<String>,
    intents: Vec<IntentSpec>,
    extractor: EntityExtractor,
}

impl Nlu {
    pub fn from_pack(pack: &ContentPack) -> Result<Self, NluError> {
        if pack.intents.is_empty() {
            return Err(NluError::ContentPackMissing);
        }
        Ok(Nlu {
            language: pack.language,
            threshold: pack.fallback_threshold,
            stopwords: pack.stopwords.iter().map(|s| s.to_lowercase()).collect(),
            intents: pack.intents.clone(),
            extractor: EntityExtractor::from_pack(pack),
        })
    }

    pub fn language(&self) -> Language {
        self.language
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn set_threshold(&mut self, threshold: f64) {
        self.threshold = threshold;
    }

    pub fn extractor(&self) -> &EntityExtractor {
        &self.extractor
    }

    /// Classifies `text` and extracts the matched intent's parameters.
    /// Never fails on odd input: anything unrecognized becomes the fallback
    /// intent with the best score as its confidence.
    pub fn understand(&self, text: &str, reference_time: DateTime<Utc>) -> MessageUnderstanding {
        let emojis = extract_emojis(text);
        let tokens = tokenize(text);
        let entities = self.extractor.extract_all(text, &tokens, reference_time);
        let extracted: BTreeSet<EntityType> = entities.keys().copied().collect();

        let mut best: Option<(&IntentSpec, f64)> = None;
        for intent in &self.intents {
            let score = score_intent(&tokens, intent, &self.stopwords, &extracted);
            // strictly greater: the earliest declared intent wins ties
            if best.is_none_or(|(_, s)| score > s) {
                best = Some((intent, score));
            }
        }
        let (intent, score) = best.expect("at least one intent is loaded");

        let mut understanding = MessageUnderstanding {
            intent: FALLBACK_INTENT.to_string(),
            confidence: score,
            parameters: BTreeMap::new(),
            raw_text: text.to_string(),
            language: self.language,
            media_kind: None,
            media_uri: None,
            emojis,
            received_at: reference_time,
        };
        if score >= self.threshold && score > 0.0 {
            understanding.intent = intent.name.clone();
            for param in &intent.parameters {
                if let Some(value) = entities.get(&param.entity_type) {
                    understanding.parameters.insert(param.name.clone(), value.clone());
                }
            }
        }
        understanding
    }

    /// Understanding of a button press.
    pub fn understand_choice(&self, choice_id: &str, reference_time: DateTime<Utc>) -> MessageUnderstanding {
        let mut parameters = BTreeMap::new();
        parameters.insert(CHOICE_PARAM.to_string(), EntityValue::Text(choice_id.to_string()));
        MessageUnderstanding {
            intent: CHOICE_INTENT.to_string(),
            confidence: 1.0,
            parameters,
            raw_text: choice_id.to_string(),
            language: self.language,
            media_kind: None,
            media_uri: None,
            emojis: Vec::new(),
            received_at: reference_time,
        }
    }

    /// Understanding of a media upload. Media are acknowledged, not analysed.
    pub fn understand_media(&self, kind: MediaKind, uri: &str, reference_time: DateTime<Utc>) -> MessageUnderstanding {
        MessageUnderstanding {
            intent: MEDIA_INTENT.to_string(),
            confidence: 1.0,
            parameters: BTreeMap::new(),
            raw_text: String::new(),
            language: self.language,
            media_kind: Some(kind),
            media_uri: Some(uri.to_string()),
            emojis: Vec::new(),
            received_at: reference_time,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;
    use proptest::prelude::*;

    fn reference() -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2024, 5, 10, 9, 0, 0).unwrap()
    }

    fn en() -> Nlu {
        Nlu::from_pack(&ContentPack::shipped(Language::En)).unwrap()
    }

    fn de() -> Nlu {
        Nlu::from_pack(&ContentPack::shipped(Language::De)).unwrap()
    }

    fn toks(s: &str) -> Vec<String> {
        tokenize(s)
    }

    #[test]
    fn tokenizer_splits_and_lowercases() {
        assert_eq!(toks("Mein Display, ist KAPUTT!"), ["mein", "display", "ist", "kaputt"]);
        assert_eq!(toks("Größe ÄÖÜ"), ["größe", "äöü"]);
        assert_eq!(toks("that's it 👍"), ["that", "s", "it"]);
    }

    #[test]
    fn pattern_scoring_examples() {
        let none = HashSet::new();
        let never = |_: &str| false;
        assert_eq!(score_pattern(&toks("okay"), "okay", &none, &never), 1.0);
        // 3 of 3 content tokens present
        assert_eq!(
            score_pattern(
                &toks("my phone screen broke yesterday"),
                "phone screen broke",
                &none,
                &never
            ),
            1.0
        );
        // 1 of 3 content tokens present
        let s = score_pattern(&toks("my phone exists"), "phone screen broke", &none, &never);
        assert!((s - 1.0 / 3.0).abs() < 1e-12, "{s}");
    }

    #[test]
    fn scoring_is_order_insensitive_and_ignores_stopwords() {
        let stop: HashSet<String> = ["the".to_string()].into();
        let never = |_: &str| false;
        assert_eq!(
            score_pattern(&toks("broke screen"), "the screen broke", &stop, &never),
            1.0
        );
        assert_eq!(score_pattern(&toks("screen"), "the screen broke", &stop, &never), 0.5);
    }

    #[test]
    fn placeholders_count_when_entity_present() {
        let none = HashSet::new();
        let yes = |p: &str| p == "imei";
        assert_eq!(score_pattern(&toks("it is 1"), "{imei}", &none, &yes), 1.0);
        assert_eq!(
            score_pattern(&toks("my imei"), "my imei {imei}", &none, &|_| false),
            2.0 / 3.0
        );
    }

    #[test]
    fn broken_display_example() {
        let u = en().understand("the display of my smartphone broke", reference());
        assert_eq!(u.intent, "phone_broken");
        assert_eq!(
            u.parameters.get("damage_type"),
            Some(&EntityValue::DamageType(DamageType::DisplayDamage))
        );
        assert!(!u.parameters.contains_key("phone_type"));
        assert_eq!(u.parameters.len(), 1);
    }

    #[test]
    fn affirmations_are_confident() {
        let nlu = en();
        for (text, intent) in [
            ("yes", "affirm"),
            ("okay", "ok"),
            ("good", "good"),
            ("correct", "correct"),
        ] {
            let u = nlu.understand(text, reference());
            assert_eq!(u.intent, intent, "{text}");
            assert!(u.confidence >= 0.9);
        }
        let nlu = de();
        for text in ["ja", "okay", "gut", "richtig", "stimmt"] {
            let u = nlu.understand(text, reference());
            assert!(
                ["affirm", "ok", "good", "correct"].contains(&u.intent.as_str()),
                "{text} -> {}",
                u.intent
            );
        }
    }

    #[test]
    fn negation_beats_embedded_affirmation() {
        assert_eq!(en().understand("that is not correct", reference()).intent, "deny");
        assert_eq!(de().understand("Das stimmt nicht", reference()).intent, "deny");
    }

    #[test]
    fn gibberish_is_fallback() {
        let u = en().understand("qwzx blorp", reference());
        assert_eq!(u.intent, FALLBACK_INTENT);
        assert_eq!(u.confidence, 0.0);
        assert!(u.parameters.is_empty());
    }

    #[test]
    fn emojis_are_kept_on_any_intent() {
        let u = en().understand("great 👍", reference());
        assert_eq!(u.emojis, vec!['👍']);
        let u = en().understand("😡😡", reference());
        assert_eq!(u.intent, FALLBACK_INTENT);
        assert_eq!(u.emojis, vec!['😡', '😡']);
    }

    #[test]
    fn answers_carry_typed_parameters() {
        let nlu = en();
        let u = nlu.understand("yesterday", reference());
        assert_eq!(u.intent, "inform");
        assert_eq!(u.parameters["damage_time"].canonical(), "2024-05-09");
        let u = nlu.understand("my number is 0171 2345678", reference());
        assert_eq!(
            u.parameters["phone_number"],
            EntityValue::PhoneNumber("01712345678".into())
        );
        let u = nlu.understand("490154203237518", reference());
        assert_eq!(u.parameters["imei"].canonical(), "490154203237518");
    }

    #[test]
    fn german_claim_trigger() {
        let u = de().understand("Mein Handy ist kaputt, das Display ist gebrochen", reference());
        assert_eq!(u.intent, "phone_broken");
        assert_eq!(
            u.parameters.get("damage_type"),
            Some(&EntityValue::DamageType(DamageType::DisplayDamage))
        );
    }

    #[test]
    fn empty_pack_is_reported() {
        let mut pack = ContentPack::shipped(Language::En);
        pack.intents.clear();
        assert_eq!(Nlu::from_pack(&pack).unwrap_err(), NluError::ContentPackMissing);
    }

    #[test]
    fn choice_and_media_understandings() {
        let nlu = en();
        let u = nlu.understand_choice("iphone_8", reference());
        assert_eq!(u.intent, CHOICE_INTENT);
        assert_eq!(u.parameters[CHOICE_PARAM], EntityValue::Text("iphone_8".into()));
        let u = nlu.understand_media(MediaKind::Image, "x.jpg", reference());
        assert_eq!(u.media_kind, Some(MediaKind::Image));
        assert!(!u.is_fallback());
    }

    proptest! {
        #[test]
        fn understand_is_total_and_deterministic(text in "\\PC{0,60}") {
            let nlu = en();
            let a = nlu.understand(&text, reference());
            let b = nlu.understand(&text, reference());
            prop_assert_eq!(&a, &b);
            prop_assert!(!a.intent.is_empty());
            prop_assert!((0.0..=1.0).contains(&a.confidence));
            if !a.is_fallback() {
                let def = ContentPack::shipped(Language::En);
                let def = def.intent(&a.intent).unwrap();
                for name in a.parameters.keys() {
                    prop_assert!(def.parameters.iter().any(|p| &p.name == name));
                }
            }
        }

        #[test]
        fn raising_threshold_never_unfalls(text in "[a-z ]{0,30}|yes|no idea|my phone broke", lo in 0.0f64..1.0, delta in 0.0f64..1.0) {
            let pack = ContentPack::shipped(Language::En);
            let mut low = Nlu::from_pack(&pack).unwrap();
            low.set_threshold(lo);
            let mut high = low.clone();
            high.set_threshold((lo + delta).min(1.0));
            if low.understand(&text, reference()).is_fallback() {
                prop_assert!(high.understand(&text, reference()).is_fallback());
            }
        }
    }
}
