use std::collections::BTreeMap;
use std::sync::OnceLock;

use chrono::{DateTime, Duration, NaiveDate, TimeZone, Utc};
use regex::Regex;

use super::imei::{validate_imei, Imei, ImeiCheck};
use super::{tokenize, DamageType, EntityType, EntityValue, Granularity};
use crate::pack::{ContentPack, PhoneModelEntry};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ModelLookup {
    Unique(PhoneModelEntry),
    Ambiguous(Vec<PhoneModelEntry>),
    None,
}

#[derive(Debug, Clone)]
pub struct EntityExtractor {
    damage: Vec<(DamageType, Vec<Vec<String>>)>,
    models: Vec<(PhoneModelEntry, Vec<Vec<String>>)>,
    families: Vec<(String, Vec<String>)>,
    name_patterns: Vec<Regex>,
}

fn find_run(haystack: &[String], needle: &[String]) -> Option<usize> {
    if needle.is_empty() || haystack.len() < needle.len() {
        return None;
    }
    haystack.windows(needle.len()).position(|w| w == needle)
}

fn regex(cell: &'static OnceLock<Regex>, pattern: &str) -> &'static Regex {
    cell.get_or_init(|| Regex::new(pattern).expect("static pattern compiles"))
}

fn digit_groups(text: &str) -> impl Iterator<Item = regex::Match<'_>> {
    static RE: OnceLock<Regex> = OnceLock::new();
    regex(&RE, r"\+?\d+(?:[ \-/]\d+)*").find_iter(text)
}

fn looks_like_date(candidate: &str) -> bool {
    static RE: OnceLock<Regex> = OnceLock::new();
    regex(&RE, r"^\d{4}[-/]\d{1,2}[-/]\d{1,2}$|^\d{1,2}[-/]\d{1,2}[-/]\d{4}$").is_match(candidate)
}

fn midnight(date: NaiveDate) -> EntityValue {
    EntityValue::Datetime {
        at: Utc.from_utc_datetime(&date.and_hms_opt(0, 0, 0).expect("midnight exists")),
        granularity: Granularity::Day,
    }
}

/// Resolves an absolute or relative date against `reference`. Understands
/// ISO dates, day-first `D.M.YYYY`, and relative English and German phrases.
pub fn extract_datetime(text: &str, reference: DateTime<Utc>) -> Option<EntityValue> {
    static ISO: OnceLock<Regex> = OnceLock::new();
    static DMY: OnceLock<Regex> = OnceLock::new();
    static DAYS_AGO: OnceLock<Regex> = OnceLock::new();
    static WORDS: OnceLock<Regex> = OnceLock::new();

    if let Some(c) = regex(&ISO, r"\b(\d{4})-(\d{1,2})-(\d{1,2})\b").captures(text) {
        if let Some(d) = NaiveDate::from_ymd_opt(c[1].parse().ok()?, c[2].parse().ok()?, c[3].parse().ok()?) {
            return Some(midnight(d));
        }
    }
    if let Some(c) = regex(&DMY, r"\b(\d{1,2})\.(\d{1,2})\.(\d{4})\b").captures(text) {
        if let Some(d) = NaiveDate::from_ymd_opt(c[3].parse().ok()?, c[2].parse().ok()?, c[1].parse().ok()?) {
            return Some(midnight(d));
        }
    }
    let today = reference.date_naive();
    if let Some(c) = regex(
        &DAYS_AGO,
        r"(?i)\b(\d{1,4})\s+days?\s+ago\b|\bvor\s+(\d{1,4})\s+tag(?:en)?\b",
    )
    .captures(text)
    {
        let n: i64 = c.get(1).or_else(|| c.get(2))?.as_str().parse().ok()?;
        return today.checked_sub_signed(Duration::days(n)).map(midnight);
    }
    let w = regex(
        &WORDS,
        r"(?i)\b(day before yesterday|vorgestern|yesterday|gestern|today|heute)\b",
    );
    let offset = w.captures(text).map(|c| match c[1].to_lowercase().as_str() {
        "day before yesterday" | "vorgestern" => 2,
        "yesterday" | "gestern" => 1,
        _ => 0,
    })?;
    today.checked_sub_signed(Duration::days(offset)).map(midnight)
}

impl EntityExtractor {
    pub fn from_pack(pack: &ContentPack) -> Self {
        let damage = pack
            .entities
            .damage_types
            .iter()
            .map(|(dt, entry)| (*dt, entry.synonyms.iter().map(|s| tokenize(s)).collect()))
            .collect();
        let models = pack
            .entities
            .phone_models
            .iter()
            .map(|m| {
                let forms = std::iter::once(&m.name)
                    .chain(m.aliases.iter())
                    .map(|f| tokenize(f))
                    .filter(|f| !f.is_empty())
                    .collect();
                (m.clone(), forms)
            })
            .collect();
        let mut families: Vec<(String, Vec<String>)> = Vec::new();
        for m in &pack.entities.phone_models {
            if !families.iter().any(|(f, _)| f == &m.family) {
                families.push((m.family.clone(), tokenize(&m.family)));
            }
        }
        let name_patterns = pack
            .entities
            .name_patterns
            .iter()
            .filter_map(|p| Regex::new(p).ok())
            .collect();
        EntityExtractor {
            damage,
            models,
            families,
            name_patterns,
        }
    }

    /// Every entity found in the utterance, at most one per type.
    pub fn extract_all(
        &self,
        text: &str,
        tokens: &[String],
        reference: DateTime<Utc>,
    ) -> BTreeMap<EntityType, EntityValue> {
        let mut out = BTreeMap::new();
        if let Some(v) = extract_datetime(text, reference) {
            out.insert(EntityType::Datetime, v);
        }
        if let Some(d) = self.damage_type(tokens) {
            out.insert(EntityType::DamageType, EntityValue::DamageType(d));
        }
        if let ModelLookup::Unique(m) = self.lookup_tokens(tokens) {
            out.insert(EntityType::PhoneModel, EntityValue::PhoneModel(m.name));
        }
        if let Some(f) = self.family(tokens) {
            out.insert(EntityType::PhoneFamily, EntityValue::Text(f));
        }
        if let Some(i) = self.imei(text) {
            out.insert(EntityType::Imei, EntityValue::Imei(i));
        }
        if let Some(p) = self.phone_number(text) {
            out.insert(EntityType::PhoneNumber, EntityValue::PhoneNumber(p));
        }
        if let Some(n) = self.person_name(text) {
            out.insert(EntityType::PersonName, EntityValue::Text(n));
        }
        out
    }

    /// The damage type whose synonym occurs earliest in the utterance.
    pub fn damage_type(&self, tokens: &[String]) -> Option<DamageType> {
        self.damage
            .iter()
            .flat_map(|(dt, syns)| {
                syns.iter()
                    .filter_map(move |s| find_run(tokens, s).map(|pos| (pos, *dt)))
            })
            .min()
            .map(|(_, dt)| dt)
    }

    pub fn lookup_phone_model(&self, text: &str) -> ModelLookup {
        self.lookup_tokens(&tokenize(text))
    }

    fn lookup_tokens(&self, tokens: &[String]) -> ModelLookup {
        let mut best: Vec<(&PhoneModelEntry, usize)> = Vec::new();
        for (model, forms) in &self.models {
            let len = forms
                .iter()
                .filter(|f| find_run(tokens, f).is_some())
                .map(Vec::len)
                .max();
            if let Some(len) = len {
                best.push((model, len));
            }
        }
        if let Some(longest) = best.iter().map(|(_, l)| *l).max() {
            let top: Vec<PhoneModelEntry> = best
                .into_iter()
                .filter(|(_, l)| *l == longest)
                .map(|(m, _)| m.clone())
                .collect();
            return if top.len() == 1 {
                ModelLookup::Unique(top.into_iter().next().expect("one element"))
            } else {
                ModelLookup::Ambiguous(top)
            };
        }
        match self.family(tokens) {
            Some(family) => {
                let mut members: Vec<PhoneModelEntry> = self
                    .models
                    .iter()
                    .filter(|(m, _)| m.family == family)
                    .map(|(m, _)| m.clone())
                    .collect();
                if members.len() == 1 {
                    ModelLookup::Unique(members.remove(0))
                } else {
                    ModelLookup::Ambiguous(members)
                }
            }
            None => ModelLookup::None,
        }
    }

    fn family(&self, tokens: &[String]) -> Option<String> {
        self.families
            .iter()
            .find(|(_, t)| find_run(tokens, t).is_some())
            .map(|(f, _)| f.clone())
    }

    pub fn model_by_name(&self, name: &str) -> Option<&PhoneModelEntry> {
        self.models
            .iter()
            .map(|(m, _)| m)
            .find(|m| m.name.eq_ignore_ascii_case(name) || m.id == name)
    }

    /// The first 15-digit group that passes the Luhn check.
    pub fn imei(&self, text: &str) -> Option<Imei> {
        digit_groups(text)
            .map(|m| m.as_str().trim_start_matches('+'))
            .filter(|c| !looks_like_date(c))
            .find(|c| validate_imei(c) == ImeiCheck::Valid)
            .and_then(|c| Imei::parse(c).ok())
    }

    /// Digits of every digit group, used to explain a rejected IMEI.
    pub fn digit_runs(&self, text: &str) -> Vec<String> {
        digit_groups(text)
            .map(|m| m.as_str().chars().filter(char::is_ascii_digit).collect::<String>())
            .collect()
    }

    /// The first group of 6 to 15 digits that is not a date, digits only.
    pub fn phone_number(&self, text: &str) -> Option<String> {
        digit_groups(text)
            .filter(|m| !looks_like_date(m.as_str()))
            .map(|m| {
                let digits: String = m.as_str().chars().filter(char::is_ascii_digit).collect();
                let plus = if m.as_str().starts_with('+') { "+" } else { "" };
                (plus, digits)
            })
            .find(|(_, d)| (6..=15).contains(&d.len()))
            .map(|(plus, d)| format!("{plus}{d}"))
    }

    pub fn person_name(&self, text: &str) -> Option<String> {
        self.name_patterns.iter().find_map(|re| {
            let raw = re.captures(text)?.get(1)?.as_str();
            let mut chars = raw.chars();
            let first = chars.next()?;
            Some(first.to_uppercase().chain(chars.flat_map(char::to_lowercase)).collect())
        })
    }
}
