//! Turns abstract replies into user-facing text.
//!
//! Every template has a formal and an informal variant list. The variant is
//! picked from the user's profile, and a negative mood switches to the softer
//! `negative_mood` alternatives where a template provides them. Several
//! alternatives rotate by turn so repeated prompts do not read identically.

use std::collections::{BTreeMap, HashMap};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::claims::ClaimRecord;
use crate::messaging::{ChatAction, Choice};
use crate::pack::{ContentPack, TemplateSpec};
use crate::Language;

pub const FIRST_NAME: &str = "first_name";
pub const PERSONA_NAME: &str = "persona_name";

/// Templates allowed to address the user by first name.
pub const NAME_TEMPLATE_KEYS: &[&str] = &["greet", "name_ack", "thanks_reply", "claim_stored"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Formality {
    Formal,
    Informal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    Positive,
    Neutral,
    Negative,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserProfile {
    #[serde(default)]
    pub first_name: Option<String>,
    pub formality: Formality,
    pub mood: Polarity,
    pub language: Language,
}

impl UserProfile {
    pub fn new(language: Language) -> Self {
        UserProfile {
            first_name: None,
            formality: Formality::Formal,
            mood: Polarity::Neutral,
            language,
        }
    }
}

/// A response before realization: a template key and its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reply", rename_all = "snake_case")]
pub enum Reply {
    Text {
        key: String,
        #[serde(default)]
        params: BTreeMap<String, String>,
    },
    Choices {
        key: String,
        #[serde(default)]
        params: BTreeMap<String, String>,
        choices: Vec<Choice>,
    },
    RequestMedia {
        key: String,
        #[serde(default)]
        params: BTreeMap<String, String>,
    },
    StoreClaim(ClaimRecord),
}

impl Reply {
    pub fn text(key: &str) -> Self {
        Reply::Text {
            key: key.to_string(),
            params: BTreeMap::new(),
        }
    }

    pub fn choices(key: &str, choices: Vec<Choice>) -> Self {
        Reply::Choices {
            key: key.to_string(),
            params: BTreeMap::new(),
            choices,
        }
    }

    pub fn request_media(key: &str) -> Self {
        Reply::RequestMedia {
            key: key.to_string(),
            params: BTreeMap::new(),
        }
    }

    /// Adds a template parameter. No effect on [`Reply::StoreClaim`].
    pub fn with(mut self, name: &str, value: impl Into<String>) -> Self {
        match &mut self {
            Reply::Text { params, .. } | Reply::Choices { params, .. } | Reply::RequestMedia { params, .. } => {
                params.insert(name.to_string(), value.into());
            }
            Reply::StoreClaim(_) => {}
        }
        self
    }

    pub fn key(&self) -> Option<&str> {
        match self {
            Reply::Text { key, .. } | Reply::Choices { key, .. } | Reply::RequestMedia { key, .. } => Some(key),
            Reply::StoreClaim(_) => None,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ResponderError {
    #[error("unknown template '{0}'")]
    UnknownTemplate(String),
    #[error("template '{key}' has no {formality:?} variant")]
    NoVariant { key: String, formality: Formality },
    #[error("template '{key}' needs parameter '{param}'")]
    MissingParameter { key: String, param: String },
    #[error("template syntax: {0}")]
    Syntax(#[from] TemplateSyntaxError),
    #[error("realized action is invalid: {0}")]
    InvalidAction(String),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TemplateSyntaxError {
    #[error("unclosed '{{' at byte {0}")]
    Unclosed(usize),
    #[error("stray '}}' at byte {0}")]
    Stray(usize),
    #[error("bad placeholder name '{0}'")]
    BadName(String),
}

enum Segment<'a> {
    Literal(&'a str),
    Placeholder(&'a str),
}

fn segments(text: &str) -> Result<Vec<Segment<'_>>, TemplateSyntaxError> {
    let mut out = Vec::new();
    let mut rest = 0;
    let bytes = text.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'{' => {
                let close = text[i + 1..]
                    .find('}')
                    .map(|c| i + 1 + c)
                    .ok_or(TemplateSyntaxError::Unclosed(i))?;
                let name = &text[i + 1..close];
                let valid = !name.is_empty()
                    && name
                        .bytes()
                        .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_')
                    && !name.as_bytes()[0].is_ascii_digit();
                if !valid {
                    return Err(TemplateSyntaxError::BadName(name.to_string()));
                }
                if rest < i {
                    out.push(Segment::Literal(&text[rest..i]));
                }
                out.push(Segment::Placeholder(name));
                i = close + 1;
                rest = i;
            }
            b'}' => return Err(TemplateSyntaxError::Stray(i)),
            _ => i += 1,
        }
    }
    if rest < text.len() {
        out.push(Segment::Literal(&text[rest..]));
    }
    Ok(out)
}

/// Placeholder names of a template text, in order.
pub fn placeholders(text: &str) -> Result<Vec<String>, TemplateSyntaxError> {
    Ok(segments(text)?
        .into_iter()
        .filter_map(|s| match s {
            Segment::Placeholder(p) => Some(p.to_string()),
            Segment::Literal(_) => None,
        })
        .collect())
}

fn sanitize(value: &str) -> String {
    value.replace('{', "(").replace('}', ")")
}

/// Guesses the form of address a German message uses. English has none.
pub fn detect_formality(text: &str, language: Language) -> Option<Formality> {
    if language != Language::De {
        return None;
    }
    static INFORMAL: OnceLock<Regex> = OnceLock::new();
    static FORMAL: OnceLock<Regex> = OnceLock::new();
    let informal = INFORMAL
        .get_or_init(|| Regex::new(r"(?i)\b(du|dich|dir|dein\w*)\b").expect("static pattern"))
        .is_match(text);
    let formal = FORMAL
        .get_or_init(|| Regex::new(r"\b(Sie|Ihnen|Ihr\w*)\b").expect("static pattern"))
        .find_iter(text)
        .any(|m| {
            let before = text[..m.start()].trim_end();
            !before.is_empty() && !before.ends_with(['.', '!', '?', ':'])
        });
    match (formal, informal) {
        (true, false) => Some(Formality::Formal),
        (false, true) => Some(Formality::Informal),
        _ => None,
    }
}

/// Template realization for one content pack.
#[derive(Debug, Clone)]
pub struct Responder {
    language: Language,
    persona_name: String,
    templates: HashMap<String, TemplateSpec>,
}

impl Responder {
    pub fn from_pack(pack: &ContentPack) -> Self {
        Responder {
            language: pack.language,
            persona_name: pack.persona_name.clone(),
            templates: pack.templates.iter().map(|t| (t.key.clone(), t.clone())).collect(),
        }
    }

    pub fn language(&self) -> Language {
        self.language
    }

    pub fn has_template(&self, key: &str) -> bool {
        self.templates.contains_key(key)
    }

    /// Renders template `key`. `turn` selects among alternatives.
    pub fn render(
        &self,
        key: &str,
        params: &BTreeMap<String, String>,
        profile: &UserProfile,
        turn: u64,
    ) -> Result<String, ResponderError> {
        let spec = self
            .templates
            .get(key)
            .ok_or_else(|| ResponderError::UnknownTemplate(key.to_string()))?;
        let variants = match (&spec.negative_mood, profile.mood) {
            (Some(soft), Polarity::Negative) if !soft.get(profile.formality).is_empty() => soft,
            _ => &spec.variants,
        };
        let options = variants.get(profile.formality);
        if options.is_empty() {
            return Err(ResponderError::NoVariant {
                key: key.to_string(),
                formality: profile.formality,
            });
        }
        let text = &options[(turn % options.len() as u64) as usize];

        let mut out = String::with_capacity(text.len() + 16);
        for segment in segments(text)? {
            match segment {
                Segment::Literal(lit) => out.push_str(lit),
                Segment::Placeholder(name) => {
                    let value = params
                        .get(name)
                        .cloned()
                        .or_else(|| match name {
                            FIRST_NAME => profile.first_name.clone(),
                            PERSONA_NAME => Some(self.persona_name.clone()),
                            _ => None,
                        })
                        .filter(|v| !v.trim().is_empty());
                    match value {
                        Some(v) => out.push_str(&sanitize(&v)),
                        None if spec.optional_params.iter().any(|p| p == name) => {
                            if out.ends_with(' ') {
                                out.pop();
                            }
                        }
                        None => {
                            return Err(ResponderError::MissingParameter {
                                key: key.to_string(),
                                param: name.to_string(),
                            })
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn realize(&self, reply: &Reply, profile: &UserProfile, turn: u64) -> Result<ChatAction, ResponderError> {
        let invalid = |e: crate::messaging::MessagingError| ResponderError::InvalidAction(e.to_string());
        match reply {
            Reply::Text { key, params } => {
                ChatAction::send_text(self.render(key, params, profile, turn)?).map_err(invalid)
            }
            Reply::Choices { key, params, choices } => {
                let text = self.render(key, params, profile, turn)?;
                ChatAction::send_choices(Some(text), choices.clone()).map_err(invalid)
            }
            Reply::RequestMedia { key, params } => {
                let action = ChatAction::RequestMedia {
                    text: self.render(key, params, profile, turn)?,
                };
                action.validate().map_err(invalid)?;
                Ok(action)
            }
            Reply::StoreClaim(record) => Ok(ChatAction::StoreClaim { claim: record.clone() }),
        }
    }
}
