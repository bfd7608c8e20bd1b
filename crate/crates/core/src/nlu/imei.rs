use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImeiReason {
    NonDigit,
    WrongLength,
    ChecksumFailed,
}

impl fmt::Display for ImeiReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ImeiReason::NonDigit => "non_digit",
            ImeiReason::WrongLength => "wrong_length",
            ImeiReason::ChecksumFailed => "checksum_failed",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImeiCheck {
    Valid,
    Invalid(ImeiReason),
}

impl ImeiCheck {
    pub fn is_valid(self) -> bool {
        self == ImeiCheck::Valid
    }
}

/// Luhn check over a string of ASCII digits. Non-digits make it fail.
pub fn luhn_valid(digits: &str) -> bool {
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return false;
    }
    let sum: u32 = digits
        .bytes()
        .rev()
        .enumerate()
        .map(|(i, b)| {
            let d = u32::from(b - b'0');
            if i % 2 == 1 {
                let dd = d * 2;
                if dd > 9 {
                    dd - 9
                } else {
                    dd
                }
            } else {
                d
            }
        })
        .sum();
    sum.is_multiple_of(10)
}

/// Validates a candidate IMEI. Spaces and dashes between digits are ignored.
pub fn validate_imei(raw: &str) -> ImeiCheck {
    let digits: String = raw.chars().filter(|c| !matches!(c, ' ' | '-')).collect();
    if digits.is_empty() || !digits.chars().all(|c| c.is_ascii_digit()) {
        return ImeiCheck::Invalid(ImeiReason::NonDigit);
    }
    if digits.len() != 15 {
        return ImeiCheck::Invalid(ImeiReason::WrongLength);
    }
    if !luhn_valid(&digits) {
        return ImeiCheck::Invalid(ImeiReason::ChecksumFailed);
    }
    ImeiCheck::Valid
}

/// A 15-digit IMEI that passed the Luhn check.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Imei(String);

impl Imei {
    pub fn parse(raw: &str) -> Result<Imei, ImeiReason> {
        match validate_imei(raw) {
            ImeiCheck::Valid => Ok(Imei(raw.chars().filter(char::is_ascii_digit).collect())),
            ImeiCheck::Invalid(reason) => Err(reason),
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for Imei {
    type Error = String;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        Imei::parse(&value).map_err(|r| format!("invalid IMEI '{value}': {r}"))
    }
}

impl From<Imei> for String {
    fn from(imei: Imei) -> String {
        imei.0
    }
}

impl fmt::Display for Imei {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_pair() {
        assert_eq!(validate_imei("490154203237518"), ImeiCheck::Valid);
        assert_eq!(
            validate_imei("490154203237519"),
            ImeiCheck::Invalid(ImeiReason::ChecksumFailed)
        );
    }

    #[test]
    fn reasons_in_order() {
        assert_eq!(
            validate_imei("49015420323751x"),
            ImeiCheck::Invalid(ImeiReason::NonDigit)
        );
        assert_eq!(validate_imei(""), ImeiCheck::Invalid(ImeiReason::NonDigit));
        assert_eq!(
            validate_imei("4901542032375"),
            ImeiCheck::Invalid(ImeiReason::WrongLength)
        );
        assert_eq!(validate_imei("49-0154 203237518"), ImeiCheck::Valid);
    }

    #[test]
    fn serde_rejects_invalid() {
        let ok: Imei = serde_json::from_str("\"490154203237518\"").unwrap();
        assert_eq!(ok.as_str(), "490154203237518");
        assert!(serde_json::from_str::<Imei>("\"490154203237519\"").is_err());
    }
}
