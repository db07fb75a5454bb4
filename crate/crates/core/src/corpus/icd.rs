use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::Error;

/// Normalized ICD-10-style code: a letter, two digits, and optionally a dot
/// followed by one or two alphanumerics (`J06.9`, `I25.10`).
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct IcdCode(String);

impl IcdCode {
    /// Accepts lowercase, surrounding whitespace and a missing dot
    /// (`" j069 "` becomes `J06.9`).
    pub fn parse(raw: &str) -> Result<Self, Error> {
        let compact: String = raw
            .chars()
            .filter(|c| !c.is_whitespace() && *c != '.')
            .flat_map(char::to_uppercase)
            .collect();
        let bytes = compact.as_bytes();
        let valid = (3..=5).contains(&bytes.len())
            && bytes[0].is_ascii_uppercase()
            && bytes[1].is_ascii_digit()
            && bytes[2].is_ascii_digit()
            && bytes[3..].iter().all(u8::is_ascii_alphanumeric);
        if !valid {
            return Err(Error::InvalidCode(raw.to_string()));
        }
        let mut code = compact[..3].to_string();
        if compact.len() > 3 {
            code.push('.');
            code.push_str(&compact[3..]);
        }
        Ok(IcdCode(code))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Three-character category prefix, e.g. `J06` for `J06.9`.
    pub fn block(&self) -> &str {
        &self.0[..3]
    }

    pub fn chapter_letter(&self) -> char {
        self.0.as_bytes()[0] as char
    }
}

impl FromStr for IcdCode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self, Error> {
        IcdCode::parse(s)
    }
}

impl TryFrom<String> for IcdCode {
    type Error = Error;
    fn try_from(s: String) -> Result<Self, Error> {
        IcdCode::parse(&s)
    }
}

impl From<IcdCode> for String {
    fn from(c: IcdCode) -> String {
        c.0
    }
}

impl fmt::Display for IcdCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}
