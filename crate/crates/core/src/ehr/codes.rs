use std::fmt;

use serde::{Deserialize, Serialize};

use super::EhrError;

/// Normalizes a clinical code for comparison: trims, uppercases and strips
/// dots and inner whitespace, so `"I11.0"` and `"i110"` compare equal.
pub fn normalize_code(code: &str) -> String {
    code.chars()
        .filter(|c| *c != '.' && !c.is_whitespace())
        .flat_map(char::to_uppercase)
        .collect()
}

/// A code-list entry such as `I50*` (prefix match) or `I11.0` (exact match).
///
/// Matching happens on normalized codes; see [`normalize_code`].
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct CodePattern {
    raw: String,
    stem: String,
    wildcard: bool,
}

impl CodePattern {
    pub fn parse(text: &str) -> Result<Self, EhrError> {
        let raw = text.trim();
        let (body, wildcard) = match raw.strip_suffix('*') {
            Some(body) => (body, true),
            None => (raw, false),
        };
        if body.contains('*') {
            return Err(EhrError::InvalidPattern {
                pattern: raw.to_string(),
                reason: "wildcard allowed only as trailing '*'".into(),
            });
        }
        if let Some(bad) = body
            .chars()
            .find(|c| !(c.is_ascii_alphanumeric() || matches!(c, '.' | '-' | '_' | '/')))
        {
            return Err(EhrError::InvalidPattern {
                pattern: raw.to_string(),
                reason: format!("unexpected character '{bad}'"),
            });
        }
        let stem = normalize_code(body);
        if stem.is_empty() && !wildcard {
            return Err(EhrError::InvalidPattern {
                pattern: raw.to_string(),
                reason: "empty pattern".into(),
            });
        }
        Ok(Self {
            raw: raw.to_string(),
            stem,
            wildcard,
        })
    }

    pub fn matches(&self, code: &str) -> bool {
        let code = normalize_code(code);
        if self.wildcard {
            code.starts_with(&self.stem)
        } else {
            code == self.stem
        }
    }

    pub fn is_wildcard(&self) -> bool {
        self.wildcard
    }

    /// Normalized code prefix (or full code for exact patterns).
    pub fn stem(&self) -> &str {
        &self.stem
    }

    pub fn as_str(&self) -> &str {
        &self.raw
    }
}

impl fmt::Display for CodePattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.raw)
    }
}

impl TryFrom<String> for CodePattern {
    type Error = EhrError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        CodePattern::parse(&value)
    }
}

impl From<CodePattern> for String {
    fn from(value: CodePattern) -> Self {
        value.raw
    }
}

pub fn any_match(patterns: &[CodePattern], code: &str) -> bool {
    patterns.iter().any(|p| p.matches(code))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prefix_wildcard_strips_dots() {
        let p = CodePattern::parse("I50*").unwrap();
        assert!(p.matches("I50.1"));
        assert!(p.matches("I500"));
        assert!(!p.matches("I15.0"));
    }

    #[test]
    fn exact_codes_match_exactly() {
        let p = CodePattern::parse("I11.0").unwrap();
        assert!(p.matches("I110"));
        assert!(p.matches("i11.0"));
        assert!(!p.matches("I11.00"));
        assert!(!p.matches("I11"));
    }

    #[test]
    fn rejects_malformed() {
        assert!(CodePattern::parse("").is_err());
        assert!(CodePattern::parse("I*50").is_err());
        assert!(CodePattern::parse("I5 0!").is_err());
        assert!(CodePattern::parse("*").is_ok());
    }
}
