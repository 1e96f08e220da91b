//! Boolean feature rules: code patterns joined by AND, OR and NOT.
//!
//! ```text
//! expr    := and ( OR and )*
//! and     := unary ( AND unary )*
//! unary   := NOT unary | atom
//! atom    := pattern | '(' expr ')'
//! pattern := [domain ':'] code ['*']
//! ```
//!
//! Keywords are case-insensitive. A pattern written as `CODE: description`
//! takes its description up to the end of the line or the next upper-case
//! keyword or parenthesis, so rule listings can be pasted with their code
//! descriptions. `All R47 subcodes combined` reads as `R47*`.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::ehr::Domain;
use crate::featurize::{FeatureDescriptor, FeatureKey, FeatureKind, FeatureMatrix};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseError {
    /// 1-based index of the offending token; one past the last at end of input.
    pub token: usize,
    /// Character offset into the source.
    pub offset: usize,
    pub message: String,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "token {} (offset {}): {}", self.token, self.offset, self.message)
    }
}

impl std::error::Error for ParseError {}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pattern {
    pub domain: Option<Domain>,
    /// Upper-case, without dots.
    pub code: String,
    pub wildcard: bool,
}

pub(crate) fn normalise_code(code: &str) -> String {
    code.chars()
        .filter(|c| *c != '.')
        .flat_map(char::to_uppercase)
        .collect()
}

impl Pattern {
    pub fn matches_code(&self, domain: Option<Domain>, code: &str) -> bool {
        if let (Some(want), Some(have)) = (self.domain, domain) {
            if want != have {
                return false;
            }
        }
        let code = normalise_code(code);
        if self.wildcard {
            code.starts_with(&self.code)
        } else {
            code == self.code
        }
    }

    /// Code-sourced columns by domain and code; derived columns by id.
    pub fn matches_feature(&self, f: &FeatureDescriptor) -> bool {
        match f.domain {
            Some(d) => self.matches_code(Some(d), &f.code),
            None => self.domain.is_none() && !self.wildcard && normalise_code(&f.feature_id) == self.code,
        }
    }
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(d) = self.domain {
            write!(f, "{}:", d.prefix())?;
        }
        write!(f, "{}{}", self.code, if self.wildcard { "*" } else { "" })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Expr {
    Leaf(Pattern),
    Not(Box<Expr>),
    And(Vec<Expr>),
    Or(Vec<Expr>),
}

impl Expr {
    pub fn eval(&self, leaf: &dyn Fn(&Pattern) -> bool) -> bool {
        match self {
            Expr::Leaf(p) => leaf(p),
            Expr::Not(e) => !e.eval(leaf),
            Expr::And(es) => es.iter().all(|e| e.eval(leaf)),
            Expr::Or(es) => es.iter().any(|e| e.eval(leaf)),
        }
    }

    pub fn leaves(&self) -> Vec<&Pattern> {
        match self {
            Expr::Leaf(p) => vec![p],
            Expr::Not(e) => e.leaves(),
            Expr::And(es) | Expr::Or(es) => es.iter().flat_map(Expr::leaves).collect(),
        }
    }

    fn fmt_inner(&self, f: &mut fmt::Formatter<'_>, parent_and: bool) -> fmt::Result {
        match self {
            Expr::Leaf(p) => write!(f, "{p}"),
            Expr::Not(e) => {
                f.write_str("NOT ")?;
                match **e {
                    Expr::Leaf(_) | Expr::Not(_) => e.fmt_inner(f, true),
                    _ => {
                        f.write_str("(")?;
                        e.fmt_inner(f, false)?;
                        f.write_str(")")
                    }
                }
            }
            Expr::And(es) => {
                for (i, e) in es.iter().enumerate() {
                    if i > 0 {
                        f.write_str(" AND ")?;
                    }
                    e.fmt_inner(f, true)?;
                }
                Ok(())
            }
            Expr::Or(es) => {
                if parent_and {
                    f.write_str("(")?;
                }
                for (i, e) in es.iter().enumerate() {
                    if i > 0 {
                        f.write_str(" OR ")?;
                    }
                    e.fmt_inner(f, false)?;
                }
                if parent_and {
                    f.write_str(")")?;
                }
                Ok(())
            }
        }
    }
}

/// Canonical one-line form with minimal parentheses.
impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.fmt_inner(f, false)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    LParen,
    RParen,
    And,
    Or,
    Not,
    Pat(Pattern),
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    offset: usize,
    text: String,
}

fn is_word_char(c: char) -> bool {
    !c.is_whitespace() && c != '(' && c != ')'
}

fn keyword(word: &str) -> Option<Tok> {
    match word.to_ascii_uppercase().as_str() {
        "AND" => Some(Tok::And),
        "OR" => Some(Tok::Or),
        "NOT" => Some(Tok::Not),
        _ => None,
    }
}

fn pattern(word: &str, token: usize, offset: usize) -> Result<Pattern, ParseError> {
    let err = |message: String| ParseError { token, offset, message };
    let (domain, rest) = match word.split_once(':') {
        Some((prefix, rest)) => {
            let d = Domain::from_prefix(prefix).ok_or_else(|| err(format!("unknown domain prefix '{prefix}'")))?;
            (Some(d), rest)
        }
        None => (None, word),
    };
    let (code, wildcard) = match rest.strip_suffix('*') {
        Some(c) => (c, true),
        None => (rest, false),
    };
    if code.is_empty() && !(wildcard && domain.is_some()) {
        return Err(err(format!("'{word}' has no code")));
    }
    if let Some(bad) = code
        .chars()
        .find(|c| !(c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-' | '#')))
    {
        return Err(err(format!("invalid character '{bad}' in pattern '{word}'")));
    }
    Ok(Pattern {
        domain,
        code: normalise_code(code),
        wildcard,
    })
}

fn tokenize(src: &str) -> Result<Vec<Token>, ParseError> {
    let chars: Vec<char> = src.chars().collect();
    let mut out: Vec<Token> = Vec::new();
    let mut i = 0;
    let word_at = |mut j: usize| -> (usize, String) {
        while j < chars.len() && chars[j].is_whitespace() {
            j += 1;
        }
        let start = j;
        while j < chars.len() && is_word_char(chars[j]) {
            j += 1;
        }
        (j, chars[start..j].iter().collect())
    };
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        let n = out.len() + 1;
        if c == '(' || c == ')' {
            out.push(Token {
                tok: if c == '(' { Tok::LParen } else { Tok::RParen },
                offset: i,
                text: c.to_string(),
            });
            i += 1;
            continue;
        }
        let (end, word) = word_at(i);
        if let Some(k) = keyword(&word) {
            out.push(Token {
                tok: k,
                offset: i,
                text: word,
            });
            i = end;
            continue;
        }
        if word.eq_ignore_ascii_case("all") {
            let (e1, code) = word_at(end);
            let (e2, w2) = word_at(e1);
            let (e3, w3) = word_at(e2);
            if w2.eq_ignore_ascii_case("subcodes") && w3.eq_ignore_ascii_case("combined") {
                let p = pattern(&format!("{code}*"), n, i)?;
                out.push(Token {
                    tok: Tok::Pat(p),
                    offset: i,
                    text: chars[i..e3].iter().collect(),
                });
                i = e3;
                continue;
            }
        }
        if let Some(code) = word.strip_suffix(':') {
            // `CODE: description`
            let p = pattern(code, n, i)?;
            out.push(Token {
                tok: Tok::Pat(p),
                offset: i,
                text: word.clone(),
            });
            let mut j = end;
            loop {
                while j < chars.len() && chars[j].is_whitespace() && chars[j] != '\n' {
                    j += 1;
                }
                if j >= chars.len() || chars[j] == '\n' || chars[j] == '(' || chars[j] == ')' {
                    break;
                }
                let (e, w) = word_at(j);
                if matches!(w.as_str(), "AND" | "OR" | "NOT") {
                    break;
                }
                j = e;
            }
            i = j;
            continue;
        }
        let p = pattern(&word, n, i)?;
        out.push(Token {
            tok: Tok::Pat(p),
            offset: i,
            text: word,
        });
        i = end;
    }
    Ok(out)
}

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
    end: usize,
}

impl Parser {
    fn error(&self, expected: &str) -> ParseError {
        match self.tokens.get(self.pos) {
            Some(t) => ParseError {
                token: self.pos + 1,
                offset: t.offset,
                message: format!("unexpected '{}', expected {expected}", t.text),
            },
            None => ParseError {
                token: self.pos + 1,
                offset: self.end,
                message: format!("unexpected end of rule, expected {expected}"),
            },
        }
    }

    fn peek(&self) -> Option<&Tok> {
        self.tokens.get(self.pos).map(|t| &t.tok)
    }

    fn or(&mut self) -> Result<Expr, ParseError> {
        let mut items = vec![self.and()?];
        while self.peek() == Some(&Tok::Or) {
            self.pos += 1;
            items.push(self.and()?);
        }
        Ok(flatten(items, true))
    }

    fn and(&mut self) -> Result<Expr, ParseError> {
        let mut items = vec![self.unary()?];
        while self.peek() == Some(&Tok::And) {
            self.pos += 1;
            items.push(self.unary()?);
        }
        Ok(flatten(items, false))
    }

    fn unary(&mut self) -> Result<Expr, ParseError> {
        match self.peek() {
            Some(Tok::Not) => {
                self.pos += 1;
                Ok(Expr::Not(Box::new(self.unary()?)))
            }
            Some(Tok::LParen) => {
                self.pos += 1;
                let e = self.or()?;
                if self.peek() != Some(&Tok::RParen) {
                    return Err(self.error("')'"));
                }
                self.pos += 1;
                Ok(e)
            }
            Some(Tok::Pat(p)) => {
                let p = p.clone();
                self.pos += 1;
                Ok(Expr::Leaf(p))
            }
            _ => Err(self.error("a code pattern, '(' or NOT")),
        }
    }
}

fn flatten(items: Vec<Expr>, or: bool) -> Expr {
    if items.len() == 1 {
        return items.into_iter().next().expect("one item");
    }
    let mut out = Vec::new();
    for e in items {
        match (e, or) {
            (Expr::Or(inner), true) | (Expr::And(inner), false) => out.extend(inner),
            (e, _) => out.push(e),
        }
    }
    if or {
        Expr::Or(out)
    } else {
        Expr::And(out)
    }
}

pub fn parse_expr(src: &str) -> Result<Expr, ParseError> {
    let tokens = tokenize(src)?;
    let mut p = Parser {
        end: src.chars().count(),
        tokens,
        pos: 0,
    };
    let e = p.or()?;
    if p.pos < p.tokens.len() {
        return Err(p.error("AND, OR or end of rule"));
    }
    Ok(e)
}

/// A named rule; materialised as a binary column `novel:<slug>`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RuleSource", into = "RuleSource")]
pub struct FeatureRule {
    pub name: String,
    pub expression: Expr,
    pub source: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RuleSource {
    name: String,
    expression: String,
}

impl TryFrom<RuleSource> for FeatureRule {
    type Error = ParseError;
    fn try_from(r: RuleSource) -> Result<Self, ParseError> {
        parse_rule(&r.name, &r.expression)
    }
}

impl From<FeatureRule> for RuleSource {
    fn from(r: FeatureRule) -> Self {
        Self {
            name: r.name,
            expression: r.source,
        }
    }
}

pub fn parse_rule(name: &str, src: &str) -> Result<FeatureRule, ParseError> {
    let name = name.trim();
    if name.is_empty() {
        return Err(ParseError {
            token: 0,
            offset: 0,
            message: "rule name is empty".into(),
        });
    }
    Ok(FeatureRule {
        name: name.to_string(),
        expression: parse_expr(src)?,
        source: src.to_string(),
    })
}

pub fn slug(name: &str) -> String {
    let mut out = String::new();
    for c in name.chars() {
        if c.is_ascii_alphanumeric() {
            out.push(c.to_ascii_lowercase());
        } else if !out.ends_with('_') && !out.is_empty() {
            out.push('_');
        }
    }
    out.trim_end_matches('_').to_string()
}

impl FeatureRule {
    pub fn feature_id(&self) -> String {
        format!("novel:{}", slug(&self.name))
    }

    pub fn display_name(&self) -> String {
        format!("NOVEL: {}", self.name)
    }

    pub fn descriptor(&self) -> FeatureDescriptor {
        FeatureDescriptor::derived(&self.feature_id(), &self.display_name(), &self.expression.to_string())
    }
}

/// True when the patient holds any feature matching each required leaf.
/// Entries are feature ids (`px:U21.2`) or bare codes.
pub fn eval_rule(rule: &FeatureRule, features: &BTreeSet<String>) -> bool {
    let parsed: Vec<(Option<Domain>, String)> = features
        .iter()
        .map(|f| match FeatureKey::parse(f) {
            Some(k) => (Some(k.domain), k.code),
            None => (None, f.clone()),
        })
        .collect();
    rule.expression
        .eval(&|p: &Pattern| parsed.iter().any(|(d, c)| p.matches_code(*d, c)))
}

/// Whether a cell records the feature as present.
pub(crate) fn present(kind: FeatureKind, value: f64, missing: bool) -> bool {
    match kind {
        FeatureKind::Continuous => !missing,
        _ => !missing && value > 0.0,
    }
}

/// Columns each leaf refers to, in leaf order.
pub fn leaf_columns(expr: &Expr, matrix: &FeatureMatrix) -> Vec<(Pattern, Vec<usize>)> {
    expr.leaves()
        .into_iter()
        .map(|p| {
            let cols = (0..matrix.ncols())
                .filter(|&c| p.matches_feature(&matrix.features()[c]))
                .collect();
            (p.clone(), cols)
        })
        .collect()
}

/// Rule value for every matrix row.
pub fn rule_column(expr: &Expr, matrix: &FeatureMatrix) -> Vec<bool> {
    let features = matrix.features();
    (0..matrix.nrows())
        .map(|r| {
            expr.eval(&|p: &Pattern| {
                (0..matrix.ncols()).any(|c| {
                    p.matches_feature(&features[c])
                        && present(features[c].kind, matrix.get(r, c), matrix.is_missing(r, c))
                })
            })
        })
        .collect()
}
