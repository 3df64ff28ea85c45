//! Final-answer extraction from a completion.
//!
//! Tiers, first hit wins:
//! 1. `placeholder`: the span after the last case-insensitive
//!    `so the answer is:` read as a label (`C`, `C.`, `(C)`, `C. text`) or as
//!    a full option text.
//! 2. `label_fallback`: the last `answer is X` with a valid label, or a lone
//!    label on the final line.
//! 3. `text_fallback`: exactly one option text occurs in the completion.

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::dataset::{AnswerOption, Label};

pub const PLACEHOLDER_MARKER: &str = "so the answer is:";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseStatus {
    Placeholder,
    LabelFallback,
    TextFallback,
    Failed,
}

impl ParseStatus {
    pub const ALL: [ParseStatus; 4] = [
        ParseStatus::Placeholder,
        ParseStatus::LabelFallback,
        ParseStatus::TextFallback,
        ParseStatus::Failed,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ParseStatus::Placeholder => "placeholder",
            ParseStatus::LabelFallback => "label_fallback",
            ParseStatus::TextFallback => "text_fallback",
            ParseStatus::Failed => "failed",
        }
    }
}

fn answer_is_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i:answer\s+is)\s*:?\s*[\(\[]?([A-Z])(?:[\)\]]|\b)").unwrap())
}

fn label_prefix_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^(?:\(([A-Z])\)|\[([A-Z])\]|([A-Z])[.):])\s*(.*)$").unwrap())
}

/// Last byte offset of `needle` in `hay`, ASCII case-insensitive.
fn rfind_ignore_ascii_case(hay: &str, needle: &str) -> Option<usize> {
    let (h, n) = (hay.as_bytes(), needle.as_bytes());
    if n.len() > h.len() {
        return None;
    }
    (0..=h.len() - n.len())
        .rev()
        .find(|&i| h[i..i + n.len()].eq_ignore_ascii_case(n))
}

fn trim_decoration(s: &str) -> &str {
    s.trim_matches(|c: char| {
        c.is_whitespace() || matches!(c, '\'' | '"' | '`' | '*' | '{' | '}' | '_')
    })
}

/// Lowercased text with surrounding punctuation removed.
fn norm_text(s: &str) -> String {
    s.trim_matches(|c: char| c.is_whitespace() || c.is_ascii_punctuation())
        .to_lowercase()
}

fn valid(label: Label, options: &[AnswerOption]) -> bool {
    label.index() < options.len()
}

fn parse_label(s: &str) -> Option<Label> {
    let mut chars = s.chars();
    match (chars.next(), chars.next()) {
        (Some(c), None) => Label::from_char(c),
        _ => None,
    }
}

/// Exact label forms only: `C`, `C.`, `(C)`, `C)`, `[C]`, `C:`.
fn bare_label(s: &str, options: &[AnswerOption]) -> Option<Label> {
    let s = trim_decoration(s);
    let s = s.strip_suffix(['.', ':']).unwrap_or(s);
    let inner = s
        .strip_prefix('(')
        .and_then(|r| r.strip_suffix(')'))
        .or_else(|| s.strip_prefix('[').and_then(|r| r.strip_suffix(']')))
        .or_else(|| s.strip_suffix(')'))
        .unwrap_or(s);
    parse_label(inner).filter(|&l| valid(l, options))
}

fn match_span(span: &str, options: &[AnswerOption]) -> Option<Label> {
    let span = trim_decoration(span);
    if span.is_empty() {
        return None;
    }
    if let Some(l) = bare_label(span, options) {
        return Some(l);
    }
    if let Some(caps) = label_prefix_re().captures(span) {
        let letter = caps
            .get(1)
            .or(caps.get(2))
            .or(caps.get(3))
            .map(|m| m.as_str());
        if let Some(l) = letter.and_then(parse_label).filter(|&l| valid(l, options)) {
            return Some(l);
        }
    }
    let wanted = norm_text(span);
    if let Some(o) = options.iter().find(|o| norm_text(&o.text) == wanted) {
        return Some(o.label);
    }
    // "C bank" where the rest is option C's text
    let mut chars = span.chars();
    if let (Some(c), Some(' ')) = (chars.next(), chars.next()) {
        if let Some(l) = Label::from_char(c).filter(|&l| valid(l, options)) {
            if norm_text(chars.as_str()) == norm_text(&options[l.index()].text) {
                return Some(l);
            }
        }
    }
    None
}

fn placeholder_tier(text: &str, options: &[AnswerOption]) -> Option<Label> {
    let at = rfind_ignore_ascii_case(text, PLACEHOLDER_MARKER)?;
    let rest = text[at + PLACEHOLDER_MARKER.len()..].trim_start();
    let span = rest.lines().next().unwrap_or("");
    match_span(span, options)
}

fn label_tier(text: &str, options: &[AnswerOption]) -> Option<Label> {
    if let Some(last_line) = text.lines().rev().find(|l| !l.trim().is_empty()) {
        if let Some(l) = bare_label(last_line, options) {
            return Some(l);
        }
    }
    answer_is_re()
        .captures_iter(text)
        .filter_map(|c| parse_label(c.get(1)?.as_str()))
        .filter(|&l| valid(l, options))
        .last()
}

fn contains_word_bounded(hay: &str, needle: &str) -> bool {
    if needle.is_empty() {
        return false;
    }
    let mut from = 0;
    while let Some(pos) = hay[from..].find(needle) {
        let start = from + pos;
        let end = start + needle.len();
        let before_ok = hay[..start]
            .chars()
            .next_back()
            .is_none_or(|c| !c.is_alphanumeric());
        let after_ok = hay[end..]
            .chars()
            .next()
            .is_none_or(|c| !c.is_alphanumeric());
        if before_ok && after_ok {
            return true;
        }
        from = start + hay[start..].chars().next().map_or(1, char::len_utf8);
    }
    false
}

fn text_tier(text: &str, options: &[AnswerOption]) -> Option<Label> {
    let hay = text.to_lowercase();
    let mut hits = options
        .iter()
        .filter(|o| contains_word_bounded(&hay, o.text.trim().to_lowercase().as_str()));
    match (hits.next(), hits.next()) {
        (Some(o), None) => Some(o.label),
        _ => None,
    }
}

/// Reads the chosen option out of `text`. Total and pure: failure is a
/// status, and any returned label is one of `options`.
pub fn extract_answer(text: &str, options: &[AnswerOption]) -> (Option<Label>, ParseStatus) {
    if let Some(l) = placeholder_tier(text, options) {
        return (Some(l), ParseStatus::Placeholder);
    }
    if let Some(l) = label_tier(text, options) {
        return (Some(l), ParseStatus::LabelFallback);
    }
    if let Some(l) = text_tier(text, options) {
        return (Some(l), ParseStatus::TextFallback);
    }
    (None, ParseStatus::Failed)
}
