//! Prompt templates and rendering.
//!
//! Templates are plain text with named slots: `{question}`, `{option}`,
//! `{choices}` and `{reasonings}`. Only those four names are substituted;
//! any other brace group (such as `{{placeholder}}`) is kept literally, and
//! substituted values are never re-scanned.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::{Label, McqInstance};
use crate::tokens::{estimate_tokens, CHARS_PER_TOKEN};

pub const ANSWER_INSTRUCTION: &str =
    "Wrap your final answer by filling in the placeholder below: 'So the answer is: {{placeholder}}'";
pub const STEP_BY_STEP: &str = "Let's think step by step before answering.";
/// Stands in for an empty or failed stage-one reasoning.
pub const REASONING_SENTINEL: &str = "(no reasoning produced)";

const REASONING_GEN: &str = "Given the following question:\n{question}\nProvide reasoning proving that '{option}' is the correct choice without any textual description in one sentence.";
const CONSENSUS: &str = "### Question: {question}\n### Answer choices: {choices}\n{reasonings}\n\nWrap your final answer by filling in the placeholder below: 'So the answer is: {{placeholder}}'";
const CONSENSUS_COT: &str = "### Question: {question}\n### Answer choices: {choices}\n{reasonings}\n\nLet's think step by step before answering.\nWrap your final answer by filling in the placeholder below: 'So the answer is: {{placeholder}}'";
const ZERO_SHOT: &str = "### Question: {question}\n### Answer choices: {choices}\n\nWrap your final answer by filling in the placeholder below: 'So the answer is: {{placeholder}}'";
const ZERO_SHOT_COT: &str = "### Question: {question}\n### Answer choices: {choices}\n\nLet's think step by step before answering.\nWrap your final answer by filling in the placeholder below: 'So the answer is: {{placeholder}}'";

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("cannot render {template}: {field} is empty")]
    EmptyInput {
        template: TemplateId,
        field: &'static str,
    },
    #[error("reasonings do not match option labels (missing: {missing:?}, extra: {extra:?})")]
    LabelMismatch {
        missing: Vec<Label>,
        extra: Vec<Label>,
    },
    #[error("cannot read template {path}: {source}")]
    Unreadable {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("template {template} is missing slot {{{slot}}}")]
    MissingSlot {
        template: TemplateId,
        slot: &'static str,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateId {
    ReasoningGen,
    Consensus,
    ConsensusCot,
    ZeroShot,
    ZeroShotCot,
}

impl TemplateId {
    pub const ALL: [TemplateId; 5] = [
        TemplateId::ReasoningGen,
        TemplateId::Consensus,
        TemplateId::ConsensusCot,
        TemplateId::ZeroShot,
        TemplateId::ZeroShotCot,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateId::ReasoningGen => "reasoning_gen",
            TemplateId::Consensus => "consensus",
            TemplateId::ConsensusCot => "consensus_cot",
            TemplateId::ZeroShot => "zero_shot",
            TemplateId::ZeroShotCot => "zero_shot_cot",
        }
    }

    fn required_slots(self) -> &'static [&'static str] {
        match self {
            TemplateId::ReasoningGen => &["question", "option"],
            TemplateId::Consensus | TemplateId::ConsensusCot => {
                &["question", "choices", "reasonings"]
            }
            TemplateId::ZeroShot | TemplateId::ZeroShotCot => &["question", "choices"],
        }
    }

    fn default_text(self) -> &'static str {
        match self {
            TemplateId::ReasoningGen => REASONING_GEN,
            TemplateId::Consensus => CONSENSUS,
            TemplateId::ConsensusCot => CONSENSUS_COT,
            TemplateId::ZeroShot => ZERO_SHOT,
            TemplateId::ZeroShotCot => ZERO_SHOT_COT,
        }
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TemplateId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TemplateId::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| format!("unknown template id `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedPrompt {
    pub template_id: TemplateId,
    pub messages: Vec<Message>,
    pub content_hash: String,
}

impl RenderedPrompt {
    pub fn new(template_id: TemplateId, messages: Vec<Message>) -> RenderedPrompt {
        let content_hash = content_hash(&messages);
        RenderedPrompt {
            template_id,
            messages,
            content_hash,
        }
    }

    /// Text of the final user message.
    pub fn user_text(&self) -> &str {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
            .unwrap_or("")
    }

    pub fn estimated_tokens(&self) -> u32 {
        self.messages
            .iter()
            .map(|m| estimate_tokens(&m.content))
            .sum()
    }
}

/// SHA-256 over `role NUL content NUL` for each message, hex encoded.
pub fn content_hash(messages: &[Message]) -> String {
    let mut h = Sha256::new();
    for m in messages {
        h.update(match m.role {
            Role::System => b"system".as_slice(),
            Role::User => b"user".as_slice(),
        });
        h.update([0]);
        h.update(m.content.as_bytes());
        h.update([0]);
    }
    hex::encode(h.finalize())
}

/// Stage-one reasonings keyed by option label.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ReasoningSet(BTreeMap<Label, String>);

impl ReasoningSet {
    /// Builds a set from raw completions; blank entries become
    /// [`REASONING_SENTINEL`]. Returns the labels that were replaced.
    pub fn from_outputs(
        outputs: impl IntoIterator<Item = (Label, String)>,
    ) -> (ReasoningSet, Vec<Label>) {
        let mut set = BTreeMap::new();
        let mut replaced = Vec::new();
        for (label, text) in outputs {
            if text.trim().is_empty() {
                replaced.push(label);
                set.insert(label, REASONING_SENTINEL.to_string());
            } else {
                set.insert(label, text);
            }
        }
        (ReasoningSet(set), replaced)
    }

    pub fn get(&self, label: Label) -> Option<&str> {
        self.0.get(&label).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Label, &str)> {
        self.0.iter().map(|(l, t)| (*l, t.as_str()))
    }

    /// Reasonings re-keyed by source-order option index.
    pub fn by_source(&self, instance: &McqInstance) -> Vec<String> {
        let mut out = vec![String::new(); instance.options.len()];
        for (label, text) in self.iter() {
            if let Some(&src) = instance.permutation.get(label.index()) {
                out[src] = text.to_string();
            }
        }
        out
    }

    pub fn check_labels(&self, instance: &McqInstance) -> Result<(), PromptError> {
        let want: BTreeSet<Label> = instance.labels().collect();
        let have: BTreeSet<Label> = self.0.keys().copied().collect();
        if want == have {
            return Ok(());
        }
        Err(PromptError::LabelMismatch {
            missing: want.difference(&have).copied().collect(),
            extra: have.difference(&want).copied().collect(),
        })
    }
}

fn substitute(template: &str, slots: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len() + 256);
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let tail = &rest[open..];
        let hit = slots.iter().find(|(name, _)| {
            tail.len() > name.len() + 1
                && tail[1..].starts_with(name)
                && tail.as_bytes()[name.len() + 1] == b'}'
        });
        match hit {
            Some((name, value)) => {
                out.push_str(value);
                rest = &tail[name.len() + 2..];
            }
            None => {
                out.push('{');
                rest = &tail[1..];
            }
        }
    }
    out.push_str(rest);
    out
}

/// Reasoning budget derived from the generation contract: the rendered
/// consensus prompt plus `max_new_tokens` must fit `context_window`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptBudget {
    pub context_window: u32,
    pub max_new_tokens: u32,
}

/// The five templates plus an optional system message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSet {
    texts: BTreeMap<TemplateId, String>,
    pub system: Option<String>,
}

impl Default for TemplateSet {
    fn default() -> Self {
        TemplateSet {
            texts: TemplateId::ALL
                .into_iter()
                .map(|id| (id, id.default_text().to_string()))
                .collect(),
            system: None,
        }
    }
}

impl TemplateSet {
    /// Embedded templates overridden by any `<template_id>.txt` found in
    /// `dir`. A `system.txt` there becomes the system message.
    pub fn from_dir(dir: &Path) -> Result<TemplateSet, PromptError> {
        let mut set = TemplateSet::default();
        for id in TemplateId::ALL {
            let path = dir.join(format!("{id}.txt"));
            if path.exists() {
                let text = read_template(&path)?;
                set.set(id, text)?;
            }
        }
        let system = dir.join("system.txt");
        if system.exists() {
            set.system = Some(read_template(&system)?);
        }
        Ok(set)
    }

    pub fn set(&mut self, id: TemplateId, text: impl Into<String>) -> Result<(), PromptError> {
        let text = text.into();
        for slot in id.required_slots() {
            if !text.contains(&format!("{{{slot}}}")) {
                return Err(PromptError::MissingSlot { template: id, slot });
            }
        }
        self.texts.insert(id, text);
        Ok(())
    }

    pub fn text(&self, id: TemplateId) -> &str {
        &self.texts[&id]
    }

    fn finish(&self, id: TemplateId, user: String) -> RenderedPrompt {
        let mut messages = Vec::with_capacity(2);
        if let Some(system) = &self.system {
            messages.push(Message {
                role: Role::System,
                content: system.clone(),
            });
        }
        messages.push(Message {
            role: Role::User,
            content: user,
        });
        RenderedPrompt::new(id, messages)
    }

    pub fn render_reasoning_generation(
        &self,
        question: &str,
        option_text: &str,
    ) -> Result<RenderedPrompt, PromptError> {
        let id = TemplateId::ReasoningGen;
        if question.trim().is_empty() {
            return Err(PromptError::EmptyInput {
                template: id,
                field: "question",
            });
        }
        if option_text.trim().is_empty() {
            return Err(PromptError::EmptyInput {
                template: id,
                field: "option",
            });
        }
        let user = substitute(
            self.text(id),
            &[("question", question), ("option", option_text)],
        );
        Ok(self.finish(id, user))
    }

    pub fn render_consensus(
        &self,
        instance: &McqInstance,
        reasonings: &ReasoningSet,
        cot: bool,
    ) -> Result<RenderedPrompt, PromptError> {
        reasonings.check_labels(instance)?;
        let id = if cot {
            TemplateId::ConsensusCot
        } else {
            TemplateId::Consensus
        };
        let lines = reasoning_lines(instance, |l| reasonings.get(l).unwrap_or_default());
        let user = substitute(
            self.text(id),
            &[
                ("question", &instance.question),
                ("choices", &choices_line(instance)),
                ("reasonings", &lines),
            ],
        );
        Ok(self.finish(id, user))
    }

    /// Like [`render_consensus`](Self::render_consensus), but when the prompt
    /// would overflow `budget` every reasoning is cut to an equal share of
    /// the remaining characters. The flag reports whether anything was cut.
    pub fn render_consensus_within(
        &self,
        instance: &McqInstance,
        reasonings: &ReasoningSet,
        cot: bool,
        budget: PromptBudget,
    ) -> Result<(RenderedPrompt, bool), PromptError> {
        let full = self.render_consensus(instance, reasonings, cot)?;
        let room = budget.context_window.saturating_sub(budget.max_new_tokens);
        if full.estimated_tokens() <= room {
            return Ok((full, false));
        }
        let blank = ReasoningSet(instance.labels().map(|l| (l, String::new())).collect());
        let scaffold: usize = self
            .render_consensus(instance, &blank, cot)?
            .messages
            .iter()
            .map(|m| m.content.chars().count())
            .sum();
        let share = ((room as usize * CHARS_PER_TOKEN).saturating_sub(scaffold)
            / instance.options.len())
        .max(1);
        let cut = ReasoningSet(
            reasonings
                .iter()
                .map(|(l, t)| (l, truncate_reasoning(t, share).to_string()))
                .collect(),
        );
        Ok((self.render_consensus(instance, &cut, cot)?, true))
    }

    pub fn render_direct(&self, instance: &McqInstance, cot: bool) -> RenderedPrompt {
        let id = if cot {
            TemplateId::ZeroShotCot
        } else {
            TemplateId::ZeroShot
        };
        let user = substitute(
            self.text(id),
            &[
                ("question", &instance.question),
                ("choices", &choices_line(instance)),
            ],
        );
        self.finish(id, user)
    }
}

/// `A. bank | B. library | ...`
fn choices_line(instance: &McqInstance) -> String {
    instance
        .options
        .iter()
        .map(|o| format!("{}. {}", o.label, o.text))
        .collect::<Vec<_>>()
        .join(" | ")
}

fn reasoning_lines<'a>(instance: &McqInstance, reasoning: impl Fn(Label) -> &'a str) -> String {
    instance
        .labels()
        .map(|l| format!("### Reasoning for answer choice {l}: {}", reasoning(l)))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Longest prefix of at most `max_chars` characters, preferring one that
/// ends on a sentence boundary.
pub fn truncate_reasoning(text: &str, max_chars: usize) -> &str {
    let end = match text.char_indices().nth(max_chars) {
        Some((i, _)) => i,
        None => return text,
    };
    let head = &text[..end];
    let sentence_end = head
        .char_indices()
        .filter(|&(i, c)| {
            matches!(c, '.' | '!' | '?')
                && text[i + c.len_utf8()..].starts_with(char::is_whitespace)
        })
        .map(|(i, c)| i + c.len_utf8())
        .next_back();
    match sentence_end {
        Some(i) => &text[..i],
        None => head,
    }
}

/// Loads `dir` when given, the embedded templates otherwise.
pub fn load_templates(dir: Option<&Path>) -> Result<TemplateSet, PromptError> {
    match dir {
        Some(d) => TemplateSet::from_dir(d),
        None => Ok(TemplateSet::default()),
    }
}

fn read_template(path: &Path) -> Result<String, PromptError> {
    fs::read_to_string(path)
        .map(|t| t.trim_end_matches('\n').to_string())
        .map_err(|source| PromptError::Unreadable {
            path: path.to_path_buf(),
            source,
        })
}
