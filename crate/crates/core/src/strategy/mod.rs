//! The four answering strategies and their call contracts.
//!
//! | strategy   | calls for n options                 |
//! |------------|-------------------------------------|
//! | `zero_shot`| 1 (`zero_shot`)                     |
//! | `cot`      | 1 (`zero_shot_cot`)                 |
//! | `bias`     | n `reasoning_gen` + 1 `consensus`   |
//! | `bias_cot` | n `reasoning_gen` + 1 `consensus_cot` |

mod extract;

use std::fmt;
use std::num::NonZeroUsize;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Backend, BackendError, GenerationParams, ModelResponse};
use crate::dataset::{Label, McqInstance};
use crate::pool::{ordered_for_each, ordered_map};
use crate::prompt::{PromptError, ReasoningSet, RenderedPrompt, TemplateId, TemplateSet};

pub use extract::{extract_answer, ParseStatus, PLACEHOLDER_MARKER};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    ZeroShot,
    Cot,
    Bias,
    BiasCot,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::ZeroShot,
        Strategy::Cot,
        Strategy::Bias,
        Strategy::BiasCot,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::ZeroShot => "zero_shot",
            Strategy::Cot => "cot",
            Strategy::Bias => "bias",
            Strategy::BiasCot => "bias_cot",
        }
    }

    pub fn uses_reasonings(self) -> bool {
        matches!(self, Strategy::Bias | Strategy::BiasCot)
    }

    pub fn cot(self) -> bool {
        matches!(self, Strategy::Cot | Strategy::BiasCot)
    }

    /// Backend calls issued for an instance with `n` options.
    pub fn expected_calls(self, n: usize) -> usize {
        if self.uses_reasonings() {
            n + 1
        } else {
            1
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| {
                format!("unknown strategy `{s}` (expected zero_shot, cot, bias or bias_cot)")
            })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallUsage {
    pub template_id: TemplateId,
    pub prompt_tokens: u32,
    pub completion_tokens: u32,
    pub latency_ms: u64,
}

impl CallUsage {
    fn from_response(template_id: TemplateId, r: &ModelResponse) -> CallUsage {
        CallUsage {
            template_id,
            prompt_tokens: r.prompt_tokens,
            completion_tokens: r.completion_tokens,
            latency_ms: r.latency_ms,
        }
    }

    fn failed(template_id: TemplateId) -> CallUsage {
        CallUsage {
            template_id,
            prompt_tokens: 0,
            completion_tokens: 0,
            latency_ms: 0,
        }
    }
}

/// Outcome of one strategy on one question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub question_id: String,
    pub strategy: Strategy,
    pub predicted_label: Option<Label>,
    pub parse_status: ParseStatus,
    pub reasonings: Option<ReasoningSet>,
    /// In issue order: reasoning calls by label, answer call last.
    pub calls: Vec<CallUsage>,
    pub raw_final_text: String,
    /// Audit notes such as `reasoning_empty:B`, `reasoning_failed:C`,
    /// `reasonings_truncated`, `usage_estimated`, `backend_error`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

impl Prediction {
    /// Record for a question whose answer call failed: unparsed, with
    /// whatever usage was gathered before the failure.
    pub fn from_error(
        instance: &McqInstance,
        strategy: Strategy,
        err: &StrategyError,
    ) -> Prediction {
        let mut flags = err.flags.clone();
        flags.push(format!("backend_error: {}", err.source));
        Prediction {
            question_id: instance.question_id.clone(),
            strategy,
            predicted_label: None,
            parse_status: ParseStatus::Failed,
            reasonings: err.reasonings.clone(),
            calls: err.calls.clone(),
            raw_final_text: String::new(),
            flags,
        }
    }

    pub fn completion_tokens(&self) -> u64 {
        self.calls
            .iter()
            .map(|c| u64::from(c.completion_tokens))
            .sum()
    }
}

#[derive(Debug, Clone, Error)]
pub enum StrategyErrorKind {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("cannot render prompt: {0}")]
    Prompt(String),
}

impl From<PromptError> for StrategyErrorKind {
    fn from(e: PromptError) -> Self {
        StrategyErrorKind::Prompt(e.to_string())
    }
}

/// The answer-producing call failed. Carries usage from calls that ran.
#[derive(Debug, Clone, Error)]
#[error("question {question_id}: {source}")]
pub struct StrategyError {
    pub question_id: String,
    pub calls: Vec<CallUsage>,
    pub reasonings: Option<ReasoningSet>,
    pub flags: Vec<String>,
    #[source]
    pub source: StrategyErrorKind,
}

pub struct ReasoningOutcome {
    pub reasonings: ReasoningSet,
    pub calls: Vec<CallUsage>,
    pub flags: Vec<String>,
}

pub struct ConsensusOutcome {
    pub label: Option<Label>,
    pub status: ParseStatus,
    pub raw_text: String,
    pub call: CallUsage,
    pub flags: Vec<String>,
}

/// Templates, decoding parameters and per-question reasoning concurrency
/// shared by every strategy run.
#[derive(Debug, Clone)]
pub struct StrategyRunner {
    pub templates: TemplateSet,
    pub params: GenerationParams,
    pub reasoning_concurrency: NonZeroUsize,
}

impl Default for StrategyRunner {
    fn default() -> Self {
        StrategyRunner::new(TemplateSet::default(), GenerationParams::default())
    }
}

fn usage_flag(r: &ModelResponse, flags: &mut Vec<String>) {
    if r.usage_estimated && !flags.iter().any(|f| f == "usage_estimated") {
        flags.push("usage_estimated".into());
    }
}

impl StrategyRunner {
    pub fn new(templates: TemplateSet, params: GenerationParams) -> StrategyRunner {
        StrategyRunner {
            templates,
            params,
            reasoning_concurrency: NonZeroUsize::new(6).unwrap(),
        }
    }

    pub fn with_reasoning_concurrency(mut self, n: NonZeroUsize) -> StrategyRunner {
        self.reasoning_concurrency = n;
        self
    }

    fn fail(
        &self,
        instance: &McqInstance,
        calls: Vec<CallUsage>,
        reasonings: Option<ReasoningSet>,
        flags: Vec<String>,
        source: impl Into<StrategyErrorKind>,
    ) -> StrategyError {
        StrategyError {
            question_id: instance.question_id.clone(),
            calls,
            reasonings,
            flags,
            source: source.into(),
        }
    }

    /// One supportive reasoning per option. Requests are independent and
    /// run concurrently; a failed or blank one becomes the sentinel.
    pub fn generate_reasonings(
        &self,
        instance: &McqInstance,
        backend: &dyn Backend,
    ) -> Result<ReasoningOutcome, StrategyError> {
        let prompts: Vec<RenderedPrompt> = instance
            .options
            .iter()
            .map(|o| {
                self.templates
                    .render_reasoning_generation(&instance.question, &o.text)
            })
            .collect::<Result<_, _>>()
            .map_err(|e| self.fail(instance, vec![], None, vec![], e))?;
        let results = ordered_map(&prompts, self.reasoning_concurrency, |_, p| {
            backend.complete(p, &self.params)
        });

        let mut calls = Vec::with_capacity(prompts.len());
        let mut flags = Vec::new();
        let mut outputs = Vec::with_capacity(prompts.len());
        for (label, result) in instance.labels().zip(results) {
            match result {
                Ok(r) => {
                    calls.push(CallUsage::from_response(TemplateId::ReasoningGen, &r));
                    usage_flag(&r, &mut flags);
                    outputs.push((label, r.text.trim().to_string()));
                }
                Err(e) => {
                    log::warn!(
                        "question {}: reasoning for {label} failed: {e}",
                        instance.question_id
                    );
                    calls.push(CallUsage::failed(TemplateId::ReasoningGen));
                    flags.push(format!("reasoning_failed:{label}"));
                    outputs.push((label, String::new()));
                }
            }
        }
        let (reasonings, replaced) = ReasoningSet::from_outputs(outputs);
        for label in replaced {
            if !flags.contains(&format!("reasoning_failed:{label}")) {
                flags.push(format!("reasoning_empty:{label}"));
            }
        }
        Ok(ReasoningOutcome {
            reasonings,
            calls,
            flags,
        })
    }

    pub fn run_consensus(
        &self,
        instance: &McqInstance,
        reasonings: &ReasoningSet,
        backend: &dyn Backend,
        cot: bool,
    ) -> Result<ConsensusOutcome, StrategyErrorKind> {
        let (prompt, truncated) = self.templates.render_consensus_within(
            instance,
            reasonings,
            cot,
            self.params.budget(),
        )?;
        let mut flags = Vec::new();
        if truncated {
            flags.push("reasonings_truncated".to_string());
        }
        let r = backend.complete(&prompt, &self.params)?;
        usage_flag(&r, &mut flags);
        let (label, status) = extract_answer(&r.text, &instance.options);
        Ok(ConsensusOutcome {
            label,
            status,
            call: CallUsage::from_response(prompt.template_id, &r),
            raw_text: r.text,
            flags,
        })
    }

    pub fn run(
        &self,
        instance: &McqInstance,
        strategy: Strategy,
        backend: &dyn Backend,
    ) -> Result<Prediction, StrategyError> {
        if strategy.uses_reasonings() {
            let ReasoningOutcome {
                reasonings,
                mut calls,
                mut flags,
            } = self.generate_reasonings(instance, backend)?;
            match self.run_consensus(instance, &reasonings, backend, strategy.cot()) {
                Ok(c) => {
                    calls.push(c.call);
                    flags.extend(c.flags);
                    Ok(Prediction {
                        question_id: instance.question_id.clone(),
                        strategy,
                        predicted_label: c.label,
                        parse_status: c.status,
                        reasonings: Some(reasonings),
                        calls,
                        raw_final_text: c.raw_text,
                        flags,
                    })
                }
                Err(e) => {
                    calls.push(CallUsage::failed(if strategy.cot() {
                        TemplateId::ConsensusCot
                    } else {
                        TemplateId::Consensus
                    }));
                    Err(self.fail(instance, calls, Some(reasonings), flags, e))
                }
            }
        } else {
            let prompt = self.templates.render_direct(instance, strategy.cot());
            let r = backend.complete(&prompt, &self.params).map_err(|e| {
                self.fail(
                    instance,
                    vec![CallUsage::failed(prompt.template_id)],
                    None,
                    vec![],
                    e,
                )
            })?;
            let mut flags = Vec::new();
            usage_flag(&r, &mut flags);
            let (label, status) = extract_answer(&r.text, &instance.options);
            Ok(Prediction {
                question_id: instance.question_id.clone(),
                strategy,
                predicted_label: label,
                parse_status: status,
                reasonings: None,
                calls: vec![CallUsage::from_response(prompt.template_id, &r)],
                raw_final_text: r.text,
                flags,
            })
        }
    }

    /// Consensus only, over reasonings produced for another ordering of the
    /// same question. `by_source[i]` is the reasoning for source option `i`.
    /// The record carries just the consensus call.
    pub fn run_with_reasonings(
        &self,
        instance: &McqInstance,
        strategy: Strategy,
        backend: &dyn Backend,
        by_source: &[String],
    ) -> Result<Prediction, StrategyError> {
        if !strategy.uses_reasonings() {
            return self.run(instance, strategy, backend);
        }
        let reasonings = ReasoningSet::from_outputs(
            instance
                .labels()
                .zip(&instance.permutation)
                .map(|(label, &src)| (label, by_source.get(src).cloned().unwrap_or_default())),
        )
        .0;
        let mut flags = vec!["reasonings_reused".to_string()];
        match self.run_consensus(instance, &reasonings, backend, strategy.cot()) {
            Ok(c) => {
                flags.extend(c.flags);
                Ok(Prediction {
                    question_id: instance.question_id.clone(),
                    strategy,
                    predicted_label: c.label,
                    parse_status: c.status,
                    reasonings: Some(reasonings),
                    calls: vec![c.call],
                    raw_final_text: c.raw_text,
                    flags,
                })
            }
            Err(e) => {
                let id = if strategy.cot() {
                    TemplateId::ConsensusCot
                } else {
                    TemplateId::Consensus
                };
                Err(self.fail(
                    instance,
                    vec![CallUsage::failed(id)],
                    Some(reasonings),
                    flags,
                    e,
                ))
            }
        }
    }

    /// Runs `strategy` over every instance with at most `workers` questions
    /// in flight; `sink` sees results in instance order.
    pub fn run_all<S>(
        &self,
        instances: &[McqInstance],
        strategy: Strategy,
        backend: &dyn Backend,
        workers: NonZeroUsize,
        sink: S,
    ) where
        S: FnMut(usize, Result<Prediction, StrategyError>),
    {
        ordered_for_each(
            instances,
            workers,
            |_, inst| self.run(inst, strategy, backend),
            sink,
        );
    }
}
