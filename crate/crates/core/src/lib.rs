//! Two-stage multiple-choice inference: generate a supportive reasoning for
//! every answer option, then ask the model to pick an answer with all of
//! those reasonings in view. Zero-shot and chain-of-thought baselines, a
//! scripted mock backend and the evaluation arithmetic (accuracy, deltas,
//! pooled z-tests, exclusive wins, token totals, option-order spread) live
//! alongside.

// StrategyError carries the partial usage of a failed question by value.
#![allow(clippy::result_large_err)]

pub mod backend;
pub mod cli;
pub mod dataset;
pub mod eval;
pub mod pool;
pub mod prompt;
pub mod report;
pub mod strategy;
pub mod tokens;
