//! Shared helpers for integration tests: fixture paths and mock scripts
//! built from the real templates, so prompt hashes always line up.
#![allow(dead_code)]

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use biasprompt::backend::{GenerationParams, MockEntry};
use biasprompt::dataset::{load_dataset_as, DatasetTag, InputFormat, Label, McqInstance};
use biasprompt::prompt::{ReasoningSet, RenderedPrompt, TemplateSet};
use biasprompt::strategy::Strategy;
use biasprompt::tokens::estimate_tokens;

pub const SAMPLE_DATASET: &str = "csqa_sample.jsonl";
pub const SAMPLE_MOCK: &str = "csqa_sample.mock.jsonl";

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("fixtures")
        .join(name)
}

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_biasprompt")
}

pub fn sample_questions() -> Vec<McqInstance> {
    load_dataset_as(
        &fixture(SAMPLE_DATASET),
        DatasetTag::Csqa,
        InputFormat::Normalized,
    )
    .unwrap()
    .instances
}

/// What the scripted model says for a question's answer call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reply {
    /// Gold label through the placeholder.
    Gold,
    /// Gold option text through the placeholder.
    GoldText,
    /// Gold option text in free prose, no placeholder.
    GoldProse,
    /// `answer is (X)` without the placeholder.
    GoldLabelFallback,
    /// The label after gold, through the placeholder.
    Wrong,
    /// Nothing extractable.
    Garbage,
    /// A fixed label through the placeholder.
    Label(char),
}

pub fn reply_text(inst: &McqInstance, reply: Reply, cot: bool) -> String {
    let gold = inst.gold_label;
    let lead = if cot {
        "The question describes an everyday situation. "
    } else {
        ""
    };
    match reply {
        Reply::Gold => format!("{lead}So the answer is: {gold}"),
        Reply::GoldText => format!("{lead}So the answer is: {}", inst.gold_text()),
        Reply::GoldProse => format!("{lead}The best choice here is {}.", inst.gold_text()),
        Reply::GoldLabelFallback => format!("{lead}I think the answer is ({gold})."),
        Reply::Wrong => {
            let next = Label::from_index((gold.index() + 1) % inst.options.len()).unwrap();
            format!("{lead}So the answer is: {next}")
        }
        Reply::Garbage => format!("{lead}I cannot decide."),
        Reply::Label(c) => format!("{lead}So the answer is: {c}"),
    }
}

pub fn reasoning_text(option: &str) -> String {
    format!("The answer is '{option}'. It is what the question most plausibly refers to.")
}

/// Collects mock entries, with usage equal to the token estimate of the
/// prompt and the scripted completion.
#[derive(Default)]
pub struct Script {
    pub templates: TemplateSet,
    pub params: GenerationParams,
    entries: Vec<MockEntry>,
    by_hash: HashMap<String, String>,
}

impl Script {
    pub fn add(&mut self, prompt: &RenderedPrompt, text: &str) {
        if let Some(prev) = self.by_hash.get(&prompt.content_hash) {
            assert_eq!(prev, text, "conflicting script for one prompt");
            return;
        }
        self.by_hash
            .insert(prompt.content_hash.clone(), text.to_string());
        self.entries.push(
            MockEntry::for_prompt(prompt, text)
                .usage(prompt.estimated_tokens(), estimate_tokens(text)),
        );
    }

    /// Scripts every call `strategy` makes on `inst`. `reasoning` overrides
    /// the generated reasoning per option text.
    pub fn cover_with(
        &mut self,
        inst: &McqInstance,
        strategy: Strategy,
        reply: Reply,
        reasoning: &dyn Fn(&str) -> String,
    ) {
        let final_text = reply_text(inst, reply, strategy.cot());
        let prompt = if strategy.uses_reasonings() {
            let mut outputs = Vec::new();
            for o in &inst.options {
                let p = self
                    .templates
                    .render_reasoning_generation(&inst.question, &o.text)
                    .unwrap();
                let r = reasoning(&o.text);
                self.add(&p, &r);
                outputs.push((o.label, r.trim().to_string()));
            }
            let (set, _) = ReasoningSet::from_outputs(outputs);
            self.templates
                .render_consensus_within(inst, &set, strategy.cot(), self.params.budget())
                .unwrap()
                .0
        } else {
            self.templates.render_direct(inst, strategy.cot())
        };
        self.add(&prompt, &final_text);
    }

    pub fn cover(&mut self, inst: &McqInstance, strategy: Strategy, reply: Reply) {
        self.cover_with(inst, strategy, reply, &reasoning_text);
    }

    pub fn entries(&self) -> &[MockEntry] {
        &self.entries
    }

    pub fn to_jsonl(&self) -> String {
        self.entries
            .iter()
            .map(|e| serde_json::to_string(e).unwrap() + "\n")
            .collect()
    }

    pub fn write(&self, path: &Path) {
        std::fs::write(path, self.to_jsonl()).unwrap();
    }
}

/// The shipped sample's scripted outcome for question `i` under `strategy`.
pub fn sample_plan(i: usize, strategy: Strategy) -> Reply {
    match strategy {
        Strategy::ZeroShot => match i {
            7 => Reply::Garbage,
            _ if i.is_multiple_of(3) => Reply::Wrong,
            _ => Reply::Gold,
        },
        Strategy::Cot => match i {
            5 => Reply::GoldProse,
            9 => Reply::GoldLabelFallback,
            10 => Reply::Garbage,
            _ if i.is_multiple_of(4) => Reply::Wrong,
            _ => Reply::Gold,
        },
        Strategy::Bias => match i {
            11 => Reply::Garbage,
            3 => Reply::GoldText,
            _ if i.is_multiple_of(5) && i > 0 => Reply::Wrong,
            _ => Reply::Gold,
        },
        Strategy::BiasCot => match i {
            _ if i.is_multiple_of(6) => Reply::Wrong,
            _ => Reply::Gold,
        },
    }
}

/// Sample question whose third option gets a blank reasoning.
pub const BLANK_REASONING_QUESTION: usize = 4;

/// Contents of the shipped mock fixture.
pub fn sample_script() -> Script {
    let mut script = Script::default();
    for (i, inst) in sample_questions().iter().enumerate() {
        for strategy in Strategy::ALL {
            let blank = inst.options[2].text.clone();
            let reasoning = move |text: &str| {
                if i == BLANK_REASONING_QUESTION && text == blank {
                    String::new()
                } else {
                    reasoning_text(text)
                }
            };
            script.cover_with(inst, strategy, sample_plan(i, strategy), &reasoning);
        }
    }
    script
}

/// Expected correct count of the shipped sample under `strategy`.
pub fn sample_expected_correct(strategy: Strategy) -> usize {
    (0..sample_questions().len())
        .filter(|&i| !matches!(sample_plan(i, strategy), Reply::Wrong | Reply::Garbage))
        .count()
}
