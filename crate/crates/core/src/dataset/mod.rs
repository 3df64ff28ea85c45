//! Normalized multiple-choice instances, dataset descriptors and option-order
//! permutation.

mod adapters;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use adapters::{
    load_dataset, load_dataset_as, parse_normalized_line, InputFormat, LoadedDataset,
};

pub const MIN_OPTIONS: usize = 2;
pub const MAX_OPTIONS: usize = 6;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read dataset file {path}: {source}")]
    Unreadable {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed row: {reason}")]
    Malformed {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("question {question_id}: {violation}")]
    InvalidRow {
        question_id: String,
        violation: InvariantViolation,
    },
    #[error(
        "unknown dataset tag `{0}` (expected one of csqa, strategyqa, piqa, bbh_date, bbh_causal)"
    )]
    UnknownTag(String),
    #[error("unknown input format `{0}`")]
    UnknownFormat(String),
}

/// A broken [`McqInstance`] invariant.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum InvariantViolation {
    #[error("option count {0} outside {MIN_OPTIONS}..={MAX_OPTIONS}")]
    OptionCount(usize),
    #[error("option {index} has label {found}, expected {expected}")]
    LabelOrder {
        index: usize,
        expected: Label,
        found: Label,
    },
    #[error("gold label {0} is not among the options")]
    GoldMissing(Label),
    #[error("gold index {index} out of range for {options} options")]
    GoldIndex { index: usize, options: usize },
    #[error("option {0} has empty text")]
    EmptyOption(Label),
    #[error("question text is empty")]
    EmptyQuestion,
    #[error("permutation record does not match option count")]
    BadPermutation,
}

/// Option label, `A` for the first option through `Z`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Label(u8);

impl Label {
    pub fn from_index(index: usize) -> Option<Label> {
        (index < 26).then_some(Label(index as u8))
    }

    pub fn from_char(c: char) -> Option<Label> {
        c.is_ascii_uppercase().then(|| Label(c as u8 - b'A'))
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn as_char(self) -> char {
        (b'A' + self.0) as char
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_char())
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut chars = s.chars();
        match (chars.next(), chars.next()) {
            (Some(c), None) => Label::from_char(c).ok_or_else(|| format!("invalid label `{s}`")),
            _ => Err(format!("invalid label `{s}`")),
        }
    }
}

impl Serialize for Label {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Label {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetTag {
    Csqa,
    Strategyqa,
    Piqa,
    BbhDate,
    BbhCausal,
}

impl DatasetTag {
    pub const ALL: [DatasetTag; 5] = [
        DatasetTag::Csqa,
        DatasetTag::Strategyqa,
        DatasetTag::Piqa,
        DatasetTag::BbhDate,
        DatasetTag::BbhCausal,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DatasetTag::Csqa => "csqa",
            DatasetTag::Strategyqa => "strategyqa",
            DatasetTag::Piqa => "piqa",
            DatasetTag::BbhDate => "bbh_date",
            DatasetTag::BbhCausal => "bbh_causal",
        }
    }

    pub fn descriptor(self) -> DatasetDescriptor {
        let (expected_choices, expected_size) = match self {
            DatasetTag::Csqa => (5, 1221),
            DatasetTag::Strategyqa => (2, 2290),
            DatasetTag::Piqa => (2, 1838),
            DatasetTag::BbhDate => (6, 250),
            DatasetTag::BbhCausal => (2, 187),
        };
        DatasetDescriptor {
            tag: self,
            expected_choices,
            expected_size,
        }
    }
}

impl fmt::Display for DatasetTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DatasetTag {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        DatasetTag::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| DatasetError::UnknownTag(s.to_string()))
    }
}

/// Reference statistics for a benchmark's evaluation split.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatasetDescriptor {
    pub tag: DatasetTag,
    /// Options per question. BBH date understanding rows occasionally carry
    /// fewer than six; this is the modal count.
    pub expected_choices: usize,
    pub expected_size: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerOption {
    pub label: Label,
    pub text: String,
}

/// One normalized multiple-choice question.
///
/// `permutation[i]` is the source-order index of the option now shown at
/// position `i`; it is the identity for instances in source order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct McqInstance {
    pub question_id: String,
    pub dataset: DatasetTag,
    pub question: String,
    pub options: Vec<AnswerOption>,
    pub gold_label: Label,
    pub ordering_id: u64,
    pub permutation: Vec<usize>,
}

impl McqInstance {
    /// Builds a source-order instance from option texts and a 0-based gold
    /// index, checking every invariant.
    pub fn from_texts(
        question_id: impl Into<String>,
        dataset: DatasetTag,
        question: impl Into<String>,
        option_texts: Vec<String>,
        gold_index: usize,
    ) -> Result<McqInstance, DatasetError> {
        let question_id = question_id.into();
        let n = option_texts.len();
        if !(MIN_OPTIONS..=MAX_OPTIONS).contains(&n) {
            return Err(DatasetError::InvalidRow {
                question_id,
                violation: InvariantViolation::OptionCount(n),
            });
        }
        if gold_index >= n {
            return Err(DatasetError::InvalidRow {
                question_id,
                violation: InvariantViolation::GoldIndex {
                    index: gold_index,
                    options: n,
                },
            });
        }
        let gold_label = Label(gold_index as u8);
        let options = option_texts
            .into_iter()
            .enumerate()
            .map(|(i, text)| AnswerOption {
                label: Label(i as u8),
                text,
            })
            .collect();
        let instance = McqInstance {
            question_id,
            dataset,
            question: question.into(),
            options,
            gold_label,
            ordering_id: 0,
            permutation: (0..n).collect(),
        };
        instance
            .validate()
            .map_err(|violation| DatasetError::InvalidRow {
                question_id: instance.question_id.clone(),
                violation,
            })?;
        Ok(instance)
    }

    pub fn validate(&self) -> Result<(), InvariantViolation> {
        let n = self.options.len();
        if !(MIN_OPTIONS..=MAX_OPTIONS).contains(&n) {
            return Err(InvariantViolation::OptionCount(n));
        }
        if self.question.trim().is_empty() {
            return Err(InvariantViolation::EmptyQuestion);
        }
        for (i, opt) in self.options.iter().enumerate() {
            let expected = Label(i as u8);
            if opt.label != expected {
                return Err(InvariantViolation::LabelOrder {
                    index: i,
                    expected,
                    found: opt.label,
                });
            }
            if opt.text.trim().is_empty() {
                return Err(InvariantViolation::EmptyOption(opt.label));
            }
        }
        if self.gold_label.index() >= n {
            return Err(InvariantViolation::GoldMissing(self.gold_label));
        }
        let mut seen = vec![false; n];
        if self.permutation.len() != n {
            return Err(InvariantViolation::BadPermutation);
        }
        for &p in &self.permutation {
            if p >= n || std::mem::replace(&mut seen[p], true) {
                return Err(InvariantViolation::BadPermutation);
            }
        }
        Ok(())
    }

    pub fn labels(&self) -> impl Iterator<Item = Label> + '_ {
        self.options.iter().map(|o| o.label)
    }

    pub fn option(&self, label: Label) -> Option<&AnswerOption> {
        self.options.get(label.index())
    }

    pub fn gold_text(&self) -> &str {
        &self.options[self.gold_label.index()].text
    }

    /// Restores source option order, with `ordering_id` reset to 0.
    pub fn unpermuted(&self) -> McqInstance {
        let n = self.options.len();
        let mut texts = vec![String::new(); n];
        for (pos, &src) in self.permutation.iter().enumerate() {
            texts[src] = self.options[pos].text.clone();
        }
        McqInstance {
            question_id: self.question_id.clone(),
            dataset: self.dataset,
            question: self.question.clone(),
            options: relabel(texts),
            gold_label: Label(self.permutation[self.gold_label.index()] as u8),
            ordering_id: 0,
            permutation: (0..n).collect(),
        }
    }
}

fn relabel(texts: Vec<String>) -> Vec<AnswerOption> {
    texts
        .into_iter()
        .enumerate()
        .map(|(i, text)| AnswerOption {
            label: Label(i as u8),
            text,
        })
        .collect()
}

/// Ordering id carried by instances permuted with `seed`. Zero is reserved
/// for source order.
pub fn ordering_id_for_seed(seed: u32) -> u64 {
    u64::from(seed) + 1
}

/// RNG for one question's permutation, seeded from SHA-256 of the run seed
/// and the question id so orderings are independent across questions.
fn question_rng(seed: u32, question_id: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(b"biasprompt-permutation-v1\0");
    hasher.update(seed.to_le_bytes());
    hasher.update(question_id.as_bytes());
    ChaCha8Rng::from_seed(hasher.finalize().into())
}

/// Uniform Fisher-Yates permutation of `0..n`, drawing only `u32` ranges so
/// the stream is identical on 32- and 64-bit targets.
fn seeded_permutation(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i as u32) as usize;
        order.swap(i, j);
    }
    order
}

/// Returns a copy of `instance` with its options shuffled, labels reassigned
/// `A..`, and the gold label moved with the gold text.
pub fn permute_options(instance: &McqInstance, seed: u32) -> McqInstance {
    let n = instance.options.len();
    let mut rng = question_rng(seed, &instance.question_id);
    let draw = seeded_permutation(n, &mut rng);
    let texts = draw
        .iter()
        .map(|&i| instance.options[i].text.clone())
        .collect();
    let gold_pos = draw
        .iter()
        .position(|&i| i == instance.gold_label.index())
        .expect("permutation covers every option");
    McqInstance {
        question_id: instance.question_id.clone(),
        dataset: instance.dataset,
        question: instance.question.clone(),
        options: relabel(texts),
        gold_label: Label(gold_pos as u8),
        ordering_id: ordering_id_for_seed(seed),
        permutation: draw.iter().map(|&i| instance.permutation[i]).collect(),
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DatasetStats {
    pub count: usize,
    /// option count → number of instances
    pub choices: BTreeMap<usize, usize>,
}

pub fn dataset_stats(instances: &[McqInstance]) -> DatasetStats {
    let mut stats = DatasetStats::default();
    for inst in instances {
        stats.count += 1;
        *stats.choices.entry(inst.options.len()).or_default() += 1;
    }
    stats
}

/// Dataset file plus the adapter used to read it.
#[derive(Debug, Clone)]
pub struct DatasetSource {
    pub path: PathBuf,
    pub tag: DatasetTag,
    pub format: InputFormat,
}

impl DatasetSource {
    pub fn load(&self) -> Result<LoadedDataset, DatasetError> {
        load_dataset_as(&self.path, self.tag, self.format)
    }

    pub fn native(path: impl AsRef<Path>, tag: DatasetTag) -> DatasetSource {
        DatasetSource {
            path: path.as_ref().to_path_buf(),
            tag,
            format: InputFormat::Native,
        }
    }
}
