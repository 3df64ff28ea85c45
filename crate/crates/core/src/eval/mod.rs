//! Scoring and aggregate statistics over evaluation records.

mod ztest;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{DatasetTag, Label, McqInstance};
use crate::prompt::ReasoningSet;
use crate::strategy::{CallUsage, ParseStatus, Prediction, Strategy};

pub use ztest::{two_proportion_z_test, ZTest, SIGNIFICANCE_LEVEL};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("no records")]
    Empty,
    #[error("{0}")]
    Contract(String),
    #[error("question sets differ; missing or extra ids: {}", .0.join(", "))]
    Coverage(Vec<String>),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

/// One scored question, as persisted one per line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub question_id: String,
    pub dataset: DatasetTag,
    pub model: String,
    pub strategy: Strategy,
    pub ordering_id: u64,
    pub seed: u64,
    pub gold_label: Label,
    pub predicted_label: Option<Label>,
    pub parse_status: ParseStatus,
    pub correct: bool,
    pub reasonings: Option<ReasoningSet>,
    pub calls: Vec<CallUsage>,
    pub raw_final_text: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

impl EvalRecord {
    /// Scores `prediction` against the instance's gold label. An absent
    /// prediction is always incorrect.
    pub fn new(
        instance: &McqInstance,
        prediction: Prediction,
        model: &str,
        seed: u64,
    ) -> EvalRecord {
        let correct = prediction.predicted_label == Some(instance.gold_label);
        EvalRecord {
            question_id: prediction.question_id,
            dataset: instance.dataset,
            model: model.to_string(),
            strategy: prediction.strategy,
            ordering_id: instance.ordering_id,
            seed,
            gold_label: instance.gold_label,
            predicted_label: prediction.predicted_label,
            parse_status: prediction.parse_status,
            correct,
            reasonings: prediction.reasonings,
            calls: prediction.calls,
            raw_final_text: prediction.raw_final_text,
            flags: prediction.flags,
        }
    }

    pub fn completion_tokens(&self) -> u64 {
        self.calls
            .iter()
            .map(|c| u64::from(c.completion_tokens))
            .sum()
    }

    pub fn cell(&self) -> CellKey {
        CellKey {
            dataset: self.dataset,
            model: self.model.clone(),
            strategy: self.strategy,
            ordering_id: self.ordering_id,
        }
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("records serialize")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CellKey {
    pub dataset: DatasetTag,
    pub model: String,
    pub strategy: Strategy,
    pub ordering_id: u64,
}

/// Appends records to a line-delimited file, flushing after each line.
pub struct RecordWriter {
    out: BufWriter<File>,
    path: PathBuf,
}

impl RecordWriter {
    pub fn create(path: &Path) -> Result<RecordWriter, ReportError> {
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(path)
            .map_err(|source| ReportError::Io {
                path: path.to_path_buf(),
                source,
            })?;
        Ok(RecordWriter {
            out: BufWriter::new(file),
            path: path.to_path_buf(),
        })
    }

    pub fn append(&mut self, record: &EvalRecord) -> Result<(), ReportError> {
        let io = |source| ReportError::Io {
            path: self.path.clone(),
            source,
        };
        writeln!(self.out, "{}", record.to_line()).map_err(io)?;
        self.out.flush().map_err(io)
    }
}

pub fn read_records(path: &Path) -> Result<Vec<EvalRecord>, ReportError> {
    let file = File::open(path).map_err(|source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| ReportError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: EvalRecord = serde_json::from_str(&line).map_err(|e| ReportError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        if rec.correct != (rec.predicted_label == Some(rec.gold_label)) {
            return Err(ReportError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: "`correct` disagrees with predicted and gold labels".into(),
            });
        }
        out.push(rec);
    }
    Ok(out)
}

/// A percentage held in exact tenths, displayed with one decimal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Tenths(pub i64);

impl fmt::Display for Tenths {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sign = if self.0 < 0 { "-" } else { "" };
        let a = self.0.unsigned_abs();
        write!(f, "{sign}{}.{}", a / 10, a % 10)
    }
}

/// `100 * k / n` rounded half away from zero to one decimal, in integers.
pub fn percent_tenths(k: u64, n: u64) -> Tenths {
    assert!(n > 0);
    let (k, n) = (u128::from(k), u128::from(n));
    Tenths(((2000 * k + n) / (2 * n)) as i64)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Score {
    pub cell: CellKey,
    pub n: u64,
    pub k: u64,
}

impl Score {
    pub fn fraction(&self) -> f64 {
        self.k as f64 / self.n as f64
    }

    pub fn percent(&self) -> f64 {
        100.0 * self.fraction()
    }

    pub fn accuracy(&self) -> Tenths {
        percent_tenths(self.k, self.n)
    }
}

/// Exact-match accuracy of one (dataset, model, strategy, ordering) cell.
pub fn score(records: &[EvalRecord]) -> Result<Score, ReportError> {
    let first = records.first().ok_or(ReportError::Empty)?;
    let cell = first.cell();
    if let Some(other) = records.iter().find(|r| r.cell() != cell) {
        return Err(ReportError::Contract(format!(
            "records mix cells: {}/{}/{}/{} and {}/{}/{}/{}",
            cell.dataset,
            cell.model,
            cell.strategy,
            cell.ordering_id,
            other.dataset,
            other.model,
            other.strategy,
            other.ordering_id
        )));
    }
    Ok(Score {
        n: records.len() as u64,
        k: records.iter().filter(|r| r.correct).count() as u64,
        cell,
    })
}

/// Difference of rounded accuracies. A zero difference takes the sign of the
/// unrounded one, so an accuracy that is lower below display precision reads
/// `-0.0%`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Delta {
    pub tenths: i64,
    /// Unrounded difference in percentage points.
    pub raw: f64,
}

impl fmt::Display for Delta {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let negative = self.tenths < 0 || (self.tenths == 0 && self.raw < 0.0);
        let a = self.tenths.unsigned_abs();
        write!(
            f,
            "{}{}.{}%",
            if negative { '-' } else { '+' },
            a / 10,
            a % 10
        )
    }
}

pub fn delta(cell: &Score, baseline: &Score) -> Result<Delta, ReportError> {
    if cell.cell.dataset != baseline.cell.dataset || cell.cell.model != baseline.cell.model {
        return Err(ReportError::Contract(format!(
            "cannot compare {}/{} against baseline {}/{}",
            cell.cell.dataset, cell.cell.model, baseline.cell.dataset, baseline.cell.model
        )));
    }
    Ok(Delta {
        tenths: cell.accuracy().0 - baseline.accuracy().0,
        raw: cell.percent() - baseline.percent(),
    })
}

/// question id → correct, for one record set.
pub fn correctness(records: &[EvalRecord]) -> BTreeMap<String, bool> {
    records
        .iter()
        .map(|r| (r.question_id.clone(), r.correct))
        .collect()
}

/// For each key, the questions it answers correctly while every other key
/// answers incorrectly. All sets must cover the same question ids.
pub fn exclusive_wins<K: Ord + Clone>(
    sets: &BTreeMap<K, BTreeMap<String, bool>>,
) -> Result<BTreeMap<K, usize>, ReportError> {
    let mut iter = sets.values();
    let Some(first) = iter.next() else {
        return Ok(BTreeMap::new());
    };
    let ids: BTreeSet<&String> = first.keys().collect();
    let mut offending = BTreeSet::new();
    for other in iter {
        let theirs: BTreeSet<&String> = other.keys().collect();
        offending.extend(ids.symmetric_difference(&theirs).map(|s| s.to_string()));
    }
    if !offending.is_empty() {
        return Err(ReportError::Coverage(offending.into_iter().collect()));
    }
    let mut wins: BTreeMap<K, usize> = sets.keys().map(|k| (k.clone(), 0)).collect();
    for id in ids {
        let winners: Vec<&K> = sets.iter().filter(|(_, m)| m[id]).map(|(k, _)| k).collect();
        if let [only] = winners[..] {
            *wins.get_mut(only).unwrap() += 1;
        }
    }
    Ok(wins)
}

/// Summary of per-question generated tokens, summed over every call.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TokenStats {
    pub questions: usize,
    pub total: u64,
    pub mean: f64,
    pub min: u64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: u64,
}

/// Linear-interpolation quantile (numpy's default) of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn token_stats(records: &[EvalRecord]) -> Result<TokenStats, ReportError> {
    if records.is_empty() {
        return Err(ReportError::Empty);
    }
    let mut totals: Vec<u64> = records.iter().map(EvalRecord::completion_tokens).collect();
    totals.sort_unstable();
    let total: u64 = totals.iter().sum();
    let as_f: Vec<f64> = totals.iter().map(|&t| t as f64).collect();
    Ok(TokenStats {
        questions: totals.len(),
        total,
        mean: total as f64 / totals.len() as f64,
        min: totals[0],
        q1: quantile(&as_f, 0.25),
        median: quantile(&as_f, 0.5),
        q3: quantile(&as_f, 0.75),
        max: totals[totals.len() - 1],
    })
}

pub fn status_counts(records: &[EvalRecord]) -> BTreeMap<ParseStatus, usize> {
    let mut counts: BTreeMap<ParseStatus, usize> =
        ParseStatus::ALL.into_iter().map(|s| (s, 0)).collect();
    for r in records {
        *counts.get_mut(&r.parse_status).unwrap() += 1;
    }
    counts
}

/// Accuracy spread over option orderings.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Robustness {
    /// (ordering id, accuracy percent), by ordering id.
    pub accuracies: Vec<(u64, f64)>,
    pub median: f64,
    /// Population variance of the percentages.
    pub variance: f64,
}

pub fn permutation_robustness(
    per_ordering: &BTreeMap<u64, (u64, u64)>,
) -> Result<Robustness, ReportError> {
    if per_ordering.len() < 2 {
        return Err(ReportError::Contract(format!(
            "robustness needs at least 2 orderings, got {}",
            per_ordering.len()
        )));
    }
    let mut accuracies = Vec::with_capacity(per_ordering.len());
    for (&id, &(n, k)) in per_ordering {
        if n == 0 || k > n {
            return Err(ReportError::Contract(format!(
                "ordering {id}: invalid count {k}/{n}"
            )));
        }
        accuracies.push((id, 100.0 * k as f64 / n as f64));
    }
    let mut values: Vec<f64> = accuracies.iter().map(|a| a.1).collect();
    values.sort_by(f64::total_cmp);
    let m = values.len();
    let median = if m % 2 == 1 {
        values[m / 2]
    } else {
        (values[m / 2 - 1] + values[m / 2]) / 2.0
    };
    let mean = values.iter().sum::<f64>() / m as f64;
    let variance = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m as f64;
    Ok(Robustness {
        accuracies,
        median,
        variance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::TemplateId;

    fn cell(dataset: DatasetTag, k: u64, n: u64) -> Score {
        Score {
            cell: CellKey {
                dataset,
                model: "m".into(),
                strategy: Strategy::Bias,
                ordering_id: 0,
            },
            n,
            k,
        }
    }

    fn rec(id: &str, correct: bool, tokens: &[u32]) -> EvalRecord {
        let gold = Label::from_char('A').unwrap();
        EvalRecord {
            question_id: id.into(),
            dataset: DatasetTag::Csqa,
            model: "m".into(),
            strategy: Strategy::ZeroShot,
            ordering_id: 0,
            seed: 0,
            gold_label: gold,
            predicted_label: correct.then_some(gold),
            parse_status: if correct {
                ParseStatus::Placeholder
            } else {
                ParseStatus::Failed
            },
            correct,
            reasonings: None,
            calls: tokens
                .iter()
                .map(|&t| CallUsage {
                    template_id: TemplateId::ZeroShot,
                    prompt_tokens: 1,
                    completion_tokens: t,
                    latency_ms: 0,
                })
                .collect(),
            raw_final_text: String::new(),
            flags: vec![],
        }
    }

    #[test]
    fn accuracy_rounding() {
        assert_eq!(percent_tenths(3, 5).to_string(), "60.0");
        assert_eq!(percent_tenths(806, 1221).to_string(), "66.0");
        assert_eq!(percent_tenths(0, 10).to_string(), "0.0");
        assert_eq!(percent_tenths(1, 8).to_string(), "12.5");
        // 100/16 = 6.25 rounds away from zero
        assert_eq!(percent_tenths(1, 16).to_string(), "6.3");
        assert_eq!(percent_tenths(2, 3).to_string(), "66.7");
    }

    #[test]
    fn scoring_cells() {
        let rs = vec![
            rec("a", true, &[1]),
            rec("b", false, &[1]),
            rec("c", true, &[1]),
        ];
        let s = score(&rs).unwrap();
        assert_eq!((s.n, s.k), (3, 2));
        assert!(matches!(score(&[]), Err(ReportError::Empty)));
        let mut mixed = rs.clone();
        mixed[1].strategy = Strategy::Cot;
        assert!(matches!(score(&mixed), Err(ReportError::Contract(_))));
    }

    #[test]
    fn results_table_deltas() {
        let csqa = |k| cell(DatasetTag::Csqa, k, 1221);
        assert_eq!(csqa(806).accuracy().to_string(), "66.0");
        assert_eq!(csqa(795).accuracy().to_string(), "65.1");
        assert_eq!(delta(&csqa(806), &csqa(795)).unwrap().to_string(), "+0.9%");
        let cj = |k| cell(DatasetTag::BbhCausal, k, 187);
        assert_eq!(delta(&cj(117), &cj(100)).unwrap().to_string(), "+9.1%");
        // 51.86 vs 51.90: equal once rounded, lower before
        let low = cell(DatasetTag::BbhCausal, 5186, 10000);
        let base = cell(DatasetTag::BbhCausal, 519, 1000);
        assert_eq!(delta(&low, &base).unwrap().to_string(), "-0.0%");
        assert_eq!(delta(&base, &base).unwrap().to_string(), "+0.0%");
        assert_eq!(delta(&cj(100), &cj(117)).unwrap().to_string(), "-9.1%");
        assert!(delta(&csqa(1), &cj(1)).is_err());
    }

    #[test]
    fn wins_hand_enumerated() {
        let rows = |v: [bool; 4]| -> BTreeMap<String, bool> {
            v.iter()
                .enumerate()
                .map(|(i, &c)| (format!("q{i}"), c))
                .collect()
        };
        let sets = BTreeMap::from([
            ("A", rows([true, false, false, true])),
            ("B", rows([false, true, false, true])),
            ("C", rows([false, false, true, true])),
        ]);
        assert_eq!(
            exclusive_wins(&sets).unwrap(),
            BTreeMap::from([("A", 1), ("B", 1), ("C", 1)])
        );

        let same = BTreeMap::from([
            ("x", rows([true, false, true, true])),
            ("y", rows([true, false, true, true])),
        ]);
        assert!(exclusive_wins(&same).unwrap().values().all(|&c| c == 0));

        let mut short = sets.clone();
        short.get_mut("B").unwrap().remove("q3");
        match exclusive_wins(&short).unwrap_err() {
            ReportError::Coverage(ids) => assert_eq!(ids, ["q3"]),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn token_summaries() {
        let one = token_stats(&[rec("a", true, &[5, 7, 9])]).unwrap();
        assert_eq!(one.total, 21);
        assert_eq!(one.mean, 21.0);
        let two = token_stats(&[rec("a", true, &[10]), rec("b", true, &[30])]).unwrap();
        assert_eq!(two.mean, 20.0);
        assert_eq!(two.median, 20.0);
        assert_eq!((two.q1, two.q3), (15.0, 25.0));
        assert!(matches!(token_stats(&[]), Err(ReportError::Empty)));
    }

    #[test]
    fn robustness_summary() {
        let same = BTreeMap::from([(1, (10, 6)), (2, (10, 6)), (3, (10, 6))]);
        let r = permutation_robustness(&same).unwrap();
        assert_eq!((r.median, r.variance), (60.0, 0.0));

        let spread = BTreeMap::from([(1, (50, 30)), (2, (50, 31)), (3, (50, 32))]);
        let r = permutation_robustness(&spread).unwrap();
        assert_eq!(r.median, 62.0);
        assert!((r.variance - 8.0 / 3.0).abs() < 1e-12);

        let even = BTreeMap::from([(1, (10, 5)), (2, (10, 7))]);
        assert_eq!(permutation_robustness(&even).unwrap().median, 60.0);
        assert!(permutation_robustness(&BTreeMap::from([(1, (10, 5))])).is_err());
    }

    #[test]
    fn status_accounting() {
        let rs = vec![rec("a", true, &[1]), rec("b", false, &[1])];
        let c = status_counts(&rs);
        assert_eq!(c.values().sum::<usize>(), 2);
        assert_eq!(c[&ParseStatus::Failed], 1);
    }

    #[test]
    fn record_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        let rs = vec![rec("a", true, &[4]), rec("b", false, &[2, 3])];
        let mut w = RecordWriter::create(&path).unwrap();
        for r in &rs {
            w.append(r).unwrap();
        }
        drop(w);
        assert_eq!(read_records(&path).unwrap(), rs);
        let line = std::fs::read_to_string(&path).unwrap();
        assert!(line.starts_with(r#"{"question_id":"a","dataset":"csqa","model":"m","strategy":"zero_shot","ordering_id":0,"seed":0,"gold_label":"A","predicted_label":"A","parse_status":"placeholder","correct":true,"reasonings":null,"calls":[{"template_id":"zero_shot""#));
    }
}
