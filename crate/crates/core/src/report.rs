//! Report tables: per-cell accuracy, deltas, z-tests, exclusive wins and
//! token summaries, rendered as CSV and markdown.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::eval::{
    correctness, delta, exclusive_wins, permutation_robustness, score, status_counts, token_stats,
    two_proportion_z_test, CellKey, Delta, EvalRecord, ReportError, Robustness, Score, TokenStats,
    ZTest,
};
use crate::strategy::ParseStatus;

pub const CSV_HEADER: [&str; 17] = [
    "dataset",
    "model",
    "strategy",
    "n",
    "k",
    "accuracy",
    "delta",
    "z",
    "p",
    "significant",
    "wins",
    "tokens_mean",
    "tokens_min",
    "tokens_q1",
    "tokens_median",
    "tokens_q3",
    "tokens_max",
];

#[derive(Debug, Clone)]
pub struct ReportRow {
    pub score: Score,
    /// Against the baseline; absent on the baseline row itself and in plain
    /// summaries.
    pub delta: Option<Delta>,
    pub ztest: Option<ZTest>,
    pub wins: Option<usize>,
    pub tokens: TokenStats,
    pub statuses: BTreeMap<ParseStatus, usize>,
}

impl ReportRow {
    fn plain(records: &[EvalRecord]) -> Result<ReportRow, ReportError> {
        Ok(ReportRow {
            score: score(records)?,
            delta: None,
            ztest: None,
            wins: None,
            tokens: token_stats(records)?,
            statuses: status_counts(records),
        })
    }

    pub fn csv_fields(&self) -> [String; 17] {
        let c = &self.score.cell;
        let t = &self.tokens;
        [
            c.dataset.to_string(),
            c.model.clone(),
            c.strategy.to_string(),
            self.score.n.to_string(),
            self.score.k.to_string(),
            self.score.accuracy().to_string(),
            self.delta.map(|d| d.to_string()).unwrap_or_default(),
            self.ztest
                .map(|z| format!("{:.4}", z.z))
                .unwrap_or_default(),
            self.ztest
                .map(|z| format!("{:.6}", z.p))
                .unwrap_or_default(),
            self.ztest
                .map(|z| z.significant.to_string())
                .unwrap_or_default(),
            self.wins.map(|w| w.to_string()).unwrap_or_default(),
            format!("{:.1}", t.mean),
            t.min.to_string(),
            format!("{:.2}", t.q1),
            format!("{:.2}", t.median),
            format!("{:.2}", t.q3),
            t.max.to_string(),
        ]
    }
}

/// One row per cell, in cell order, with no baseline comparison.
pub fn summarize(records: &[EvalRecord]) -> Result<Vec<ReportRow>, ReportError> {
    if records.is_empty() {
        return Err(ReportError::Empty);
    }
    let mut cells: BTreeMap<CellKey, Vec<EvalRecord>> = BTreeMap::new();
    for r in records {
        cells.entry(r.cell()).or_default().push(r.clone());
    }
    cells.values().map(|rs| ReportRow::plain(rs)).collect()
}

/// Compares record sets (one cell each) over identical questions against
/// `runs[baseline]`. Exclusive wins are counted across every supplied run.
pub fn compare(runs: &[Vec<EvalRecord>], baseline: usize) -> Result<Vec<ReportRow>, ReportError> {
    if runs.len() < 2 {
        return Err(ReportError::Contract(format!(
            "compare needs at least 2 record sets, got {}",
            runs.len()
        )));
    }
    if baseline >= runs.len() {
        return Err(ReportError::Contract(format!(
            "baseline index {baseline} out of range for {} record sets",
            runs.len()
        )));
    }
    let mut rows = runs
        .iter()
        .map(|rs| ReportRow::plain(rs))
        .collect::<Result<Vec<_>, _>>()?;
    let sets: BTreeMap<usize, BTreeMap<String, bool>> = runs
        .iter()
        .enumerate()
        .map(|(i, rs)| (i, correctness(rs)))
        .collect();
    for (i, rs) in runs.iter().enumerate() {
        if sets[&i].len() != rs.len() {
            return Err(ReportError::Contract(format!(
                "record set {i} repeats a question id"
            )));
        }
    }
    let wins = exclusive_wins(&sets)?;
    let base = rows[baseline].score.clone();
    for (i, row) in rows.iter_mut().enumerate() {
        let d = delta(&row.score, &base)?;
        if i != baseline {
            row.delta = Some(d);
            row.ztest = Some(two_proportion_z_test(
                row.score.k,
                row.score.n,
                base.k,
                base.n,
            )?);
        }
        row.wins = Some(wins[&i]);
    }
    Ok(rows)
}

pub fn render_csv(rows: &[ReportRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER).expect("in-memory write");
    for row in rows {
        w.write_record(row.csv_fields()).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
}

pub fn render_markdown(title: &str, rows: &[ReportRow]) -> String {
    let mut md = format!("# {title}\n\n");
    md.push_str("| dataset | model | strategy | ordering | n | k | accuracy | delta | z | p | significant | wins | tokens mean | tokens median | tokens total |\n");
    md.push_str("|---|---|---|---|---|---|---|---|---|---|---|---|---|---|---|\n");
    for row in rows {
        let f = row.csv_fields();
        let _ = writeln!(
            md,
            "| {} | {} | {} | {} | {} | {} | {} | {} | {} | {} | {} | {} | {} | {} | {} |",
            f[0],
            f[1],
            f[2],
            row.score.cell.ordering_id,
            f[3],
            f[4],
            f[5],
            dash(&f[6]),
            dash(&f[7]),
            dash(&f[8]),
            dash(&f[9]),
            dash(&f[10]),
            f[11],
            f[14],
            row.tokens.total
        );
    }
    md.push_str("\n## Answer parsing\n\n| strategy | ordering | placeholder | label_fallback | text_fallback | failed |\n|---|---|---|---|---|---|\n");
    for row in rows {
        let s = &row.statuses;
        let _ = writeln!(
            md,
            "| {} | {} | {} | {} | {} | {} |",
            row.score.cell.strategy,
            row.score.cell.ordering_id,
            s[&ParseStatus::Placeholder],
            s[&ParseStatus::LabelFallback],
            s[&ParseStatus::TextFallback],
            s[&ParseStatus::Failed]
        );
    }
    md
}

fn dash(s: &str) -> &str {
    if s.is_empty() {
        "-"
    } else {
        s
    }
}

/// Per-ordering accuracies of one (dataset, model, strategy) plus spread.
#[derive(Debug, Clone)]
pub struct RobustnessReport {
    pub scores: Vec<Score>,
    pub summary: Robustness,
}

pub fn robustness(runs: &[Vec<EvalRecord>]) -> Result<RobustnessReport, ReportError> {
    let scores = runs
        .iter()
        .map(|rs| score(rs))
        .collect::<Result<Vec<_>, _>>()?;
    let mut per_ordering = BTreeMap::new();
    for s in &scores {
        if per_ordering
            .insert(s.cell.ordering_id, (s.n, s.k))
            .is_some()
        {
            return Err(ReportError::Contract(format!(
                "ordering {} appears twice",
                s.cell.ordering_id
            )));
        }
    }
    Ok(RobustnessReport {
        summary: permutation_robustness(&per_ordering)?,
        scores,
    })
}

impl RobustnessReport {
    pub fn render_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "dataset",
            "model",
            "strategy",
            "ordering_id",
            "n",
            "k",
            "accuracy",
        ])
        .expect("in-memory write");
        for s in &self.scores {
            w.write_record([
                s.cell.dataset.to_string(),
                s.cell.model.clone(),
                s.cell.strategy.to_string(),
                s.cell.ordering_id.to_string(),
                s.n.to_string(),
                s.k.to_string(),
                s.accuracy().to_string(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
    }

    pub fn render_markdown(&self) -> String {
        let mut md = String::from(
            "# Option-order robustness\n\n| ordering | n | k | accuracy |\n|---|---|---|---|\n",
        );
        for s in &self.scores {
            let _ = writeln!(
                md,
                "| {} | {} | {} | {} |",
                s.cell.ordering_id,
                s.n,
                s.k,
                s.accuracy()
            );
        }
        let _ = write!(
            md,
            "\nmedian accuracy: {:.2}\nvariance: {:.4}\n",
            self.summary.median, self.summary.variance
        );
        md
    }
}
