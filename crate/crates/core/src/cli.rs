//! `biasprompt` command line: run, compare, permute, report.

use std::collections::BTreeSet;
use std::fs;
use std::num::NonZeroUsize;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};

use crate::backend::{Backend, GenerationParams, HttpBackend, MockBackend, RetryPolicy};
use crate::dataset::{
    load_dataset_as, ordering_id_for_seed, permute_options, DatasetTag, InputFormat, McqInstance,
};
use crate::eval::{read_records, score, status_counts, EvalRecord, RecordWriter, ReportError};
use crate::pool::ordered_for_each;
use crate::prompt::load_templates;
use crate::report::{compare, render_csv, render_markdown, robustness, summarize};
use crate::strategy::{Prediction, Strategy, StrategyError, StrategyErrorKind, StrategyRunner};

#[derive(Debug, Parser)]
#[command(
    name = "biasprompt",
    version,
    about = "Per-option reasoning prompting for multiple-choice QA"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one strategy over a dataset and write one record per question.
    Run(RunArgs),
    /// Compare record files of one dataset and model against a baseline.
    Compare(CompareArgs),
    /// Run one strategy under several option orderings.
    Permute(PermuteArgs),
    /// Re-aggregate record files into CSV and markdown tables.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
pub struct BackendArgs {
    /// OpenAI-compatible base URL; requests go to `{endpoint}/chat/completions`.
    #[arg(long)]
    pub endpoint: Option<String>,
    /// Scripted mock fixture (JSON lines of hash/text entries).
    #[arg(long)]
    pub mock: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// csqa, strategyqa, piqa, bbh_date, bbh_causal (native files) or jsonl
    /// (normalized rows; needs --tag).
    #[arg(long)]
    pub format: String,
    #[arg(long)]
    pub tag: Option<DatasetTag>,
    #[arg(long)]
    pub strategy: Strategy,
    #[command(flatten)]
    pub backend: BackendArgs,
    /// Model name sent to the endpoint and stored in records. Defaults to
    /// `mock` with --mock.
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u32,
    /// Questions in flight at once.
    #[arg(long, default_value = "4")]
    pub concurrency: NonZeroUsize,
    /// Reasoning requests in flight per question.
    #[arg(long, default_value = "6")]
    pub reasoning_concurrency: NonZeroUsize,
    #[arg(long, default_value_t = 256)]
    pub max_tokens: u32,
    #[arg(long, default_value_t = 1)]
    pub min_tokens: u32,
    #[arg(long, default_value_t = 1024)]
    pub context_window: u32,
    #[arg(long, default_value_t = 0.0)]
    pub temperature: f64,
    /// Retries for transient endpoint failures.
    #[arg(long, default_value_t = 3)]
    pub retries: u32,
    /// Request field carrying the minimum completion length, when the
    /// endpoint has one (e.g. `min_tokens`).
    #[arg(long)]
    pub min_tokens_field: Option<String>,
    /// Keep only the first N questions.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub limit: Option<u64>,
    /// Directory of template overrides, one `<template_id>.txt` per template.
    #[arg(long)]
    pub templates_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub exp: ExperimentArgs,
    /// Records file (JSON lines).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PermuteArgs {
    #[command(flatten)]
    pub exp: ExperimentArgs,
    /// Output directory for per-ordering records and the robustness tables.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of random orderings, seeded from --seed, --seed + 1, ...
    #[arg(long, default_value_t = 3)]
    pub orderings: u32,
    /// Explicit ordering seeds; overrides --orderings.
    #[arg(long, value_delimiter = ',')]
    pub ordering_seeds: Option<Vec<u32>>,
    /// Also run the source order as ordering 0.
    #[arg(long)]
    pub include_source: bool,
    /// Generate reasonings once, under the first ordering, and reuse them
    /// for the others.
    #[arg(long)]
    pub reuse_reasonings: bool,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(required = true, num_args = 2..)]
    pub records: Vec<PathBuf>,
    /// Index into the record files of the baseline run.
    #[arg(long, default_value_t = 0)]
    pub baseline: usize,
    /// CSV path; the markdown table goes next to it with an `.md` extension.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(required = true)]
    pub records: Vec<PathBuf>,
    /// CSV path; the markdown table goes next to it with an `.md` extension.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug)]
pub enum CliError {
    /// Usage, configuration or data contract problem: exit 2.
    Config(String),
    /// Backend unusable: exit 3.
    Backend(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Backend(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) | CliError::Backend(m) => f.write_str(m),
        }
    }
}

impl From<ReportError> for CliError {
    fn from(e: ReportError) -> Self {
        CliError::Config(e.to_string())
    }
}

fn config(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

pub fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

pub fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Run(a) => cmd_run(&a),
        Command::Compare(a) => cmd_compare(&a),
        Command::Permute(a) => cmd_permute(&a),
        Command::Report(a) => cmd_report(&a),
    }
}

/// Everything a run needs besides the questions.
struct Session {
    backend: Box<dyn Backend>,
    runner: StrategyRunner,
    strategy: Strategy,
    model: String,
    seed: u32,
    workers: NonZeroUsize,
}

fn resolve_tag(
    format: &str,
    tag: Option<DatasetTag>,
) -> Result<(DatasetTag, InputFormat), CliError> {
    if format == "jsonl" {
        let tag = tag.ok_or_else(|| config("--format jsonl needs --tag"))?;
        return Ok((tag, InputFormat::Normalized));
    }
    let native: DatasetTag = format.parse().map_err(|_| {
        config(format!(
            "unknown --format `{format}` (expected csqa, strategyqa, piqa, bbh_date, bbh_causal or jsonl)"
        ))
    })?;
    if let Some(t) = tag.filter(|&t| t != native) {
        return Err(config(format!("--tag {t} contradicts --format {native}")));
    }
    Ok((native, InputFormat::Native))
}

fn load_questions(a: &ExperimentArgs) -> Result<Vec<McqInstance>, CliError> {
    let (tag, format) = resolve_tag(&a.format, a.tag)?;
    let mut instances = load_dataset_as(&a.dataset, tag, format)
        .map_err(config)?
        .instances;
    if let Some(limit) = a.limit {
        instances.truncate(usize::try_from(limit).unwrap_or(usize::MAX));
    }
    if instances.is_empty() {
        return Err(config(format!("{}: no questions", a.dataset.display())));
    }
    Ok(instances)
}

fn open_session(a: &ExperimentArgs) -> Result<Session, CliError> {
    let params = GenerationParams {
        temperature: a.temperature,
        max_new_tokens: a.max_tokens,
        min_new_tokens: a.min_tokens,
        context_window: a.context_window,
    };
    params.validate().map_err(config)?;
    let templates = load_templates(a.templates_dir.as_deref()).map_err(config)?;
    let (backend, model): (Box<dyn Backend>, String) = match (&a.backend.endpoint, &a.backend.mock)
    {
        (Some(url), None) => {
            let model = a
                .model
                .clone()
                .ok_or_else(|| config("--endpoint needs --model"))?;
            let mut http = HttpBackend::new(url, &model)
                .map_err(config)?
                .with_retry(RetryPolicy {
                    retries: a.retries,
                    base_delay: Duration::from_millis(500),
                    max_delay: Duration::from_secs(8),
                });
            if let Some(field) = &a.min_tokens_field {
                http = http.with_min_tokens_field(field.clone());
            }
            (Box::new(http), model)
        }
        (None, Some(path)) => (
            Box::new(MockBackend::from_fixture(path).map_err(config)?),
            a.model.clone().unwrap_or_else(|| "mock".into()),
        ),
        _ => return Err(config("exactly one of --endpoint and --mock is required")),
    };
    Ok(Session {
        backend,
        runner: StrategyRunner::new(templates, params)
            .with_reasoning_concurrency(a.reasoning_concurrency),
        strategy: a.strategy,
        model,
        seed: a.seed,
        workers: a.concurrency,
    })
}

/// Runs `work` over `instances`, appending records in order. The first
/// question runs alone: if its backend fails the run stops with exit 3.
/// Later failures are recorded as failed parses.
fn run_questions<W>(
    s: &Session,
    instances: &[McqInstance],
    out: &Path,
    work: W,
) -> Result<Vec<EvalRecord>, CliError>
where
    W: Fn(&McqInstance) -> Result<Prediction, StrategyError> + Sync,
{
    let mut writer = RecordWriter::create(out)?;
    let first = match work(&instances[0]) {
        Ok(p) => p,
        Err(e) => {
            return Err(match e.source {
                StrategyErrorKind::Backend(_) => {
                    CliError::Backend(format!("backend unusable on first question: {e}"))
                }
                StrategyErrorKind::Prompt(_) => config(e),
            })
        }
    };
    let mut records = Vec::with_capacity(instances.len());
    let rec = EvalRecord::new(&instances[0], first, &s.model, u64::from(s.seed));
    writer.append(&rec)?;
    records.push(rec);

    let rest = &instances[1..];
    let mut write_error = None;
    ordered_for_each(
        rest,
        s.workers,
        |_, inst| work(inst),
        |i, result| {
            let prediction = result.unwrap_or_else(|e| {
                log::warn!("{e}");
                Prediction::from_error(&rest[i], s.strategy, &e)
            });
            let rec = EvalRecord::new(&rest[i], prediction, &s.model, u64::from(s.seed));
            if write_error.is_none() {
                write_error = writer.append(&rec).err();
            }
            records.push(rec);
        },
    );
    if let Some(e) = write_error {
        return Err(e.into());
    }
    Ok(records)
}

fn summary_line(records: &[EvalRecord]) -> Result<String, CliError> {
    let s = score(records)?;
    let statuses = status_counts(records)
        .into_iter()
        .map(|(status, count)| format!("{}={count}", status.as_str()))
        .collect::<Vec<_>>()
        .join(" ");
    Ok(format!(
        "{} {} {} ordering {}: accuracy {}/{}, {} ({statuses})",
        s.cell.dataset,
        s.cell.model,
        s.cell.strategy,
        s.cell.ordering_id,
        s.k,
        s.n,
        s.accuracy()
    ))
}

fn cmd_run(a: &RunArgs) -> Result<(), CliError> {
    let session = open_session(&a.exp)?;
    let instances = load_questions(&a.exp)?;
    let records = run_questions(&session, &instances, &a.out, |inst| {
        session
            .runner
            .run(inst, session.strategy, session.backend.as_ref())
    })?;
    println!("{}", summary_line(&records)?);
    Ok(())
}

fn ordering_seeds(a: &PermuteArgs) -> Result<Vec<u32>, CliError> {
    let seeds = match &a.ordering_seeds {
        Some(seeds) => {
            let distinct: BTreeSet<u32> = seeds.iter().copied().collect();
            if distinct.len() != seeds.len() {
                return Err(config("--ordering-seeds must be distinct"));
            }
            seeds.clone()
        }
        None => (0..a.orderings)
            .map(|i| a.exp.seed.wrapping_add(i))
            .collect(),
    };
    let total = seeds.len() + usize::from(a.include_source);
    if total < 2 {
        return Err(config(format!(
            "permute needs at least 2 orderings, got {total}"
        )));
    }
    Ok(seeds)
}

fn cmd_permute(a: &PermuteArgs) -> Result<(), CliError> {
    let seeds = ordering_seeds(a)?;
    let session = open_session(&a.exp)?;
    let source = load_questions(&a.exp)?;
    fs::create_dir_all(&a.out).map_err(|e| config(format!("{}: {e}", a.out.display())))?;

    let mut plans: Vec<Option<u32>> = Vec::new();
    if a.include_source {
        plans.push(None);
    }
    plans.extend(seeds.into_iter().map(Some));

    let reuse = a.reuse_reasonings && session.strategy.uses_reasonings();
    let mut cached: Option<Vec<Vec<String>>> = None;
    let mut runs = Vec::with_capacity(plans.len());
    for plan in plans {
        let instances: Vec<McqInstance> = match plan {
            Some(seed) => source.iter().map(|i| permute_options(i, seed)).collect(),
            None => source.clone(),
        };
        let ordering_id = plan.map_or(0, ordering_id_for_seed);
        let path = a.out.join(format!("records.ordering-{ordering_id}.jsonl"));
        let backend = session.backend.as_ref();
        let records = match &cached {
            Some(by_source) => {
                let index: std::collections::HashMap<&str, usize> = source
                    .iter()
                    .enumerate()
                    .map(|(i, q)| (q.question_id.as_str(), i))
                    .collect();
                run_questions(&session, &instances, &path, |inst| {
                    let prior = &by_source[index[inst.question_id.as_str()]];
                    session
                        .runner
                        .run_with_reasonings(inst, session.strategy, backend, prior)
                })?
            }
            None => run_questions(&session, &instances, &path, |inst| {
                session.runner.run(inst, session.strategy, backend)
            })?,
        };
        if reuse && cached.is_none() {
            cached = Some(
                instances
                    .iter()
                    .zip(&records)
                    .map(|(inst, r)| {
                        r.reasonings
                            .as_ref()
                            .map(|rs| rs.by_source(inst))
                            .unwrap_or_default()
                    })
                    .collect(),
            );
        }
        println!("{}", summary_line(&records)?);
        runs.push(records);
    }

    let rob = robustness(&runs)?;
    let md = rob.render_markdown();
    write_file(&a.out.join("robustness.csv"), &rob.render_csv())?;
    write_file(&a.out.join("robustness.md"), &md)?;
    print!("{md}");
    Ok(())
}

fn read_all(paths: &[PathBuf]) -> Result<Vec<Vec<EvalRecord>>, CliError> {
    paths
        .iter()
        .map(|p| read_records(p).map_err(CliError::from))
        .collect()
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| config(format!("{}: {e}", path.display())))
}

fn write_tables(out: &Path, csv: &str, md: &str) -> Result<(), CliError> {
    write_file(out, csv)?;
    write_file(&out.with_extension("md"), md)?;
    print!("{md}");
    Ok(())
}

fn cmd_compare(a: &CompareArgs) -> Result<(), CliError> {
    let runs = read_all(&a.records)?;
    if let Some(i) = runs.iter().position(Vec::is_empty) {
        return Err(config(format!("{}: no records", a.records[i].display())));
    }
    let rows = compare(&runs, a.baseline)?;
    write_tables(
        &a.out,
        &render_csv(&rows),
        &render_markdown("Strategy comparison", &rows),
    )
}

fn cmd_report(a: &ReportArgs) -> Result<(), CliError> {
    let records: Vec<EvalRecord> = read_all(&a.records)?.into_iter().flatten().collect();
    let rows = summarize(&records)?;
    write_tables(
        &a.out,
        &render_csv(&rows),
        &render_markdown("Report", &rows),
    )
}
