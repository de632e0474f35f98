//! The experiment runner: systems × datasets, with resumable transcripts.
//!
//! A run walks every (dataset, system) cell. Each cell streams its sampled
//! instances through the pipeline, appending one JSON line per finished
//! instance to the cell's transcript file, so an interrupted run resumes by
//! skipping instances whose transcripts already exist. Cell failures are
//! isolated: a missing dataset file or a dead backend marks that cell failed
//! in the summary and the walk continues.
//!
//! Outputs under the run directory:
//!
//! * `transcripts_<system>_<dataset>.jsonl` — one line per instance;
//! * `summary.json` — the full machine-readable summary;
//! * `summary_<dataset>.csv` — `model,macro_f1,micro_f1,logloss,brier`;
//! * `summary.txt` — metric and uncertainty-dynamics tables;
//! * `plot_<dataset>.csv`, `plot_overall.csv` — per-step series for plots.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Backend, HttpBackend};
use crate::datasets::{sample_instances, DatasetSpec, Instance};
use crate::fixtures::{FixtureError, Script};
use crate::metrics::{self, BrierConvention, EvalRecord, MetricsError, StepStats, LOG_LOSS_CLIP};
use crate::orchestrator::{
    FinalizeMode, OrchestratorError, PipelineConfig, PipelineRunner, System, Transcript,
};
use crate::prompting::{PromptError, PromptSet};

/// Default instances sampled per dataset.
pub const DEFAULT_SAMPLE_SIZE: usize = 500;

/// Default sampling seed.
pub const DEFAULT_SEED: u64 = 42;

/// Default number of instances processed concurrently.
pub const DEFAULT_CONCURRENCY: usize = 4;

/// Errors that abort a whole run (cell-level trouble is captured in the
/// summary instead).
#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid run config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Fixture(#[from] FixtureError),
    #[error(transparent)]
    Template(#[from] PromptError),
    #[error("no transcript files found under {0}")]
    NothingToReport(PathBuf),
}

/// Errors that fail one cell.
#[derive(Debug, Error)]
enum CellError {
    #[error(transparent)]
    Orchestrator(#[from] OrchestratorError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("transcript file {path} is corrupt at line {line}: {detail}")]
    CorruptTranscript {
        path: PathBuf,
        line: usize,
        detail: String,
    },
    #[error("{0}")]
    Internal(String),
}

/// Which backend a run talks to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendChoice {
    /// A chat-completions server at `base_url`.
    Http { base_url: String },
    /// A scripted-reply file for offline runs.
    MockScript { path: PathBuf },
}

/// Full description of one experiment run. Serialized into the summary as a
/// provenance echo; deliberately carries no credentials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub systems: Vec<System>,
    pub datasets: Vec<DatasetSpec>,
    pub n_agents: usize,
    pub ibc_index: usize,
    pub sample_size: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub finalize: FinalizeMode,
    pub brier: BrierConvention,
    /// Drop degraded instances from metric aggregation (they always stay in
    /// the transcripts).
    pub exclude_degraded: bool,
    pub backend: BackendChoice,
    pub model: String,
    pub max_tokens: u32,
    pub concurrency: usize,
    /// Load prompt templates from this directory instead of the built-ins.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub templates_dir: Option<PathBuf>,
}

impl RunConfig {
    /// A config with the standard defaults for everything but the cells, the
    /// output directory, and the backend.
    pub fn new(
        systems: Vec<System>,
        datasets: Vec<DatasetSpec>,
        out_dir: PathBuf,
        backend: BackendChoice,
    ) -> Self {
        Self {
            systems,
            datasets,
            n_agents: crate::orchestrator::DEFAULT_N_AGENTS,
            ibc_index: crate::orchestrator::DEFAULT_IBC_INDEX,
            sample_size: DEFAULT_SAMPLE_SIZE,
            seed: DEFAULT_SEED,
            out_dir,
            finalize: FinalizeMode::Judge,
            brier: BrierConvention::Mean,
            exclude_degraded: false,
            backend: BackendChoice::Http {
                base_url: String::new(),
            },
            model: "default".to_string(),
            max_tokens: crate::backend::DEFAULT_MAX_TOKENS,
            concurrency: DEFAULT_CONCURRENCY,
            templates_dir: None,
        }
        .with_backend(backend)
    }

    fn with_backend(mut self, backend: BackendChoice) -> Self {
        self.backend = backend;
        self
    }

    /// The per-instance pipeline settings for one cell.
    pub fn pipeline_config(
        &self,
        system: System,
        space: crate::prob::LabelSpace,
    ) -> PipelineConfig {
        let mut config = PipelineConfig::new(system, space);
        config.n_agents = self.n_agents;
        config.ibc_index = self.ibc_index;
        config.finalize = self.finalize;
        config.model = self.model.clone();
        config.max_tokens = self.max_tokens;
        config
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.systems.is_empty() {
            return Err(ExperimentError::InvalidConfig("no systems selected".into()));
        }
        let mut seen = HashSet::new();
        for system in &self.systems {
            if !seen.insert(*system) {
                return Err(ExperimentError::InvalidConfig(format!(
                    "system {system} listed twice"
                )));
            }
        }
        if self.datasets.is_empty() {
            return Err(ExperimentError::InvalidConfig(
                "no datasets selected".into(),
            ));
        }
        if self.sample_size == 0 {
            return Err(ExperimentError::InvalidConfig(
                "sample_size must be at least 1".into(),
            ));
        }
        if self.concurrency == 0 {
            return Err(ExperimentError::InvalidConfig(
                "concurrency must be at least 1".into(),
            ));
        }
        if let BackendChoice::Http { base_url } = &self.backend {
            if base_url.trim().is_empty() {
                return Err(ExperimentError::InvalidConfig(
                    "backend base URL is empty (set --backend-url, KAIRANBAN_BASE_URL, or --mock-script)"
                        .into(),
                ));
            }
        }
        for &system in &self.systems {
            // Space choice doesn't affect validation.
            self.pipeline_config(system, crate::prob::LabelSpace::ternary())
                .validate()
                .map_err(|e| ExperimentError::InvalidConfig(e.to_string()))?;
        }
        Ok(())
    }
}

/// One transcript line: enough to re-evaluate without the dataset files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptRecord {
    pub dataset: String,
    pub gold_label_index: usize,
    pub transcript: Transcript,
}

impl TranscriptRecord {
    pub fn eval_record(&self) -> EvalRecord {
        EvalRecord {
            instance_id: self.transcript.instance_id.clone(),
            gold_label_index: self.gold_label_index,
            final_distribution: self.transcript.final_distribution.clone(),
            per_step_distributions: self.transcript.per_step_distributions.clone(),
            degraded: self.transcript.degraded_any(),
        }
    }
}

/// Metrics of one completed cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellMetrics {
    pub n_instances: usize,
    /// Records the metrics were computed over (differs from `n_instances`
    /// only when degraded instances are excluded).
    pub included_records: usize,
    pub degraded_instances: usize,
    pub degraded_calls: usize,
    pub macro_f1: f64,
    pub micro_f1: f64,
    pub log_loss: f64,
    pub brier: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_stats: Option<StepStats>,
}

/// Outcome of one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum CellOutcome {
    Completed(CellMetrics),
    Failed { error: String },
}

/// One (system, dataset) cell in the summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub system: System,
    pub dataset: String,
    #[serde(flatten)]
    pub outcome: CellOutcome,
}

impl CellSummary {
    pub fn metrics(&self) -> Option<&CellMetrics> {
        match &self.outcome {
            CellOutcome::Completed(metrics) => Some(metrics),
            CellOutcome::Failed { .. } => None,
        }
    }
}

/// Per-system uncertainty dynamics averaged across datasets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemDynamics {
    pub system: System,
    pub stats: StepStats,
}

/// Everything one run produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    /// Echo of the run configuration (or of the report source).
    pub config: serde_json::Value,
    /// The clip applied inside the log loss, recorded for reproducibility.
    pub log_loss_clip: f64,
    pub seed: u64,
    pub cells: Vec<CellSummary>,
    /// Cross-dataset average dynamics, one entry per multi-step system.
    pub cross_dataset: Vec<SystemDynamics>,
    /// Wall-clock seconds; reported to the caller but never serialized, so
    /// output trees stay byte-identical across reruns.
    #[serde(skip)]
    pub wall_clock_seconds: f64,
}

impl RunSummary {
    /// Dataset names in first-appearance order.
    pub fn datasets(&self) -> Vec<String> {
        let mut seen = Vec::new();
        for cell in &self.cells {
            if !seen.contains(&cell.dataset) {
                seen.push(cell.dataset.clone());
            }
        }
        seen
    }

    pub fn any_failed(&self) -> bool {
        self.cells
            .iter()
            .any(|c| matches!(c.outcome, CellOutcome::Failed { .. }))
    }
}

/// Canonical transcript path for a cell.
pub fn transcripts_path(dir: &Path, system: System, dataset: &str) -> PathBuf {
    dir.join(format!("transcripts_{system}_{dataset}.jsonl"))
}

/// Writes a whole transcript file, one JSON line per record.
pub fn write_transcripts(path: &Path, records: &[TranscriptRecord]) -> Result<(), ExperimentError> {
    let mut out = String::new();
    for record in records {
        out.push_str(&serde_json::to_string(record)?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Reads a transcript file strictly: every non-blank line must parse.
pub fn read_transcripts(path: &Path) -> Result<Vec<TranscriptRecord>, ExperimentError> {
    let text = fs::read_to_string(path)?;
    let mut records = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(line)?);
    }
    Ok(records)
}

/// Reads a transcript file for resuming: a corrupt *final* line (the mark of
/// an interrupted write) is dropped and trimmed from the file; corruption
/// anywhere else is an error.
fn read_transcripts_tolerant(path: &Path) -> Result<Vec<TranscriptRecord>, CellError> {
    let text = fs::read_to_string(path)?;
    let lines: Vec<&str> = text.lines().collect();
    let mut records = Vec::new();
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(record) => records.push(record),
            Err(_) if i + 1 == lines.len() => {
                let mut kept = lines[..i].join("\n");
                if !kept.is_empty() {
                    kept.push('\n');
                }
                fs::write(path, kept)?;
                return Ok(records);
            }
            Err(detail) => {
                return Err(CellError::CorruptTranscript {
                    path: path.to_path_buf(),
                    line: i + 1,
                    detail: detail.to_string(),
                });
            }
        }
    }
    Ok(records)
}

/// Runs one cell: resume, stream, persist, evaluate.
async fn run_cell(
    config: &RunConfig,
    system: System,
    dataset: &DatasetSpec,
    sample: &[Instance],
    backend: Arc<dyn Backend>,
    prompts: Arc<PromptSet>,
) -> Result<CellMetrics, CellError> {
    let pipeline_config = config.pipeline_config(system, dataset.space());
    let runner = PipelineRunner::with_prompts(pipeline_config, backend, prompts)?;
    let dataset_name = dataset.name.to_string();
    let path = transcripts_path(&config.out_dir, system, &dataset_name);

    let existing = if path.exists() {
        read_transcripts_tolerant(&path)?
    } else {
        Vec::new()
    };
    let mut by_id: HashMap<String, TranscriptRecord> = existing
        .into_iter()
        .map(|r| (r.transcript.instance_id.clone(), r))
        .collect();

    let todo: Vec<Instance> = sample
        .iter()
        .filter(|i| !by_id.contains_key(&i.id))
        .cloned()
        .collect();

    if !todo.is_empty() {
        let mut file = OpenOptions::new().create(true).append(true).open(&path)?;
        let runner_ref = &runner;
        let mut results = stream::iter(todo)
            .map(|instance| async move {
                let outcome = runner_ref.run(&instance.id, &instance.text).await;
                (instance, outcome)
            })
            .buffered(config.concurrency);
        while let Some((instance, outcome)) = results.next().await {
            let transcript = outcome?;
            let record = TranscriptRecord {
                dataset: dataset_name.clone(),
                gold_label_index: instance.gold_label_index,
                transcript,
            };
            writeln!(file, "{}", serde_json::to_string(&record)?)?;
            by_id.insert(instance.id, record);
        }
        file.flush()?;
    }

    let records: Vec<EvalRecord> = sample
        .iter()
        .map(|instance| {
            by_id
                .get(&instance.id)
                .map(TranscriptRecord::eval_record)
                .ok_or_else(|| {
                    CellError::Internal(format!("no transcript for instance {}", instance.id))
                })
        })
        .collect::<Result<_, _>>()?;
    let degraded_calls = sample
        .iter()
        .filter_map(|i| by_id.get(&i.id))
        .map(|r| r.transcript.degraded_count())
        .sum();

    evaluate_records(
        &records,
        &dataset.space(),
        system,
        config.n_agents,
        config.brier,
        config.exclude_degraded,
        degraded_calls,
    )
}

/// Metric aggregation shared by `run` and `report`.
fn evaluate_records(
    records: &[EvalRecord],
    space: &crate::prob::LabelSpace,
    system: System,
    n_steps: usize,
    brier: BrierConvention,
    exclude_degraded: bool,
    degraded_calls: usize,
) -> Result<CellMetrics, CellError> {
    let degraded_instances = records.iter().filter(|r| r.degraded).count();
    let included: Vec<EvalRecord> = if exclude_degraded {
        records.iter().filter(|r| !r.degraded).cloned().collect()
    } else {
        records.to_vec()
    };
    let step_stats = match system {
        System::Single => None,
        _ => Some(metrics::step_stats(&included, n_steps)?),
    };
    Ok(CellMetrics {
        n_instances: records.len(),
        included_records: included.len(),
        degraded_instances,
        degraded_calls,
        macro_f1: metrics::macro_f1(&included, space)?,
        micro_f1: metrics::micro_f1(&included, space)?,
        log_loss: metrics::log_loss(&included)?,
        brier: metrics::brier(&included, brier)?,
        step_stats,
    })
}

fn cross_dataset_dynamics(systems: &[System], cells: &[CellSummary]) -> Vec<SystemDynamics> {
    let mut out = Vec::new();
    for &system in systems {
        let stats: Vec<StepStats> = cells
            .iter()
            .filter(|c| c.system == system)
            .filter_map(|c| c.metrics().and_then(|m| m.step_stats.clone()))
            .collect();
        if stats.is_empty() {
            continue;
        }
        if let Ok(average) = metrics::cross_dataset_average(&stats) {
            out.push(SystemDynamics {
                system,
                stats: average,
            });
        }
    }
    out
}

/// Runs the full experiment grid and writes every output file.
///
/// `api_key` is passed separately from the config so credentials never end
/// up in the summary echo.
pub async fn run_experiment(
    config: &RunConfig,
    api_key: Option<&str>,
) -> Result<RunSummary, ExperimentError> {
    let started = Instant::now();
    config.validate()?;
    fs::create_dir_all(&config.out_dir)?;

    let prompts = match &config.templates_dir {
        Some(dir) => Arc::new(PromptSet::from_dir(dir)?),
        None => Arc::new(PromptSet::builtin()),
    };
    let backend: Arc<dyn Backend> = match &config.backend {
        BackendChoice::Http { base_url } => Arc::new(
            HttpBackend::new(base_url, api_key.map(str::to_string))
                .with_max_in_flight(config.concurrency),
        ),
        BackendChoice::MockScript { path } => Arc::new(Script::load(path)?.to_backend()),
    };

    let mut cells = Vec::new();
    for dataset in &config.datasets {
        let sampled = dataset
            .load()
            .and_then(|pool| sample_instances(&pool, config.sample_size, config.seed));
        match sampled {
            Err(error) => {
                for &system in &config.systems {
                    cells.push(CellSummary {
                        system,
                        dataset: dataset.name.to_string(),
                        outcome: CellOutcome::Failed {
                            error: error.to_string(),
                        },
                    });
                }
            }
            Ok(sample) => {
                for &system in &config.systems {
                    let outcome = match run_cell(
                        config,
                        system,
                        dataset,
                        &sample,
                        backend.clone(),
                        prompts.clone(),
                    )
                    .await
                    {
                        Ok(metrics) => CellOutcome::Completed(metrics),
                        Err(error) => CellOutcome::Failed {
                            error: error.to_string(),
                        },
                    };
                    cells.push(CellSummary {
                        system,
                        dataset: dataset.name.to_string(),
                        outcome,
                    });
                }
            }
        }
    }

    let cross_dataset = cross_dataset_dynamics(&config.systems, &cells);
    let summary = RunSummary {
        config: serde_json::to_value(config)?,
        log_loss_clip: LOG_LOSS_CLIP,
        seed: config.seed,
        cells,
        cross_dataset,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    write_summary(&config.out_dir, &summary)?;
    emit_plot_data(&config.out_dir, &summary)?;
    Ok(summary)
}

/// Recomputes a summary from the transcript files under `dir`, without a
/// backend or the dataset files.
pub fn report_from_dir(
    dir: &Path,
    brier: BrierConvention,
    exclude_degraded: bool,
) -> Result<RunSummary, ExperimentError> {
    let entries = match fs::read_dir(dir) {
        Ok(entries) => entries,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(ExperimentError::NothingToReport(dir.to_path_buf()))
        }
        Err(e) => return Err(e.into()),
    };
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("transcripts_") && n.ends_with(".jsonl"))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(ExperimentError::NothingToReport(dir.to_path_buf()));
    }

    // (dataset, system) -> records, ordered deterministically.
    let mut groups: BTreeMap<(String, String), Vec<TranscriptRecord>> = BTreeMap::new();
    for path in &paths {
        for record in read_transcripts(path)? {
            let key = (
                record.dataset.clone(),
                record.transcript.config.system.to_string(),
            );
            groups.entry(key).or_default().push(record);
        }
    }

    let mut cells = Vec::new();
    let mut systems_seen: Vec<System> = Vec::new();
    for ((dataset, _), records) in &groups {
        let system = records[0].transcript.config.system;
        if !systems_seen.contains(&system) {
            systems_seen.push(system);
        }
        let space = records[0].transcript.config.space.clone();
        let n_steps = records[0].transcript.config.n_agents;
        let eval: Vec<EvalRecord> = records.iter().map(TranscriptRecord::eval_record).collect();
        let degraded_calls = records.iter().map(|r| r.transcript.degraded_count()).sum();
        let outcome = match evaluate_records(
            &eval,
            &space,
            system,
            n_steps,
            brier,
            exclude_degraded,
            degraded_calls,
        ) {
            Ok(metrics) => CellOutcome::Completed(metrics),
            Err(error) => CellOutcome::Failed {
                error: error.to_string(),
            },
        };
        cells.push(CellSummary {
            system,
            dataset: dataset.clone(),
            outcome,
        });
    }

    let cross_dataset = cross_dataset_dynamics(&systems_seen, &cells);
    Ok(RunSummary {
        config: serde_json::json!({ "recomputed_from": dir.display().to_string() }),
        log_loss_clip: LOG_LOSS_CLIP,
        seed: 0,
        cells,
        cross_dataset,
        wall_clock_seconds: 0.0,
    })
}

/// Writes `summary.json`, the per-dataset CSVs, and the text report.
pub fn write_summary(dir: &Path, summary: &RunSummary) -> Result<(), ExperimentError> {
    fs::create_dir_all(dir)?;
    fs::write(
        dir.join("summary.json"),
        serde_json::to_string_pretty(summary)? + "\n",
    )?;
    for dataset in summary.datasets() {
        let mut csv = String::from("model,macro_f1,micro_f1,logloss,brier\n");
        for cell in summary.cells.iter().filter(|c| c.dataset == dataset) {
            if let Some(m) = cell.metrics() {
                csv.push_str(&format!(
                    "{},{:.4},{:.4},{:.4},{:.4}\n",
                    cell.system, m.macro_f1, m.micro_f1, m.log_loss, m.brier
                ));
            }
        }
        fs::write(dir.join(format!("summary_{dataset}.csv")), csv)?;
    }
    fs::write(dir.join("summary.txt"), render_text_report(summary))?;
    Ok(())
}

/// Renders the dynamics table for one metric across systems.
fn dynamics_table(
    title: &str,
    columns: &[(System, &StepStats)],
    pick: impl Fn(&crate::metrics::StepStat) -> (f64, f64),
) -> String {
    let mut out = String::new();
    out.push_str(title);
    out.push('\n');
    out.push_str(&format!("{:<7}", "agent"));
    for (system, _) in columns {
        out.push_str(&format!("{:<18}", system.to_string()));
    }
    out.push('\n');
    let n_steps = columns
        .iter()
        .map(|(_, s)| s.steps.len())
        .max()
        .unwrap_or(0);
    for step in 0..n_steps {
        out.push_str(&format!("{:<7}", step + 1));
        for (_, stats) in columns {
            let cell = stats
                .steps
                .get(step)
                .map(|s| {
                    let (value, delta) = pick(s);
                    metrics::format_value_delta(value, delta)
                })
                .unwrap_or_default();
            out.push_str(&format!("{cell:<18}"));
        }
        out.push('\n');
    }
    out
}

/// The human-readable run report.
pub fn render_text_report(summary: &RunSummary) -> String {
    let mut out = String::new();
    for dataset in summary.datasets() {
        out.push_str(&format!("== {dataset} ==\n"));
        out.push_str(&format!(
            "{:<10}{:<10}{:<10}{:<10}{:<10}\n",
            "model", "macro_f1", "micro_f1", "logloss", "brier"
        ));
        for cell in summary.cells.iter().filter(|c| c.dataset == dataset) {
            match &cell.outcome {
                CellOutcome::Completed(m) => {
                    out.push_str(&format!(
                        "{:<10}{:<10.4}{:<10.4}{:<10.4}{:<10.4}\n",
                        cell.system.to_string(),
                        m.macro_f1,
                        m.micro_f1,
                        m.log_loss,
                        m.brier
                    ));
                }
                CellOutcome::Failed { error } => {
                    out.push_str(&format!("{:<10}FAILED: {error}\n", cell.system.to_string()));
                }
            }
        }
        out.push('\n');

        let columns: Vec<(System, &StepStats)> = summary
            .cells
            .iter()
            .filter(|c| c.dataset == dataset)
            .filter_map(|c| {
                c.metrics()
                    .and_then(|m| m.step_stats.as_ref())
                    .map(|s| (c.system, s))
            })
            .collect();
        if !columns.is_empty() {
            out.push_str(&dynamics_table(
                &format!("Entropy by step ({dataset})"),
                &columns,
                |s| (s.mean_entropy, s.delta_entropy),
            ));
            out.push('\n');
            out.push_str(&dynamics_table(
                &format!("Variance by step ({dataset})"),
                &columns,
                |s| (s.mean_variance, s.delta_variance),
            ));
            out.push('\n');
        }
    }

    if !summary.cross_dataset.is_empty() {
        let columns: Vec<(System, &StepStats)> = summary
            .cross_dataset
            .iter()
            .map(|d| (d.system, &d.stats))
            .collect();
        out.push_str(&dynamics_table(
            "Entropy by step (average across datasets)",
            &columns,
            |s| (s.mean_entropy, s.delta_entropy),
        ));
        out.push('\n');
        out.push_str(&dynamics_table(
            "Variance by step (average across datasets)",
            &columns,
            |s| (s.mean_variance, s.delta_variance),
        ));
    }
    out
}

/// Writes per-step series consumed by plotting scripts: one CSV per dataset
/// plus the cross-dataset average, one row per step per system.
pub fn emit_plot_data(dir: &Path, summary: &RunSummary) -> Result<(), ExperimentError> {
    const HEADER: &str = "step,mean_entropy,se_entropy,mean_variance,se_variance,system\n";
    let rows = |stats: &StepStats, system: System, out: &mut String| {
        for s in &stats.steps {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6},{}\n",
                s.step, s.mean_entropy, s.se_entropy, s.mean_variance, s.se_variance, system
            ));
        }
    };
    for dataset in summary.datasets() {
        let mut out = String::from(HEADER);
        let mut any = false;
        for cell in summary.cells.iter().filter(|c| c.dataset == dataset) {
            if let Some(stats) = cell.metrics().and_then(|m| m.step_stats.as_ref()) {
                rows(stats, cell.system, &mut out);
                any = true;
            }
        }
        if any {
            fs::write(dir.join(format!("plot_{dataset}.csv")), out)?;
        }
    }
    if !summary.cross_dataset.is_empty() {
        let mut out = String::from(HEADER);
        for dynamics in &summary.cross_dataset {
            rows(&dynamics.stats, dynamics.system, &mut out);
        }
        fs::write(dir.join("plot_overall.csv"), out)?;
    }
    Ok(())
}
