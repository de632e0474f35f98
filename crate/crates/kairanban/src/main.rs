//! Command-line interface: run the experiment grid, re-report an existing
//! run directory, or validate a configuration without touching any backend.
//!
//! Exit codes: 0 on success, 1 when any cell failed, 2 when the
//! configuration is invalid.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use kairanban::datasets::{DatasetError, DatasetName, DatasetSpec, ResolveOptions};
use kairanban::experiment::{self, BackendChoice, ExperimentError, RunConfig, RunSummary};
use kairanban::metrics::BrierConvention;
use kairanban::orchestrator::{FinalizeMode, System};

const ENV_API_KEY: &str = "KAIRANBAN_API_KEY";
const ENV_BASE_URL: &str = "KAIRANBAN_BASE_URL";

#[derive(Parser)]
#[command(
    name = "kairanban",
    version,
    about = "Sequential multi-agent sentiment estimation over a circulating document"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run systems over datasets; write transcripts, summaries, plot data.
    Run(RunArgs),
    /// Recompute summaries and plot data from an existing run directory.
    Report(ReportArgs),
    /// Check a run configuration and exit without calling any backend.
    ValidateConfig(RunArgs),
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Systems to run, repeatable or comma-separated: single, kcs, kcs_ibc.
    /// Defaults to all three.
    #[arg(long = "system", value_delimiter = ',')]
    systems: Vec<System>,
    /// Datasets to run, repeatable or comma-separated: sst5, tweeteval,
    /// financial_phrasebank. Defaults to all three.
    #[arg(long = "dataset", value_delimiter = ',')]
    datasets: Vec<DatasetName>,
    /// Number of agents in the chain.
    #[arg(long)]
    n_agents: Option<usize>,
    /// Agent index whose turn the chat session precedes.
    #[arg(long)]
    ibc_index: Option<usize>,
    /// Instances sampled per dataset.
    #[arg(long)]
    sample_size: Option<usize>,
    /// Sampling seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Chat-completions base URL (overrides KAIRANBAN_BASE_URL).
    #[arg(long)]
    backend_url: Option<String>,
    /// API key (overrides KAIRANBAN_API_KEY).
    #[arg(long)]
    api_key: Option<String>,
    /// Model name sent to the backend.
    #[arg(long)]
    model: Option<String>,
    /// Scripted-reply file; replaces the HTTP backend entirely.
    #[arg(long)]
    mock_script: Option<PathBuf>,
    /// Output directory for transcripts and summaries.
    #[arg(long)]
    out: Option<PathBuf>,
    /// How the final distribution is produced: judge or last_step.
    #[arg(long)]
    finalize: Option<FinalizeMode>,
    /// Brier score convention: mean or sum.
    #[arg(long)]
    brier: Option<BrierConvention>,
    /// TOML config file; command-line flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory holding the dataset files.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Completion token budget per call.
    #[arg(long)]
    max_tokens: Option<u32>,
    /// Instances processed concurrently (also caps in-flight requests).
    #[arg(long)]
    concurrency: Option<usize>,
    /// Exclude degraded instances from metric aggregation.
    #[arg(long)]
    exclude_degraded: bool,
    /// Which sst5 split file to look for (default: test).
    #[arg(long)]
    sst5_split: Option<String>,
    /// Annotator-agreement tier of the finance corpus: 50, 66, 75, or 100.
    #[arg(long)]
    phrasebank_agreement: Option<String>,
    /// Directory of prompt template overrides.
    #[arg(long)]
    templates: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// The run directory holding transcripts_*.jsonl files.
    #[arg(long)]
    out: PathBuf,
    /// Brier score convention: mean or sum.
    #[arg(long, default_value = "mean")]
    brier: BrierConvention,
    /// Exclude degraded instances from metric aggregation.
    #[arg(long)]
    exclude_degraded: bool,
}

/// The TOML config file mirrors the long flags. The API key is deliberately
/// not accepted here; pass it via KAIRANBAN_API_KEY or --api-key.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    systems: Option<Vec<String>>,
    datasets: Option<Vec<String>>,
    n_agents: Option<usize>,
    ibc_index: Option<usize>,
    sample_size: Option<usize>,
    seed: Option<u64>,
    backend_url: Option<String>,
    model: Option<String>,
    mock_script: Option<PathBuf>,
    out: Option<PathBuf>,
    finalize: Option<String>,
    brier: Option<String>,
    data_dir: Option<PathBuf>,
    max_tokens: Option<u32>,
    concurrency: Option<usize>,
    exclude_degraded: Option<bool>,
    sst5_split: Option<String>,
    phrasebank_agreement: Option<String>,
    templates: Option<PathBuf>,
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Run(args) => run_command(args),
        Command::Report(args) => report_command(args),
        Command::ValidateConfig(args) => validate_command(args),
    }
}

fn run_command(args: RunArgs) -> ExitCode {
    let (config, api_key) = match build_run_config(&args) {
        Ok(pair) => pair,
        Err(message) => return config_error(&message),
    };
    let runtime = match tokio::runtime::Runtime::new() {
        Ok(runtime) => runtime,
        Err(error) => {
            eprintln!("error: cannot start async runtime: {error}");
            return ExitCode::from(1);
        }
    };
    match runtime.block_on(experiment::run_experiment(&config, api_key.as_deref())) {
        Ok(summary) => {
            print!("{}", experiment::render_text_report(&summary));
            println!("outputs written to {}", config.out_dir.display());
            println!("wall clock: {:.1}s", summary.wall_clock_seconds);
            finish(&summary)
        }
        Err(ExperimentError::InvalidConfig(message)) => config_error(&message),
        Err(error) => {
            eprintln!("error: {error}");
            ExitCode::from(1)
        }
    }
}

fn report_command(args: ReportArgs) -> ExitCode {
    match experiment::report_from_dir(&args.out, args.brier, args.exclude_degraded) {
        Ok(summary) => {
            if let Err(error) = experiment::write_summary(&args.out, &summary)
                .and_then(|()| experiment::emit_plot_data(&args.out, &summary))
            {
                eprintln!("error: cannot write summaries: {error}");
                return ExitCode::from(1);
            }
            print!("{}", experiment::render_text_report(&summary));
            finish(&summary)
        }
        Err(error @ ExperimentError::NothingToReport(_)) => config_error(&error.to_string()),
        Err(error) => {
            eprintln!("error: {error}");
            ExitCode::from(1)
        }
    }
}

fn validate_command(args: RunArgs) -> ExitCode {
    let (config, api_key) = match build_run_config(&args) {
        Ok(pair) => pair,
        Err(message) => return config_error(&message),
    };
    match serde_json::to_string_pretty(&config) {
        Ok(echo) => println!("{echo}"),
        Err(error) => {
            eprintln!("error: {error}");
            return ExitCode::from(1);
        }
    }
    for dataset in &config.datasets {
        let found = match &dataset.format {
            kairanban::datasets::DataFormat::TabSeparated { path }
            | kairanban::datasets::DataFormat::Csv { path }
            | kairanban::datasets::DataFormat::AtSeparated { path } => path.is_file(),
            kairanban::datasets::DataFormat::PairedLines {
                text_path,
                label_path,
            } => text_path.is_file() && label_path.is_file(),
        };
        if !found {
            println!(
                "warning: no files found for dataset {}; its cells will fail at run time",
                dataset.name
            );
        }
    }
    println!(
        "configuration valid ({} present)",
        if api_key.is_some() {
            "API key"
        } else {
            "no API key"
        }
    );
    ExitCode::SUCCESS
}

fn finish(summary: &RunSummary) -> ExitCode {
    if summary.any_failed() {
        for cell in &summary.cells {
            if let experiment::CellOutcome::Failed { error } = &cell.outcome {
                eprintln!("cell failed: {}/{}: {error}", cell.system, cell.dataset);
            }
        }
        ExitCode::from(1)
    } else {
        ExitCode::SUCCESS
    }
}

fn config_error(message: &str) -> ExitCode {
    eprintln!("error: {message}");
    ExitCode::from(2)
}

fn pick<T>(flag: Option<T>, file: Option<T>) -> Option<T> {
    flag.or(file)
}

fn parse_list<T>(values: &[String], what: &str) -> Result<Vec<T>, String>
where
    T: std::str::FromStr<Err = String>,
{
    values
        .iter()
        .map(|v| {
            v.parse::<T>()
                .map_err(|e| format!("invalid {what} in config file: {e}"))
        })
        .collect()
}

/// Merges flags over the optional TOML file over the environment over the
/// defaults, and validates the result.
fn build_run_config(args: &RunArgs) -> Result<(RunConfig, Option<String>), String> {
    let file: FileConfig = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| format!("cannot read config file {}: {e}", path.display()))?;
            toml::from_str(&text)
                .map_err(|e| format!("cannot parse config file {}: {e}", path.display()))?
        }
        None => FileConfig::default(),
    };

    let systems: Vec<System> = if !args.systems.is_empty() {
        args.systems.clone()
    } else if let Some(names) = &file.systems {
        parse_list(names, "system")?
    } else {
        System::ALL.to_vec()
    };

    let dataset_names: Vec<DatasetName> = if !args.datasets.is_empty() {
        args.datasets.clone()
    } else if let Some(names) = &file.datasets {
        parse_list(names, "dataset")?
    } else {
        DatasetName::ALL.to_vec()
    };
    for (i, name) in dataset_names.iter().enumerate() {
        if dataset_names[..i].contains(name) {
            return Err(format!("dataset {name} listed twice"));
        }
    }

    let mut options = ResolveOptions::default();
    if let Some(split) = pick(args.sst5_split.clone(), file.sst5_split) {
        options.sst5_split = split;
    }
    if let Some(tier) = pick(args.phrasebank_agreement.clone(), file.phrasebank_agreement) {
        options.phrasebank_agreement = tier;
    }
    let data_dir = pick(args.data_dir.clone(), file.data_dir).unwrap_or_else(|| "data".into());

    let mut datasets = Vec::new();
    for name in dataset_names {
        let spec = match DatasetSpec::resolve(name, &data_dir, &options) {
            Ok(spec) => spec,
            Err(DatasetError::FileNotFound { .. }) => {
                // Leave the missing corpus to fail its own cells at load
                // time; the other datasets still run.
                DatasetSpec::conventional(name, &data_dir, &options).map_err(|e| e.to_string())?
            }
            Err(error) => return Err(error.to_string()),
        };
        datasets.push(spec);
    }

    let mock_script = pick(args.mock_script.clone(), file.mock_script);
    let env_url = std::env::var(ENV_BASE_URL)
        .ok()
        .filter(|v| !v.trim().is_empty());
    let base_url = args.backend_url.clone().or(file.backend_url).or(env_url);
    let backend = match (mock_script, base_url) {
        (Some(path), _) => BackendChoice::MockScript { path },
        (None, Some(base_url)) => BackendChoice::Http { base_url },
        (None, None) => {
            return Err(
                "no backend selected: pass --backend-url, set KAIRANBAN_BASE_URL, or pass --mock-script"
                    .into(),
            )
        }
    };

    let out_dir = pick(args.out.clone(), file.out).unwrap_or_else(|| "out".into());
    let mut config = RunConfig::new(systems, datasets, out_dir, backend);
    if let Some(v) = pick(args.n_agents, file.n_agents) {
        config.n_agents = v;
    }
    if let Some(v) = pick(args.ibc_index, file.ibc_index) {
        config.ibc_index = v;
    }
    if let Some(v) = pick(args.sample_size, file.sample_size) {
        config.sample_size = v;
    }
    if let Some(v) = pick(args.seed, file.seed) {
        config.seed = v;
    }
    if let Some(v) = pick(args.model.clone(), file.model) {
        config.model = v;
    }
    if let Some(v) = pick(args.max_tokens, file.max_tokens) {
        config.max_tokens = v;
    }
    if let Some(v) = pick(args.concurrency, file.concurrency) {
        config.concurrency = v;
    }
    config.finalize = match (args.finalize, file.finalize) {
        (Some(mode), _) => mode,
        (None, Some(raw)) => raw.parse().map_err(|e: String| e)?,
        (None, None) => FinalizeMode::Judge,
    };
    config.brier = match (args.brier, file.brier) {
        (Some(convention), _) => convention,
        (None, Some(raw)) => raw.parse().map_err(|e: String| e)?,
        (None, None) => BrierConvention::Mean,
    };
    config.exclude_degraded = args.exclude_degraded || file.exclude_degraded.unwrap_or(false);
    config.templates_dir = pick(args.templates.clone(), file.templates);
    config.validate().map_err(|e| e.to_string())?;

    let api_key = args
        .api_key
        .clone()
        .or_else(|| std::env::var(ENV_API_KEY).ok())
        .filter(|v| !v.trim().is_empty());
    Ok((config, api_key))
}
