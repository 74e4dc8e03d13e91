//! `mhb`: the experiment harness.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 data error, 3 backend error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mhb_core::client::ClientError;
use mhb_core::pipeline::PipelineError;
use toml::Value;

use crate::commands::BackendFailure;
use crate::config::{Config, Override, UsageError, CONFIG_ENV};

#[derive(Parser)]
#[command(name = "mhb", version, about = "Multi-human behavior prediction harness")]
struct Cli {
    /// TOML config file; falls back to $MHB_CONFIG.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Corpus directory (config key `corpus`).
    #[arg(long, global = true, value_name = "DIR")]
    corpus: Option<String>,
    /// Override any config key, e.g. `--set run.icl_count=7`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Print the effective config and exit.
    #[arg(long, global = true)]
    print_config: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the scenario plan, write the dataset and ingest it.
    Generate(GenerateArgs),
    /// Ingest sample manifests into the corpus.
    Ingest(IngestArgs),
    /// Query the backend once per sample of a split.
    Predict(PredictArgs),
    /// Score stored predictions against ground truth.
    Score(ScoreArgs),
    /// Sample J responses per training sample and queue preference pairs.
    Mine(MineArgs),
    /// Write fine-tuning datasets as JSON lines.
    Export(ExportArgs),
    /// Serve the pair review API.
    ReviewServe(ServeArgs),
    /// Verify the SFT/DPO loss and gradient kernels.
    DpoCheck(CheckArgs),
    /// Combine score files into one model-by-cell table.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Base seed of the scenario plan.
    #[arg(long)]
    seed: Option<u64>,
    /// Plan cell `room:humans:videos[:duration_s]`; replaces the plan when given. Repeatable.
    #[arg(long = "cell", value_name = "CELL")]
    cells: Vec<String>,
}

#[derive(Args)]
struct IngestArgs {
    /// Manifest files (JSON lines with a header line).
    #[arg(required = true)]
    manifests: Vec<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Backend {
    Mock,
    Remote,
}

#[derive(Clone, Copy, ValueEnum)]
enum MockKind {
    Oracle,
    NoisyOracle,
    Scrambler,
}

#[derive(Args)]
struct BackendArgs {
    /// Model id under which replies are stored.
    #[arg(long)]
    model: Option<String>,
    #[arg(long, value_enum)]
    backend: Option<Backend>,
    #[arg(long, value_enum)]
    mock: Option<MockKind>,
    #[arg(long)]
    verb_corruption: Option<f64>,
    #[arg(long)]
    noun_corruption: Option<f64>,
    #[arg(long)]
    order_shuffle: Option<f64>,
    #[arg(long)]
    mock_seed: Option<u64>,
    /// Chat-completions URL of the remote backend.
    #[arg(long)]
    endpoint: Option<String>,
    /// Model name sent to the remote backend.
    #[arg(long)]
    remote_model: Option<String>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    icl_count: Option<usize>,
    #[arg(long)]
    max_in_flight: Option<usize>,
}

#[derive(Args)]
struct PredictArgs {
    #[command(flatten)]
    backend: BackendArgs,
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    run_index: Option<u32>,
    /// Request seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    run_index: Option<u32>,
    /// `ordered` or `set_based` slot matching.
    #[arg(long)]
    match_mode: Option<String>,
    #[arg(long, value_name = "DIR")]
    out_dir: Option<String>,
}

#[derive(Args)]
struct MineArgs {
    #[command(flatten)]
    backend: BackendArgs,
    /// Responses per sample.
    #[arg(long)]
    j: Option<u32>,
    #[arg(long)]
    seed: Option<u64>,
    /// Approve every new pair without review.
    #[arg(long)]
    auto_approve: bool,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum ExportKind {
    Dpo,
    Sft,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(value_enum)]
    kind: ExportKind,
    /// Approve all pending pairs before exporting.
    #[arg(long)]
    auto_approve: bool,
    /// Comma-separated statuses to export.
    #[arg(long)]
    include: Option<String>,
    #[arg(long, value_name = "FILE")]
    out: Option<String>,
    /// ICL examples per prompt for SFT exports.
    #[arg(long)]
    icl_count: Option<usize>,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    addr: Option<String>,
    /// Bearer token required on every request.
    #[arg(long)]
    token: Option<String>,
    /// Static UI directory.
    #[arg(long)]
    ui_dir: Option<String>,
    #[arg(long)]
    cors_origin: Option<String>,
}

#[derive(Args)]
struct CheckArgs {
    #[arg(long)]
    batches: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Also train a toy policy and write its loss trace as CSV.
    #[arg(long, value_name = "FILE")]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Score files written by `score`.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Output path stem; `.txt` and `.csv` are appended.
    #[arg(long, value_name = "STEM")]
    out: PathBuf,
}

type Overrides = Vec<(String, Override)>;

fn put<T: ToString>(o: &mut Overrides, key: &str, value: &Option<T>) {
    if let Some(v) = value {
        o.push((key.to_string(), Override::Raw(v.to_string())));
    }
}

impl BackendArgs {
    fn overrides(&self, o: &mut Overrides) {
        put(o, "run.model_id", &self.model);
        let kind = self.backend.map(|b| match b {
            Backend::Mock => "mock",
            Backend::Remote => "remote",
        });
        put(o, "backend.kind", &kind);
        let mock = self.mock.map(|m| match m {
            MockKind::Oracle => "oracle",
            MockKind::NoisyOracle => "noisy_oracle",
            MockKind::Scrambler => "scrambler",
        });
        put(o, "backend.mock.mode", &mock);
        put(o, "backend.mock.verb_corruption", &self.verb_corruption);
        put(o, "backend.mock.noun_corruption", &self.noun_corruption);
        put(o, "backend.mock.order_shuffle", &self.order_shuffle);
        put(o, "backend.mock.seed", &self.mock_seed);
        put(o, "backend.remote.endpoint", &self.endpoint);
        put(o, "backend.remote.model", &self.remote_model);
        put(o, "run.temperature", &self.temperature);
        put(o, "run.icl_count", &self.icl_count);
        put(o, "run.max_in_flight", &self.max_in_flight);
    }
}

fn parse_cell(s: &str) -> Result<Value, UsageError> {
    let bad = || UsageError(format!("plan cell {s:?} is not room:humans:videos[:duration_s]"));
    let parts: Vec<&str> = s.split(':').collect();
    if !(3..=4).contains(&parts.len()) {
        return Err(bad());
    }
    let room: mhb_core::room::RoomType = parts[0].parse().map_err(|_| bad())?;
    let humans: usize = parts[1].parse().map_err(|_| bad())?;
    let videos: usize = parts[2].parse().map_err(|_| bad())?;
    let duration = match parts.get(3) {
        Some(d) => d.parse().map_err(|_| bad())?,
        None => mhb_core::scenario::default_duration_s(room, humans),
    };
    let cell = mhb_core::scenario::PlanCell {
        room,
        num_humans: humans,
        videos,
        duration_s: duration,
    };
    Value::try_from(cell).map_err(|e| UsageError(e.to_string()))
}

impl Cli {
    fn overrides(&self) -> Result<Overrides, UsageError> {
        let mut o = Overrides::new();
        put(&mut o, "corpus", &self.corpus);
        match &self.command {
            Command::Generate(a) => {
                put(&mut o, "generate.base_seed", &a.seed);
                if !a.cells.is_empty() {
                    let cells = a.cells.iter().map(|c| parse_cell(c)).collect::<Result<_, _>>()?;
                    o.push(("generate.plan".into(), Override::Value(Value::Array(cells))));
                }
            }
            Command::Ingest(_) | Command::Report(_) => {}
            Command::Predict(a) => {
                a.backend.overrides(&mut o);
                put(&mut o, "run.split", &a.split);
                put(&mut o, "run.run_index", &a.run_index);
                put(&mut o, "run.seed", &a.seed);
            }
            Command::Score(a) => {
                put(&mut o, "run.model_id", &a.model);
                put(&mut o, "run.split", &a.split);
                put(&mut o, "run.run_index", &a.run_index);
                put(&mut o, "score.match_mode", &a.match_mode);
                put(&mut o, "score.out_dir", &a.out_dir);
            }
            Command::Mine(a) => {
                a.backend.overrides(&mut o);
                put(&mut o, "mine.j", &a.j);
                put(&mut o, "mine.base_seed", &a.seed);
                if a.auto_approve {
                    put(&mut o, "mine.auto_approve", &Some(true));
                }
            }
            Command::Export(a) => {
                put(&mut o, "export.include", &a.include);
                put(&mut o, "export.out", &a.out);
                put(&mut o, "run.icl_count", &a.icl_count);
            }
            Command::ReviewServe(a) => {
                put(&mut o, "review.addr", &a.addr);
                put(&mut o, "review.token", &a.token);
                put(&mut o, "review.ui_dir", &a.ui_dir);
                put(&mut o, "review.cors_origin", &a.cors_origin);
            }
            Command::DpoCheck(a) => {
                put(&mut o, "dpo.check_batches", &a.batches);
                put(&mut o, "dpo.check_seed", &a.seed);
            }
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| UsageError(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            o.push((k.trim().to_string(), Override::Raw(v.to_string())));
        }
        Ok(o)
    }

    fn config(&self) -> Result<Config, UsageError> {
        let file = self.config.clone().or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from));
        Config::resolve(file.as_deref(), std::env::vars(), &self.overrides()?)
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = cli.config()?;
    if cli.print_config {
        print!("{}", cfg.echo());
        return Ok(());
    }
    match cli.command {
        Command::Generate(_) => commands::generate(&cfg),
        Command::Ingest(a) => commands::ingest(&cfg, &a.manifests),
        Command::Predict(_) => commands::predict(&cfg),
        Command::Score(_) => commands::score(&cfg),
        Command::Mine(_) => commands::mine(&cfg),
        Command::Export(a) => commands::export(&cfg, a.kind, a.auto_approve),
        Command::ReviewServe(_) => commands::review_serve(&cfg),
        Command::DpoCheck(a) => commands::dpo_check(&cfg, a.trace.as_deref()),
        Command::Report(a) => commands::report(&cfg, &a.inputs, &a.out),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 1;
        }
        if cause.is::<BackendFailure>() || cause.is::<ClientError>() {
            return 3;
        }
        match cause.downcast_ref::<PipelineError>() {
            Some(PipelineError::InvalidConfig(_)) => return 1,
            Some(PipelineError::Client(_)) => return 3,
            Some(_) => return 2,
            None => {}
        }
    }
    2
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
