use std::fmt;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mhb_core::client::{InferenceBackend, RemoteClient};
use mhb_core::dpo::check::{run_checks, CheckConfig};
use mhb_core::dpo::{trace_csv, train_toy, ToyPolicy, TokenPair};
use mhb_core::metrics::{render_csv, render_text, Embedder, MatchMode, Report, ReportMeta, ScoreOptions, TrigramEmbedder};
use mhb_core::miner::{MinerError, PairStatus};
use mhb_core::pipeline::{
    self, export_dpo, export_sft, generate_corpus, mock_backend, render_stats, scenario_stats, to_jsonl,
    GenerateConfig, MineConfig, PipelineError, PromptConfig, RunConfig, RunSummary, ScoreOutcome, AUTO_REVIEWER,
};
use mhb_core::review::{Decision, DecisionRequest, ReviewQueue};
use mhb_core::room::RoomType;
use mhb_core::scenario::{DatasetConfig, ScenarioConfig, SymbolicFrames};
use mhb_core::store::{Corpus, Split, PAIRS_FILE};
use mhb_review::ServiceConfig;
use serde::{Deserialize, Serialize};

use crate::config::{BackendKind, Config, UsageError};
use crate::ExportKind;

/// Too many backend calls failed; exit code 3.
#[derive(Debug)]
pub struct BackendFailure {
    pub failed: usize,
    pub attempted: usize,
    pub threshold: f64,
}

impl fmt::Display for BackendFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} of {} backend calls failed (limit {:.0}%)",
            self.failed,
            self.attempted,
            self.threshold * 100.0
        )
    }
}

impl std::error::Error for BackendFailure {}

fn check_failures(cfg: &Config, calls: &RunSummary) -> Result<()> {
    if calls.failure_rate() > cfg.run.max_failure_rate {
        return Err(BackendFailure {
            failed: calls.failed,
            attempted: calls.succeeded + calls.failed,
            threshold: cfg.run.max_failure_rate,
        }
        .into());
    }
    Ok(())
}

fn check_header(cfg: &Config, corpus: &Corpus) -> Result<(), UsageError> {
    if (corpus.h(), corpus.t()) != (cfg.h, cfg.t) {
        return Err(UsageError(format!(
            "config has h={} t={} but the corpus was built with h={} t={}",
            cfg.h,
            cfg.t,
            corpus.h(),
            corpus.t()
        )));
    }
    Ok(())
}

fn open(cfg: &Config) -> Result<Corpus> {
    let corpus = Corpus::open(&cfg.corpus).with_context(|| format!("opening corpus {}", cfg.corpus.display()))?;
    check_header(cfg, &corpus)?;
    Ok(corpus)
}

fn open_writer(cfg: &Config) -> Result<Corpus> {
    let corpus = Corpus::open_writer(&cfg.corpus).with_context(|| format!("opening corpus {}", cfg.corpus.display()))?;
    check_header(cfg, &corpus)?;
    Ok(corpus)
}

fn prompt_config(cfg: &Config) -> PromptConfig {
    PromptConfig {
        icl_count: cfg.run.icl_count,
        max_images: cfg.run.max_images,
    }
}

fn run_config(cfg: &Config) -> RunConfig {
    RunConfig {
        model_id: cfg.run.model_id.clone(),
        temperature: cfg.run.temperature,
        max_in_flight: cfg.run.max_in_flight,
        chunk_size: cfg.run.chunk_size,
        prompt: prompt_config(cfg),
    }
}

fn backend(cfg: &Config, corpus: &Corpus) -> Result<Box<dyn InferenceBackend>> {
    Ok(match cfg.backend.kind {
        BackendKind::Mock => Box::new(mock_backend(corpus, cfg.backend.mock.clone())?),
        BackendKind::Remote => {
            let mut remote = cfg.backend.remote.clone();
            if remote.frame_root.is_relative() {
                remote.frame_root = corpus.root().join(&remote.frame_root);
            }
            Box::new(RemoteClient::new(remote))
        }
    })
}

/// Keeps model ids usable as file names.
fn file_stem(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || "._-".contains(c) { c } else { '_' })
        .collect()
}

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

/// Writes `contents` and the effective config next to it.
fn write_with_config(cfg: &Config, path: &Path, contents: &str) -> Result<()> {
    write(path, contents)?;
    let mut sidecar = path.as_os_str().to_owned();
    sidecar.push(".config.toml");
    write(Path::new(&sidecar), &cfg.echo())
}

#[derive(Serialize)]
struct RunRecord<'a, T> {
    command: &'a str,
    config_hash: String,
    config: Config,
    summary: &'a T,
}

fn write_run_record<T: Serialize>(cfg: &Config, corpus: &Corpus, name: &str, summary: &T) -> Result<PathBuf> {
    let command = name.split('.').next().unwrap_or(name);
    let record = RunRecord {
        command,
        config_hash: cfg.hash(),
        config: cfg.redacted(),
        summary,
    };
    let path = corpus.root().join("runs").join(format!("{name}.json"));
    write(&path, &(serde_json::to_string_pretty(&record)? + "\n"))?;
    Ok(path)
}

pub fn generate(cfg: &Config) -> Result<()> {
    let g = &cfg.generate;
    for cell in &g.plan {
        if cell.room == RoomType::Bedroom && cell.num_humans >= 3 {
            log::warn!(
                "notice: generating {} bedroom scenarios with {} humans; the reference dataset has no such cell",
                cell.videos,
                cell.num_humans
            );
        }
    }
    let mut scenario = ScenarioConfig::new(RoomType::Kitchen, 1, 0);
    scenario.min_actions = g.min_actions;
    scenario.max_actions = g.max_actions;
    scenario.frame_interval_s = g.frame_interval_s;
    let gen = GenerateConfig {
        plan: g.plan.clone(),
        base_seed: g.base_seed,
        scenario,
        dataset: DatasetConfig {
            h: cfg.h,
            t: cfg.t,
            stride: g.stride,
            split_ratio: g.split_ratio,
            seed: g.split_seed,
        },
    };
    let out = generate_corpus(&cfg.corpus, &gen, &SymbolicFrames)?;
    let table = render_stats(&scenario_stats(&out.scenarios));
    write_with_config(cfg, &cfg.corpus.join("stats.txt"), &table)?;
    print!("{table}");
    let counts = |split| out.corpus.query(&mhb_core::store::SampleFilter::split(split)).len();
    println!(
        "{} scenarios, {} train / {} test samples",
        out.scenarios.len(),
        counts(Split::Train),
        counts(Split::Test)
    );
    Ok(())
}

pub fn ingest(cfg: &Config, manifests: &[PathBuf]) -> Result<()> {
    let mut corpus = Corpus::init(&cfg.corpus, cfg.h, cfg.t, cfg.generate.frame_interval_s)?;
    for m in manifests {
        let r = corpus.ingest(m).with_context(|| format!("ingesting {}", m.display()))?;
        println!("{}: {} added, {} unchanged", m.display(), r.added, r.unchanged);
    }
    for ((room, humans), n) in corpus.counts() {
        println!("  {room} / {humans} human(s): {n} samples");
    }
    Ok(())
}

fn print_calls(what: &str, s: &RunSummary) {
    println!(
        "{what}: {} requested, {} skipped, {} succeeded, {} failed",
        s.requested, s.skipped, s.succeeded, s.failed
    );
    for (kind, n) in &s.failures_by_kind {
        println!("  {kind}: {n}");
    }
}

pub fn predict(cfg: &Config) -> Result<()> {
    let mut corpus = open_writer(cfg)?;
    let backend = backend(cfg, &corpus)?;
    let r = &cfg.run;
    let summary = pipeline::predict(&mut corpus, backend.as_ref(), &run_config(cfg), r.split, r.run_index, r.seed)?;
    print_calls("predict", &summary);
    let name = format!("predict.{}.{}.r{}", file_stem(&r.model_id), r.split, r.run_index);
    write_run_record(cfg, &corpus, &name, &summary)?;
    check_failures(cfg, &summary)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ScoreFile {
    pub model_id: String,
    pub split: Split,
    pub run_index: u32,
    pub embedder: String,
    pub match_mode: MatchMode,
    pub config_hash: String,
    pub config: Config,
    pub outcome: ScoreOutcome,
}

/// Text and CSV renderings, each prefixed with the config echo and `preamble`.
fn tables(cfg: &Config, reports: &[(String, Report)], meta: &ReportMeta, preamble: &str) -> [String; 2] {
    let head = cfg.echo_comment() + preamble;
    [render_text(reports, meta), render_csv(reports, meta)].map(|body| format!("{head}{body}"))
}

pub fn score(cfg: &Config) -> Result<()> {
    let corpus = open(cfg)?;
    let r = &cfg.run;
    let embedder = TrigramEmbedder;
    let opts = ScoreOptions {
        mode: cfg.score.match_mode,
    };
    let outcome = pipeline::score(&corpus, &r.model_id, r.split, r.run_index, &embedder, opts)?;
    if !outcome.missing.is_empty() {
        log::warn!("{} samples have no prediction and were not scored", outcome.missing.len());
    }
    let meta = ReportMeta {
        embedder: embedder.name(),
        config_hash: cfg.hash(),
        match_mode: cfg.score.match_mode,
    };
    let reports = [(r.model_id.clone(), outcome.report.clone())];
    let [text, csv] = tables(cfg, &reports, &meta, "");
    let dir = cfg.score.out_dir.clone().unwrap_or_else(|| corpus.root().join("reports"));
    let stem = format!("{}.{}.r{}", file_stem(&r.model_id), r.split, r.run_index);
    let file = ScoreFile {
        model_id: r.model_id.clone(),
        split: r.split,
        run_index: r.run_index,
        embedder: meta.embedder.clone(),
        match_mode: meta.match_mode,
        config_hash: meta.config_hash.clone(),
        config: cfg.redacted(),
        outcome,
    };
    write(&dir.join(format!("{stem}.txt")), &text)?;
    write(&dir.join(format!("{stem}.csv")), &csv)?;
    write(&dir.join(format!("{stem}.json")), &(serde_json::to_string_pretty(&file)? + "\n"))?;
    print!("{}", render_text(&reports, &meta));
    Ok(())
}

pub fn report(cfg: &Config, inputs: &[PathBuf], out: &Path) -> Result<()> {
    let mut files = Vec::new();
    for path in inputs {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let f: ScoreFile = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        files.push(f);
    }
    let first = &files[0];
    if let Some(f) = files.iter().find(|f| f.embedder != first.embedder || f.match_mode != first.match_mode) {
        bail!(
            "score files disagree: {} ({}, {:?}) vs {} ({}, {:?})",
            first.model_id,
            first.embedder,
            first.match_mode,
            f.model_id,
            f.embedder,
            f.match_mode
        );
    }
    let mut preamble = String::new();
    for f in &files {
        preamble += &format!("# source {} {} r{}: config {}\n", f.model_id, f.split, f.run_index, f.config_hash);
    }
    let reports: Vec<_> = files.iter().map(|f| (f.model_id.clone(), f.outcome.report.clone())).collect();
    let meta = ReportMeta {
        embedder: first.embedder.clone(),
        config_hash: cfg.hash(),
        match_mode: first.match_mode,
    };
    let [text, csv] = tables(cfg, &reports, &meta, &preamble);
    let with_ext = |ext: &str| {
        let mut p = out.as_os_str().to_owned();
        p.push(ext);
        PathBuf::from(p)
    };
    write(&with_ext(".txt"), &text)?;
    write(&with_ext(".csv"), &csv)?;
    print!("{}", render_text(&reports, &meta));
    Ok(())
}

pub fn mine(cfg: &Config) -> Result<()> {
    let mut corpus = open_writer(cfg)?;
    let mut queue = ReviewQueue::open_writer(&corpus.root().join(PAIRS_FILE), corpus.t())?;
    let backend = backend(cfg, &corpus)?;
    let m = &cfg.mine;
    let mine_cfg = MineConfig {
        run: run_config(cfg),
        j: m.j,
        base_seed: m.base_seed,
        auto_approve: m.auto_approve,
    };
    let report = pipeline::mine(&mut corpus, &mut queue, backend.as_ref(), &mine_cfg)?;
    print_calls("calls", &report.calls);
    println!(
        "mined {} samples: {} pairs emitted, {} already queued, {} degenerate, {} short of responses",
        report.samples,
        report.emitted,
        report.already_mined,
        report.degenerate.len(),
        report.shortfall.len()
    );
    println!("queue: {} pending of {}", queue.stats().count(PairStatus::Pending), queue.len());
    write_run_record(cfg, &corpus, &format!("mine.{}", file_stem(&cfg.run.model_id)), &report)?;
    check_failures(cfg, &report.calls)
}

fn approve_pending(queue: &mut ReviewQueue) -> Result<usize> {
    let pending: Vec<String> = queue
        .pairs()
        .iter()
        .filter(|p| p.status == PairStatus::Pending)
        .map(|p| p.pair_id.clone())
        .collect();
    let req = DecisionRequest {
        decision: Decision::Approve,
        edited_text: None,
        idempotency_key: None,
        reviewer: Some(AUTO_REVIEWER.into()),
    };
    for id in &pending {
        queue.decide(id, &req)?;
    }
    Ok(pending.len())
}

pub fn export(cfg: &Config, kind: ExportKind, auto_approve: bool) -> Result<()> {
    let corpus = open(cfg)?;
    let (name, body, count) = match kind {
        ExportKind::Dpo => {
            let path = corpus.root().join(PAIRS_FILE);
            let queue = if auto_approve {
                let mut q = ReviewQueue::open_writer(&path, corpus.t())?;
                let n = approve_pending(&mut q)?;
                log::info!("auto-approved {n} pending pairs");
                q
            } else {
                ReviewQueue::load(&path, corpus.t())?
            };
            let records = export_dpo(&corpus, &queue, &cfg.export.include, prompt_config(cfg)).map_err(|e| {
                let hint = matches!(e, PipelineError::Miner(MinerError::NothingToExport))
                    .then_some("; decide pairs with review-serve or pass --auto-approve")
                    .unwrap_or_default();
                anyhow::Error::new(e).context(format!("exporting {} pairs{hint}", queue.len()))
            })?;
            let stats = queue.stats();
            let expected: usize = cfg.export.include.iter().map(|s| stats.count(*s)).sum();
            debug_assert_eq!(expected, records.len());
            let breakdown: Vec<String> = cfg.export.include.iter().map(|s| format!("{s}={}", stats.count(*s))).collect();
            println!("pairs: {} total, exporting {}", stats.total, breakdown.join(" "));
            ("dpo", to_jsonl(&records), records.len())
        }
        ExportKind::Sft => {
            let records = export_sft(&corpus, cfg.export.sft_split, prompt_config(cfg))?;
            ("sft", to_jsonl(&records), records.len())
        }
    };
    let out = cfg
        .export
        .out
        .clone()
        .unwrap_or_else(|| corpus.root().join("exports").join(format!("{name}.jsonl")));
    write_with_config(cfg, &out, &body)?;
    println!("wrote {count} {name} records to {}", out.display());
    Ok(())
}

pub fn review_serve(cfg: &Config) -> Result<()> {
    let addr: SocketAddr = cfg
        .review
        .addr
        .parse()
        .map_err(|_| UsageError(format!("review.addr {:?} is not host:port", cfg.review.addr)))?;
    let service = ServiceConfig {
        corpus_root: cfg.corpus.clone(),
        token: cfg.review.token.clone(),
        ui_dir: cfg.review.ui_dir.clone(),
        cors_origin: cfg.review.cors_origin.clone(),
    };
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(mhb_review::serve(addr, service))?;
    Ok(())
}

/// Verification failed; exit code 2.
#[derive(Debug)]
struct VerificationFailed(Vec<&'static str>);

impl fmt::Display for VerificationFailed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "failed checks: {}", self.0.join(", "))
    }
}

impl std::error::Error for VerificationFailed {}

/// Fixed toy preferences over a 4-token vocabulary.
fn toy_pairs() -> Vec<TokenPair> {
    vec![(vec![0, 1, 2], vec![3, 3, 3]), (vec![1, 0, 2], vec![2, 3, 1]), (vec![0, 0, 1], vec![3, 2, 2])]
}

pub fn dpo_check(cfg: &Config, trace: Option<&Path>) -> Result<()> {
    let check = CheckConfig {
        seed: cfg.dpo.check_seed,
        batches: cfg.dpo.check_batches,
        fd_step: cfg.dpo.fd_step,
        ..CheckConfig::default()
    };
    let report = run_checks(&check);
    print!("{}", report.render());
    let value = |name| report.get(name).map_or(f64::NAN, |r| r.value);
    println!("ln 2 fixed point: max |loss - ln 2| = {:.3e}", value("loss_at_reference_is_ln2"));
    let fd = ["dpo_gradient_fd", "sft_gradient_fd", "dpo_policy_gradient_fd"]
        .map(value)
        .into_iter()
        .fold(0.0, f64::max);
    println!("finite differences: max rel. err = {fd:.3e} over {} batches", check.batches);
    if let Some(path) = trace {
        let reference = ToyPolicy::uniform(4, 3);
        let (_, points) = train_toy(&reference, &reference, &toy_pairs(), cfg.dpo.beta, cfg.dpo.toy_lr, cfg.dpo.toy_steps)?;
        write(path, &(cfg.echo_comment() + &trace_csv(&points)))?;
        println!("toy trace: loss {:.6} -> {:.6}", points[0].loss, points[points.len() - 1].loss);
    }
    let failed: Vec<&'static str> = report.results.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    if !failed.is_empty() {
        return Err(VerificationFailed(failed).into());
    }
    Ok(())
}
