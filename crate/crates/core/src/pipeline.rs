//! End-to-end orchestration over a corpus: predict, score, mine, export.
//!
//! Each step is resumable: work already recorded in the corpus or review
//! queue is skipped, so an interrupted run can simply be repeated.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::client::{MockModel, MockModelSpec, MockVocab};
use crate::client::{infer_batch, ClientError, InferenceBackend, InferenceRequest, DEFAULT_TEMPERATURE};
use crate::labels::emit_prediction;
use crate::metrics::{aggregate, score_prediction, Embedder, MetricsError, Report, ScoreBreakdown, ScoreOptions};
use crate::miner::{export_dpo_dataset, make_pair, select_pair, DpoRecord, MinerError, PairStatus, Selection};
use crate::prompt::{build_prompt, pack_icl, IclExample, Prompt, PromptError, PromptSpec, DEFAULT_MAX_IMAGES};
use crate::review::{Decision, DecisionRequest, ReviewError, ReviewQueue};
use crate::room::RoomType;
use crate::scenario::{emit_dataset, write_dataset, DatasetConfig, DatasetPaths, FrameProvider};
use crate::scenario::{generate_plan, PlanCell, Scenario, ScenarioConfig, ScenarioError};
use crate::store::{Corpus, FailureRecord, PredictionRecord, Sample, SampleFilter, Split, StoreError};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Miner(#[from] MinerError),
    #[error(transparent)]
    Review(#[from] ReviewError),
    #[error("no predictions for model {model_id} on the {split} split")]
    NoPredictions { model_id: String, split: Split },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptConfig {
    /// Requested in-context examples; fewer are used if the image budget is smaller.
    pub icl_count: usize,
    pub max_images: usize,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            icl_count: 0,
            max_images: DEFAULT_MAX_IMAGES,
        }
    }
}

fn icl_example(corpus: &Corpus, s: &Sample) -> Result<IclExample> {
    Ok(IclExample {
        sample_id: s.sample_id.clone(),
        room_type: s.meta.room_type,
        num_humans: s.meta.num_humans,
        frame_refs: s.frame_refs.clone(),
        scene_graph_text: corpus.scene_graph_text(s)?,
        gt_grid: s.gt_grid.clone(),
    })
}

/// Builds prompts for samples of one corpus, drawing in-context examples from its train split.
pub struct PromptBuilder<'a> {
    corpus: &'a Corpus,
    cfg: PromptConfig,
    pool: Vec<IclExample>,
}

impl<'a> PromptBuilder<'a> {
    pub fn new(corpus: &'a Corpus, cfg: PromptConfig) -> Result<Self> {
        let pool = if cfg.icl_count == 0 {
            Vec::new()
        } else {
            corpus
                .query(&SampleFilter::split(Split::Train))
                .into_iter()
                .map(|s| icl_example(corpus, s))
                .collect::<Result<_>>()?
        };
        Ok(Self { corpus, cfg, pool })
    }

    /// Spec for `sample`; examples never come from the sample's own scenario.
    pub fn spec(&self, sample: &Sample) -> Result<PromptSpec> {
        let h = self.corpus.h();
        let candidates: Vec<IclExample> = self
            .pool
            .iter()
            .filter(|e| e.frame_refs.first().map(|f| f.scenario_id.as_str()) != Some(sample.meta.scenario_id.as_str()))
            .cloned()
            .collect();
        let budget = self.cfg.max_images.min((self.cfg.icl_count + 1) * h);
        let icl_examples = if self.cfg.icl_count == 0 {
            Vec::new()
        } else {
            pack_icl(&candidates, (sample.meta.room_type, sample.meta.num_humans), h, budget)
        };
        Ok(PromptSpec {
            h,
            t: self.corpus.t(),
            frame_refs: sample.frame_refs.clone(),
            scene_graph_text: self.corpus.scene_graph_text(sample)?,
            icl_examples,
            max_images: self.cfg.max_images,
        })
    }

    /// Rebuilds a spec from recorded example ids.
    pub fn spec_with(&self, sample: &Sample, icl_ids: &[String]) -> Result<PromptSpec> {
        let icl_examples = icl_ids
            .iter()
            .map(|id| {
                let s = self.corpus.sample(id).ok_or_else(|| StoreError::UnknownSample(id.clone()))?;
                icl_example(self.corpus, s)
            })
            .collect::<Result<_>>()?;
        Ok(PromptSpec {
            h: self.corpus.h(),
            t: self.corpus.t(),
            frame_refs: sample.frame_refs.clone(),
            scene_graph_text: self.corpus.scene_graph_text(sample)?,
            icl_examples,
            max_images: self.cfg.max_images,
        })
    }

    pub fn prompt(&self, sample: &Sample) -> Result<(PromptSpec, Prompt)> {
        let spec = self.spec(sample)?;
        let prompt = build_prompt(&spec)?;
        Ok((spec, prompt))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerateConfig {
    pub plan: Vec<PlanCell>,
    pub base_seed: u64,
    /// Per-scenario settings; room, humans, seed and length are overridden per plan cell.
    pub scenario: ScenarioConfig,
    pub dataset: DatasetConfig,
}

#[derive(Debug)]
pub struct Generated {
    pub corpus: Corpus,
    pub scenarios: Vec<Scenario>,
    pub manifests: DatasetPaths,
}

/// Simulates the plan, writes the dataset under `root` and ingests both splits.
pub fn generate_corpus(root: &Path, cfg: &GenerateConfig, frames: &dyn FrameProvider) -> Result<Generated> {
    let scenarios = generate_plan(&cfg.plan, cfg.base_seed, &cfg.scenario)?;
    let dataset = emit_dataset(&scenarios, &cfg.dataset, frames)?;
    std::fs::create_dir_all(root).map_err(crate::store::io_err(root))?;
    let manifests = write_dataset(root, &dataset)?;
    let mut corpus = Corpus::init(root, cfg.dataset.h, cfg.dataset.t, cfg.scenario.frame_interval_s)?;
    corpus.ingest(&manifests.train)?;
    corpus.ingest(&manifests.test)?;
    Ok(Generated {
        corpus,
        scenarios,
        manifests,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsRow {
    pub room: RoomType,
    pub num_humans: usize,
    pub videos: usize,
    pub avg_duration_s: f64,
    pub actions: usize,
}

/// Per (humans, room) video counts, mean duration and total actions.
pub fn scenario_stats(scenarios: &[Scenario]) -> Vec<StatsRow> {
    let mut cells: BTreeMap<(usize, RoomType), (usize, f64, usize)> = BTreeMap::new();
    for s in scenarios {
        let c = cells.entry((s.num_humans, s.room_type)).or_default();
        c.0 += 1;
        c.1 += s.length as f64 * s.frame_interval_s;
        c.2 += s.timelines.iter().map(Vec::len).sum::<usize>();
    }
    cells
        .into_iter()
        .map(|((m, room), (videos, dur, actions))| StatsRow {
            room,
            num_humans: m,
            videos,
            avg_duration_s: dur / videos as f64,
            actions,
        })
        .collect()
}

pub fn render_stats(rows: &[StatsRow]) -> String {
    let mut out = format!(
        "{:<10} {:>7}  {:<12} {:>7} {:>10} {:>8}\n",
        "Type", "#Human", "Room", "#Video", "Avg. Dur.", "#Action"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:<10} {:>7}  {:<12} {:>7} {:>9.1}s {:>8}",
            "Synthetic",
            r.num_humans,
            r.room.to_string(),
            r.videos,
            r.avg_duration_s,
            r.actions
        );
    }
    let videos: usize = rows.iter().map(|r| r.videos).sum();
    let actions: usize = rows.iter().map(|r| r.actions).sum();
    let _ = writeln!(out, "{:<10} {:>7}  {:<12} {:>7} {:>10} {:>8}", "Total", "", "", videos, "", actions);
    out
}

/// A mock backend whose ground truths are every sample of `corpus`.
pub fn mock_backend(corpus: &Corpus, spec: MockModelSpec) -> Result<MockModel> {
    let truths = corpus
        .query(&SampleFilter::default())
        .into_iter()
        .map(|s| (s.sample_id.clone(), s.gt_grid.clone()))
        .collect();
    Ok(MockModel::new(spec, truths, MockVocab::default())?)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunSummary {
    pub requested: usize,
    /// Already recorded before this run.
    pub skipped: usize,
    pub succeeded: usize,
    pub failed: usize,
    pub failures_by_kind: BTreeMap<String, usize>,
}

impl RunSummary {
    /// Failed share of the calls made in this run.
    pub fn failure_rate(&self) -> f64 {
        let attempted = self.succeeded + self.failed;
        if attempted == 0 {
            0.0
        } else {
            self.failed as f64 / attempted as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model_id: String,
    pub temperature: f64,
    pub max_in_flight: usize,
    /// Requests per committed chunk; bounds the work lost to an interruption.
    pub chunk_size: usize,
    pub prompt: PromptConfig,
}

impl RunConfig {
    pub fn new(model_id: impl Into<String>) -> Self {
        Self {
            model_id: model_id.into(),
            temperature: DEFAULT_TEMPERATURE,
            max_in_flight: 4,
            chunk_size: 64,
            prompt: PromptConfig::default(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.max_in_flight == 0 || self.chunk_size == 0 {
            return Err(PipelineError::InvalidConfig("max_in_flight and chunk_size must be positive".into()));
        }
        if self.model_id.is_empty() {
            return Err(PipelineError::InvalidConfig("model id is empty".into()));
        }
        Ok(())
    }
}

struct Job {
    sample_id: String,
    run_index: u32,
    seed: u64,
    icl_ids: Vec<String>,
}

/// Sends every job without a stored record and records replies or failures.
fn run_jobs(corpus: &mut Corpus, backend: &dyn InferenceBackend, cfg: &RunConfig, jobs: Vec<Job>) -> Result<RunSummary> {
    cfg.validate()?;
    let mut summary = RunSummary {
        requested: jobs.len(),
        ..RunSummary::default()
    };
    let pending: Vec<Job> = jobs
        .into_iter()
        .filter(|j| !corpus.has_prediction(&j.sample_id, &cfg.model_id, j.run_index))
        .collect();
    summary.skipped = summary.requested - pending.len();
    let horizon = corpus.t();
    for chunk in pending.chunks(cfg.chunk_size) {
        let reqs = {
            let builder = PromptBuilder::new(corpus, PromptConfig { icl_count: 0, ..cfg.prompt })?;
            chunk
                .iter()
                .map(|j| {
                    let sample = corpus
                        .sample(&j.sample_id)
                        .ok_or_else(|| StoreError::UnknownSample(j.sample_id.clone()))?;
                    let spec = builder.spec_with(sample, &j.icl_ids)?;
                    Ok(InferenceRequest::new(build_prompt(&spec)?, cfg.model_id.clone())
                        .with_seed(j.seed)
                        .with_tag(j.sample_id.clone())
                        .with_temperature(cfg.temperature))
                })
                .collect::<Result<Vec<_>>>()?
        };
        let replies = infer_batch(backend, &reqs, cfg.max_in_flight);
        let mut records = Vec::new();
        for (job, reply) in chunk.iter().zip(replies) {
            match reply {
                Ok(r) => {
                    summary.succeeded += 1;
                    records.push(PredictionRecord::from_reply(
                        &job.sample_id,
                        &cfg.model_id,
                        job.run_index,
                        r.text,
                        horizon,
                        cfg.temperature,
                        r.latency_ms,
                        r.usage,
                    ));
                }
                Err(e) => {
                    summary.failed += 1;
                    *summary.failures_by_kind.entry(e.kind().to_string()).or_default() += 1;
                    log::warn!("{} run {}: {e}", job.sample_id, job.run_index);
                    corpus.record_failure(FailureRecord {
                        sample_id: job.sample_id.clone(),
                        model_id: cfg.model_id.clone(),
                        run_index: job.run_index,
                        error: e.kind().to_string(),
                        message: e.to_string(),
                    })?;
                }
            }
        }
        corpus.record_predictions(records)?;
    }
    Ok(summary)
}

fn icl_ids(builder: &PromptBuilder<'_>, sample: &Sample) -> Result<Vec<String>> {
    Ok(builder.spec(sample)?.icl_examples.into_iter().map(|e| e.sample_id).collect())
}

/// One prediction per sample of `split` at `run_index`, seeded with `seed`.
pub fn predict(
    corpus: &mut Corpus,
    backend: &dyn InferenceBackend,
    cfg: &RunConfig,
    split: Split,
    run_index: u32,
    seed: u64,
) -> Result<RunSummary> {
    let jobs = {
        let builder = PromptBuilder::new(corpus, cfg.prompt)?;
        corpus
            .query(&SampleFilter::split(split))
            .into_iter()
            .filter(|s| !corpus.has_prediction(&s.sample_id, &cfg.model_id, run_index))
            .map(|s| {
                Ok(Job {
                    sample_id: s.sample_id.clone(),
                    run_index,
                    seed,
                    icl_ids: icl_ids(&builder, s)?,
                })
            })
            .collect::<Result<Vec<_>>>()?
    };
    let total = corpus.query(&SampleFilter::split(split)).len();
    let mut summary = run_jobs(corpus, backend, cfg, jobs)?;
    summary.skipped += total - summary.requested;
    summary.requested = total;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub sample_id: String,
    pub room: RoomType,
    pub num_humans: usize,
    pub breakdown: ScoreBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreOutcome {
    pub report: Report,
    pub samples: Vec<ScoredSample>,
    /// Samples of the split with no stored prediction; not scored.
    pub missing: Vec<String>,
}

pub fn score(
    corpus: &Corpus,
    model_id: &str,
    split: Split,
    run_index: u32,
    embedder: &dyn Embedder,
    opts: ScoreOptions,
) -> Result<ScoreOutcome> {
    let mut samples = Vec::new();
    let mut missing = Vec::new();
    for s in corpus.query(&SampleFilter::split(split)) {
        let Some(rec) = corpus.prediction(&s.sample_id, model_id, run_index) else {
            missing.push(s.sample_id.clone());
            continue;
        };
        samples.push(ScoredSample {
            sample_id: s.sample_id.clone(),
            room: s.meta.room_type,
            num_humans: s.meta.num_humans,
            breakdown: score_prediction(rec.parsed.as_ref(), &s.gt_grid, embedder, opts)?,
        });
    }
    if samples.is_empty() {
        return Err(PipelineError::NoPredictions {
            model_id: model_id.to_string(),
            split,
        });
    }
    let rows: Vec<(RoomType, usize, ScoreBreakdown)> =
        samples.iter().map(|s| (s.room, s.num_humans, s.breakdown.clone())).collect();
    Ok(ScoreOutcome {
        report: aggregate(&rows),
        samples,
        missing,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MineConfig {
    pub run: RunConfig,
    /// Responses per sample.
    pub j: u32,
    /// Run `k` is requested with seed `base_seed + k`.
    pub base_seed: u64,
    /// Mark every new pair approved (headless runs).
    pub auto_approve: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MineReport {
    pub samples: usize,
    pub emitted: usize,
    pub already_mined: usize,
    /// All parseable responses at the same distance; no pair emitted.
    pub degenerate: Vec<String>,
    /// (sample, parseable responses) for samples with fewer than two.
    pub shortfall: Vec<(String, usize)>,
    pub calls: RunSummary,
}

pub const AUTO_REVIEWER: &str = "auto-approve";

/// Samples `j` responses per train sample and queues one pair per sample
/// whose responses differ in edit distance to the ground truth.
pub fn mine(
    corpus: &mut Corpus,
    queue: &mut ReviewQueue,
    backend: &dyn InferenceBackend,
    cfg: &MineConfig,
) -> Result<MineReport> {
    if cfg.j < 2 {
        return Err(MinerError::InsufficientResponses(cfg.j as usize).into());
    }
    let model = cfg.run.model_id.clone();
    let mut report = MineReport::default();
    let mut todo: Vec<(String, Vec<String>)> = Vec::new();
    let mut jobs = Vec::new();
    {
        let builder = PromptBuilder::new(corpus, cfg.run.prompt)?;
        for s in corpus.query(&SampleFilter::split(Split::Train)) {
            report.samples += 1;
            if queue.contains(&crate::miner::PreferencePair::id_for(&s.sample_id, &model)) {
                report.already_mined += 1;
                continue;
            }
            let ids = icl_ids(&builder, s)?;
            for k in 0..cfg.j {
                jobs.push(Job {
                    sample_id: s.sample_id.clone(),
                    run_index: k,
                    seed: cfg.base_seed.wrapping_add(k as u64),
                    icl_ids: ids.clone(),
                });
            }
            todo.push((s.sample_id.clone(), ids));
        }
    }
    report.calls = run_jobs(corpus, backend, &cfg.run, jobs)?;

    let new_samples = todo.len();
    let mut pairs = Vec::new();
    let mut seq = queue.next_seq();
    for (sample_id, ids) in todo {
        let gt = &corpus.sample(&sample_id).expect("queried above").gt_grid;
        let responses: Vec<&PredictionRecord> =
            (0..cfg.j).filter_map(|k| corpus.prediction(&sample_id, &model, k)).collect();
        let selection = select_pair(&responses, gt);
        match selection {
            Selection::Pair { .. } => {
                pairs.push(make_pair(&responses, &selection, ids, seq).expect("selection is a pair"));
                seq += 1;
            }
            Selection::Degenerate { ed } => {
                log::info!("{sample_id}: all responses at edit distance {ed:.4}; skipped as degenerate");
                report.degenerate.push(sample_id);
            }
            Selection::Shortfall { parseable } => {
                log::warn!("{sample_id}: only {parseable} parseable responses of {}", cfg.j);
                report.shortfall.push((sample_id, parseable));
            }
        }
    }
    if !report.shortfall.is_empty() && report.shortfall.len() == new_samples {
        let best = report.shortfall.iter().map(|s| s.1).max().unwrap_or(0);
        return Err(MinerError::InsufficientResponses(best).into());
    }
    let new_ids: Vec<String> = pairs.iter().map(|p| p.pair_id.clone()).collect();
    report.emitted = queue.add_pairs(pairs)?;
    if cfg.auto_approve {
        for id in new_ids {
            queue.decide(
                &id,
                &DecisionRequest {
                    decision: Decision::Approve,
                    edited_text: None,
                    idempotency_key: None,
                    reviewer: Some(AUTO_REVIEWER.into()),
                },
            )?;
        }
    }
    Ok(report)
}

/// DPO records for queued pairs whose status is in `include`.
pub fn export_dpo(
    corpus: &Corpus,
    queue: &ReviewQueue,
    include: &BTreeSet<PairStatus>,
    prompt: PromptConfig,
) -> Result<Vec<DpoRecord>> {
    let builder = PromptBuilder::new(corpus, PromptConfig { icl_count: 0, ..prompt })?;
    let records = export_dpo_dataset(queue.pairs(), include, |p| {
        let sample = corpus
            .sample(&p.sample_id)
            .ok_or_else(|| StoreError::UnknownSample(p.sample_id.clone()))?;
        builder.spec_with(sample, &p.icl_ids)
    })??;
    Ok(records)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftRecord {
    pub sample_id: String,
    pub prompt_spec: PromptSpec,
    pub target_text: String,
}

/// Supervised pairs (prompt, ground truth) for every sample of `split`.
pub fn export_sft(corpus: &Corpus, split: Split, prompt: PromptConfig) -> Result<Vec<SftRecord>> {
    let builder = PromptBuilder::new(corpus, prompt)?;
    corpus
        .query(&SampleFilter::split(split))
        .into_iter()
        .map(|s| {
            Ok(SftRecord {
                sample_id: s.sample_id.clone(),
                prompt_spec: builder.spec(s)?,
                target_text: emit_prediction(&s.gt_grid),
            })
        })
        .collect()
}

/// One compact JSON document per line.
pub fn to_jsonl<T: Serialize>(items: &[T]) -> String {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).expect("records serialize"));
        out.push('\n');
    }
    out
}
