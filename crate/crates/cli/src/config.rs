//! Layered run configuration. Layers apply in order defaults, TOML file,
//! `MHB_*` environment variables, command-line overrides; later layers win.
//!
//! Environment keys map onto dotted config keys by stripping the prefix,
//! lowercasing and reading `__` as a section separator:
//! `MHB_RUN__MODEL_ID` sets `run.model_id`.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use mhb_core::client::{MockModelSpec, RemoteConfig, DEFAULT_TEMPERATURE};
use mhb_core::metrics::MatchMode;
use mhb_core::miner::{PairStatus, DEFAULT_J};
use mhb_core::prompt::DEFAULT_MAX_IMAGES;
use mhb_core::scenario::{default_plan, PlanCell, DEFAULT_FRAME_INTERVAL_S};
use mhb_core::store::Split;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

pub const ENV_PREFIX: &str = "MHB_";
/// Names a config file when `--config` is absent.
pub const CONFIG_ENV: &str = "MHB_CONFIG";
const REDACTED: &str = "***";

/// Optional string keys: absent from the defaults, so their type cannot be
/// inferred, and a value like `1234` must stay a string.
const OPTIONAL_STRINGS: [&str; 7] = [
    "backend.remote.api_key",
    "backend.remote.image_detail",
    "review.token",
    "review.ui_dir",
    "review.cors_origin",
    "score.out_dir",
    "export.out",
];

/// Bad flags, config files or values; exit code 1.
#[derive(Debug, Clone, PartialEq)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> UsageError {
    UsageError(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Mock,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub corpus: PathBuf,
    /// Observed frames per sample.
    pub h: usize,
    /// Predicted labels per human.
    pub t: usize,
    pub generate: GenerateSection,
    pub backend: BackendSection,
    pub run: RunSection,
    pub mine: MineSection,
    pub score: ScoreSection,
    pub export: ExportSection,
    pub dpo: DpoSection,
    pub review: ReviewSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateSection {
    pub base_seed: u64,
    /// Seed of the train/test assignment; `base_seed` when absent.
    pub split_seed: Option<u64>,
    pub stride: usize,
    pub split_ratio: f64,
    pub min_actions: usize,
    pub max_actions: usize,
    pub frame_interval_s: f64,
    pub plan: Vec<PlanCell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendSection {
    pub kind: BackendKind,
    pub mock: MockModelSpec,
    pub remote: RemoteConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    /// Key under which replies are stored.
    pub model_id: String,
    pub temperature: f64,
    pub max_in_flight: usize,
    pub chunk_size: usize,
    pub icl_count: usize,
    pub max_images: usize,
    pub split: Split,
    pub run_index: u32,
    pub seed: u64,
    /// Share of failed requests above which `predict` exits with the backend code.
    pub max_failure_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MineSection {
    pub j: u32,
    pub base_seed: u64,
    pub auto_approve: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreSection {
    pub match_mode: MatchMode,
    /// Defaults to `<corpus>/reports`.
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExportSection {
    pub include: BTreeSet<PairStatus>,
    /// Split exported as SFT targets.
    pub sft_split: Split,
    /// Defaults to `<corpus>/exports/<kind>.jsonl`.
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DpoSection {
    pub beta: f64,
    pub check_seed: u64,
    pub check_batches: usize,
    pub fd_step: f64,
    /// Toy training run written by `dpo-check --trace`.
    pub toy_lr: f64,
    pub toy_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReviewSection {
    pub addr: String,
    pub token: Option<String>,
    pub ui_dir: Option<PathBuf>,
    pub cors_origin: Option<String>,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            corpus: PathBuf::from("corpus"),
            h: 6,
            t: 6,
            generate: GenerateSection::default(),
            backend: BackendSection::default(),
            run: RunSection::default(),
            mine: MineSection::default(),
            score: ScoreSection::default(),
            export: ExportSection::default(),
            dpo: DpoSection::default(),
            review: ReviewSection::default(),
        }
    }
}

impl Default for GenerateSection {
    fn default() -> Self {
        Self {
            base_seed: 0,
            split_seed: None,
            stride: 6,
            split_ratio: 0.7,
            min_actions: 4,
            max_actions: 13,
            frame_interval_s: DEFAULT_FRAME_INTERVAL_S,
            plan: default_plan(),
        }
    }
}

impl Default for BackendSection {
    fn default() -> Self {
        Self {
            kind: BackendKind::Mock,
            mock: MockModelSpec::oracle(),
            remote: RemoteConfig::default(),
        }
    }
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            model_id: "oracle".into(),
            temperature: DEFAULT_TEMPERATURE,
            max_in_flight: 4,
            chunk_size: 64,
            icl_count: 0,
            max_images: DEFAULT_MAX_IMAGES,
            split: Split::Test,
            run_index: 0,
            seed: 0,
            max_failure_rate: 0.1,
        }
    }
}

impl Default for MineSection {
    fn default() -> Self {
        Self {
            j: DEFAULT_J,
            base_seed: 0,
            auto_approve: false,
        }
    }
}

impl Default for ScoreSection {
    fn default() -> Self {
        Self {
            match_mode: MatchMode::Ordered,
            out_dir: None,
        }
    }
}

impl Default for ExportSection {
    fn default() -> Self {
        Self {
            include: PairStatus::default_export(),
            sft_split: Split::Train,
            out: None,
        }
    }
}

impl Default for DpoSection {
    fn default() -> Self {
        Self {
            beta: mhb_core::dpo::DEFAULT_BETA,
            check_seed: 0,
            check_batches: 1000,
            fd_step: 1e-5,
            toy_lr: 0.5,
            toy_steps: 50,
        }
    }
}

impl Default for ReviewSection {
    fn default() -> Self {
        Self {
            addr: "127.0.0.1:8787".into(),
            token: None,
            ui_dir: None,
            cors_origin: None,
        }
    }
}

/// A command-line override of one dotted key.
#[derive(Debug, Clone, PartialEq)]
pub enum Override {
    /// Parsed according to the type already at the key.
    Raw(String),
    Value(Value),
}

impl Config {
    /// Resolves all layers. `env` is usually `std::env::vars()`.
    pub fn resolve(
        file: Option<&Path>,
        env: impl IntoIterator<Item = (String, String)>,
        overrides: &[(String, Override)],
    ) -> Result<Self, UsageError> {
        let Ok(Value::Table(mut table)) = Value::try_from(Config::default()) else {
            return Err(usage("default config does not serialize to a table"));
        };
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| usage(format!("reading {}: {e}", path.display())))?;
            let layer: Table = toml::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
            merge(&mut table, layer);
        }
        let mut env: Vec<(String, String)> = env
            .into_iter()
            .filter(|(k, _)| k.starts_with(ENV_PREFIX) && k != CONFIG_ENV)
            .collect();
        env.sort();
        for (k, v) in env {
            let key = k[ENV_PREFIX.len()..].to_lowercase().replace("__", ".");
            set(&mut table, &key, Override::Raw(v)).map_err(|e| usage(format!("{k}: {}", e.0)))?;
        }
        for (key, value) in overrides {
            set(&mut table, key, value.clone())?;
        }
        let cfg: Config = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| usage(format!("invalid config: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), UsageError> {
        let g = &self.generate;
        let checks = [
            (self.h > 0 && self.t > 0, "h and t must be positive"),
            (g.stride > 0, "generate.stride must be positive"),
            (g.split_ratio > 0.0 && g.split_ratio < 1.0, "generate.split_ratio must be in (0, 1)"),
            (g.min_actions >= 1 && g.min_actions <= g.max_actions, "generate.min_actions must be in 1..=max_actions"),
            (g.frame_interval_s > 0.0, "generate.frame_interval_s must be positive"),
            (!g.plan.is_empty(), "generate.plan is empty"),
            (self.run.max_in_flight > 0 && self.run.chunk_size > 0, "run.max_in_flight and run.chunk_size must be positive"),
            (self.run.temperature >= 0.0, "run.temperature must be non-negative"),
            ((0.0..=1.0).contains(&self.run.max_failure_rate), "run.max_failure_rate must be in [0, 1]"),
            (!self.run.model_id.is_empty(), "run.model_id is empty"),
            (self.dpo.beta > 0.0, "dpo.beta must be positive"),
            (self.dpo.fd_step > 0.0 && self.dpo.check_batches > 0, "dpo.fd_step and dpo.check_batches must be positive"),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(usage(*msg)),
            None => Ok(()),
        }
    }

    /// The effective config as TOML with secrets masked.
    pub fn echo(&self) -> String {
        toml::to_string(&self.redacted()).expect("config serializes")
    }

    pub fn redacted(&self) -> Config {
        let mut c = self.clone();
        if c.backend.remote.api_key.is_some() {
            c.backend.remote.api_key = Some(REDACTED.into());
        }
        if c.review.token.is_some() {
            c.review.token = Some(REDACTED.into());
        }
        c
    }

    /// First 16 hex digits of the SHA-256 of [`Config::echo`].
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.echo().as_bytes());
        hex::encode(digest)[..16].to_string()
    }

    /// The echo as `# `-prefixed lines for text artifacts.
    pub fn echo_comment(&self) -> String {
        let mut out = format!("# effective config {}\n", self.hash());
        for line in self.echo().lines() {
            out.push_str(if line.is_empty() { "#" } else { "#   " });
            out.push_str(line);
            out.push('\n');
        }
        out
    }
}

fn merge(base: &mut Table, layer: Table) {
    for (k, v) in layer {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(l)) => merge(b, l),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn set(table: &mut Table, key: &str, value: Override) -> Result<(), UsageError> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(usage(format!("bad config key {key:?}")));
    }
    let (leaf, sections) = parts.split_last().expect("split yields one part");
    let mut cur = table;
    for s in sections {
        let entry = cur.entry(s.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = match entry {
            Value::Table(t) => t,
            _ => return Err(usage(format!("{key}: {s} is not a section"))),
        };
    }
    let value = match value {
        Override::Value(v) => v,
        Override::Raw(raw) if OPTIONAL_STRINGS.contains(&key) => Value::String(raw),
        Override::Raw(raw) => parse_leaf(cur.get(*leaf), &raw).map_err(|e| usage(format!("{key}: {e}")))?,
    };
    cur.insert(leaf.to_string(), value);
    Ok(())
}

fn parse_scalar(raw: &str) -> Option<Value> {
    let t: Table = toml::from_str(&format!("v = {raw}")).ok()?;
    t.get("v").cloned()
}

/// Strings stay strings; arrays accept a bare comma list; otherwise TOML syntax.
fn parse_leaf(existing: Option<&Value>, raw: &str) -> Result<Value, String> {
    match existing {
        Some(Value::String(_)) => Ok(Value::String(raw.to_string())),
        Some(Value::Array(items)) if !raw.trim_start().starts_with('[') => {
            let as_string = items.first().is_none_or(Value::is_str);
            raw.split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| match as_string {
                    true => Ok(Value::String(s.to_string())),
                    false => parse_scalar(s).ok_or_else(|| format!("cannot parse {s:?}")),
                })
                .collect::<Result<Vec<_>, _>>()
                .map(Value::Array)
        }
        Some(_) => parse_scalar(raw).ok_or_else(|| format!("cannot parse {raw:?}")),
        None => Ok(parse_scalar(raw).unwrap_or_else(|| Value::String(raw.to_string()))),
    }
}
