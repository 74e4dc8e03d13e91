use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::labels::{parse_prediction, ParseFlag, PredictionGrid};
use crate::room::RoomType;

pub const MANIFEST_FORMAT: &str = "mhb-manifest/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Synthetic,
    Real,
}

impl FromStr for Source {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "synthetic" => Ok(Source::Synthetic),
            "real" => Ok(Source::Real),
            other => Err(format!("unknown source {other:?}")),
        }
    }
}

/// One observation frame: a symbolic `(scenario, step)` pair plus an
/// optional image path relative to the corpus root.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FrameRef {
    pub scenario_id: String,
    pub step: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
}

impl FrameRef {
    /// Image path if rendered, else the conventional location it would have.
    pub fn image_ref(&self) -> String {
        self.path
            .clone()
            .unwrap_or_else(|| format!("frames/{}/{:04}.png", self.scenario_id, self.step))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub room_type: RoomType,
    pub num_humans: usize,
    #[serde(default)]
    pub scenario_seed: Option<u64>,
    pub source: Source,
    pub scenario_id: String,
    /// Index of the last observed step within the scenario.
    pub t0: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub sample_id: String,
    pub split: Split,
    pub frame_refs: Vec<FrameRef>,
    pub scene_graph_ref: String,
    pub gt_grid: PredictionGrid,
    pub meta: SampleMeta,
}

/// First line of every manifest file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub format: String,
    pub split: Split,
    pub h: usize,
    pub t: usize,
    pub frame_interval_s: f64,
    #[serde(default)]
    pub vocab: Option<String>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub config: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedOutput {
    pub grid: PredictionGrid,
    pub flags: Vec<ParseFlag>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: Option<u64>,
    pub completion_tokens: Option<u64>,
    #[serde(default)]
    pub retries: u32,
}

/// One backend reply for one sample. `raw_text` is kept byte-exact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub sample_id: String,
    pub model_id: String,
    pub run_index: u32,
    pub raw_text: String,
    pub parsed: Option<ParsedOutput>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parse_error: Option<String>,
    pub latency_ms: u64,
    pub temperature: f64,
    #[serde(default)]
    pub usage: Usage,
}

impl PredictionRecord {
    /// Builds a record, parsing `raw_text` against the corpus horizon.
    #[allow(clippy::too_many_arguments)]
    pub fn from_reply(
        sample_id: &str,
        model_id: &str,
        run_index: u32,
        raw_text: String,
        horizon: usize,
        temperature: f64,
        latency_ms: u64,
        usage: Usage,
    ) -> Self {
        let (parsed, parse_error) = match parse_prediction(&raw_text, horizon) {
            Ok(p) => (
                Some(ParsedOutput {
                    grid: p.grid,
                    flags: p.flags,
                }),
                None,
            ),
            Err(e) => (None, Some(e.to_string())),
        };
        Self {
            sample_id: sample_id.to_string(),
            model_id: model_id.to_string(),
            run_index,
            raw_text,
            parsed,
            parse_error,
            latency_ms,
            temperature,
            usage,
        }
    }

    pub fn key(&self) -> (String, String, u32) {
        (self.sample_id.clone(), self.model_id.clone(), self.run_index)
    }
}

/// A backend call that produced no reply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub sample_id: String,
    pub model_id: String,
    pub run_index: u32,
    pub error: String,
    pub message: String,
}
