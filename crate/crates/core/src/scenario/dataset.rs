//! Slicing scenarios into samples and splitting them train/test by scenario.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde_json::json;

use super::{slice_sample, Result, Scenario, ScenarioError};
use crate::labels::emit_script;
use crate::room::RoomType;
use crate::scene_graph::{default_vocabulary, serialize_scene_graph, SceneGraph};
use crate::store::{write_manifest, ManifestHeader, Sample, Split, StoreError, MANIFEST_FORMAT, VOCAB_FILE};

/// Attaches rendered image paths to symbolic frames.
pub trait FrameProvider: Sync {
    /// Path relative to the corpus root, or `None` to keep the frame symbolic.
    fn frame_path(&self, scenario: &Scenario, step: usize) -> Option<String>;
}

/// Leaves every frame symbolic.
#[derive(Debug, Clone, Copy, Default)]
pub struct SymbolicFrames;

impl FrameProvider for SymbolicFrames {
    fn frame_path(&self, _: &Scenario, _: usize) -> Option<String> {
        None
    }
}

impl<F: Fn(&Scenario, usize) -> Option<String> + Sync> FrameProvider for F {
    fn frame_path(&self, scenario: &Scenario, step: usize) -> Option<String> {
        self(scenario, step)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub h: usize,
    pub t: usize,
    /// Steps between consecutive observation endpoints.
    pub stride: usize,
    /// Fraction of scenarios assigned to train.
    pub split_ratio: f64,
    pub seed: Option<u64>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            h: 6,
            t: 6,
            stride: 6,
            split_ratio: 0.7,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train_header: ManifestHeader,
    pub test_header: ManifestHeader,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    /// Scene-graph snapshots keyed by their corpus-relative path.
    pub graphs: BTreeMap<String, SceneGraph>,
    /// Action scripts keyed by scenario id.
    pub scripts: BTreeMap<String, String>,
}

impl Dataset {
    pub fn scenario_split(&self) -> BTreeMap<&str, Split> {
        self.train
            .iter()
            .chain(&self.test)
            .map(|s| (s.meta.scenario_id.as_str(), s.split))
            .collect()
    }
}

/// Assigns whole scenarios to splits, stratified by (room, humans).
///
/// The test side receives `n - round(ratio * n)` scenarios overall, shared
/// across cells by largest remainder; within a cell the last scenarios by id
/// go to test.
pub fn assign_splits(scenarios: &[(String, RoomType, usize)], ratio: f64) -> Result<BTreeMap<String, Split>> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(ScenarioError::InvalidConfig(format!("split ratio {ratio} must lie in (0, 1)")));
    }
    let n = scenarios.len();
    let n_test = n - (ratio * n as f64).round() as usize;
    let n_train = n - n_test;
    if n_test == 0 || n_train == 0 {
        return Err(ScenarioError::EmptySplit {
            train: n_train,
            test: n_test,
        });
    }
    let mut cells: BTreeMap<(RoomType, usize), Vec<&str>> = BTreeMap::new();
    for (id, room, m) in scenarios {
        cells.entry((*room, *m)).or_default().push(id);
    }
    let mut quotas: Vec<(usize, f64)> = cells
        .values()
        .map(|ids| {
            let exact = ids.len() as f64 * (1.0 - ratio);
            (exact.floor() as usize, exact - exact.floor())
        })
        .collect();
    let assigned: usize = quotas.iter().map(|q| q.0).sum();
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    order.sort_by(|&a, &b| quotas[b].1.total_cmp(&quotas[a].1).then(a.cmp(&b)));
    for &i in order.iter().cycle().take(n_test.saturating_sub(assigned)) {
        quotas[i].0 += 1;
    }

    let mut out = BTreeMap::new();
    for (ids, (k, _)) in cells.into_values().zip(quotas) {
        let mut ids = ids;
        ids.sort();
        let cut = ids.len().saturating_sub(k);
        for (i, id) in ids.into_iter().enumerate() {
            out.insert(id.to_string(), if i < cut { Split::Train } else { Split::Test });
        }
    }
    Ok(out)
}

/// Slices every scenario at `stride` and splits samples by scenario.
pub fn emit_dataset(scenarios: &[Scenario], cfg: &DatasetConfig, frames: &dyn FrameProvider) -> Result<Dataset> {
    if cfg.stride == 0 {
        return Err(ScenarioError::InvalidConfig("stride must be at least 1".into()));
    }
    if cfg.h == 0 || cfg.t == 0 {
        return Err(ScenarioError::OutOfRange("history and horizon must be at least 1".into()));
    }
    let keys: Vec<_> = scenarios
        .iter()
        .map(|s| (s.scenario_id.clone(), s.room_type, s.num_humans))
        .collect();
    let splits = assign_splits(&keys, cfg.split_ratio)?;
    let interval = scenarios.first().map_or(super::DEFAULT_FRAME_INTERVAL_S, |s| s.frame_interval_s);

    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut graphs = BTreeMap::new();
    let mut scripts = BTreeMap::new();
    for s in scenarios {
        let split = splits[&s.scenario_id];
        scripts.insert(s.scenario_id.clone(), emit_script(&s.script()));
        let mut t0 = cfg.h - 1;
        while t0 + cfg.t < s.length {
            let mut slice = slice_sample(s, t0, cfg.h, cfg.t, split)?;
            for f in &mut slice.sample.frame_refs {
                f.path = frames.frame_path(s, f.step);
            }
            graphs.insert(slice.sample.scene_graph_ref.clone(), slice.graph);
            match split {
                Split::Train => train.push(slice.sample),
                Split::Test => test.push(slice.sample),
            }
            t0 += cfg.stride;
        }
    }
    train.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    test.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));

    let header = |split| ManifestHeader {
        format: MANIFEST_FORMAT.into(),
        split,
        h: cfg.h,
        t: cfg.t,
        frame_interval_s: interval,
        vocab: Some(VOCAB_FILE.into()),
        seed: cfg.seed,
        config: json!({
            "stride": cfg.stride,
            "split_ratio": cfg.split_ratio,
            "scenarios": scenarios.iter().map(|s| json!({
                "id": s.scenario_id,
                "seed": s.seed,
                "length": s.length,
            })).collect::<Vec<_>>(),
        }),
    };
    Ok(Dataset {
        train_header: header(Split::Train),
        test_header: header(Split::Test),
        train,
        test,
        graphs,
        scripts,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetPaths {
    pub train: PathBuf,
    pub test: PathBuf,
}

/// Writes graphs, scripts, vocabulary and both manifests under `root`.
pub fn write_dataset(root: &Path, ds: &Dataset) -> Result<DatasetPaths, StoreError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| StoreError::Io { path, source }
    };
    for dir in ["graphs", "scripts", "manifests"] {
        let d = root.join(dir);
        fs::create_dir_all(&d).map_err(io(&d))?;
    }
    for (rel, g) in &ds.graphs {
        let p = root.join(rel);
        fs::write(&p, serialize_scene_graph(g)).map_err(io(&p))?;
    }
    for (id, text) in &ds.scripts {
        let p = root.join("scripts").join(format!("{id}.txt"));
        fs::write(&p, text).map_err(io(&p))?;
    }
    let vocab = root.join(VOCAB_FILE);
    let vocab_json = serde_json::to_string_pretty(default_vocabulary()).expect("vocabulary serializes");
    fs::write(&vocab, vocab_json).map_err(io(&vocab))?;
    let paths = DatasetPaths {
        train: root.join("manifests/train.jsonl"),
        test: root.join("manifests/test.jsonl"),
    };
    write_manifest(&paths.train, &ds.train_header, &ds.train)?;
    write_manifest(&paths.test, &ds.test_header, &ds.test)?;
    Ok(paths)
}
