//! On-disk corpus: samples, splits, prediction logs.
//!
//! Layout, all paths relative to the corpus root:
//!
//! ```text
//! corpus.json          index: H, T, line counts (replaced atomically)
//! samples.jsonl        ingested samples
//! predictions.jsonl    append-only prediction log
//! failures.jsonl       backend calls that returned no text
//! pairs.jsonl          preference-pair review log
//! graphs/<id>.json     scene-graph snapshots
//! manifests/*.jsonl    generated manifests (header line + sample lines)
//! .lock                present while a writer holds the corpus
//! ```
//!
//! Readers only look at the number of lines recorded in `corpus.json`, so
//! a reader never observes a half-written batch.

mod records;

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub use records::{
    FailureRecord, FrameRef, ManifestHeader, ParsedOutput, PredictionRecord, Sample, SampleMeta, Source, Split, Usage,
    MANIFEST_FORMAT,
};

use crate::room::RoomType;
use crate::scene_graph::{parse_scene_graph_with, SceneGraph, Vocabulary};

pub const CORPUS_FORMAT: &str = "mhb-corpus/1";
pub const INDEX_FILE: &str = "corpus.json";
pub const SAMPLES_FILE: &str = "samples.jsonl";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const FAILURES_FILE: &str = "failures.jsonl";
pub const PAIRS_FILE: &str = "pairs.jsonl";
pub const VOCAB_FILE: &str = "vocab.json";
const LOCK_FILE: &str = ".lock";

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest line {line}: {reason}")]
    CorruptManifest { line: usize, reason: String },
    #[error("referenced artifact {0} does not exist")]
    MissingArtifact(PathBuf),
    #[error("corpus uses H={expected_h}, T={expected_t} but manifest declares H={found_h}, T={found_t}")]
    HeaderMismatch {
        expected_h: usize,
        expected_t: usize,
        found_h: usize,
        found_t: usize,
    },
    #[error("scenario {0} would appear in both train and test splits")]
    SplitLeak(String),
    #[error("prediction ({sample_id}, {model_id}, run {run_index}) already recorded")]
    DuplicateRun {
        sample_id: String,
        model_id: String,
        run_index: u32,
    },
    #[error("unknown sample {0}")]
    UnknownSample(String),
    #[error("corpus is locked by another writer ({0})")]
    Locked(PathBuf),
    #[error("corpus was opened read-only")]
    ReadOnly,
    #[error("{0} is not a corpus directory")]
    NotACorpus(PathBuf),
    #[error("{file} line {line}: {reason}")]
    CorruptStore { file: String, line: usize, reason: String },
}

pub type Result<T, E = StoreError> = std::result::Result<T, E>;

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusIndex {
    pub format: String,
    pub h: usize,
    pub t: usize,
    pub frame_interval_s: f64,
    #[serde(default)]
    pub vocab: Option<String>,
    #[serde(default)]
    pub sample_lines: usize,
    #[serde(default)]
    pub prediction_lines: usize,
    #[serde(default)]
    pub failure_lines: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SampleFilter {
    pub room: Option<RoomType>,
    pub num_humans: Option<usize>,
    pub split: Option<Split>,
    pub source: Option<Source>,
}

impl SampleFilter {
    pub fn split(split: Split) -> Self {
        Self {
            split: Some(split),
            ..Self::default()
        }
    }

    pub fn matches(&self, s: &Sample) -> bool {
        self.room.is_none_or(|r| r == s.meta.room_type)
            && self.num_humans.is_none_or(|n| n == s.meta.num_humans)
            && self.split.is_none_or(|sp| sp == s.split)
            && self.source.is_none_or(|src| src == s.meta.source)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IngestReport {
    pub added: usize,
    pub unchanged: usize,
    /// Corpus-wide sample counts per (room, humans) after ingest.
    pub counts: BTreeMap<(RoomType, usize), usize>,
}

/// Held while a process writes to a corpus; removes the lock file on drop.
#[derive(Debug)]
pub(crate) struct WriterLock {
    path: PathBuf,
}

impl WriterLock {
    pub(crate) fn acquire(path: &Path) -> Result<Self> {
        let path = path.to_path_buf();
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(StoreError::Locked(path)),
            Err(e) => Err(io_err(&path)(e)),
        }
    }
}

impl Drop for WriterLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn read_jsonl<T: DeserializeOwned>(path: &Path, limit: usize) -> Result<Vec<T>> {
    if limit == 0 {
        return Ok(Vec::new());
    }
    let file = File::open(path).map_err(io_err(path))?;
    let name = path.file_name().unwrap_or_default().to_string_lossy().to_string();
    let mut out = Vec::with_capacity(limit);
    for (i, line) in BufReader::new(file).lines().enumerate() {
        if out.len() == limit {
            break;
        }
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| StoreError::CorruptStore {
            file: name.clone(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        out.push(item);
    }
    if out.len() < limit {
        return Err(StoreError::CorruptStore {
            file: name,
            line: out.len(),
            reason: format!("index records {limit} lines but file is shorter"),
        });
    }
    Ok(out)
}

/// Cuts anything past the first `limit` non-blank lines, so a torn or
/// uncommitted tail never merges with the next append.
pub(crate) fn drop_uncommitted_tail(path: &Path, limit: usize) -> Result<()> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(()),
        Err(e) => return Err(io_err(path)(e)),
    };
    let mut kept = 0;
    let mut end = 0;
    for line in bytes.split_inclusive(|&b| b == b'\n') {
        if kept == limit {
            break;
        }
        end += line.len();
        if !line.trim_ascii().is_empty() {
            kept += 1;
        }
    }
    if end < bytes.len() {
        log::warn!("{}: dropping {} uncommitted bytes", path.display(), bytes.len() - end);
        let f = OpenOptions::new().write(true).open(path).map_err(io_err(path))?;
        f.set_len(end as u64).map_err(io_err(path))?;
        f.sync_all().map_err(io_err(path))?;
    }
    Ok(())
}

/// Appends one JSON line; `durable` forces the data to disk before returning.
pub(crate) fn append_jsonl<T: Serialize>(path: &Path, item: &T, durable: bool) -> Result<()> {
    let mut line = serde_json::to_string(item).expect("records serialize");
    line.push('\n');
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(io_err(path))?;
    f.write_all(line.as_bytes()).map_err(io_err(path))?;
    if durable {
        f.sync_data().map_err(io_err(path))?;
    }
    Ok(())
}

fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(contents).map_err(io_err(&tmp))?;
        f.sync_all().map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// Reads a manifest: header line followed by one sample per line.
pub fn read_manifest(path: &Path) -> Result<(ManifestHeader, Vec<Sample>)> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut header: Option<ManifestHeader> = None;
    let mut samples = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let corrupt = |reason: String| StoreError::CorruptManifest { line: line_no, reason };
        match &header {
            None => {
                let h: ManifestHeader = serde_json::from_str(&line).map_err(|e| corrupt(e.to_string()))?;
                if h.format != MANIFEST_FORMAT {
                    return Err(corrupt(format!("unsupported manifest format {:?}", h.format)));
                }
                header = Some(h);
            }
            Some(h) => {
                let s: Sample = serde_json::from_str(&line).map_err(|e| corrupt(e.to_string()))?;
                if s.split != h.split {
                    return Err(corrupt(format!("sample split {} differs from header split {}", s.split, h.split)));
                }
                if s.frame_refs.len() != h.h {
                    return Err(corrupt(format!("{} frame refs, header declares H={}", s.frame_refs.len(), h.h)));
                }
                if s.gt_grid.horizon() != h.t {
                    return Err(corrupt(format!("ground-truth horizon {}, header declares T={}", s.gt_grid.horizon(), h.t)));
                }
                samples.push(s);
            }
        }
    }
    let header = header.ok_or(StoreError::CorruptManifest {
        line: 1,
        reason: "empty manifest".into(),
    })?;
    Ok((header, samples))
}

/// Writes a manifest file.
pub fn write_manifest(path: &Path, header: &ManifestHeader, samples: &[Sample]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut text = serde_json::to_string(header).expect("header serializes");
    text.push('\n');
    for s in samples {
        text.push_str(&serde_json::to_string(s).expect("sample serializes"));
        text.push('\n');
    }
    fs::write(path, text).map_err(io_err(path))
}

#[derive(Debug)]
pub struct Corpus {
    root: PathBuf,
    index: CorpusIndex,
    vocab: Vocabulary,
    samples: BTreeMap<String, Sample>,
    predictions: Vec<PredictionRecord>,
    prediction_keys: BTreeSet<(String, String, u32)>,
    failures: Vec<FailureRecord>,
    lock: Option<WriterLock>,
}

impl Corpus {
    /// Creates an empty corpus (or opens an existing one with the same H/T) for writing.
    pub fn init(root: &Path, h: usize, t: usize, frame_interval_s: f64) -> Result<Self> {
        fs::create_dir_all(root).map_err(io_err(root))?;
        if root.join(INDEX_FILE).exists() {
            let corpus = Self::open_writer(root)?;
            corpus.check_header(h, t)?;
            return Ok(corpus);
        }
        let lock = WriterLock::acquire(&root.join(LOCK_FILE))?;
        let index = CorpusIndex {
            format: CORPUS_FORMAT.into(),
            h,
            t,
            frame_interval_s,
            vocab: root.join(VOCAB_FILE).exists().then(|| VOCAB_FILE.to_string()),
            sample_lines: 0,
            prediction_lines: 0,
            failure_lines: 0,
        };
        let corpus = Self::load(root, index, Some(lock))?;
        corpus.write_index()?;
        Ok(corpus)
    }

    /// Opens a consistent read-only snapshot.
    pub fn open(root: &Path) -> Result<Self> {
        let index = Self::read_index(root)?;
        Self::load(root, index, None)
    }

    /// Opens for writing, taking the corpus lock.
    pub fn open_writer(root: &Path) -> Result<Self> {
        let index = Self::read_index(root)?;
        let lock = WriterLock::acquire(&root.join(LOCK_FILE))?;
        // re-read under the lock so we build on the latest committed state
        let index = Self::read_index(root).unwrap_or(index);
        let corpus = Self::load(root, index, Some(lock))?;
        drop_uncommitted_tail(&root.join(SAMPLES_FILE), corpus.index.sample_lines)?;
        drop_uncommitted_tail(&root.join(PREDICTIONS_FILE), corpus.index.prediction_lines)?;
        drop_uncommitted_tail(&root.join(FAILURES_FILE), corpus.index.failure_lines)?;
        Ok(corpus)
    }

    fn read_index(root: &Path) -> Result<CorpusIndex> {
        let path = root.join(INDEX_FILE);
        if !path.exists() {
            return Err(StoreError::NotACorpus(root.to_path_buf()));
        }
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        serde_json::from_str(&text).map_err(|e| StoreError::CorruptStore {
            file: INDEX_FILE.into(),
            line: 1,
            reason: e.to_string(),
        })
    }

    fn load(root: &Path, index: CorpusIndex, lock: Option<WriterLock>) -> Result<Self> {
        let vocab = match &index.vocab {
            Some(rel) if root.join(rel).exists() => Vocabulary::load(&root.join(rel)).map_err(|e| StoreError::CorruptStore {
                file: rel.clone(),
                line: 1,
                reason: e.to_string(),
            })?,
            _ => Vocabulary::default(),
        };
        let samples: Vec<Sample> = read_jsonl(&root.join(SAMPLES_FILE), index.sample_lines)?;
        let predictions: Vec<PredictionRecord> = read_jsonl(&root.join(PREDICTIONS_FILE), index.prediction_lines)?;
        let failures = read_jsonl(&root.join(FAILURES_FILE), index.failure_lines)?;
        let prediction_keys = predictions.iter().map(PredictionRecord::key).collect();
        Ok(Self {
            root: root.to_path_buf(),
            index,
            vocab,
            samples: samples.into_iter().map(|s| (s.sample_id.clone(), s)).collect(),
            predictions,
            prediction_keys,
            failures,
            lock,
        })
    }

    fn write_index(&self) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.index).expect("index serializes");
        write_atomic(&self.root.join(INDEX_FILE), text.as_bytes())
    }

    fn require_writer(&self) -> Result<()> {
        if self.lock.is_some() {
            Ok(())
        } else {
            Err(StoreError::ReadOnly)
        }
    }

    fn check_header(&self, h: usize, t: usize) -> Result<()> {
        if self.index.h != h || self.index.t != t {
            return Err(StoreError::HeaderMismatch {
                expected_h: self.index.h,
                expected_t: self.index.t,
                found_h: h,
                found_t: t,
            });
        }
        Ok(())
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn index(&self) -> &CorpusIndex {
        &self.index
    }

    pub fn h(&self) -> usize {
        self.index.h
    }

    pub fn t(&self) -> usize {
        self.index.t
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn is_writable(&self) -> bool {
        self.lock.is_some()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample(&self, id: &str) -> Option<&Sample> {
        self.samples.get(id)
    }

    /// Samples matching every set field of `filter`, ordered by sample id.
    pub fn query(&self, filter: &SampleFilter) -> Vec<&Sample> {
        self.samples.values().filter(|s| filter.matches(s)).collect()
    }

    pub fn counts(&self) -> BTreeMap<(RoomType, usize), usize> {
        let mut counts = BTreeMap::new();
        for s in self.samples.values() {
            *counts.entry((s.meta.room_type, s.meta.num_humans)).or_default() += 1;
        }
        counts
    }

    /// Adds the samples of a manifest. Re-ingesting identical samples is a no-op.
    pub fn ingest(&mut self, manifest: &Path) -> Result<IngestReport> {
        self.require_writer()?;
        let (header, samples) = read_manifest(manifest)?;
        self.check_header(header.h, header.t)?;

        let mut scenario_split: BTreeMap<&str, Split> = self
            .samples
            .values()
            .map(|s| (s.meta.scenario_id.as_str(), s.split))
            .collect();
        let mut fresh = Vec::new();
        let mut unchanged = 0;
        for (i, s) in samples.iter().enumerate() {
            let line = i + 2;
            if let Some(existing) = self.samples.get(&s.sample_id) {
                if existing == s {
                    unchanged += 1;
                    continue;
                }
                return Err(StoreError::CorruptManifest {
                    line,
                    reason: format!("sample {} conflicts with the stored copy", s.sample_id),
                });
            }
            if let Some(prev) = scenario_split.insert(&s.meta.scenario_id, s.split) {
                if prev != s.split {
                    return Err(StoreError::SplitLeak(s.meta.scenario_id.clone()));
                }
            }
            let graph_path = self.root.join(&s.scene_graph_ref);
            if !graph_path.exists() {
                return Err(StoreError::MissingArtifact(graph_path));
            }
            let text = fs::read_to_string(&graph_path).map_err(io_err(&graph_path))?;
            parse_scene_graph_with(&text, &self.vocab).map_err(|e| StoreError::CorruptManifest {
                line,
                reason: format!("scene graph {}: {e}", s.scene_graph_ref),
            })?;
            fresh.push(s.clone());
        }

        let path = self.root.join(SAMPLES_FILE);
        for s in &fresh {
            append_jsonl(&path, s, false)?;
        }
        self.index.sample_lines += fresh.len();
        self.write_index()?;
        let added = fresh.len();
        for s in fresh {
            self.samples.insert(s.sample_id.clone(), s);
        }
        Ok(IngestReport {
            added,
            unchanged,
            counts: self.counts(),
        })
    }

    pub fn predictions(&self) -> &[PredictionRecord] {
        &self.predictions
    }

    pub fn predictions_for<'a>(&'a self, model_id: &'a str) -> impl Iterator<Item = &'a PredictionRecord> + 'a {
        self.predictions.iter().filter(move |p| p.model_id == model_id)
    }

    pub fn model_ids(&self) -> BTreeSet<&str> {
        self.predictions.iter().map(|p| p.model_id.as_str()).collect()
    }

    pub fn has_prediction(&self, sample_id: &str, model_id: &str, run_index: u32) -> bool {
        self.prediction_keys
            .contains(&(sample_id.to_string(), model_id.to_string(), run_index))
    }

    pub fn prediction(&self, sample_id: &str, model_id: &str, run_index: u32) -> Option<&PredictionRecord> {
        self.predictions
            .iter()
            .find(|p| p.sample_id == sample_id && p.model_id == model_id && p.run_index == run_index)
    }

    /// Appends a prediction. `(sample_id, model_id, run_index)` must be new.
    pub fn record_prediction(&mut self, rec: PredictionRecord) -> Result<()> {
        self.record_predictions(vec![rec])
    }

    /// Appends a batch of predictions and commits them with one index update.
    /// The whole batch is rejected if any record is unknown or a duplicate.
    pub fn record_predictions(&mut self, recs: Vec<PredictionRecord>) -> Result<()> {
        self.require_writer()?;
        let mut keys = BTreeSet::new();
        for rec in &recs {
            if !self.samples.contains_key(&rec.sample_id) {
                return Err(StoreError::UnknownSample(rec.sample_id.clone()));
            }
            let key = rec.key();
            if self.prediction_keys.contains(&key) || !keys.insert(key.clone()) {
                return Err(StoreError::DuplicateRun {
                    sample_id: key.0,
                    model_id: key.1,
                    run_index: key.2,
                });
            }
        }
        if recs.is_empty() {
            return Ok(());
        }
        let path = self.root.join(PREDICTIONS_FILE);
        for rec in &recs {
            append_jsonl(&path, rec, false)?;
        }
        self.index.prediction_lines += recs.len();
        self.write_index()?;
        self.prediction_keys.extend(keys);
        self.predictions.extend(recs);
        Ok(())
    }

    pub fn failures(&self) -> &[FailureRecord] {
        &self.failures
    }

    pub fn record_failure(&mut self, rec: FailureRecord) -> Result<()> {
        self.require_writer()?;
        append_jsonl(&self.root.join(FAILURES_FILE), &rec, false)?;
        self.index.failure_lines += 1;
        self.write_index()?;
        self.failures.push(rec);
        Ok(())
    }

    pub fn scene_graph_text(&self, sample: &Sample) -> Result<String> {
        let path = self.root.join(&sample.scene_graph_ref);
        if !path.exists() {
            return Err(StoreError::MissingArtifact(path));
        }
        fs::read_to_string(&path).map_err(io_err(&path))
    }

    pub fn scene_graph(&self, sample: &Sample) -> Result<SceneGraph> {
        let text = self.scene_graph_text(sample)?;
        parse_scene_graph_with(&text, &self.vocab).map_err(|e| StoreError::CorruptStore {
            file: sample.scene_graph_ref.clone(),
            line: 1,
            reason: e.to_string(),
        })
    }
}
