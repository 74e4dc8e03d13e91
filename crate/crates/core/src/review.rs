//! Review queue for mined preference pairs.
//!
//! The queue is an append-only event log (`pairs.jsonl`): one `mined` event
//! per pair and one `decided` event per accepted decision. State is rebuilt
//! by replaying the log, and every decision is synced to disk before
//! [`ReviewQueue::decide`] returns, so an acknowledged decision survives a
//! crash. A torn final line (a write interrupted before its newline) was never
//! acknowledged; replay ignores it and the next writer cuts it off.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::labels::{emit_prediction, parse_prediction};
use crate::metrics::grid_edit_distance;
use crate::miner::{PairStatus, PreferencePair};
use crate::store::{drop_uncommitted_tail, io_err, Corpus, StoreError, WriterLock};

pub const MAX_PAGE_SIZE: usize = 200;

#[derive(Debug, thiserror::Error)]
pub enum ReviewError {
    #[error("pair {pair_id} is already {status}")]
    AlreadyDecided { pair_id: String, status: PairStatus },
    #[error("unknown pair {0}")]
    UnknownPair(String),
    #[error("edited text does not parse: {0}")]
    UnparseableEdit(String),
    #[error("idempotency key {key} was already used for pair {pair_id}")]
    KeyConflict { key: String, pair_id: String },
    #[error("page_size must be in 1..={MAX_PAGE_SIZE}, got {0}")]
    InvalidPageSize(usize),
    #[error("page numbers start at 1")]
    InvalidPage,
    #[error("review queue was opened read-only")]
    ReadOnly,
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Approve,
    Swap,
    Edit,
    Reject,
}

impl Decision {
    pub fn status(self) -> PairStatus {
        match self {
            Decision::Approve => PairStatus::Approved,
            Decision::Swap => PairStatus::Swapped,
            Decision::Edit => PairStatus::Edited,
            Decision::Reject => PairStatus::Rejected,
        }
    }
}

impl FromStr for Decision {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| format!("unknown decision {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRequest {
    pub decision: Decision,
    #[serde(default)]
    pub edited_text: Option<String>,
    #[serde(default)]
    pub idempotency_key: Option<String>,
    #[serde(default)]
    pub reviewer: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
enum Event {
    Mined {
        pair: PreferencePair,
    },
    Decided {
        pair_id: String,
        status: PairStatus,
        reviewer: Option<String>,
        decided_at: DateTime<Utc>,
        edited_text: Option<String>,
        idempotency_key: Option<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Page<T> {
    pub items: Vec<T>,
    pub page: usize,
    pub page_size: usize,
    pub total: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReviewerStats {
    pub decisions: usize,
    pub by_status: BTreeMap<PairStatus, usize>,
    pub first_decision: Option<DateTime<Utc>>,
    pub last_decision: Option<DateTime<Utc>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewStats {
    pub total: usize,
    /// Every status is present, zero counts included.
    pub by_status: BTreeMap<PairStatus, usize>,
    pub by_reviewer: BTreeMap<String, ReviewerStats>,
}

impl ReviewStats {
    pub fn count(&self, status: PairStatus) -> usize {
        self.by_status.get(&status).copied().unwrap_or(0)
    }
}

#[derive(Debug)]
pub struct ReviewQueue {
    path: PathBuf,
    horizon: usize,
    pairs: Vec<PreferencePair>,
    by_id: HashMap<String, usize>,
    /// Idempotency key -> pair state right after that decision.
    replies: HashMap<String, PreferencePair>,
    events: usize,
    lock: Option<WriterLock>,
}

fn lock_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".lock");
    path.with_file_name(name)
}

impl ReviewQueue {
    /// Opens (creating if absent) the log at `path` for writing; one writer per log.
    pub fn open_writer(path: &Path, horizon: usize) -> Result<Self, ReviewError> {
        let lock = WriterLock::acquire(&lock_path(path))?;
        let mut queue = Self::load(path, horizon)?;
        drop_uncommitted_tail(path, queue.events)?;
        queue.lock = Some(lock);
        Ok(queue)
    }

    /// Replays the log read-only; a missing log is an empty queue.
    pub fn load(path: &Path, horizon: usize) -> Result<Self, ReviewError> {
        let mut queue = Self {
            path: path.to_path_buf(),
            horizon,
            pairs: Vec::new(),
            by_id: HashMap::new(),
            replies: HashMap::new(),
            events: 0,
            lock: None,
        };
        let text = match fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(queue),
            Err(e) => return Err(io_err(path)(e).into()),
        };
        let complete = text.ends_with('\n');
        let lines: Vec<&str> = text.lines().collect();
        let name = path.file_name().unwrap_or_default().to_string_lossy().to_string();
        for (i, line) in lines.iter().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let event: Event = match serde_json::from_str(line) {
                Ok(ev) => ev,
                Err(_) if i + 1 == lines.len() && !complete => {
                    log::warn!("{name}: dropping torn final line");
                    break;
                }
                Err(e) => {
                    return Err(StoreError::CorruptStore {
                        file: name,
                        line: i + 1,
                        reason: e.to_string(),
                    }
                    .into())
                }
            };
            queue.apply(event).map_err(|e| StoreError::CorruptStore {
                file: name.clone(),
                line: i + 1,
                reason: e.to_string(),
            })?;
        }
        Ok(queue)
    }

    fn apply(&mut self, event: Event) -> Result<(), ReviewError> {
        self.events += 1;
        match event {
            Event::Mined { pair } => {
                if self.by_id.contains_key(&pair.pair_id) {
                    return Err(ReviewError::AlreadyDecided {
                        pair_id: pair.pair_id,
                        status: PairStatus::Pending,
                    });
                }
                self.by_id.insert(pair.pair_id.clone(), self.pairs.len());
                self.pairs.push(pair);
            }
            Event::Decided {
                pair_id,
                status,
                reviewer,
                decided_at,
                edited_text,
                idempotency_key,
            } => {
                let idx = *self.by_id.get(&pair_id).ok_or_else(|| ReviewError::UnknownPair(pair_id.clone()))?;
                let pair = &mut self.pairs[idx];
                if pair.status.is_terminal() {
                    return Err(ReviewError::AlreadyDecided {
                        pair_id,
                        status: pair.status,
                    });
                }
                pair.status = status;
                pair.reviewer = reviewer;
                pair.decided_at = Some(decided_at);
                pair.edited_text = edited_text;
                if let Some(key) = idempotency_key {
                    self.replies.insert(key, pair.clone());
                }
            }
        }
        Ok(())
    }

    fn append(&self, events: &[Event]) -> Result<(), ReviewError> {
        if self.lock.is_none() {
            return Err(ReviewError::ReadOnly);
        }
        let mut buf = String::new();
        for ev in events {
            buf.push_str(&serde_json::to_string(ev).expect("events serialize"));
            buf.push('\n');
        }
        let path = &self.path;
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(io_err(path))?;
        f.write_all(buf.as_bytes()).map_err(io_err(path))?;
        f.sync_data().map_err(io_err(path))?;
        Ok(())
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Number of events in the log; decisions that replay add none.
    pub fn event_count(&self) -> usize {
        self.events
    }

    pub fn pairs(&self) -> &[PreferencePair] {
        &self.pairs
    }

    pub fn get(&self, pair_id: &str) -> Option<&PreferencePair> {
        self.by_id.get(pair_id).map(|&i| &self.pairs[i])
    }

    pub fn contains(&self, pair_id: &str) -> bool {
        self.by_id.contains_key(pair_id)
    }

    /// Next free mining sequence number.
    pub fn next_seq(&self) -> u64 {
        self.pairs.iter().map(|p| p.mined_seq + 1).max().unwrap_or(0)
    }

    /// Appends newly mined pairs; ids already in the queue are skipped.
    /// Returns the number added.
    pub fn add_pairs(&mut self, pairs: Vec<PreferencePair>) -> Result<usize, ReviewError> {
        let mut seen = std::collections::HashSet::new();
        let fresh: Vec<PreferencePair> = pairs
            .into_iter()
            .filter(|p| !self.by_id.contains_key(&p.pair_id) && seen.insert(p.pair_id.clone()))
            .collect();
        if fresh.is_empty() {
            return Ok(0);
        }
        let events: Vec<Event> = fresh.into_iter().map(|pair| Event::Mined { pair }).collect();
        self.append(&events)?;
        let n = events.len();
        for ev in events {
            self.apply(ev)?;
        }
        Ok(n)
    }

    /// Records a decision on a pending pair. Replaying a request with a known
    /// idempotency key returns the original result without writing.
    pub fn decide(&mut self, pair_id: &str, req: &DecisionRequest) -> Result<PreferencePair, ReviewError> {
        if let Some(key) = &req.idempotency_key {
            if let Some(prior) = self.replies.get(key) {
                if prior.pair_id != pair_id {
                    return Err(ReviewError::KeyConflict {
                        key: key.clone(),
                        pair_id: prior.pair_id.clone(),
                    });
                }
                return Ok(prior.clone());
            }
        }
        let pair = self.get(pair_id).ok_or_else(|| ReviewError::UnknownPair(pair_id.to_string()))?;
        if pair.status.is_terminal() {
            return Err(ReviewError::AlreadyDecided {
                pair_id: pair_id.to_string(),
                status: pair.status,
            });
        }
        let edited_text = match req.decision {
            Decision::Edit => {
                let text = req.edited_text.as_deref().unwrap_or_default();
                let parsed =
                    parse_prediction(text, self.horizon).map_err(|e| ReviewError::UnparseableEdit(e.to_string()))?;
                Some(emit_prediction(&parsed.grid))
            }
            _ => None,
        };
        let event = Event::Decided {
            pair_id: pair_id.to_string(),
            status: req.decision.status(),
            reviewer: req.reviewer.clone(),
            decided_at: Utc::now(),
            edited_text,
            idempotency_key: req.idempotency_key.clone(),
        };
        self.append(std::slice::from_ref(&event))?;
        self.apply(event)?;
        Ok(self.get(pair_id).expect("pair just decided").clone())
    }

    /// Pairs with `status` (all pairs if `None`) in mining order, 1-based pages.
    pub fn list(
        &self,
        status: Option<PairStatus>,
        page: usize,
        page_size: usize,
    ) -> Result<Page<PreferencePair>, ReviewError> {
        if !(1..=MAX_PAGE_SIZE).contains(&page_size) {
            return Err(ReviewError::InvalidPageSize(page_size));
        }
        if page == 0 {
            return Err(ReviewError::InvalidPage);
        }
        let mut matching: Vec<&PreferencePair> =
            self.pairs.iter().filter(|p| status.is_none_or(|s| p.status == s)).collect();
        matching.sort_by(|a, b| (a.mined_seq, &a.sample_id).cmp(&(b.mined_seq, &b.sample_id)));
        let items = matching
            .iter()
            .skip((page - 1) * page_size)
            .take(page_size)
            .map(|p| (*p).clone())
            .collect();
        Ok(Page {
            items,
            page,
            page_size,
            total: matching.len(),
        })
    }

    pub fn list_pending(&self, page: usize, page_size: usize) -> Result<Page<PreferencePair>, ReviewError> {
        self.list(Some(PairStatus::Pending), page, page_size)
    }

    pub fn stats(&self) -> ReviewStats {
        let mut by_status: BTreeMap<PairStatus, usize> = PairStatus::ALL.iter().map(|s| (*s, 0)).collect();
        let mut by_reviewer: BTreeMap<String, ReviewerStats> = BTreeMap::new();
        for p in &self.pairs {
            *by_status.entry(p.status).or_default() += 1;
            if !p.status.is_terminal() {
                continue;
            }
            let who = p.reviewer.clone().unwrap_or_else(|| "anonymous".into());
            let r = by_reviewer.entry(who).or_default();
            r.decisions += 1;
            *r.by_status.entry(p.status).or_default() += 1;
            if let Some(at) = p.decided_at {
                r.first_decision = Some(r.first_decision.map_or(at, |f| f.min(at)));
                r.last_decision = Some(r.last_decision.map_or(at, |l| l.max(at)));
            }
        }
        ReviewStats {
            total: self.pairs.len(),
            by_status,
            by_reviewer,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextSample {
    pub sample_id: String,
    pub room_type: crate::room::RoomType,
    pub num_humans: usize,
    pub frame_refs: Vec<String>,
    pub scene_graph_text: String,
    pub ground_truth: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextResponse {
    pub run_index: u32,
    pub raw_text: String,
    /// Canonical grid text; `None` when the reply did not parse.
    pub canonical_text: Option<String>,
    pub edit_distance: Option<f64>,
}

/// Everything a curator needs to judge one pair. Read-only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewContext {
    pub pair: PreferencePair,
    pub sample: ContextSample,
    /// All stored responses for the pair's sample and model, by run index.
    pub responses: Vec<ContextResponse>,
    /// Positions of the chosen and rejected runs in `responses`.
    pub chosen_index: usize,
    pub rejected_index: usize,
}

pub fn review_context(corpus: &Corpus, pair: &PreferencePair) -> Result<ReviewContext, ReviewError> {
    let sample = corpus
        .sample(&pair.sample_id)
        .ok_or_else(|| StoreError::UnknownSample(pair.sample_id.clone()))?;
    let mut runs: Vec<_> = corpus
        .predictions_for(&pair.model_id)
        .filter(|r| r.sample_id == pair.sample_id)
        .collect();
    runs.sort_by_key(|r| r.run_index);
    let responses: Vec<ContextResponse> = runs
        .iter()
        .map(|r| ContextResponse {
            run_index: r.run_index,
            raw_text: r.raw_text.clone(),
            canonical_text: r.parsed.as_ref().map(|p| emit_prediction(&p.grid)),
            edit_distance: r.parsed.as_ref().map(|p| grid_edit_distance(&p.grid, &sample.gt_grid)),
        })
        .collect();
    let position = |run: u32| {
        responses
            .iter()
            .position(|r| r.run_index == run)
            .ok_or_else(|| StoreError::CorruptStore {
                file: crate::store::PREDICTIONS_FILE.into(),
                line: 0,
                reason: format!("run {run} of pair {} is missing", pair.pair_id),
            })
    };
    Ok(ReviewContext {
        chosen_index: position(pair.chosen_run)?,
        rejected_index: position(pair.rejected_run)?,
        pair: pair.clone(),
        sample: ContextSample {
            sample_id: sample.sample_id.clone(),
            room_type: sample.meta.room_type,
            num_humans: sample.meta.num_humans,
            frame_refs: sample.frame_refs.iter().map(|f| f.image_ref()).collect(),
            scene_graph_text: corpus.scene_graph_text(sample)?,
            ground_truth: emit_prediction(&sample.gt_grid),
        },
        responses,
    })
}
