//! Accuracy, edit distance and cosine similarity between predicted and
//! ground-truth grids, plus per-cell aggregation.
//!
//! Rows are matched by `h_id`; if no ground-truth id appears in the
//! prediction, rows are matched by position. Ground truth defines the slot
//! count, so missing rows and padded slots count as misses and extra
//! predicted rows are ignored.

mod edit;
mod embed;
mod report;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use edit::{edit_distance, levenshtein, levenshtein_seq};
pub use embed::{cosine_similarity, Cosine, Embedder, Embedding, TrigramEmbedder};
pub use report::{render_csv, render_text, ReportMeta};

use crate::labels::{BehaviorLabel, PredictionGrid};
use crate::room::RoomType;
use crate::store::ParsedOutput;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MetricsError {
    #[error("prediction horizon {pred} differs from ground-truth horizon {gt}")]
    HorizonMismatch { pred: usize, gt: usize },
    #[error("embedder failure: {0}")]
    EmbedderFailure(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    /// Slot `t` of the prediction is compared with slot `t` of the truth.
    #[default]
    Ordered,
    /// Multiset overlap within each row, ignoring order.
    SetBased,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub full: f64,
    pub verb: f64,
    pub noun: f64,
}

/// For each ground-truth row, the matching predicted row if any.
fn align<'a>(pred: &'a PredictionGrid, gt: &PredictionGrid) -> Vec<Option<&'a [BehaviorLabel]>> {
    let ids_match = gt.human_ids().iter().any(|h| pred.row(*h).is_some());
    gt.rows()
        .iter()
        .enumerate()
        .map(|(i, row)| {
            if ids_match {
                pred.row(row[0].h_id())
            } else {
                pred.rows().get(i).map(Vec::as_slice)
            }
        })
        .collect()
}

fn multiset_overlap<K: Ord>(a: impl Iterator<Item = K>, b: impl Iterator<Item = K>) -> usize {
    let mut counts: BTreeMap<K, isize> = BTreeMap::new();
    for k in a {
        *counts.entry(k).or_default() += 1;
    }
    let mut hits = 0;
    for k in b {
        if let Some(c) = counts.get_mut(&k) {
            if *c > 0 {
                *c -= 1;
                hits += 1;
            }
        }
    }
    hits
}

pub fn score_accuracy(pred: &PredictionGrid, gt: &PredictionGrid) -> Result<Accuracy, MetricsError> {
    score_accuracy_with(pred, gt, MatchMode::Ordered)
}

pub fn score_accuracy_with(pred: &PredictionGrid, gt: &PredictionGrid, mode: MatchMode) -> Result<Accuracy, MetricsError> {
    if pred.horizon() != gt.horizon() {
        return Err(MetricsError::HorizonMismatch {
            pred: pred.horizon(),
            gt: gt.horizon(),
        });
    }
    let (mut full, mut verb, mut noun) = (0usize, 0usize, 0usize);
    for (g, p) in gt.rows().iter().zip(align(pred, gt)) {
        let Some(p) = p else { continue };
        let p: Vec<&BehaviorLabel> = p.iter().collect();
        match mode {
            MatchMode::Ordered => {
                for (gl, pl) in g.iter().zip(&p) {
                    if pl.is_sentinel() {
                        continue;
                    }
                    let (v, n) = (gl.verb() == pl.verb(), gl.noun() == pl.noun());
                    full += usize::from(v && n);
                    verb += usize::from(v);
                    noun += usize::from(n);
                }
            }
            MatchMode::SetBased => {
                let live = || p.iter().filter(|l| !l.is_sentinel());
                full += multiset_overlap(g.iter().map(|l| (l.verb(), l.noun())), live().map(|l| (l.verb(), l.noun())));
                verb += multiset_overlap(g.iter().map(|l| l.verb()), live().map(|l| l.verb()));
                noun += multiset_overlap(g.iter().map(|l| l.noun()), live().map(|l| l.noun()));
            }
        }
    }
    let slots = (gt.num_humans() * gt.horizon()) as f64;
    Ok(Accuracy {
        full: full as f64 / slots,
        verb: verb as f64 / slots,
        noun: noun as f64 / slots,
    })
}

/// `"verb noun; verb noun; ..."` for one row.
pub fn row_text(row: &[BehaviorLabel]) -> String {
    row.iter()
        .map(|l| format!("{} {}", l.verb(), l.noun()))
        .collect::<Vec<_>>()
        .join("; ")
}

/// Mean per-human normalized edit distance; a missing row scores 1.
pub fn grid_edit_distance(pred: &PredictionGrid, gt: &PredictionGrid) -> f64 {
    let per_row: Vec<f64> = gt
        .rows()
        .iter()
        .zip(align(pred, gt))
        .map(|(g, p)| p.map_or(1.0, |p| edit_distance(&row_text(p), &row_text(g))))
        .collect();
    per_row.iter().sum::<f64>() / per_row.len() as f64
}

/// Mean per-human cosine similarity; a missing row scores 0.
pub fn grid_cosine(pred: &PredictionGrid, gt: &PredictionGrid, embedder: &dyn Embedder) -> Result<Cosine, MetricsError> {
    let mut total = 0.0;
    let mut zero = false;
    for (g, p) in gt.rows().iter().zip(align(pred, gt)) {
        if let Some(p) = p {
            let c = cosine_similarity(&row_text(p), &row_text(g), embedder)?;
            total += c.value;
            zero |= c.zero_vector;
        }
    }
    Ok(Cosine {
        value: total / gt.num_humans() as f64,
        zero_vector: zero,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreBreakdown {
    pub full_acc: f64,
    pub verb_acc: f64,
    pub noun_acc: f64,
    pub cosine_sim: f64,
    pub edit_dist: f64,
    pub slot_count: usize,
    /// Parser flag name -> occurrences.
    pub parse_flags: BTreeMap<String, usize>,
    /// False when the reply could not be parsed; it then scores as a total miss.
    pub parsed: bool,
    pub zero_vector: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ScoreOptions {
    pub mode: MatchMode,
}

/// Scores one stored reply against its ground truth.
pub fn score_prediction(
    parsed: Option<&ParsedOutput>,
    gt: &PredictionGrid,
    embedder: &dyn Embedder,
    opts: ScoreOptions,
) -> Result<ScoreBreakdown, MetricsError> {
    let slot_count = gt.num_humans() * gt.horizon();
    let Some(out) = parsed else {
        return Ok(ScoreBreakdown {
            full_acc: 0.0,
            verb_acc: 0.0,
            noun_acc: 0.0,
            cosine_sim: 0.0,
            edit_dist: 1.0,
            slot_count,
            parse_flags: BTreeMap::new(),
            parsed: false,
            zero_vector: false,
        });
    };
    let acc = score_accuracy_with(&out.grid, gt, opts.mode)?;
    let cos = grid_cosine(&out.grid, gt, embedder)?;
    let mut parse_flags = BTreeMap::new();
    for f in &out.flags {
        *parse_flags.entry(f.name().to_string()).or_default() += 1;
    }
    Ok(ScoreBreakdown {
        full_acc: acc.full,
        verb_acc: acc.verb,
        noun_acc: acc.noun,
        cosine_sim: cos.value,
        edit_dist: grid_edit_distance(&out.grid, gt),
        slot_count,
        parse_flags,
        parsed: true,
        zero_vector: cos.zero_vector,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Means {
    pub full: f64,
    pub verb: f64,
    pub noun: f64,
    pub cs: f64,
    pub ed: f64,
}

impl Means {
    fn of<'a>(items: impl Iterator<Item = &'a Means>) -> Means {
        let mut sum = Means::default();
        let mut n = 0usize;
        for m in items {
            sum.full += m.full;
            sum.verb += m.verb;
            sum.noun += m.noun;
            sum.cs += m.cs;
            sum.ed += m.ed;
            n += 1;
        }
        if n == 0 {
            return sum;
        }
        let n = n as f64;
        Means {
            full: sum.full / n,
            verb: sum.verb / n,
            noun: sum.noun / n,
            cs: sum.cs / n,
            ed: sum.ed / n,
        }
    }
}

impl From<&ScoreBreakdown> for Means {
    fn from(s: &ScoreBreakdown) -> Self {
        Means {
            full: s.full_acc,
            verb: s.verb_acc,
            noun: s.noun_acc,
            cs: s.cosine_sim,
            ed: s.edit_dist,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub room: RoomType,
    pub num_humans: usize,
    pub samples: usize,
    pub unparsed: usize,
    pub means: Means,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub cells: Vec<Cell>,
    /// Unweighted mean across cells.
    pub overall: Means,
}

impl Report {
    pub fn cell(&self, room: RoomType, num_humans: usize) -> Option<&Cell> {
        self.cells.iter().find(|c| c.room == room && c.num_humans == num_humans)
    }

    pub fn sample_count(&self) -> usize {
        self.cells.iter().map(|c| c.samples).sum()
    }
}

/// Unweighted per-cell means over `(room, humans, score)` items.
pub fn aggregate(scores: &[(RoomType, usize, ScoreBreakdown)]) -> Report {
    let mut groups: BTreeMap<(usize, RoomType), Vec<&ScoreBreakdown>> = BTreeMap::new();
    for (room, m, s) in scores {
        groups.entry((*m, *room)).or_default().push(s);
    }
    let cells: Vec<Cell> = groups
        .into_iter()
        .map(|((num_humans, room), items)| Cell {
            room,
            num_humans,
            samples: items.len(),
            unparsed: items.iter().filter(|s| !s.parsed).count(),
            means: Means::of(items.iter().map(|s| Means::from(*s)).collect::<Vec<_>>().iter()),
        })
        .collect();
    Report {
        overall: Means::of(cells.iter().map(|c| &c.means)),
        cells,
    }
}
