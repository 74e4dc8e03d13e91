//! Preference-pair selection by edit distance and DPO dataset export.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::labels::{emit_prediction, PredictionGrid};
use crate::metrics::grid_edit_distance;
use crate::prompt::PromptSpec;
use crate::store::PredictionRecord;

pub const DEFAULT_J: u32 = 8;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MinerError {
    #[error("need at least 2 responses per sample, got {0}")]
    InsufficientResponses(usize),
    #[error("no pairs match the export filter")]
    NothingToExport,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairStatus {
    Pending,
    Approved,
    Swapped,
    Edited,
    Rejected,
}

impl PairStatus {
    pub const ALL: [PairStatus; 5] = [
        PairStatus::Pending,
        PairStatus::Approved,
        PairStatus::Swapped,
        PairStatus::Edited,
        PairStatus::Rejected,
    ];

    pub fn is_terminal(self) -> bool {
        self != PairStatus::Pending
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PairStatus::Pending => "pending",
            PairStatus::Approved => "approved",
            PairStatus::Swapped => "swapped",
            PairStatus::Edited => "edited",
            PairStatus::Rejected => "rejected",
        }
    }

    /// Statuses exported by default.
    pub fn default_export() -> BTreeSet<PairStatus> {
        [PairStatus::Approved, PairStatus::Swapped, PairStatus::Edited].into()
    }
}

impl fmt::Display for PairStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PairStatus {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PairStatus::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| format!("unknown status {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub pair_id: String,
    pub sample_id: String,
    pub model_id: String,
    pub chosen_run: u32,
    pub rejected_run: u32,
    /// Canonical grid text of the chosen response.
    pub chosen_text: String,
    pub rejected_text: String,
    pub chosen_ed: f64,
    pub rejected_ed: f64,
    /// In-context example ids used in the mining prompt.
    #[serde(default)]
    pub icl_ids: Vec<String>,
    /// Position in mining order; pending pairs are listed by it.
    pub mined_seq: u64,
    pub status: PairStatus,
    #[serde(default)]
    pub reviewer: Option<String>,
    #[serde(default)]
    pub decided_at: Option<DateTime<Utc>>,
    #[serde(default)]
    pub edited_text: Option<String>,
}

impl PreferencePair {
    pub fn id_for(sample_id: &str, model_id: &str) -> String {
        format!("{sample_id}@{model_id}")
    }
}

/// Outcome of selecting a pair from one sample's responses.
#[derive(Debug, Clone, PartialEq)]
pub enum Selection {
    Pair {
        chosen: usize,
        rejected: usize,
        chosen_ed: f64,
        rejected_ed: f64,
    },
    /// All parseable responses are equally distant from the truth.
    Degenerate { ed: f64 },
    /// Fewer than two parseable responses.
    Shortfall { parseable: usize },
}

/// Picks argmin / argmax edit distance among parseable responses; ties go to
/// the lowest run index. Returned indices point into `responses`.
pub fn select_pair(responses: &[&PredictionRecord], gt: &PredictionGrid) -> Selection {
    let mut scored: Vec<(u32, usize, f64)> = responses
        .iter()
        .enumerate()
        .filter_map(|(i, r)| r.parsed.as_ref().map(|p| (r.run_index, i, grid_edit_distance(&p.grid, gt))))
        .collect();
    if scored.len() < 2 {
        return Selection::Shortfall {
            parseable: scored.len(),
        };
    }
    scored.sort_by_key(|s| s.0);
    let mut best = scored[0];
    let mut worst = scored[0];
    for s in &scored[1..] {
        if s.2 < best.2 {
            best = *s;
        }
        if s.2 > worst.2 {
            worst = *s;
        }
    }
    if best.2 == worst.2 {
        return Selection::Degenerate { ed: best.2 };
    }
    Selection::Pair {
        chosen: best.1,
        rejected: worst.1,
        chosen_ed: best.2,
        rejected_ed: worst.2,
    }
}

/// Builds a pending pair from a [`Selection::Pair`].
pub fn make_pair(
    responses: &[&PredictionRecord],
    selection: &Selection,
    icl_ids: Vec<String>,
    mined_seq: u64,
) -> Option<PreferencePair> {
    let Selection::Pair {
        chosen,
        rejected,
        chosen_ed,
        rejected_ed,
    } = *selection
    else {
        return None;
    };
    let (c, r) = (responses[chosen], responses[rejected]);
    let text = |rec: &PredictionRecord| emit_prediction(&rec.parsed.as_ref().expect("selected responses parse").grid);
    Some(PreferencePair {
        pair_id: PreferencePair::id_for(&c.sample_id, &c.model_id),
        sample_id: c.sample_id.clone(),
        model_id: c.model_id.clone(),
        chosen_run: c.run_index,
        rejected_run: r.run_index,
        chosen_text: text(c),
        rejected_text: text(r),
        chosen_ed,
        rejected_ed,
        icl_ids,
        mined_seq,
        status: PairStatus::Pending,
        reviewer: None,
        decided_at: None,
        edited_text: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub pair_id: String,
    pub model_id: String,
    pub status: PairStatus,
    pub chosen_run: u32,
    pub rejected_run: u32,
    pub chosen_ed: f64,
    pub rejected_ed: f64,
    pub reviewer: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpoRecord {
    pub sample_id: String,
    pub prompt_spec: PromptSpec,
    pub chosen_text: String,
    pub rejected_text: String,
    pub provenance: Provenance,
}

/// Exports pairs whose status is in `include`; `prompt_for` rebuilds each pair's input.
pub fn export_dpo_dataset<E>(
    pairs: &[PreferencePair],
    include: &BTreeSet<PairStatus>,
    mut prompt_for: impl FnMut(&PreferencePair) -> Result<PromptSpec, E>,
) -> Result<Result<Vec<DpoRecord>, MinerError>, E> {
    let mut out = Vec::new();
    for p in pairs.iter().filter(|p| include.contains(&p.status)) {
        let (chosen, rejected) = match p.status {
            PairStatus::Swapped => (p.rejected_text.clone(), p.chosen_text.clone()),
            PairStatus::Edited => (
                p.edited_text.clone().unwrap_or_else(|| p.chosen_text.clone()),
                p.rejected_text.clone(),
            ),
            _ => (p.chosen_text.clone(), p.rejected_text.clone()),
        };
        out.push(DpoRecord {
            sample_id: p.sample_id.clone(),
            prompt_spec: prompt_for(p)?,
            chosen_text: chosen,
            rejected_text: rejected,
            provenance: Provenance {
                pair_id: p.pair_id.clone(),
                model_id: p.model_id.clone(),
                status: p.status,
                chosen_run: p.chosen_run,
                rejected_run: p.rejected_run,
                chosen_ed: p.chosen_ed,
                rejected_ed: p.rejected_ed,
                reviewer: p.reviewer.clone(),
            },
        });
    }
    if out.is_empty() {
        return Ok(Err(MinerError::NothingToExport));
    }
    Ok(Ok(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::parse_prediction;
    use crate::store::Usage;
    use std::convert::Infallible;

    fn rec(run: u32, text: &str) -> PredictionRecord {
        PredictionRecord::from_reply("s", "m", run, text.into(), 2, 1.0, 0, Usage::default())
    }

    fn gt() -> PredictionGrid {
        parse_prediction("[[(0, grab, cup), (0, open, fridge)]]", 2).unwrap().grid
    }

    #[test]
    fn argmin_argmax_with_low_run_ties() {
        let recs = [
            rec(0, "[[(0, grab, cup), (0, open, door)]]"),
            rec(1, "[[(0, grab, cup), (0, open, fridge)]]"),
            rec(2, "garbage"),
            rec(3, "[[(0, sit, sofa), (0, read, book)]]"),
            rec(4, "[[(0, grab, cup), (0, open, fridge)]]"),
            rec(5, "[[(0, sit, sofa), (0, read, book)]]"),
        ];
        let refs: Vec<&PredictionRecord> = recs.iter().collect();
        match select_pair(&refs, &gt()) {
            Selection::Pair {
                chosen,
                rejected,
                chosen_ed,
                rejected_ed,
            } => {
                assert_eq!((chosen, rejected), (1, 3));
                assert_eq!(chosen_ed, 0.0);
                assert!(rejected_ed > 0.5);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn degenerate_and_shortfall() {
        let same = [rec(0, "[[(0, grab, cup), (0, open, fridge)]]"), rec(1, "[[(0, grab, cup), (0, open, fridge)]]")];
        let refs: Vec<_> = same.iter().collect();
        assert_eq!(select_pair(&refs, &gt()), Selection::Degenerate { ed: 0.0 });
        let one = [rec(0, "[[(0, grab, cup), (0, open, fridge)]]"), rec(1, "nope")];
        let refs: Vec<_> = one.iter().collect();
        assert_eq!(select_pair(&refs, &gt()), Selection::Shortfall { parseable: 1 });
    }

    fn pair(status: PairStatus) -> PreferencePair {
        let recs = [rec(0, "[[(0, grab, cup), (0, open, fridge)]]"), rec(1, "[[(0, sit, sofa), (0, read, book)]]")];
        let refs: Vec<_> = recs.iter().collect();
        let mut p = make_pair(&refs, &select_pair(&refs, &gt()), vec![], 0).unwrap();
        p.status = status;
        p
    }

    fn spec() -> PromptSpec {
        PromptSpec {
            h: 1,
            t: 2,
            frame_refs: vec![],
            scene_graph_text: "{}".into(),
            icl_examples: vec![],
            max_images: 50,
        }
    }

    fn export(pairs: &[PreferencePair]) -> Result<Vec<DpoRecord>, MinerError> {
        export_dpo_dataset(pairs, &PairStatus::default_export(), |_| Ok::<_, Infallible>(spec())).unwrap()
    }

    #[test]
    fn filter_semantics() {
        let mut pairs: Vec<_> = (0..10).map(|_| pair(PairStatus::Approved)).collect();
        pairs.extend((0..5).map(|_| pair(PairStatus::Pending)));
        pairs.push(pair(PairStatus::Rejected));
        assert_eq!(export(&pairs).unwrap().len(), 10);
        assert_eq!(export(&pairs[10..]), Err(MinerError::NothingToExport));
    }

    #[test]
    fn swap_and_edit() {
        let base = pair(PairStatus::Approved);
        let swapped = export(&[pair(PairStatus::Swapped)]).unwrap().remove(0);
        assert_eq!(swapped.chosen_text, base.rejected_text);
        assert_eq!(swapped.rejected_text, base.chosen_text);
        let mut edited = pair(PairStatus::Edited);
        edited.edited_text = Some("[[(0, walk, door), (0, open, door)]]".into());
        let rec = export(&[edited]).unwrap().remove(0);
        assert_eq!(rec.chosen_text, "[[(0, walk, door), (0, open, door)]]");
        assert_eq!(rec.rejected_text, base.rejected_text);
    }
}
