//! Behavior labels: `(h_id, verb, noun)` tuples, prediction grids, and the
//! simulator action-script DSL.

mod prediction;
mod script;

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub use prediction::{emit_prediction, parse_prediction, ParseFlag, ParsedPrediction};
pub use script::{emit_script, parse_script, ScriptLine};

/// Verb and noun used for padded slots. Always scored as a mismatch.
pub const SENTINEL: &str = "none";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LabelError {
    #[error("empty {0} after normalization")]
    EmptyToken(&'static str),
    #[error("token {0:?} contains a reserved character")]
    ReservedCharacter(String),
    #[error("prediction horizon must be at least 1")]
    ZeroHorizon,
    #[error("a prediction grid needs at least one row")]
    NoRows,
    #[error("row for human {h_id} has {len} labels, expected {horizon}")]
    RowLength { h_id: u32, len: usize, horizon: usize },
    #[error("row {row} mixes human ids")]
    MixedRow { row: usize },
    #[error("human {0} appears in more than one row")]
    DuplicateHuman(u32),
    #[error("script line {line}: {reason}")]
    ScriptSyntax { line: usize, reason: String },
    #[error("no tuple structure recoverable from model output")]
    Unparseable,
    #[error("row {row} has no majority human id")]
    InconsistentHumanId { row: usize },
}

/// Trims, lowercases, and joins internal whitespace runs with `_`.
pub fn normalize_token(raw: &str) -> String {
    raw.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join("_")
}

const RESERVED: &[char] = &['(', ')', '[', ']', ',', '\'', '"', '`', ';'];

fn checked_token(raw: &str, what: &'static str) -> Result<String, LabelError> {
    let token = normalize_token(raw);
    if token.is_empty() {
        return Err(LabelError::EmptyToken(what));
    }
    if token.contains(RESERVED) {
        return Err(LabelError::ReservedCharacter(token));
    }
    Ok(token)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BehaviorLabel {
    h_id: u32,
    verb: String,
    noun: String,
}

impl BehaviorLabel {
    pub fn new(h_id: u32, verb: &str, noun: &str) -> Result<Self, LabelError> {
        Ok(Self {
            h_id,
            verb: checked_token(verb, "verb")?,
            noun: checked_token(noun, "noun")?,
        })
    }

    pub fn sentinel(h_id: u32) -> Self {
        Self {
            h_id,
            verb: SENTINEL.into(),
            noun: SENTINEL.into(),
        }
    }

    pub fn h_id(&self) -> u32 {
        self.h_id
    }

    pub fn verb(&self) -> &str {
        &self.verb
    }

    pub fn noun(&self) -> &str {
        &self.noun
    }

    pub fn is_sentinel(&self) -> bool {
        self.verb == SENTINEL && self.noun == SENTINEL
    }

    pub fn with_h_id(mut self, h_id: u32) -> Self {
        self.h_id = h_id;
        self
    }

    pub fn with_verb(&self, verb: &str) -> Result<Self, LabelError> {
        Self::new(self.h_id, verb, &self.noun)
    }

    pub fn with_noun(&self, noun: &str) -> Result<Self, LabelError> {
        Self::new(self.h_id, &self.verb, noun)
    }
}

impl fmt::Display for BehaviorLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.h_id, self.verb, self.noun)
    }
}

/// `M × T` grid of future labels, rows ordered by ascending `h_id`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PredictionGrid {
    rows: Vec<Vec<BehaviorLabel>>,
    horizon: usize,
}

impl PredictionGrid {
    pub fn new(mut rows: Vec<Vec<BehaviorLabel>>, horizon: usize) -> Result<Self, LabelError> {
        if horizon == 0 {
            return Err(LabelError::ZeroHorizon);
        }
        if rows.is_empty() {
            return Err(LabelError::NoRows);
        }
        let mut seen = BTreeSet::new();
        for (i, row) in rows.iter().enumerate() {
            let h_id = row.first().map(|l| l.h_id).unwrap_or(0);
            if row.len() != horizon {
                return Err(LabelError::RowLength {
                    h_id,
                    len: row.len(),
                    horizon,
                });
            }
            if row.iter().any(|l| l.h_id != h_id) {
                return Err(LabelError::MixedRow { row: i });
            }
            if !seen.insert(h_id) {
                return Err(LabelError::DuplicateHuman(h_id));
            }
        }
        rows.sort_by_key(|r| r[0].h_id);
        Ok(Self { rows, horizon })
    }

    pub fn rows(&self) -> &[Vec<BehaviorLabel>] {
        &self.rows
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn num_humans(&self) -> usize {
        self.rows.len()
    }

    pub fn human_ids(&self) -> Vec<u32> {
        self.rows.iter().map(|r| r[0].h_id).collect()
    }

    pub fn row(&self, h_id: u32) -> Option<&[BehaviorLabel]> {
        self.rows
            .iter()
            .find(|r| r[0].h_id == h_id)
            .map(Vec::as_slice)
    }

    pub fn labels(&self) -> impl Iterator<Item = &BehaviorLabel> {
        self.rows.iter().flatten()
    }

    /// Parses canonical text, inferring the horizon from the rows and
    /// rejecting anything the lenient parser would have to repair.
    pub fn from_canonical(text: &str) -> Result<Self, LabelError> {
        let horizon = prediction::raw_row_length(text).ok_or(LabelError::Unparseable)?;
        let parsed = parse_prediction(text, horizon)?;
        if !parsed.flags.is_empty() {
            return Err(LabelError::Unparseable);
        }
        Ok(parsed.grid)
    }
}

impl fmt::Display for PredictionGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&emit_prediction(self))
    }
}

impl Serialize for PredictionGrid {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&emit_prediction(self))
    }
}

impl<'de> Deserialize<'de> for PredictionGrid {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        PredictionGrid::from_canonical(&text).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_ignores_case_and_whitespace() {
        let a = BehaviorLabel::new(0, " Switch  On ", "TV").unwrap();
        let b = BehaviorLabel::new(0, "switch_on", "tv").unwrap();
        assert_eq!(a, b);
        assert_eq!(normalize_token("  remote \t control "), "remote_control");
    }

    #[test]
    fn rejects_empty_and_reserved_tokens() {
        assert_eq!(BehaviorLabel::new(0, "  ", "tv"), Err(LabelError::EmptyToken("verb")));
        assert!(matches!(
            BehaviorLabel::new(0, "grab", "a,b"),
            Err(LabelError::ReservedCharacter(_))
        ));
    }

    #[test]
    fn grid_invariants() {
        let l = |h, v, n| BehaviorLabel::new(h, v, n).unwrap();
        assert_eq!(PredictionGrid::new(vec![vec![l(0, "a", "b")]], 0), Err(LabelError::ZeroHorizon));
        assert_eq!(PredictionGrid::new(vec![], 1), Err(LabelError::NoRows));
        assert!(matches!(
            PredictionGrid::new(vec![vec![l(0, "a", "b")]], 2),
            Err(LabelError::RowLength { .. })
        ));
        assert_eq!(
            PredictionGrid::new(vec![vec![l(0, "a", "b"), l(1, "a", "b")]], 2),
            Err(LabelError::MixedRow { row: 0 })
        );
        assert_eq!(
            PredictionGrid::new(vec![vec![l(1, "a", "b")], vec![l(1, "c", "d")]], 1),
            Err(LabelError::DuplicateHuman(1))
        );
        let g = PredictionGrid::new(vec![vec![l(2, "a", "b")], vec![l(0, "c", "d")]], 1).unwrap();
        assert_eq!(g.human_ids(), vec![0, 2]);
    }

    #[test]
    fn serde_uses_canonical_text() {
        let g = PredictionGrid::new(vec![vec![BehaviorLabel::new(0, "grab", "cup").unwrap()]], 1).unwrap();
        let json = serde_json::to_string(&g).unwrap();
        assert_eq!(json, r#""[[(0, grab, cup)]]""#);
        let back: PredictionGrid = serde_json::from_str(&json).unwrap();
        assert_eq!(back, g);
    }
}
