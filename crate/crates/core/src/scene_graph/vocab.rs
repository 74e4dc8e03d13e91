//! Token registry for scene-graph properties, states and placement relations.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::SceneGraphError;

/// Closed vocabulary that node tokens are validated against.
///
/// `state_gates` maps a state token to the property an object must carry for
/// that state to be present (e.g. `ON` requires `HAS_SWITCH`).
/// `exclusive_states` lists pairs that may never be held at the same time.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub properties: BTreeSet<String>,
    pub states: BTreeSet<String>,
    pub relations: BTreeSet<String>,
    #[serde(default)]
    pub state_gates: BTreeMap<String, String>,
    #[serde(default)]
    pub exclusive_states: Vec<(String, String)>,
    /// Accept uppercase tokens that are not registered.
    #[serde(default)]
    pub open_vocab: bool,
    /// Accept repeated object names, renaming repeats with a `_2`, `_3`, ... suffix.
    #[serde(default)]
    pub allow_duplicate_names: bool,
}

fn set(tokens: &[&str]) -> BTreeSet<String> {
    tokens.iter().map(|t| t.to_string()).collect()
}

impl Default for Vocabulary {
    fn default() -> Self {
        let gates = [
            ("ON", "HAS_SWITCH"),
            ("OFF", "HAS_SWITCH"),
            ("OPEN", "CAN_OPEN"),
            ("CLOSED", "CAN_OPEN"),
            ("CLEAN", "HAS_SURFACE"),
            ("DIRTY", "HAS_SURFACE"),
        ];
        Self {
            properties: set(&[
                "HAS_SWITCH",
                "GRABBABLE",
                "SITTABLE",
                "HAS_SURFACE",
                "CAN_OPEN",
                "CONTAINER",
                "DRINKABLE",
                "READABLE",
            ]),
            states: set(&["ON", "OFF", "OPEN", "CLOSED", "CLEAN", "DIRTY"]),
            relations: set(&["ON", "INSIDE", "CLOSE", "FACING"]),
            state_gates: gates
                .iter()
                .map(|(s, p)| (s.to_string(), p.to_string()))
                .collect(),
            exclusive_states: vec![
                ("ON".into(), "OFF".into()),
                ("OPEN".into(), "CLOSED".into()),
                ("CLEAN".into(), "DIRTY".into()),
            ],
            open_vocab: false,
            allow_duplicate_names: false,
        }
    }
}

pub(crate) fn is_upper_identifier(token: &str) -> bool {
    let mut chars = token.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_uppercase())
        && chars.all(|c| c.is_ascii_uppercase() || c.is_ascii_digit() || c == '_')
}

impl Vocabulary {
    pub fn from_json_str(text: &str) -> Result<Self, SceneGraphError> {
        serde_json::from_str(text).map_err(|e| SceneGraphError::SchemaViolation {
            path: "vocabulary".into(),
            reason: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, SceneGraphError> {
        let text = std::fs::read_to_string(path).map_err(|e| SceneGraphError::SchemaViolation {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Self::from_json_str(&text)
    }

    pub fn with_open_vocab(mut self, open: bool) -> Self {
        self.open_vocab = open;
        self
    }

    pub fn with_duplicate_names(mut self, allow: bool) -> Self {
        self.allow_duplicate_names = allow;
        self
    }

    fn accepts(&self, registry: &BTreeSet<String>, token: &str) -> bool {
        if !is_upper_identifier(token) {
            return false;
        }
        self.open_vocab || registry.contains(token)
    }

    pub fn accepts_property(&self, token: &str) -> bool {
        self.accepts(&self.properties, token)
    }

    pub fn accepts_state(&self, token: &str) -> bool {
        self.accepts(&self.states, token)
    }

    pub fn accepts_relation(&self, token: &str) -> bool {
        self.accepts(&self.relations, token)
    }

    /// Property that must be present for `state` to be held, if any.
    pub fn gate_for(&self, state: &str) -> Option<&str> {
        self.state_gates.get(state).map(String::as_str)
    }

    /// The state that cannot coexist with `state`, if any.
    pub fn opposite_of(&self, state: &str) -> Option<&str> {
        self.exclusive_states.iter().find_map(|(a, b)| {
            if a == state {
                Some(b.as_str())
            } else if b == state {
                Some(a.as_str())
            } else {
                None
            }
        })
    }

    /// First conflicting pair found in `states`, if any.
    pub fn find_conflict<'a>(&self, states: &'a BTreeSet<String>) -> Option<(&'a str, &'a str)> {
        self.exclusive_states.iter().find_map(|(a, b)| {
            let a = states.get(a.as_str())?;
            let b = states.get(b.as_str())?;
            Some((a.as_str(), b.as_str()))
        })
    }
}
