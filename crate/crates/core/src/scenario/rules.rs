//! Precondition/effect table for the symbolic simulator.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

/// What the acting human must be holding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Hands {
    Any,
    Empty,
    /// The target object itself must be in hand.
    HoldingTarget,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Posture {
    Standing,
    Seated,
    Either,
}

/// Agent-level side effect applied when the action ends.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentEffect {
    None,
    Hold,
    Release,
    Sit,
    Stand,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionRule {
    pub verb: String,
    /// Properties the target must carry.
    pub required_properties: BTreeSet<String>,
    /// States the target must be in at the start step.
    pub required_states: BTreeSet<String>,
    /// States added to the target when the action ends; their exclusive
    /// counterparts are removed.
    pub effect_states: BTreeSet<String>,
    /// Inclusive duration range in timesteps.
    pub duration: (usize, usize),
    pub weight: f64,
    pub hands: Hands,
    pub posture: Posture,
    pub agent_effect: AgentEffect,
    /// Whether the target is locked against other humans while in progress.
    pub locks_target: bool,
}

impl ActionRule {
    #[allow(clippy::too_many_arguments)]
    fn new(
        verb: &str,
        props: &[&str],
        requires: &[&str],
        effects: &[&str],
        duration: (usize, usize),
        weight: f64,
        hands: Hands,
        posture: Posture,
        agent_effect: AgentEffect,
    ) -> Self {
        let set = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect();
        Self {
            verb: verb.into(),
            required_properties: set(props),
            required_states: set(requires),
            effect_states: set(effects),
            duration,
            weight,
            hands,
            posture,
            agent_effect,
            locks_target: verb != "walk",
        }
    }
}

/// The default twelve-verb table.
pub fn default_rules() -> Vec<ActionRule> {
    use AgentEffect as A;
    use Hands::*;
    use Posture::*;
    vec![
        ActionRule::new("walk", &[], &[], &[], (2, 6), 2.0, Any, Standing, A::None),
        ActionRule::new("grab", &["GRABBABLE"], &[], &[], (2, 4), 2.0, Empty, Standing, A::Hold),
        ActionRule::new("put", &["GRABBABLE"], &[], &[], (2, 4), 2.0, HoldingTarget, Standing, A::Release),
        ActionRule::new("open", &["CAN_OPEN"], &["CLOSED"], &["OPEN"], (2, 4), 1.0, Any, Standing, A::None),
        ActionRule::new("close", &["CAN_OPEN"], &["OPEN"], &["CLOSED"], (2, 4), 1.0, Any, Standing, A::None),
        ActionRule::new("switchon", &["HAS_SWITCH"], &["OFF"], &["ON"], (2, 3), 1.0, Any, Standing, A::None),
        ActionRule::new("switchoff", &["HAS_SWITCH"], &["ON"], &["OFF"], (2, 3), 1.0, Any, Standing, A::None),
        ActionRule::new("sit", &["SITTABLE"], &[], &[], (4, 15), 1.0, Any, Standing, A::Sit),
        ActionRule::new("standup", &["SITTABLE"], &[], &[], (2, 3), 1.0, Any, Seated, A::Stand),
        ActionRule::new("drink", &["GRABBABLE", "DRINKABLE"], &[], &[], (2, 6), 1.5, HoldingTarget, Either, A::None),
        ActionRule::new("read", &["GRABBABLE", "READABLE"], &[], &[], (4, 12), 1.5, HoldingTarget, Either, A::None),
        ActionRule::new("wipe", &["HAS_SURFACE"], &["DIRTY"], &["CLEAN"], (3, 8), 1.0, Any, Standing, A::None),
    ]
}
