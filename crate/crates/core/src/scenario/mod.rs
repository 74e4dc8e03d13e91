//! Symbolic multi-human scenario generator.
//!
//! A scenario is a fixed number of timesteps in one room. Every human runs a
//! contiguous timeline of actions; an action occupies `[start, end)` and its
//! effects (object states, placement, what the human holds or sits on) are
//! applied at `end`. Snapshot `k` therefore contains the effects of every
//! action with `end <= k`, and an action's preconditions are checked against
//! the snapshot at its start step.
//!
//! Objects that another human holds, sits on, or is acting on (any verb but
//! `walk`) are locked; a human whose preferred target is locked simply draws
//! from the remaining candidates.

mod dataset;
mod rules;

use std::collections::BTreeSet;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use dataset::{assign_splits, emit_dataset, write_dataset, Dataset, DatasetConfig, DatasetPaths, FrameProvider, SymbolicFrames};
pub use rules::{default_rules, ActionRule, AgentEffect, Hands, Posture};

use crate::labels::{BehaviorLabel, LabelError, PredictionGrid, ScriptLine};
use crate::room::RoomType;
use crate::scene_graph::{
    default_vocabulary, parse_scene_graph, ObjectId, PlacementEdge, SceneGraph, SceneGraphError, Vocabulary,
};
use crate::store::{FrameRef, Sample, SampleMeta, Source, Split, StoreError};

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("unsatisfiable scenario: {0}")]
    Unsatisfiable(String),
    #[error("out of range: {0}")]
    OutOfRange(String),
    #[error("split leaves {train} train and {test} test scenarios; both must be non-empty")]
    EmptySplit { train: usize, test: usize },
    #[error(transparent)]
    Graph(#[from] SceneGraphError),
    #[error(transparent)]
    Label(#[from] LabelError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

pub type Result<T, E = ScenarioError> = std::result::Result<T, E>;

pub const DEFAULT_FRAME_INTERVAL_S: f64 = 0.5;

/// Built-in inventory for a room type.
pub fn room_template(room: RoomType) -> SceneGraph {
    let text = match room {
        RoomType::Kitchen => include_str!("../../templates/kitchen.json"),
        RoomType::Bedroom => include_str!("../../templates/bedroom.json"),
        RoomType::LivingRoom => include_str!("../../templates/living_room.json"),
    };
    parse_scene_graph(text).expect("built-in room templates are valid")
}

/// Average video duration in seconds for a dataset cell.
pub fn default_duration_s(room: RoomType, num_humans: usize) -> f64 {
    match (room, num_humans) {
        (RoomType::Kitchen, 3) => 25.0,
        (RoomType::Kitchen, _) => 30.0,
        (RoomType::Bedroom, _) => 23.0,
        (RoomType::LivingRoom, 3) => 23.0,
        (RoomType::LivingRoom, _) => 20.0,
    }
}

/// One row of the synthetic dataset plan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanCell {
    pub room: RoomType,
    pub num_humans: usize,
    pub videos: usize,
    pub duration_s: f64,
}

/// The default 30-video plan: eight (room, humans) cells.
pub fn default_plan() -> Vec<PlanCell> {
    use RoomType::*;
    [
        (Kitchen, 1, 4),
        (Bedroom, 1, 3),
        (LivingRoom, 1, 3),
        (Kitchen, 2, 4),
        (Bedroom, 2, 3),
        (LivingRoom, 2, 3),
        (Kitchen, 3, 5),
        (LivingRoom, 3, 5),
    ]
    .into_iter()
    .map(|(room, num_humans, videos)| PlanCell {
        room,
        num_humans,
        videos,
        duration_s: default_duration_s(room, num_humans),
    })
    .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub room_type: RoomType,
    pub num_humans: usize,
    pub seed: u64,
    pub min_actions: usize,
    pub max_actions: usize,
    pub min_duration: usize,
    pub max_duration: usize,
    /// Scenario length in timesteps; defaults from the room's plan duration.
    pub length: Option<usize>,
    pub frame_interval_s: f64,
    pub rules: Vec<ActionRule>,
    /// Inventory override; defaults to [`room_template`].
    pub template: Option<SceneGraph>,
}

impl ScenarioConfig {
    pub fn new(room_type: RoomType, num_humans: usize, seed: u64) -> Self {
        Self {
            room_type,
            num_humans,
            seed,
            min_actions: 4,
            max_actions: 13,
            min_duration: 2,
            max_duration: 15,
            length: None,
            frame_interval_s: DEFAULT_FRAME_INTERVAL_S,
            rules: default_rules(),
            template: None,
        }
    }

    pub fn steps(&self) -> usize {
        self.length.unwrap_or_else(|| {
            (default_duration_s(self.room_type, self.num_humans) / self.frame_interval_s).round() as usize
        })
    }

    /// Feasible per-human action counts.
    fn action_count_range(&self, steps: usize) -> Option<(usize, usize)> {
        let lo = self.min_actions.max(steps.div_ceil(self.max_duration));
        let hi = self.max_actions.min(steps / self.min_duration);
        (lo <= hi).then_some((lo, hi))
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ScenarioError::InvalidConfig(m.into()));
        if !(1..=3).contains(&self.num_humans) {
            return bad("num_humans must be 1, 2 or 3");
        }
        if self.min_actions == 0 || self.min_actions > self.max_actions {
            return bad("action count range must satisfy 1 <= min <= max");
        }
        if self.min_duration == 0 || self.min_duration > self.max_duration {
            return bad("duration range must satisfy 1 <= min <= max");
        }
        if self.frame_interval_s.is_nan() || self.frame_interval_s <= 0.0 {
            return bad("frame interval must be positive");
        }
        if self.rules.iter().any(|r| r.weight.is_nan() || r.weight < 0.0 || r.duration.0 > r.duration.1) {
            return bad("rule weights must be non-negative and durations ordered");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimedAction {
    pub start: usize,
    /// Exclusive.
    pub end: usize,
    pub line: ScriptLine,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub destination: Option<PlacementEdge>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub scenario_id: String,
    pub room_type: RoomType,
    pub num_humans: usize,
    pub seed: u64,
    pub frame_interval_s: f64,
    pub length: usize,
    /// Per human, contiguous actions covering `[0, length)`.
    pub timelines: Vec<Vec<TimedAction>>,
    /// One snapshot per timestep.
    pub graph_states: Vec<SceneGraph>,
}

impl Scenario {
    pub fn action_at(&self, human: usize, step: usize) -> Option<&TimedAction> {
        let timeline = self.timelines.get(human)?;
        let i = timeline.partition_point(|a| a.end <= step);
        timeline.get(i).filter(|a| a.start <= step)
    }

    pub fn label_at(&self, human: usize, step: usize) -> Result<BehaviorLabel> {
        let a = self
            .action_at(human, step)
            .ok_or_else(|| ScenarioError::OutOfRange(format!("no action for human {human} at step {step}")))?;
        Ok(BehaviorLabel::new(human as u32, &a.line.action, &a.line.object_name)?)
    }

    /// All script lines ordered by start step, then human.
    pub fn script(&self) -> Vec<ScriptLine> {
        let mut all: Vec<&TimedAction> = self.timelines.iter().flatten().collect();
        all.sort_by_key(|a| (a.start, a.line.char_id));
        all.into_iter().map(|a| a.line.clone()).collect()
    }

    pub fn action_count(&self, human: usize) -> usize {
        self.timelines.get(human).map_or(0, Vec::len)
    }
}

#[derive(Debug, Clone, Default)]
struct Agent {
    holding: Option<ObjectId>,
    seat: Option<ObjectId>,
    remaining: usize,
    prev: Option<(usize, ObjectId)>,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn rng_for(cfg: &ScenarioConfig) -> ChaCha8Rng {
    let room = RoomType::ALL.iter().position(|r| *r == cfg.room_type).unwrap_or(0) as u64;
    ChaCha8Rng::seed_from_u64(splitmix(cfg.seed ^ splitmix((room << 8) | cfg.num_humans as u64)))
}

fn name_of(g: &SceneGraph, id: ObjectId) -> &str {
    g.find_by_id(id).map(|(n, _)| n).unwrap_or("")
}

/// True if `id` is placed INSIDE a container that is currently CLOSED.
pub(crate) fn enclosed(g: &SceneGraph, id: ObjectId) -> bool {
    g.find_by_id(id).is_some_and(|(_, node)| {
        node.object_placing.iter().any(|e| {
            e.relation == "INSIDE" && g.node(&e.destination_name).is_some_and(|d| d.has_state("CLOSED"))
        })
    })
}

fn put_destinations(g: &SceneGraph, item: ObjectId, locked: &BTreeSet<ObjectId>) -> Vec<PlacementEdge> {
    g.nodes()
        .iter()
        .filter(|(_, n)| n.has_property("HAS_SURFACE") && n.id != item && !locked.contains(&n.id))
        .filter(|(_, n)| !n.object_placing.iter().any(|e| e.destination_id == item))
        .map(|(name, n)| PlacementEdge::new(name.clone(), n.id, "ON"))
        .collect()
}

/// Target candidates for `rule` given the acting agent and others' locks.
fn candidates(rule: &ActionRule, g: &SceneGraph, agent: &Agent, locked: &BTreeSet<ObjectId>) -> Vec<ObjectId> {
    let posture_ok = match rule.posture {
        Posture::Standing => agent.seat.is_none(),
        Posture::Seated => agent.seat.is_some(),
        Posture::Either => true,
    };
    let hands_ok = match rule.hands {
        Hands::Empty => agent.holding.is_none(),
        Hands::HoldingTarget => agent.holding.is_some(),
        Hands::Any => true,
    };
    if !posture_ok || !hands_ok {
        return Vec::new();
    }
    g.nodes()
        .values()
        .filter(|n| {
            rule.required_properties.iter().all(|p| n.has_property(p))
                && rule.required_states.iter().all(|s| n.has_state(s))
                && !locked.contains(&n.id)
        })
        .map(|n| n.id)
        .filter(|&id| match rule.hands {
            Hands::HoldingTarget => agent.holding == Some(id),
            _ => agent.holding != Some(id),
        })
        .filter(|&id| match rule.agent_effect {
            AgentEffect::Hold => !enclosed(g, id),
            AgentEffect::Stand => agent.seat == Some(id),
            AgentEffect::Release => !put_destinations(g, id, locked).is_empty(),
            _ => true,
        })
        .collect()
}

fn check_inventory(cfg: &ScenarioConfig, g: &SceneGraph) -> Result<()> {
    if g.is_empty() {
        return Err(ScenarioError::Unsatisfiable(format!("room {} has no objects", g.room_name())));
    }
    for rule in cfg.rules.iter().filter(|r| r.weight > 0.0) {
        let supported = g
            .nodes()
            .values()
            .any(|n| rule.required_properties.iter().all(|p| n.has_property(p)));
        if !supported {
            return Err(ScenarioError::Unsatisfiable(format!(
                "no object supports '{}' (needs {:?}) but its weight is {}",
                rule.verb, rule.required_properties, rule.weight
            )));
        }
    }
    Ok(())
}

fn apply_effect(
    g: &SceneGraph,
    rule: &ActionRule,
    action: &TimedAction,
    agent: &mut Agent,
    vocab: &Vocabulary,
) -> Result<SceneGraph> {
    let id = action.line.object_id;
    match rule.agent_effect {
        AgentEffect::Hold => agent.holding = Some(id),
        AgentEffect::Release => agent.holding = None,
        AgentEffect::Sit => agent.seat = Some(id),
        AgentEffect::Stand => agent.seat = None,
        AgentEffect::None => {}
    }
    if rule.effect_states.is_empty() && action.destination.is_none() {
        return Ok(g.clone());
    }
    let (_, node) = g.find_by_id(id).ok_or(SceneGraphError::UnknownObject(id))?;
    let mut states = node.state.clone();
    for s in &rule.effect_states {
        if let Some(opp) = vocab.opposite_of(s) {
            states.remove(opp);
        }
        states.insert(s.clone());
    }
    Ok(g.apply_state_change(id, &states, action.destination.clone(), vocab)?)
}

/// Duration window for the next of `remaining` actions with `steps_left` to fill.
fn duration_window(cfg: &ScenarioConfig, remaining: usize, steps_left: usize) -> (usize, usize) {
    let rest = remaining - 1;
    let lo = cfg.min_duration.max(steps_left.saturating_sub(rest * cfg.max_duration));
    let hi = cfg.max_duration.min(steps_left - rest * cfg.min_duration);
    (lo, hi)
}

/// Generates one scenario; deterministic in `cfg`.
pub fn generate_scenario(cfg: &ScenarioConfig) -> Result<Scenario> {
    cfg.validate()?;
    let vocab = default_vocabulary();
    let mut graph = cfg.template.clone().unwrap_or_else(|| room_template(cfg.room_type));
    check_inventory(cfg, &graph)?;
    let steps = cfg.steps();
    let (n_lo, n_hi) = cfg.action_count_range(steps).ok_or_else(|| {
        ScenarioError::Unsatisfiable(format!(
            "{steps} steps cannot hold {}..={} actions of {}..={} steps",
            cfg.min_actions, cfg.max_actions, cfg.min_duration, cfg.max_duration
        ))
    })?;

    let mut rng = rng_for(cfg);
    let m = cfg.num_humans;
    let mut agents: Vec<Agent> = (0..m)
        .map(|_| Agent {
            remaining: rng.random_range(n_lo..=n_hi),
            ..Agent::default()
        })
        .collect();
    let mut timelines: Vec<Vec<TimedAction>> = vec![Vec::new(); m];
    let mut rule_of: Vec<Vec<usize>> = vec![Vec::new(); m];
    let mut snapshots = Vec::with_capacity(steps);

    for k in 0..steps {
        for h in 0..m {
            if let (Some(a), Some(&r)) = (timelines[h].last(), rule_of[h].last()) {
                if a.end == k {
                    graph = apply_effect(&graph, &cfg.rules[r], a, &mut agents[h], vocab)?;
                }
            }
        }
        snapshots.push(graph.clone());

        for h in 0..m {
            let next_start = timelines[h].last().map_or(0, |a| a.end);
            if next_start != k {
                continue;
            }
            let mut locked = BTreeSet::new();
            for g in (0..m).filter(|&g| g != h) {
                locked.extend(agents[g].holding);
                locked.extend(agents[g].seat);
                if let (Some(a), Some(&r)) = (timelines[g].last(), rule_of[g].last()) {
                    if a.start <= k && k < a.end && cfg.rules[r].locks_target {
                        locked.insert(a.line.object_id);
                    }
                }
            }

            let agent = &agents[h];
            let mut options: Vec<(usize, ObjectId)> = cfg
                .rules
                .iter()
                .enumerate()
                .filter(|(_, r)| r.weight > 0.0)
                .flat_map(|(ri, r)| candidates(r, &graph, agent, &locked).into_iter().map(move |id| (ri, id)))
                .collect();
            if options.len() > 1 {
                if let Some(prev) = agent.prev {
                    options.retain(|o| *o != prev);
                }
            }
            let verbs: Vec<usize> = options.iter().map(|o| o.0).collect::<BTreeSet<_>>().into_iter().collect();
            if verbs.is_empty() {
                return Err(ScenarioError::Unsatisfiable(format!("human {h} has no applicable action at step {k}")));
            }
            let dist = WeightedIndex::new(verbs.iter().map(|&ri| cfg.rules[ri].weight))
                .map_err(|e| ScenarioError::InvalidConfig(e.to_string()))?;
            let ri = verbs[dist.sample(&mut rng)];
            let objects: Vec<ObjectId> = options.iter().filter(|o| o.0 == ri).map(|o| o.1).collect();
            let id = *objects.choose(&mut rng).expect("verb has candidates");
            let rule = &cfg.rules[ri];

            let steps_left = steps - k;
            let duration = if agent.remaining == 1 {
                steps_left
            } else {
                let (lo, hi) = duration_window(cfg, agent.remaining, steps_left);
                let a = rule.duration.0.clamp(lo, hi);
                let b = rule.duration.1.clamp(lo, hi);
                rng.random_range(a..=b)
            };
            let destination = match rule.agent_effect {
                AgentEffect::Release => put_destinations(&graph, id, &locked).choose(&mut rng).cloned(),
                _ => None,
            };
            timelines[h].push(TimedAction {
                start: k,
                end: k + duration,
                line: ScriptLine::new(h as u32, rule.verb.clone(), name_of(&graph, id), id),
                destination,
            });
            rule_of[h].push(ri);
            agents[h].remaining -= 1;
            agents[h].prev = Some((ri, id));
        }
    }

    Ok(Scenario {
        scenario_id: format!("{}-h{}-s{}", cfg.room_type, m, cfg.seed),
        room_type: cfg.room_type,
        num_humans: m,
        seed: cfg.seed,
        frame_interval_s: cfg.frame_interval_s,
        length: steps,
        timelines,
        graph_states: snapshots,
    })
}

/// Generates every scenario of `plan`; the i-th scenario overall uses `base_seed + i`.
pub fn generate_plan(plan: &[PlanCell], base_seed: u64, template: &ScenarioConfig) -> Result<Vec<Scenario>> {
    let mut configs = Vec::new();
    for cell in plan {
        for _ in 0..cell.videos {
            let mut cfg = template.clone();
            cfg.room_type = cell.room;
            cfg.num_humans = cell.num_humans;
            cfg.seed = base_seed.wrapping_add(configs.len() as u64);
            cfg.length = Some((cell.duration_s / cfg.frame_interval_s).round() as usize);
            configs.push(cfg);
        }
    }
    std::thread::scope(|s| {
        let handles: Vec<_> = configs.iter().map(|c| s.spawn(move || generate_scenario(c))).collect();
        handles.into_iter().map(|h| h.join().expect("generator thread panicked")).collect()
    })
}

/// A sample together with its scene-graph snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSlice {
    pub sample: Sample,
    pub graph: SceneGraph,
}

/// Cuts an observation window ending at `t0` and the `t`-step future after it.
pub fn slice_sample(s: &Scenario, t0: usize, h: usize, t: usize, split: Split) -> Result<SampleSlice> {
    if h == 0 || t == 0 {
        return Err(ScenarioError::OutOfRange("history and horizon must be at least 1".into()));
    }
    if t0 + 1 < h || t0 + t >= s.length {
        return Err(ScenarioError::OutOfRange(format!(
            "t0={t0} with H={h}, T={t} does not fit a {}-step scenario",
            s.length
        )));
    }
    let rows = (0..s.num_humans)
        .map(|i| (t0 + 1..=t0 + t).map(|step| s.label_at(i, step)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    let sample_id = format!("{}-t{:03}", s.scenario_id, t0);
    let sample = Sample {
        scene_graph_ref: format!("graphs/{sample_id}.json"),
        sample_id,
        split,
        frame_refs: (t0 + 1 - h..=t0)
            .map(|step| FrameRef {
                scenario_id: s.scenario_id.clone(),
                step,
                path: None,
            })
            .collect(),
        gt_grid: PredictionGrid::new(rows, t)?,
        meta: SampleMeta {
            room_type: s.room_type,
            num_humans: s.num_humans,
            scenario_seed: Some(s.seed),
            source: Source::Synthetic,
            scenario_id: s.scenario_id.clone(),
            t0,
        },
    };
    Ok(SampleSlice {
        sample,
        graph: s.graph_states[t0].clone(),
    })
}

#[cfg(test)]
mod tests;
