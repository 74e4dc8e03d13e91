//! Seeded random generators for scene graphs and prediction grids, shared by
//! unit tests, property tests and the acceptance suite.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::labels::{BehaviorLabel, PredictionGrid};
use crate::scene_graph::{default_vocabulary, ObjectNode, PlacementEdge, SceneGraph};

pub const VERBS: [&str; 5] = ["grab", "walk", "open", "put", "sit"];
pub const NOUNS: [&str; 5] = ["cup", "sofa", "fridge", "tv", "book"];

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn token(rng: &mut impl Rng, len: std::ops::RangeInclusive<usize>) -> String {
    let n = rng.random_range(len);
    let mut s: String = (0..n).map(|_| rng.random_range(b'a'..=b'z') as char).collect();
    if rng.random_bool(0.3) {
        s.push('_');
        s.push(rng.random_range(b'a'..=b'z') as char);
    }
    s
}

/// A valid graph under the default vocabulary with up to `max_nodes` objects.
pub fn random_scene_graph(rng: &mut impl Rng, max_nodes: usize) -> SceneGraph {
    let vocab = default_vocabulary();
    let n = rng.random_range(0..=max_nodes);
    let mut names = BTreeSet::new();
    while names.len() < n {
        names.insert(token(rng, 1..=8));
    }
    let mut ids: Vec<u64> = Vec::new();
    while ids.len() < n {
        let id = rng.random_range(1..10_000u64);
        if !ids.contains(&id) {
            ids.push(id);
        }
    }
    let named: Vec<(String, u64)> = names.into_iter().zip(ids).collect();
    let props: Vec<&String> = vocab.properties.iter().collect();
    let relations: Vec<&String> = vocab.relations.iter().collect();

    let mut nodes = BTreeMap::new();
    for (name, id) in &named {
        let mut node = ObjectNode::new(*id);
        for p in &props {
            if rng.random_bool(0.3) {
                node.properties.insert((*p).clone());
            }
        }
        for (a, b) in &vocab.exclusive_states {
            let gate = vocab.gate_for(a).unwrap_or_default();
            if node.properties.contains(gate) && rng.random_bool(0.7) {
                node.state.insert(if rng.random_bool(0.5) { a.clone() } else { b.clone() });
            }
        }
        let others: Vec<&(String, u64)> = named.iter().filter(|(_, i)| i != id).collect();
        for _ in 0..rng.random_range(0..=2usize) {
            if let Some((dest, dest_id)) = others.choose(rng) {
                let rel = relations.choose(rng).expect("relations are non-empty");
                node.object_placing.push(PlacementEdge::new(dest.clone(), *dest_id, (*rel).clone()));
            }
        }
        nodes.insert(name.clone(), node);
    }
    SceneGraph::from_parts(token(rng, 3..=10), nodes, vocab).expect("generator builds valid graphs")
}

fn random_label(rng: &mut impl Rng, h: u32) -> BehaviorLabel {
    BehaviorLabel::new(h, VERBS.choose(rng).unwrap(), NOUNS.choose(rng).unwrap()).unwrap()
}

/// A grid with 1..=`max_humans` rows of ids `0..m`.
pub fn random_grid(rng: &mut impl Rng, max_humans: usize, horizon: usize) -> PredictionGrid {
    let m = rng.random_range(1..=max_humans) as u32;
    let rows = (0..m).map(|h| (0..horizon).map(|_| random_label(rng, h)).collect()).collect();
    PredictionGrid::new(rows, horizon).expect("random grid is well formed")
}

/// A ground-truth grid and a perturbed prediction of it: token swaps,
/// padded slots, dropped and extra rows, shuffled rows and renumbered ids.
pub fn random_grid_pair(rng: &mut impl Rng, max_humans: usize, horizon: usize) -> (PredictionGrid, PredictionGrid) {
    let gt = random_grid(rng, max_humans, horizon);
    let p_verb = rng.random_range(0.0..1.0);
    let p_noun = rng.random_range(0.0..1.0);
    let renumber = rng.random_bool(0.1);
    let kept: Vec<&Vec<BehaviorLabel>> = gt.rows().iter().filter(|_| rng.random_bool(0.9)).collect();
    let mut rows: Vec<Vec<BehaviorLabel>> = kept
        .into_iter()
        .map(|row| {
            let mut row: Vec<BehaviorLabel> = row
                .iter()
                .map(|l| {
                    if rng.random_bool(0.05) {
                        return BehaviorLabel::sentinel(l.h_id());
                    }
                    let mut l = l.clone();
                    if rng.random_bool(p_verb) {
                        l = l.with_verb(VERBS.choose(rng).unwrap()).unwrap();
                    }
                    if rng.random_bool(p_noun) {
                        l = l.with_noun(NOUNS.choose(rng).unwrap()).unwrap();
                    }
                    l
                })
                .collect();
            if rng.random_bool(0.1) {
                row.shuffle(rng);
            }
            row
        })
        .collect();
    if rng.random_bool(0.1) {
        let h = gt.num_humans() as u32 + 3;
        rows.push((0..horizon).map(|_| random_label(rng, h)).collect());
    }
    if rows.is_empty() {
        rows.push((0..horizon).map(|_| random_label(rng, 0)).collect());
    }
    if renumber {
        for row in &mut rows {
            for l in row.iter_mut() {
                *l = l.clone().with_h_id(l.h_id() + 10);
            }
        }
    }
    let pred = PredictionGrid::new(rows, horizon).expect("perturbed grid is well formed");
    (pred, gt)
}
