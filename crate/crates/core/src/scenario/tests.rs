use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;

use super::*;
use crate::labels::{emit_prediction, parse_prediction};

/// Independent replay of one scenario: checks every action's preconditions
/// against its start snapshot, re-folds the effects, and checks locking.
fn audit(s: &Scenario, cfg: &ScenarioConfig) -> Vec<String> {
    let mut errs = Vec::new();
    let template = room_template(s.room_type);
    if s.graph_states.len() != s.length {
        errs.push(format!("{} snapshots for {} steps", s.graph_states.len(), s.length));
        return errs;
    }
    if s.graph_states[0] != template {
        errs.push("snapshot 0 differs from the template".into());
    }

    for (h, tl) in s.timelines.iter().enumerate() {
        if !(cfg.min_actions..=cfg.max_actions).contains(&tl.len()) {
            errs.push(format!("human {h} has {} actions", tl.len()));
        }
        let mut expected_start = 0;
        let mut holding: Option<u64> = None;
        let mut seat: Option<u64> = None;
        for a in tl {
            if a.start != expected_start {
                errs.push(format!("human {h} gap before step {}", a.start));
            }
            expected_start = a.end;
            let d = a.end - a.start;
            if !(cfg.min_duration..=cfg.max_duration).contains(&d) {
                errs.push(format!("human {h} duration {d}"));
            }
            if a.line.char_id != h as u32 {
                errs.push(format!("human {h} line has char {}", a.line.char_id));
            }
            let g = &s.graph_states[a.start];
            let Some((name, node)) = g.find_by_id(a.line.object_id) else {
                errs.push(format!("unknown object {}", a.line.object_id));
                continue;
            };
            if name != a.line.object_name {
                errs.push(format!("object name {} vs id {}", a.line.object_name, a.line.object_id));
            }
            let has = |p: &str| node.properties.contains(p);
            let is = |st: &str| node.state.contains(st);
            let id = node.id;
            let inside_closed = node.object_placing.iter().any(|e| {
                e.relation == "INSIDE"
                    && g.nodes().get(&e.destination_name).is_some_and(|c| c.state.contains("CLOSED"))
            });
            let standing = seat.is_none();
            let ok = match a.line.action.as_str() {
                "walk" => standing && holding != Some(id),
                "grab" => standing && holding.is_none() && has("GRABBABLE") && !inside_closed,
                "put" => {
                    standing
                        && holding == Some(id)
                        && a.destination.as_ref().is_some_and(|e| {
                            e.relation == "ON"
                                && e.destination_id != id
                                && g.nodes().get(&e.destination_name).is_some_and(|d| {
                                    d.id == e.destination_id && d.properties.contains("HAS_SURFACE")
                                })
                        })
                }
                "open" => standing && has("CAN_OPEN") && is("CLOSED") && holding != Some(id),
                "close" => standing && has("CAN_OPEN") && is("OPEN") && holding != Some(id),
                "switchon" => standing && has("HAS_SWITCH") && is("OFF") && holding != Some(id),
                "switchoff" => standing && has("HAS_SWITCH") && is("ON") && holding != Some(id),
                "sit" => standing && has("SITTABLE") && holding != Some(id),
                "standup" => seat == Some(id),
                "drink" => holding == Some(id) && has("DRINKABLE"),
                "read" => holding == Some(id) && has("READABLE"),
                "wipe" => standing && has("HAS_SURFACE") && is("DIRTY") && holding != Some(id),
                other => {
                    errs.push(format!("unknown verb {other}"));
                    true
                }
            };
            if !ok {
                errs.push(format!("{} seed {} human {h}: precondition fails for {}", s.scenario_id, s.seed, a.line));
            }
            match a.line.action.as_str() {
                "grab" => holding = Some(id),
                "put" => holding = None,
                "sit" => seat = Some(id),
                "standup" => seat = None,
                _ => {}
            }
        }
        if expected_start != s.length {
            errs.push(format!("human {h} timeline ends at {expected_start}, not {}", s.length));
        }
    }

    // no two humans engage the same object at once
    for k in 0..s.length {
        let mut engaged: BTreeMap<u64, usize> = BTreeMap::new();
        for (h, tl) in s.timelines.iter().enumerate() {
            for a in tl.iter().filter(|a| a.start <= k && k < a.end && a.line.action != "walk") {
                if let Some(other) = engaged.insert(a.line.object_id, h) {
                    if other != h {
                        errs.push(format!("step {k}: humans {other} and {h} both act on {}", a.line.object_id));
                    }
                }
            }
        }
    }

    // re-fold effects: snapshot k+1 = snapshot k + effects of actions ending at k+1
    let vocab = default_vocabulary();
    for k in 0..s.length.saturating_sub(1) {
        let mut g = s.graph_states[k].clone();
        for a in s.timelines.iter().flatten().filter(|a| a.end == k + 1) {
            let (_, node) = g.find_by_id(a.line.object_id).unwrap();
            let mut states = node.state.clone();
            let flip = |st: &mut BTreeSet<String>, from: &str, to: &str| {
                st.remove(from);
                st.insert(to.to_string());
            };
            match a.line.action.as_str() {
                "open" => flip(&mut states, "CLOSED", "OPEN"),
                "close" => flip(&mut states, "OPEN", "CLOSED"),
                "switchon" => flip(&mut states, "OFF", "ON"),
                "switchoff" => flip(&mut states, "ON", "OFF"),
                "wipe" => flip(&mut states, "DIRTY", "CLEAN"),
                _ => {}
            }
            let moved = (a.line.action == "put").then(|| a.destination.clone()).flatten();
            match g.apply_state_change(a.line.object_id, &states, moved, vocab) {
                Ok(next) => g = next,
                Err(e) => errs.push(format!("replay at step {}: {e}", k + 1)),
            }
        }
        if g != s.graph_states[k + 1] {
            errs.push(format!("{} snapshot {} is not the fold of step {k}", s.scenario_id, k + 1));
        }
    }
    errs
}

#[test]
fn kitchen_three_humans() {
    let cfg = ScenarioConfig::new(RoomType::Kitchen, 3, 7);
    let s = generate_scenario(&cfg).unwrap();
    assert_eq!(s.timelines.len(), 3);
    assert_eq!(s.length, 50);
    for h in 0..3 {
        assert!((4..=13).contains(&s.action_count(h)), "{}", s.action_count(h));
    }
    assert_eq!(audit(&s, &cfg), Vec::<String>::new());
}

#[test]
fn generation_is_deterministic() {
    let cfg = ScenarioConfig::new(RoomType::LivingRoom, 1, 0);
    assert_eq!(generate_scenario(&cfg).unwrap(), generate_scenario(&cfg).unwrap());
    let other = ScenarioConfig::new(RoomType::LivingRoom, 1, 1);
    assert_ne!(generate_scenario(&cfg).unwrap().timelines, generate_scenario(&other).unwrap().timelines);
}

#[test]
fn precondition_audit_over_1000_seeds() {
    let mut violations = Vec::new();
    for seed in 0..1000u64 {
        let room = RoomType::ALL[(seed % 3) as usize];
        let m = 1 + (seed / 3 % 3) as usize;
        let cfg = ScenarioConfig::new(room, m, seed);
        let s = generate_scenario(&cfg).unwrap();
        violations.extend(audit(&s, &cfg));
    }
    assert!(violations.is_empty(), "{} violations, first: {:?}", violations.len(), &violations[..violations.len().min(5)]);
}

#[test]
fn unsatisfiable_inventory() {
    let mut cfg = ScenarioConfig::new(RoomType::Kitchen, 1, 0);
    let (room, nodes) = room_template(RoomType::Kitchen).into_parts();
    let nodes = nodes
        .into_iter()
        .filter(|(_, n)| !n.properties.contains("HAS_SWITCH"))
        .collect();
    cfg.template = Some(SceneGraph::from_parts(room, nodes, default_vocabulary()).unwrap());
    for r in cfg.rules.iter_mut().filter(|r| r.verb.starts_with("switch")) {
        r.weight = 10.0;
    }
    assert!(matches!(generate_scenario(&cfg), Err(ScenarioError::Unsatisfiable(_))));

    let mut empty = ScenarioConfig::new(RoomType::Bedroom, 1, 0);
    empty.template = Some(SceneGraph::empty("bedroom"));
    assert!(matches!(generate_scenario(&empty), Err(ScenarioError::Unsatisfiable(_))));

    let mut short = ScenarioConfig::new(RoomType::Bedroom, 1, 0);
    short.length = Some(5);
    assert!(matches!(generate_scenario(&short), Err(ScenarioError::Unsatisfiable(_))));
}

#[test]
fn invalid_human_count() {
    assert!(matches!(
        generate_scenario(&ScenarioConfig::new(RoomType::Kitchen, 4, 0)),
        Err(ScenarioError::InvalidConfig(_))
    ));
}

#[test]
fn slice_matches_timeline() {
    let s = generate_scenario(&ScenarioConfig::new(RoomType::Kitchen, 2, 3)).unwrap();
    assert_eq!(s.length, 60);
    let slice = slice_sample(&s, 5, 6, 6, Split::Train).unwrap();
    let sample = &slice.sample;
    assert_eq!(sample.frame_refs.len(), 6);
    assert_eq!(sample.frame_refs.iter().map(|f| f.step).collect::<Vec<_>>(), (0..=5).collect::<Vec<_>>());
    assert_eq!(sample.gt_grid.num_humans(), 2);
    assert_eq!(sample.gt_grid.horizon(), 6);
    assert_eq!(slice.graph, s.graph_states[5]);
    for (i, row) in sample.gt_grid.rows().iter().enumerate() {
        for (t, label) in row.iter().enumerate() {
            let step = 5 + 1 + t;
            let a = s.timelines[i].iter().find(|a| a.start <= step && step < a.end).unwrap();
            assert_eq!((label.verb(), label.noun()), (a.line.action.as_str(), a.line.object_name.as_str()));
        }
    }
}

#[test]
fn slice_bounds() {
    let s = generate_scenario(&ScenarioConfig::new(RoomType::Kitchen, 1, 0)).unwrap();
    assert!(matches!(slice_sample(&s, 5, 6, 0, Split::Train), Err(ScenarioError::OutOfRange(_))));
    assert!(matches!(slice_sample(&s, 4, 6, 6, Split::Train), Err(ScenarioError::OutOfRange(_))));
    assert!(matches!(slice_sample(&s, 54, 6, 6, Split::Train), Err(ScenarioError::OutOfRange(_))));
    assert!(slice_sample(&s, 53, 6, 6, Split::Train).is_ok());
}

#[test]
fn default_plan_shape() {
    let plan = default_plan();
    assert_eq!(plan.iter().map(|c| c.videos).sum::<usize>(), 30);
    let scenarios = generate_plan(&plan, 100, &ScenarioConfig::new(RoomType::Kitchen, 1, 0)).unwrap();
    assert_eq!(scenarios.len(), 30);
    let ids: BTreeSet<_> = scenarios.iter().map(|s| s.scenario_id.clone()).collect();
    assert_eq!(ids.len(), 30);

    let ds = emit_dataset(&scenarios, &DatasetConfig::default(), &SymbolicFrames).unwrap();
    let split = ds.scenario_split();
    assert_eq!(split.values().filter(|s| **s == Split::Train).count(), 21);
    assert_eq!(split.values().filter(|s| **s == Split::Test).count(), 9);
    let train: BTreeSet<_> = ds.train.iter().map(|s| &s.meta.scenario_id).collect();
    assert!(ds.test.iter().all(|s| !train.contains(&s.meta.scenario_id)));
    assert!(ds.train.iter().chain(&ds.test).all(|s| ds.graphs.contains_key(&s.scene_graph_ref)));
}

#[test]
fn empty_split_guard() {
    let keys = vec![
        ("a".to_string(), RoomType::Kitchen, 1),
        ("b".to_string(), RoomType::Kitchen, 1),
    ];
    assert!(matches!(assign_splits(&keys, 0.999), Err(ScenarioError::EmptySplit { .. })));
    let ok = assign_splits(&keys, 0.5).unwrap();
    assert_eq!(ok["a"], Split::Train);
    assert_eq!(ok["b"], Split::Test);
}

#[test]
fn frame_provider_attaches_paths() {
    let s = generate_scenario(&ScenarioConfig::new(RoomType::Bedroom, 1, 2)).unwrap();
    let other = generate_scenario(&ScenarioConfig::new(RoomType::Bedroom, 1, 3)).unwrap();
    let provider = |sc: &Scenario, step: usize| Some(format!("frames/{}/{step}.png", sc.scenario_id));
    let ds = emit_dataset(&[s, other], &DatasetConfig { split_ratio: 0.5, ..Default::default() }, &provider).unwrap();
    let f = &ds.train[0].frame_refs[0];
    assert_eq!(f.path.as_deref(), Some(format!("frames/{}/{}.png", f.scenario_id, f.step).as_str()));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ground_truth_round_trips_without_flags(seed in any::<u64>(), room in 0usize..3, m in 1usize..=3) {
        let s = generate_scenario(&ScenarioConfig::new(RoomType::ALL[room], m, seed)).unwrap();
        let slice = slice_sample(&s, 5, 6, 6, Split::Test).unwrap();
        let text = emit_prediction(&slice.sample.gt_grid);
        let parsed = parse_prediction(&text, 6).unwrap();
        prop_assert!(parsed.flags.is_empty());
        prop_assert_eq!(parsed.grid, slice.sample.gt_grid);
    }

    #[test]
    fn split_is_by_scenario(n in 2usize..60, ratio in 0.05f64..0.95) {
        let keys: Vec<_> = (0..n)
            .map(|i| (format!("s{i:03}"), RoomType::ALL[i % 3], 1 + i % 2))
            .collect();
        if let Ok(split) = assign_splits(&keys, ratio) {
            prop_assert_eq!(split.len(), n);
            let test = split.values().filter(|s| **s == Split::Test).count();
            prop_assert_eq!(test, n - (ratio * n as f64).round() as usize);
        }
    }
}
