//! Structural differences between scene graphs.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{ObjectId, ObjectNode, PlacementEdge, SceneGraph, SceneGraphError, Vocabulary};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "change", rename_all = "snake_case")]
pub enum GraphChange {
    RoomRenamed {
        from: String,
        to: String,
    },
    NodeRemoved {
        name: String,
    },
    NodeAdded {
        name: String,
        node: ObjectNode,
    },
    IdChanged {
        name: String,
        from: ObjectId,
        to: ObjectId,
    },
    PropertiesChanged {
        name: String,
        from: BTreeSet<String>,
        to: BTreeSet<String>,
    },
    StateChanged {
        name: String,
        from: BTreeSet<String>,
        to: BTreeSet<String>,
    },
    PlacementChanged {
        name: String,
        from: Vec<PlacementEdge>,
        to: Vec<PlacementEdge>,
    },
}

/// Changes that turn `a` into `b`. Empty iff the graphs are equal.
///
/// Nodes are matched by name; removals come before additions, and
/// per-node attribute changes follow in name order.
pub fn diff_scene_graphs(a: &SceneGraph, b: &SceneGraph) -> Vec<GraphChange> {
    let mut changes = Vec::new();
    if a.room_name != b.room_name {
        changes.push(GraphChange::RoomRenamed {
            from: a.room_name.clone(),
            to: b.room_name.clone(),
        });
    }
    for name in a.nodes.keys() {
        if !b.nodes.contains_key(name) {
            changes.push(GraphChange::NodeRemoved { name: name.clone() });
        }
    }
    for (name, node) in &b.nodes {
        if !a.nodes.contains_key(name) {
            changes.push(GraphChange::NodeAdded {
                name: name.clone(),
                node: node.clone(),
            });
        }
    }
    for (name, old) in &a.nodes {
        let Some(new) = b.nodes.get(name) else { continue };
        if old.id != new.id {
            changes.push(GraphChange::IdChanged {
                name: name.clone(),
                from: old.id,
                to: new.id,
            });
        }
        if old.properties != new.properties {
            changes.push(GraphChange::PropertiesChanged {
                name: name.clone(),
                from: old.properties.clone(),
                to: new.properties.clone(),
            });
        }
        if old.state != new.state {
            changes.push(GraphChange::StateChanged {
                name: name.clone(),
                from: old.state.clone(),
                to: new.state.clone(),
            });
        }
        if old.object_placing != new.object_placing {
            changes.push(GraphChange::PlacementChanged {
                name: name.clone(),
                from: old.object_placing.clone(),
                to: new.object_placing.clone(),
            });
        }
    }
    changes
}

fn missing(name: &str) -> SceneGraphError {
    SceneGraphError::SchemaViolation {
        path: name.to_string(),
        reason: "change refers to an object that is not present".into(),
    }
}

/// Applies `changes` in order and validates the result.
pub fn apply_changes(
    g: &SceneGraph,
    changes: &[GraphChange],
    vocab: &Vocabulary,
) -> Result<SceneGraph, SceneGraphError> {
    let mut room = g.room_name.clone();
    let mut nodes = g.nodes.clone();
    for change in changes {
        match change {
            GraphChange::RoomRenamed { to, .. } => room = to.clone(),
            GraphChange::NodeRemoved { name } => {
                nodes.remove(name).ok_or_else(|| missing(name))?;
            }
            GraphChange::NodeAdded { name, node } => {
                nodes.insert(name.clone(), node.clone());
            }
            GraphChange::IdChanged { name, to, .. } => {
                nodes.get_mut(name).ok_or_else(|| missing(name))?.id = *to;
            }
            GraphChange::PropertiesChanged { name, to, .. } => {
                nodes.get_mut(name).ok_or_else(|| missing(name))?.properties = to.clone();
            }
            GraphChange::StateChanged { name, to, .. } => {
                nodes.get_mut(name).ok_or_else(|| missing(name))?.state = to.clone();
            }
            GraphChange::PlacementChanged { name, to, .. } => {
                nodes.get_mut(name).ok_or_else(|| missing(name))?.object_placing = to.clone();
            }
        }
    }
    SceneGraph::from_parts(room, nodes, vocab)
}
