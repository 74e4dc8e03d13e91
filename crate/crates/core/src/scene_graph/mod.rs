//! Scene graphs in the flattened room → object JSON shape.
//!
//! A document holds exactly one room. Each object carries `id`,
//! `properties`, `state` and `object_placing`, where every placement edge
//! names its destination as a two-element `[name, id]` array:
//!
//! ```json
//! {"living_room": {"tv": {"id": 101, "properties": ["HAS_SWITCH"], "state": ["OFF"],
//!   "object_placing": [{"destination": ["tv_stand", 102], "relation": "ON"}]}}}
//! ```
//!
//! Graphs are immutable values; every mutation returns a new validated graph.

mod diff;
mod vocab;

use std::collections::btree_map::Entry;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::OnceLock;

use serde::de::{Deserializer, MapAccess, Visitor};
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub use diff::{apply_changes, diff_scene_graphs, GraphChange};
pub use vocab::Vocabulary;

pub type ObjectId = u64;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SceneGraphError {
    #[error("malformed JSON: {0}")]
    MalformedJson(String),
    #[error("schema violation at {path}: {reason}")]
    SchemaViolation { path: String, reason: String },
    #[error("object {object:?} is placed relative to ({destination:?}, {destination_id}) which is not in the graph")]
    DanglingEdge {
        object: String,
        destination: String,
        destination_id: ObjectId,
    },
    #[error("id {id} is used by both {first:?} and {second:?}")]
    DuplicateId {
        id: ObjectId,
        first: String,
        second: String,
    },
    #[error("object {object:?} holds conflicting states {a} and {b}")]
    ConflictingStates { object: String, a: String, b: String },
    #[error("object {object:?} has state {state} without property {requires}")]
    UngatedState {
        object: String,
        state: String,
        requires: String,
    },
    #[error("no object with id {0}")]
    UnknownObject(ObjectId),
    #[error("invalid state transition on {object:?}: {reason}")]
    InvalidStateTransition { object: String, reason: String },
}

/// Discriminant of [`SceneGraphError`], handy for asserting error classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SceneGraphErrorKind {
    MalformedJson,
    SchemaViolation,
    DanglingEdge,
    DuplicateId,
    ConflictingStates,
    UngatedState,
    UnknownObject,
    InvalidStateTransition,
}

impl SceneGraphError {
    pub fn kind(&self) -> SceneGraphErrorKind {
        match self {
            Self::MalformedJson(_) => SceneGraphErrorKind::MalformedJson,
            Self::SchemaViolation { .. } => SceneGraphErrorKind::SchemaViolation,
            Self::DanglingEdge { .. } => SceneGraphErrorKind::DanglingEdge,
            Self::DuplicateId { .. } => SceneGraphErrorKind::DuplicateId,
            Self::ConflictingStates { .. } => SceneGraphErrorKind::ConflictingStates,
            Self::UngatedState { .. } => SceneGraphErrorKind::UngatedState,
            Self::UnknownObject(_) => SceneGraphErrorKind::UnknownObject,
            Self::InvalidStateTransition { .. } => SceneGraphErrorKind::InvalidStateTransition,
        }
    }
}

fn schema(path: impl Into<String>, reason: impl Into<String>) -> SceneGraphError {
    SceneGraphError::SchemaViolation {
        path: path.into(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PlacementEdge {
    pub destination_name: String,
    pub destination_id: ObjectId,
    pub relation: String,
}

impl PlacementEdge {
    pub fn new(destination_name: impl Into<String>, destination_id: ObjectId, relation: impl Into<String>) -> Self {
        Self {
            destination_name: destination_name.into(),
            destination_id,
            relation: relation.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ObjectNode {
    pub id: ObjectId,
    pub properties: BTreeSet<String>,
    pub state: BTreeSet<String>,
    pub object_placing: Vec<PlacementEdge>,
}

impl ObjectNode {
    pub fn new(id: ObjectId) -> Self {
        Self {
            id,
            ..Self::default()
        }
    }

    pub fn with_properties<I, S>(mut self, props: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.properties.extend(props.into_iter().map(Into::into));
        self
    }

    pub fn with_state<I, S>(mut self, states: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.state.extend(states.into_iter().map(Into::into));
        self
    }

    pub fn placed(mut self, edge: PlacementEdge) -> Self {
        self.object_placing.push(edge);
        self
    }

    pub fn has_property(&self, prop: &str) -> bool {
        self.properties.contains(prop)
    }

    pub fn has_state(&self, state: &str) -> bool {
        self.state.contains(state)
    }
}

/// A validated single-room scene graph. Object names are kept sorted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SceneGraph {
    room_name: String,
    nodes: BTreeMap<String, ObjectNode>,
}

static DEFAULT_VOCAB: OnceLock<Vocabulary> = OnceLock::new();

pub fn default_vocabulary() -> &'static Vocabulary {
    DEFAULT_VOCAB.get_or_init(Vocabulary::default)
}

impl SceneGraph {
    /// Builds a graph from parts, validating every invariant against `vocab`.
    pub fn from_parts(
        room_name: impl Into<String>,
        nodes: BTreeMap<String, ObjectNode>,
        vocab: &Vocabulary,
    ) -> Result<Self, SceneGraphError> {
        let graph = Self {
            room_name: room_name.into(),
            nodes,
        };
        match graph.violations(vocab).into_iter().next() {
            Some(err) => Err(err),
            None => Ok(graph),
        }
    }

    pub fn empty(room_name: impl Into<String>) -> Self {
        Self {
            room_name: room_name.into(),
            nodes: BTreeMap::new(),
        }
    }

    pub fn room_name(&self) -> &str {
        &self.room_name
    }

    pub fn nodes(&self) -> &BTreeMap<String, ObjectNode> {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, name: &str) -> Option<&ObjectNode> {
        self.nodes.get(name)
    }

    pub fn find_by_id(&self, id: ObjectId) -> Option<(&str, &ObjectNode)> {
        self.nodes
            .iter()
            .find(|(_, n)| n.id == id)
            .map(|(name, n)| (name.as_str(), n))
    }

    pub fn into_parts(self) -> (String, BTreeMap<String, ObjectNode>) {
        (self.room_name, self.nodes)
    }

    /// Every invariant violation in the graph, in a deterministic order.
    pub fn violations(&self, vocab: &Vocabulary) -> Vec<SceneGraphError> {
        validate_parts(&self.room_name, &self.nodes, vocab)
    }

    /// Returns a copy with object `object_id` holding exactly `new_states`,
    /// optionally moved so that `moved_to` becomes its only placement edge.
    pub fn apply_state_change(
        &self,
        object_id: ObjectId,
        new_states: &BTreeSet<String>,
        moved_to: Option<PlacementEdge>,
        vocab: &Vocabulary,
    ) -> Result<SceneGraph, SceneGraphError> {
        let (name, node) = self
            .find_by_id(object_id)
            .ok_or(SceneGraphError::UnknownObject(object_id))?;
        let name = name.to_string();
        let transition = |reason: String| SceneGraphError::InvalidStateTransition {
            object: name.clone(),
            reason,
        };
        for state in new_states {
            if !vocab.accepts_state(state) {
                return Err(transition(format!("unknown state token {state}")));
            }
            if let Some(required) = vocab.gate_for(state) {
                if !node.has_property(required) {
                    return Err(transition(format!("{state} requires property {required}")));
                }
            }
        }
        if let Some((a, b)) = vocab.find_conflict(new_states) {
            return Err(transition(format!("{a} and {b} cannot both hold")));
        }
        let mut updated = node.clone();
        updated.state = new_states.clone();
        if let Some(edge) = moved_to {
            if !vocab.accepts_relation(&edge.relation) {
                return Err(schema(
                    format!("{name}.object_placing"),
                    format!("unknown relation {}", edge.relation),
                ));
            }
            let target_ok = self
                .nodes
                .get(&edge.destination_name)
                .is_some_and(|n| n.id == edge.destination_id);
            if !target_ok || edge.destination_id == object_id {
                return Err(SceneGraphError::DanglingEdge {
                    object: name.clone(),
                    destination: edge.destination_name,
                    destination_id: edge.destination_id,
                });
            }
            updated.object_placing = vec![edge];
        }
        if &updated == node {
            return Ok(self.clone());
        }
        let mut nodes = self.nodes.clone();
        nodes.insert(name, updated);
        SceneGraph::from_parts(self.room_name.clone(), nodes, vocab)
    }
}

fn validate_parts(
    room_name: &str,
    nodes: &BTreeMap<String, ObjectNode>,
    vocab: &Vocabulary,
) -> Vec<SceneGraphError> {
    let mut errors = Vec::new();
    if room_name.is_empty() {
        errors.push(schema("$", "room name is empty"));
    }
    let mut by_id: BTreeMap<ObjectId, &str> = BTreeMap::new();
    for (name, node) in nodes {
        if name.is_empty() {
            errors.push(schema(room_name, "object name is empty"));
        }
        if node.id == 0 {
            errors.push(schema(format!("{name}.id"), "id must be a positive integer"));
        }
        for prop in &node.properties {
            if !vocab.accepts_property(prop) {
                errors.push(schema(format!("{name}.properties"), format!("unknown property token {prop:?}")));
            }
        }
        for state in &node.state {
            if !vocab.accepts_state(state) {
                errors.push(schema(format!("{name}.state"), format!("unknown state token {state:?}")));
            }
        }
        if let Some((a, b)) = vocab.find_conflict(&node.state) {
            errors.push(SceneGraphError::ConflictingStates {
                object: name.clone(),
                a: a.to_string(),
                b: b.to_string(),
            });
        }
        for state in &node.state {
            if let Some(required) = vocab.gate_for(state) {
                if !node.has_property(required) {
                    errors.push(SceneGraphError::UngatedState {
                        object: name.clone(),
                        state: state.clone(),
                        requires: required.to_string(),
                    });
                }
            }
        }
        for edge in &node.object_placing {
            if !vocab.accepts_relation(&edge.relation) {
                errors.push(schema(
                    format!("{name}.object_placing"),
                    format!("unknown relation token {:?}", edge.relation),
                ));
            }
        }
        if node.id != 0 {
            if let Some(first) = by_id.insert(node.id, name) {
                errors.push(SceneGraphError::DuplicateId {
                    id: node.id,
                    first: first.to_string(),
                    second: name.clone(),
                });
            }
        }
    }
    for (name, node) in nodes {
        for edge in &node.object_placing {
            let resolves = nodes
                .get(&edge.destination_name)
                .is_some_and(|dest| dest.id == edge.destination_id);
            if !resolves || edge.destination_name == *name {
                errors.push(SceneGraphError::DanglingEdge {
                    object: name.clone(),
                    destination: edge.destination_name.clone(),
                    destination_id: edge.destination_id,
                });
            }
        }
    }
    errors
}

/// JSON object entries in document order, keeping repeated keys.
struct Entries<T>(Vec<(String, T)>);

impl<'de, T: Deserialize<'de>> Deserialize<'de> for Entries<T> {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct EntriesVisitor<T>(std::marker::PhantomData<T>);

        impl<'de, T: Deserialize<'de>> Visitor<'de> for EntriesVisitor<T> {
            type Value = Entries<T>;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a JSON object")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<Self::Value, A::Error> {
                let mut out = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, T>()? {
                    out.push((k, v));
                }
                Ok(Entries(out))
            }
        }

        deserializer.deserialize_map(EntriesVisitor(std::marker::PhantomData))
    }
}

fn token_set(value: &Value, path: &str) -> Result<BTreeSet<String>, SceneGraphError> {
    let items = value
        .as_array()
        .ok_or_else(|| schema(path, "expected an array of tokens"))?;
    let mut out = BTreeSet::new();
    for item in items {
        let token = item
            .as_str()
            .ok_or_else(|| schema(path, format!("expected a string token, found {item}")))?;
        out.insert(token.to_string());
    }
    Ok(out)
}

fn positive_id(value: &Value, path: &str) -> Result<ObjectId, SceneGraphError> {
    match value.as_u64() {
        Some(id) if id > 0 => Ok(id),
        _ => Err(schema(path, format!("expected a positive integer id, found {value}"))),
    }
}

fn parse_edge(value: &Value, path: &str) -> Result<PlacementEdge, SceneGraphError> {
    let obj = value
        .as_object()
        .ok_or_else(|| schema(path, "placement edge must be an object"))?;
    for key in obj.keys() {
        if key != "destination" && key != "relation" {
            return Err(schema(path, format!("unexpected key {key:?}")));
        }
    }
    let dest = obj
        .get("destination")
        .ok_or_else(|| schema(path, "missing destination"))?;
    let pair = dest
        .as_array()
        .filter(|a| a.len() == 2)
        .ok_or_else(|| schema(format!("{path}.destination"), "expected a [name, id] pair"))?;
    let destination_name = pair[0]
        .as_str()
        .ok_or_else(|| schema(format!("{path}.destination"), "destination name must be a string"))?
        .to_string();
    let destination_id = positive_id(&pair[1], &format!("{path}.destination"))?;
    let relation = obj
        .get("relation")
        .ok_or_else(|| schema(path, "missing relation"))?
        .as_str()
        .ok_or_else(|| schema(format!("{path}.relation"), "relation must be a string"))?
        .to_string();
    Ok(PlacementEdge {
        destination_name,
        destination_id,
        relation,
    })
}

const NODE_KEYS: [&str; 4] = ["id", "properties", "state", "object_placing"];

fn parse_node(name: &str, value: &Value) -> Result<ObjectNode, SceneGraphError> {
    let obj = value
        .as_object()
        .ok_or_else(|| schema(name, "object entry must be a JSON object"))?;
    for key in obj.keys() {
        if !NODE_KEYS.contains(&key.as_str()) {
            return Err(schema(name, format!("unexpected attribute {key:?}")));
        }
    }
    let field = |key: &str| {
        obj.get(key)
            .ok_or_else(|| schema(name, format!("missing attribute {key:?}")))
    };
    let id = positive_id(field("id")?, &format!("{name}.id"))?;
    let properties = token_set(field("properties")?, &format!("{name}.properties"))?;
    let state = token_set(field("state")?, &format!("{name}.state"))?;
    let placing_path = format!("{name}.object_placing");
    let object_placing = field("object_placing")?
        .as_array()
        .ok_or_else(|| schema(&placing_path, "expected an array of placement edges"))?
        .iter()
        .enumerate()
        .map(|(i, e)| parse_edge(e, &format!("{placing_path}[{i}]")))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ObjectNode {
        id,
        properties,
        state,
        object_placing,
    })
}

fn json_error(e: serde_json::Error) -> SceneGraphError {
    use serde_json::error::Category;
    match e.classify() {
        Category::Syntax | Category::Eof | Category::Io => SceneGraphError::MalformedJson(e.to_string()),
        Category::Data => schema("$", e.to_string()),
    }
}

/// Parses and validates a scene-graph document against the default vocabulary.
pub fn parse_scene_graph(text: &str) -> Result<SceneGraph, SceneGraphError> {
    parse_scene_graph_with(text, default_vocabulary())
}

/// Parses and validates a scene-graph document against `vocab`.
pub fn parse_scene_graph_with(text: &str, vocab: &Vocabulary) -> Result<SceneGraph, SceneGraphError> {
    let (room, nodes) = parse_unvalidated(text, vocab)?;
    SceneGraph::from_parts(room, nodes, vocab)
}

/// Parses a document and returns every invariant violation rather than the first.
pub fn validate_document(text: &str, vocab: &Vocabulary) -> Result<Vec<SceneGraphError>, SceneGraphError> {
    let (room, nodes) = parse_unvalidated(text, vocab)?;
    Ok(validate_parts(&room, &nodes, vocab))
}

fn parse_unvalidated(
    text: &str,
    vocab: &Vocabulary,
) -> Result<(String, BTreeMap<String, ObjectNode>), SceneGraphError> {
    let top: Entries<Entries<Value>> = serde_json::from_str(text).map_err(json_error)?;
    let mut rooms = top.0;
    if rooms.len() != 1 {
        return Err(schema("$", format!("expected exactly one room, found {}", rooms.len())));
    }
    let (room, entries) = rooms.remove(0);

    let mut nodes = BTreeMap::new();
    // (original name, id) -> renamed key, for duplicates accepted under allow_duplicate_names
    let mut renamed: BTreeMap<(String, ObjectId), String> = BTreeMap::new();
    for (name, value) in entries.0 {
        let node = parse_node(&name, &value)?;
        let name = match nodes.entry(name) {
            Entry::Vacant(slot) => {
                slot.insert(node);
                continue;
            }
            Entry::Occupied(slot) => slot.key().clone(),
        };
        if !vocab.allow_duplicate_names {
            return Err(schema(room.as_str(), format!("duplicate object name {name:?}")));
        }
        let mut n = 2;
        let key = loop {
            let candidate = format!("{name}_{n}");
            if !nodes.contains_key(&candidate) {
                break candidate;
            }
            n += 1;
        };
        renamed.insert((name, node.id), key.clone());
        nodes.insert(key, node);
    }
    if !renamed.is_empty() {
        for node in nodes.values_mut() {
            for edge in &mut node.object_placing {
                if let Some(key) = renamed.get(&(edge.destination_name.clone(), edge.destination_id)) {
                    edge.destination_name = key.clone();
                }
            }
        }
    }
    Ok((room, nodes))
}

#[derive(Serialize)]
struct EdgeOut<'a> {
    destination: (&'a str, ObjectId),
    relation: &'a str,
}

#[derive(Serialize)]
struct NodeOut<'a> {
    id: ObjectId,
    properties: &'a BTreeSet<String>,
    state: &'a BTreeSet<String>,
    object_placing: Vec<EdgeOut<'a>>,
}

fn document(g: &SceneGraph) -> BTreeMap<&str, BTreeMap<&str, NodeOut<'_>>> {
    let nodes = g
        .nodes
        .iter()
        .map(|(name, n)| {
            let out = NodeOut {
                id: n.id,
                properties: &n.properties,
                state: &n.state,
                object_placing: n
                    .object_placing
                    .iter()
                    .map(|e| EdgeOut {
                        destination: (e.destination_name.as_str(), e.destination_id),
                        relation: e.relation.as_str(),
                    })
                    .collect(),
            };
            (name.as_str(), out)
        })
        .collect();
    BTreeMap::from([(g.room_name.as_str(), nodes)])
}

/// Canonical pretty-printed form: names sorted, attributes in
/// `id, properties, state, object_placing` order, tokens sorted.
pub fn serialize_scene_graph(g: &SceneGraph) -> String {
    serde_json::to_string_pretty(&document(g)).expect("scene graph serialization is infallible")
}

/// Canonical single-line form, same ordering as [`serialize_scene_graph`].
pub fn serialize_scene_graph_compact(g: &SceneGraph) -> String {
    serde_json::to_string(&document(g)).expect("scene graph serialization is infallible")
}

impl fmt::Display for SceneGraph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&serialize_scene_graph(self))
    }
}
