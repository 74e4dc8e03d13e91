//! Lenient parser and canonical emitter for model-output prediction grids.
//!
//! Accepted language (see `docs/grammar.md` for the full EBNF):
//!
//! ```text
//! output  = [ fence ] { noise } value { [","] value } [ fence ]
//! value   = list | tuple | atom
//! list    = "[" [ value { "," value } [","] ] [ "]" ]
//! tuple   = "(" [ value { "," value } [","] ] [ ")" ]
//! atom    = quoted | bare
//! ```
//!
//! A label is a tuple (or a three-element list) of `h_id, verb, noun`, or a
//! two-element tuple `verb, noun` whose id is taken from the row position.
//! Lists that directly contain labels are rows. Labels outside any row are
//! grouped into rows by id.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{BehaviorLabel, LabelError, PredictionGrid};

/// Repairs applied while parsing; reported alongside the grid.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "flag", rename_all = "snake_case")]
pub enum ParseFlag {
    PaddedRow { h_id: u32, missing: usize },
    TruncatedRow { h_id: u32, extra: usize },
    ReassignedHumanId { row: usize, h_id: u32 },
    MissingHumanId { row: usize, h_id: u32 },
    DroppedLabel { row: usize },
    DuplicateHumanRow { h_id: u32 },
}

impl ParseFlag {
    pub fn name(&self) -> &'static str {
        match self {
            Self::PaddedRow { .. } => "padded_row",
            Self::TruncatedRow { .. } => "truncated_row",
            Self::ReassignedHumanId { .. } => "reassigned_human_id",
            Self::MissingHumanId { .. } => "missing_human_id",
            Self::DroppedLabel { .. } => "dropped_label",
            Self::DuplicateHumanRow { .. } => "duplicate_human_row",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedPrediction {
    pub grid: PredictionGrid,
    pub flags: Vec<ParseFlag>,
}

/// Canonical single-line text: `[[(0, grab, cup), (0, open, fridge)], [(1, ...)]]`.
pub fn emit_prediction(grid: &PredictionGrid) -> String {
    let rows: Vec<String> = grid
        .rows()
        .iter()
        .map(|row| {
            let labels: Vec<String> = row.iter().map(ToString::to_string).collect();
            format!("[{}]", labels.join(", "))
        })
        .collect();
    format!("[{}]", rows.join(", "))
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Open(char),
    Close(char),
    Comma,
    Atom(String),
}

fn strip_fences(text: &str) -> &str {
    let Some(start) = text.find("```") else {
        return text;
    };
    let after = &text[start + 3..];
    // skip an info string such as ```python
    let body_start = match after.find('\n') {
        Some(nl) if !after[..nl].contains(['[', '(']) => nl + 1,
        _ => 0,
    };
    let body = &after[body_start..];
    match body.find("```") {
        Some(end) => &body[..end],
        None => body,
    }
}

fn tokenize(text: &str) -> Vec<Token> {
    let mut tokens = Vec::new();
    let mut chars = text.chars().peekable();
    let mut bare = String::new();
    let flush = |bare: &mut String, tokens: &mut Vec<Token>| {
        let t = bare.trim();
        if !t.is_empty() {
            tokens.push(Token::Atom(t.to_string()));
        }
        bare.clear();
    };
    while let Some(c) = chars.next() {
        match c {
            '[' | '(' => {
                flush(&mut bare, &mut tokens);
                tokens.push(Token::Open(c));
            }
            ']' | ')' => {
                flush(&mut bare, &mut tokens);
                tokens.push(Token::Close(c));
            }
            ',' => {
                flush(&mut bare, &mut tokens);
                tokens.push(Token::Comma);
            }
            '"' | '\'' | '`' | '\u{201c}' | '\u{2018}' if bare.trim().is_empty() => {
                bare.clear();
                let closer = match c {
                    '\u{201c}' => '\u{201d}',
                    '\u{2018}' => '\u{2019}',
                    _ => c,
                };
                let mut quoted = String::new();
                while let Some(q) = chars.next() {
                    if q == '\\' {
                        if let Some(esc) = chars.next() {
                            quoted.push(esc);
                        }
                    } else if q == closer {
                        break;
                    } else {
                        quoted.push(q);
                    }
                }
                tokens.push(Token::Atom(quoted));
            }
            _ => bare.push(c),
        }
    }
    flush(&mut bare, &mut tokens);
    tokens
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    List(Vec<Node>),
    Tuple(Vec<Node>),
    Atom(String),
}

struct TreeParser {
    tokens: Vec<Token>,
    pos: usize,
}

impl TreeParser {
    /// Values up to the matching close (or end of input); commas are separators only.
    fn sequence(&mut self, close: Option<char>) -> Vec<Node> {
        let mut items = Vec::new();
        while let Some(tok) = self.tokens.get(self.pos).cloned() {
            self.pos += 1;
            match tok {
                Token::Open(c) => {
                    let expected = if c == '[' { ']' } else { ')' };
                    let inner = self.sequence(Some(expected));
                    items.push(if c == '[' { Node::List(inner) } else { Node::Tuple(inner) });
                }
                // a mismatched closer still ends the innermost open group
                Token::Close(_) if close.is_some() => return items,
                Token::Close(_) => {}
                Token::Comma => {}
                Token::Atom(a) => items.push(Node::Atom(a)),
            }
        }
        items
    }
}

#[derive(Debug, Clone)]
struct RawLabel {
    h_id: Option<u32>,
    verb: String,
    noun: String,
}

fn parse_human_id(atom: &str) -> Option<u32> {
    let t = atom.trim().to_ascii_lowercase();
    let digits = ["human", "person", "char", "h"]
        .iter()
        .find_map(|p| t.strip_prefix(p))
        .unwrap_or(&t)
        .trim_start_matches(['_', ' ', '#']);
    if digits.is_empty() || !digits.chars().all(|c| c.is_ascii_digit()) {
        return None;
    }
    digits.parse().ok()
}

fn atoms(items: &[Node]) -> Option<Vec<&str>> {
    items
        .iter()
        .map(|n| match n {
            Node::Atom(a) => Some(a.as_str()),
            _ => None,
        })
        .collect()
}

enum LabelShape {
    Label(RawLabel),
    Broken,
    NotALabel,
}

fn label_shape(node: &Node) -> LabelShape {
    match node {
        Node::Tuple(items) => match atoms(items) {
            Some(a) if a.len() == 3 => match parse_human_id(a[0]) {
                Some(id) => LabelShape::Label(RawLabel {
                    h_id: Some(id),
                    verb: a[1].into(),
                    noun: a[2].into(),
                }),
                None => LabelShape::Broken,
            },
            Some(a) if a.len() == 2 => LabelShape::Label(RawLabel {
                h_id: None,
                verb: a[0].into(),
                noun: a[1].into(),
            }),
            _ => LabelShape::Broken,
        },
        Node::List(items) => match atoms(items) {
            Some(a) if a.len() == 3 => match parse_human_id(a[0]) {
                Some(id) => LabelShape::Label(RawLabel {
                    h_id: Some(id),
                    verb: a[1].into(),
                    noun: a[2].into(),
                }),
                None => LabelShape::NotALabel,
            },
            _ => LabelShape::NotALabel,
        },
        Node::Atom(_) => LabelShape::NotALabel,
    }
}

#[derive(Default)]
struct RawRow {
    labels: Vec<RawLabel>,
    dropped: usize,
}

fn collect(node: &Node, rows: &mut Vec<RawRow>, loose: &mut Vec<RawLabel>, loose_dropped: &mut usize) {
    match label_shape(node) {
        LabelShape::Label(l) => return loose.push(l),
        LabelShape::Broken => {
            *loose_dropped += 1;
            return;
        }
        LabelShape::NotALabel => {}
    }
    let Node::List(children) = node else { return };
    let mut row = RawRow::default();
    let mut nested = Vec::new();
    for child in children {
        match label_shape(child) {
            LabelShape::Label(l) => row.labels.push(l),
            LabelShape::Broken => row.dropped += 1,
            LabelShape::NotALabel => nested.push(child),
        }
    }
    if !row.labels.is_empty() || row.dropped > 0 {
        rows.push(row);
    }
    for child in nested {
        collect(child, rows, loose, loose_dropped);
    }
}

fn majority(ids: &[u32]) -> Option<u32> {
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for id in ids {
        *counts.entry(*id).or_default() += 1;
    }
    let best = counts.values().copied().max()?;
    let mut winners = counts.iter().filter(|(_, &c)| c == best);
    let (id, _) = winners.next()?;
    if winners.next().is_some() {
        None
    } else {
        Some(*id)
    }
}

fn structure(text: &str) -> (Vec<RawRow>, usize) {
    let body = strip_fences(text);
    let mut parser = TreeParser {
        tokens: tokenize(body),
        pos: 0,
    };
    let top = parser.sequence(None);
    let mut rows = Vec::new();
    let mut loose = Vec::new();
    let mut loose_dropped = 0;
    for node in &top {
        collect(node, &mut rows, &mut loose, &mut loose_dropped);
    }
    if !loose.is_empty() {
        let mut grouped: Vec<(u32, RawRow)> = Vec::new();
        for l in loose {
            let id = l.h_id.unwrap_or(0);
            match grouped.iter_mut().find(|(g, _)| *g == id) {
                Some((_, row)) => row.labels.push(l),
                None => grouped.push((
                    id,
                    RawRow {
                        labels: vec![l],
                        dropped: 0,
                    },
                )),
            }
        }
        rows.extend(grouped.into_iter().map(|(_, r)| r));
    }
    (rows, loose_dropped)
}

/// Number of labels in the first recoverable row, if any.
pub(super) fn raw_row_length(text: &str) -> Option<usize> {
    structure(text).0.first().map(|r| r.labels.len()).filter(|&n| n > 0)
}

/// Leniently parses model output into a grid with `expected_horizon` columns.
///
/// Short rows are padded with the `none/none` sentinel and long rows are
/// truncated; each repair is reported as a [`ParseFlag`].
pub fn parse_prediction(text: &str, expected_horizon: usize) -> Result<ParsedPrediction, LabelError> {
    if expected_horizon == 0 {
        return Err(LabelError::ZeroHorizon);
    }
    let (raw_rows, loose_dropped) = structure(text);
    let mut flags = Vec::new();
    if loose_dropped > 0 {
        flags.push(ParseFlag::DroppedLabel { row: 0 });
    }
    let mut rows: Vec<Vec<BehaviorLabel>> = Vec::new();
    let mut seen = BTreeSet::new();
    let mut index = 0usize;
    for raw in raw_rows {
        if raw.labels.is_empty() {
            flags.push(ParseFlag::DroppedLabel { row: index });
            continue;
        }
        let row_index = index;
        index += 1;
        let explicit: Vec<u32> = raw.labels.iter().filter_map(|l| l.h_id).collect();
        let h_id = if explicit.is_empty() {
            let id = row_index as u32;
            flags.push(ParseFlag::MissingHumanId { row: row_index, h_id: id });
            id
        } else {
            let id = majority(&explicit).ok_or(LabelError::InconsistentHumanId { row: row_index })?;
            if explicit.len() != raw.labels.len() || explicit.iter().any(|&e| e != id) {
                flags.push(ParseFlag::ReassignedHumanId { row: row_index, h_id: id });
            }
            id
        };
        let mut labels = Vec::with_capacity(expected_horizon);
        let mut dropped = raw.dropped;
        for l in &raw.labels {
            match BehaviorLabel::new(h_id, &l.verb, &l.noun) {
                Ok(label) => labels.push(label),
                Err(_) => dropped += 1,
            }
        }
        if dropped > 0 {
            flags.push(ParseFlag::DroppedLabel { row: row_index });
        }
        if !seen.insert(h_id) {
            flags.push(ParseFlag::DuplicateHumanRow { h_id });
            continue;
        }
        if labels.len() < expected_horizon {
            flags.push(ParseFlag::PaddedRow {
                h_id,
                missing: expected_horizon - labels.len(),
            });
            labels.resize(expected_horizon, BehaviorLabel::sentinel(h_id));
        } else if labels.len() > expected_horizon {
            flags.push(ParseFlag::TruncatedRow {
                h_id,
                extra: labels.len() - expected_horizon,
            });
            labels.truncate(expected_horizon);
        }
        rows.push(labels);
    }
    if rows.is_empty() {
        return Err(LabelError::Unparseable);
    }
    let grid = PredictionGrid::new(rows, expected_horizon)?;
    Ok(ParsedPrediction { grid, flags })
}
