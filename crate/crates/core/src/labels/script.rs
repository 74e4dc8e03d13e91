//! Simulator action scripts: `<char0> [grab] <remote_control> (103)`, one per line.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::{BehaviorLabel, LabelError};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ScriptLine {
    pub char_id: u32,
    pub action: String,
    pub object_name: String,
    pub object_id: u64,
}

impl ScriptLine {
    pub fn new(char_id: u32, action: impl Into<String>, object_name: impl Into<String>, object_id: u64) -> Self {
        Self {
            char_id,
            action: action.into(),
            object_name: object_name.into(),
            object_id,
        }
    }

    pub fn to_label(&self) -> Result<BehaviorLabel, LabelError> {
        BehaviorLabel::new(self.char_id, &self.action, &self.object_name)
    }
}

impl fmt::Display for ScriptLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "<char{}> [{}] <{}> ({})",
            self.char_id, self.action, self.object_name, self.object_id
        )
    }
}

struct Cursor<'a> {
    rest: &'a str,
}

impl<'a> Cursor<'a> {
    fn skip_ws(&mut self) {
        self.rest = self.rest.trim_start();
    }

    fn eat(&mut self, prefix: &str) -> bool {
        self.skip_ws();
        match self.rest.strip_prefix(prefix) {
            Some(r) => {
                self.rest = r;
                true
            }
            None => false,
        }
    }

    /// Text up to `close`, which must be present and non-empty without whitespace.
    fn until(&mut self, close: char) -> Option<&'a str> {
        let end = self.rest.find(close)?;
        let inner = self.rest[..end].trim();
        if inner.is_empty() || inner.contains(char::is_whitespace) {
            return None;
        }
        self.rest = &self.rest[end + close.len_utf8()..];
        Some(inner)
    }
}

fn parse_line(line: &str) -> Result<ScriptLine, String> {
    let mut c = Cursor { rest: line };
    if !c.eat("<char") {
        return Err("missing <charN> actor prefix".into());
    }
    let char_id = c
        .until('>')
        .and_then(|d| d.parse::<u32>().ok())
        .ok_or("actor id must be <charN> with a non-negative integer N")?;
    if !c.eat("[") {
        return Err("missing brackets around action".into());
    }
    let action = c.until(']').ok_or("missing brackets around action")?.to_string();
    if !c.eat("<") {
        return Err("missing <object> name".into());
    }
    let object_name = c.until('>').ok_or("object name must be a single token inside <>")?.to_string();
    if !c.eat("(") {
        return Err("missing (object_id)".into());
    }
    let object_id = c
        .until(')')
        .and_then(|d| d.parse::<u64>().ok())
        .filter(|&id| id > 0)
        .ok_or("object id must be a positive integer")?;
    c.skip_ws();
    if !c.rest.is_empty() {
        return Err(format!("unexpected trailing text {:?}", c.rest));
    }
    Ok(ScriptLine {
        char_id,
        action,
        object_name,
        object_id,
    })
}

/// Parses one script line per non-blank input line.
pub fn parse_script(text: &str) -> Result<Vec<ScriptLine>, LabelError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_line(l).map_err(|reason| LabelError::ScriptSyntax { line: i + 1, reason }))
        .collect()
}

pub fn emit_script(lines: &[ScriptLine]) -> String {
    lines.iter().map(|l| format!("{l}\n")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_reference_line() {
        let lines = parse_script("<char0> [grab] <remote_control> (103)").unwrap();
        assert_eq!(lines, vec![ScriptLine::new(0, "grab", "remote_control", 103)]);
    }

    #[test]
    fn empty_script() {
        assert_eq!(parse_script("").unwrap(), vec![]);
        assert_eq!(parse_script("\n  \n").unwrap(), vec![]);
    }

    #[test]
    fn missing_brackets() {
        match parse_script("<char0> grab remote") {
            Err(LabelError::ScriptSyntax { line, reason }) => {
                assert_eq!(line, 1);
                assert!(reason.contains("missing brackets"), "{reason}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn reports_line_numbers_past_blanks() {
        let text = "<char0> [walk] <sofa> (104)\n\n<char1> [sit] <sofa>\n";
        match parse_script(text) {
            Err(LabelError::ScriptSyntax { line, reason }) => {
                assert_eq!(line, 3);
                assert!(reason.contains("object_id"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn emit_normalizes_whitespace() {
        let text = "  <char1>   [switchon]  <tv>   (101)  \n<char0> [grab] <cup> (7)";
        let lines = parse_script(text).unwrap();
        let emitted = emit_script(&lines);
        assert_eq!(emitted, "<char1> [switchon] <tv> (101)\n<char0> [grab] <cup> (7)\n");
        assert_eq!(parse_script(&emitted).unwrap(), lines);
    }

    #[test]
    fn rejects_bad_ids() {
        assert!(parse_script("<char0> [grab] <cup> (0)").is_err());
        assert!(parse_script("<charX> [grab] <cup> (3)").is_err());
        assert!(parse_script("<char0> [grab] <cup> (3) extra").is_err());
        assert!(parse_script("<char0> [] <cup> (3)").is_err());
    }
}
