//! Wide report tables: one row per model, Full/Verb/Noun/CS/ED per cell.

use std::collections::BTreeSet;
use std::fmt::Write;

use super::{MatchMode, Means, Report};
use crate::room::RoomType;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportMeta {
    pub embedder: String,
    pub config_hash: String,
    pub match_mode: MatchMode,
}

const METRICS: [&str; 5] = ["Full", "Verb", "Noun", "CS", "ED"];

fn values(m: &Means) -> [f64; 5] {
    [m.full, m.verb, m.noun, m.cs, m.ed]
}

/// Union of cells over all models, ordered by humans then room.
fn columns(reports: &[(String, Report)]) -> Vec<(usize, RoomType)> {
    reports
        .iter()
        .flat_map(|(_, r)| r.cells.iter().map(|c| (c.num_humans, c.room)))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

fn header_comments(meta: &ReportMeta, reports: &[(String, Report)]) -> String {
    let mut out = format!(
        "# embedder: {}\n# config: {}\n# match: {}\n",
        meta.embedder,
        meta.config_hash,
        match meta.match_mode {
            MatchMode::Ordered => "ordered",
            MatchMode::SetBased => "set",
        }
    );
    for (model, r) in reports {
        let counts: Vec<String> = r
            .cells
            .iter()
            .map(|c| format!("{}{}={}", c.room.code(), c.num_humans, c.samples))
            .collect();
        let unparsed: usize = r.cells.iter().map(|c| c.unparsed).sum();
        let _ = writeln!(out, "# samples[{model}]: {} (unparsed {unparsed})", counts.join(" "));
    }
    out
}

pub fn render_csv(reports: &[(String, Report)], meta: &ReportMeta) -> String {
    let cols = columns(reports);
    let mut out = header_comments(meta, reports);
    let mut head = vec!["model".to_string()];
    for (m, room) in &cols {
        head.extend(METRICS.iter().map(|k| format!("{}{m}_{}", room.code(), k.to_lowercase())));
    }
    head.extend(METRICS.iter().map(|k| format!("avg_{}", k.to_lowercase())));
    out.push_str(&head.join(","));
    out.push('\n');
    for (model, r) in reports {
        let mut row = vec![model.clone()];
        for (m, room) in &cols {
            match r.cell(*room, *m) {
                Some(c) => row.extend(values(&c.means).iter().map(|v| format!("{v:.4}"))),
                None => row.extend(std::iter::repeat_n(String::new(), 5)),
            }
        }
        row.extend(values(&r.overall).iter().map(|v| format!("{v:.4}")));
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn render_text(reports: &[(String, Report)], meta: &ReportMeta) -> String {
    let cols = columns(reports);
    let model_w = reports.iter().map(|(m, _)| m.len()).max().unwrap_or(0).max(5);
    let group_w = METRICS.len() * 7 - 1;
    let mut out = header_comments(meta, reports);

    let mut groups = format!("{:model_w$}", "");
    let mut names = format!("{:model_w$}", "Model");
    let labels = cols
        .iter()
        .map(|(m, room)| format!("{m} human{} / {room}", if *m == 1 { "" } else { "s" }))
        .chain(std::iter::once("Average".to_string()));
    for label in labels {
        let _ = write!(groups, " | {label:^group_w$}");
        names.push_str(" |");
        for k in METRICS {
            let _ = write!(names, " {k:>6}");
        }
    }
    let rule = "-".repeat(names.len());
    let _ = writeln!(out, "{groups}\n{names}\n{rule}");
    for (model, r) in reports {
        let _ = write!(out, "{model:model_w$}");
        let cells = cols
            .iter()
            .map(|(m, room)| r.cell(*room, *m).map(|c| c.means))
            .chain(std::iter::once(Some(r.overall)));
        for cell in cells {
            out.push_str(" |");
            match cell {
                Some(means) => values(&means).iter().for_each(|v| {
                    let _ = write!(out, " {v:>6.3}");
                }),
                None => out.push_str(&format!(" {:>6}", "-").repeat(5)),
            }
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::Cell;

    fn report(full: f64) -> Report {
        let means = Means {
            full,
            verb: 1.0,
            noun: 1.0,
            cs: 1.0,
            ed: 0.0,
        };
        Report {
            cells: vec![
                Cell {
                    room: RoomType::Kitchen,
                    num_humans: 2,
                    samples: 3,
                    unparsed: 0,
                    means,
                },
                Cell {
                    room: RoomType::Bedroom,
                    num_humans: 1,
                    samples: 2,
                    unparsed: 1,
                    means,
                },
            ],
            overall: means,
        }
    }

    fn meta() -> ReportMeta {
        ReportMeta {
            embedder: "char-trigram-count".into(),
            config_hash: "abc123".into(),
            match_mode: MatchMode::Ordered,
        }
    }

    #[test]
    fn csv_layout() {
        let csv = render_csv(&[("oracle".into(), report(1.0))], &meta());
        let lines: Vec<&str> = csv.lines().filter(|l| !l.starts_with('#')).collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[0].starts_with("model,B1_full,B1_verb,B1_noun,B1_cs,B1_ed,K2_full"));
        assert!(lines[0].ends_with("avg_full,avg_verb,avg_noun,avg_cs,avg_ed"));
        assert_eq!(lines[1].split(',').count(), lines[0].split(',').count());
        assert!(csv.contains("# embedder: char-trigram-count"));
        assert!(csv.contains("# samples[oracle]: K2=3 B1=2 (unparsed 1)"));
    }

    #[test]
    fn text_rows_align() {
        let text = render_text(&[("oracle".into(), report(1.0)), ("mock-scrambler".into(), report(0.25))], &meta());
        let table: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
        let width = table[1].len();
        assert!(table[3..].iter().all(|l| l.len() == width));
        assert!(table[4].contains(" 0.250"));
    }
}
