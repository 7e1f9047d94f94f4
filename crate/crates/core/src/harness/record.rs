//! Run records and the combined metrics table.
//!
//! A record is plain `key = value` text:
//!
//! ```text
//! format = crpn-run/1
//! tool_version = 0.1.0
//! label = cascade.enabled=true
//! config_hash = 0123456789abcdef
//! wall_time_ms = 812
//! proposal_budget = 300
//! recall@0.50 = 0.93
//! ...
//! ```

use std::fmt::Write as _;

use crate::eval::EvalReport;

use super::HarnessError;

pub const RECORD_FORMAT: &str = "crpn-run/1";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Metric rows of the table, in order: (name, report accessor).
pub const METRICS: [(&str, fn(&EvalReport) -> Option<f64>); 5] = [
    ("Recall@0.5", |r| r.recall(0.5)),
    ("Recall@0.7", |r| r.recall(0.7)),
    ("AR", |r| Some(r.average_recall)),
    ("mAP@0.5", |r| r.map(0.5)),
    ("mAP@0.7", |r| r.map(0.7)),
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub label: String,
    pub config_hash: String,
    pub wall_time_ms: u64,
    pub tool_version: String,
    pub report: EvalReport,
}

impl RunRecord {
    pub fn new(label: &str, config_hash: &str, wall_time_ms: u64, report: EvalReport) -> Self {
        Self {
            label: label.to_string(),
            config_hash: config_hash.to_string(),
            wall_time_ms,
            tool_version: TOOL_VERSION.to_string(),
            report,
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "format = {RECORD_FORMAT}");
        let _ = writeln!(out, "tool_version = {}", self.tool_version);
        let _ = writeln!(out, "label = {}", self.label);
        let _ = writeln!(out, "config_hash = {}", self.config_hash);
        let _ = writeln!(out, "wall_time_ms = {}", self.wall_time_ms);
        for line in self.report.to_kv_lines() {
            let _ = writeln!(out, "{line}");
        }
        out
    }

    /// Parses a record, refusing other formats and tool versions.
    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        let mut format = None;
        let mut rec = RunRecord::new("", "", 0, EvalReport::default());
        rec.tool_version.clear();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            if raw.trim().is_empty() {
                continue;
            }
            let (key, value) = raw.split_once(" = ").ok_or_else(|| HarnessError::Record {
                line,
                message: format!("expected `key = value`, got {raw:?}"),
            })?;
            match key {
                "format" => format = Some(value.to_string()),
                "tool_version" => rec.tool_version = value.to_string(),
                "label" => rec.label = value.to_string(),
                "config_hash" => rec.config_hash = value.to_string(),
                "wall_time_ms" => {
                    rec.wall_time_ms = value.parse().map_err(|e| HarnessError::Record {
                        line,
                        message: format!("wall_time_ms: {e}"),
                    })?
                }
                _ => {
                    if !rec.report.apply_kv(key, value, line)? {
                        return Err(HarnessError::Record {
                            line,
                            message: format!("unknown key {key:?}"),
                        });
                    }
                }
            }
        }
        match format.as_deref() {
            Some(RECORD_FORMAT) => {}
            Some(other) => {
                return Err(HarnessError::VersionMismatch(format!(
                    "record format {other:?}, expected {RECORD_FORMAT:?}"
                )))
            }
            None => {
                return Err(HarnessError::Record {
                    line: 1,
                    message: "missing format line".into(),
                })
            }
        }
        if rec.tool_version != TOOL_VERSION {
            return Err(HarnessError::VersionMismatch(format!(
                "record written by version {}, this is {TOOL_VERSION}",
                rec.tool_version
            )));
        }
        Ok(rec)
    }
}

/// Exact CSV: one row per metric, one column per record. Missing values
/// (no class with ground truth) are empty cells.
pub fn render_csv(records: &[RunRecord]) -> String {
    let mut out = String::from("metric");
    for r in records {
        out.push(',');
        out.push_str(&csv_field(&r.label));
    }
    out.push('\n');
    for (name, get) in METRICS {
        out.push_str(name);
        for r in records {
            out.push(',');
            if let Some(v) = get(&r.report) {
                let _ = write!(out, "{v:?}");
            }
        }
        out.push('\n');
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Aligned text table with values in percent, one decimal.
pub fn render_text(records: &[RunRecord]) -> String {
    let mut cells: Vec<Vec<String>> = Vec::new();
    let mut header = vec![String::from("metric")];
    header.extend(records.iter().map(|r| r.label.clone()));
    cells.push(header);
    for (name, get) in METRICS {
        let mut row = vec![name.to_string()];
        row.extend(records.iter().map(|r| match get(&r.report) {
            Some(v) => format!("{:.1}", 100.0 * v),
            None => "-".to_string(),
        }));
        cells.push(row);
    }
    let widths: Vec<usize> = (0..cells[0].len())
        .map(|c| cells.iter().map(|row| row[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in &cells {
        let line: Vec<String> = row
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (cell, w))| if i == 0 { format!("{cell:<w$}") } else { format!("{cell:>w$}") })
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::IouKey;

    fn record(label: &str) -> RunRecord {
        let mut r = EvalReport {
            proposal_budget: 300,
            average_recall: 0.61,
            ..EvalReport::default()
        };
        r.recall_at.insert(IouKey(50), 0.9);
        r.recall_at.insert(IouKey(70), 0.7);
        r.map_at.insert(IouKey(50), 0.55);
        RunRecord::new(label, "abcd", 12, r)
    }

    #[test]
    fn text_round_trip() {
        let r = record("base");
        assert_eq!(RunRecord::parse(&r.to_text()).unwrap(), r);
    }

    #[test]
    fn foreign_versions_are_refused() {
        let text = record("x").to_text();
        let old = text.replace(&format!("tool_version = {TOOL_VERSION}"), "tool_version = 0.0.1");
        assert!(matches!(RunRecord::parse(&old), Err(HarnessError::VersionMismatch(_))));
        let other = text.replace(RECORD_FORMAT, "crpn-run/0");
        assert!(matches!(RunRecord::parse(&other), Err(HarnessError::VersionMismatch(_))));
        assert!(RunRecord::parse("label = x\n").is_err());
        assert!(RunRecord::parse(&format!("{text}bogus = 1\n")).is_err());
    }

    #[test]
    fn single_record_table_has_one_column() {
        let csv = render_csv(&[record("only")]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "metric,only");
        assert_eq!(lines[1], "Recall@0.5,0.9");
        assert_eq!(lines[5], "mAP@0.7,");
        assert_eq!(lines.len(), 6);
        let text = render_text(&[record("only")]);
        assert!(text.lines().nth(3).unwrap().ends_with("61.0"));
        assert!(csv_field("a,b") == "\"a,b\"");
    }
}
