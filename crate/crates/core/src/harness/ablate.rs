//! Grid expansion for ablations.
//!
//! A grid file is an ordinary experiment config plus a `[grid]` table whose
//! keys are dotted paths into the config and whose values are arrays:
//!
//! ```toml
//! seed = 1
//! [grid]
//! "cascade.enabled" = [false, true]
//! "sampling.constrained" = [false, true]
//! ```
//!
//! Cells are the cartesian product. Axes are taken in key order and the
//! last axis varies fastest.

use toml::{Table, Value};

use super::config::ExperimentConfig;
use super::HarnessError;

#[derive(Debug, Clone, PartialEq)]
pub struct GridCell {
    pub label: String,
    pub config: ExperimentConfig,
}

fn set_path(table: &mut Table, path: &str, value: Value) -> Result<(), HarnessError> {
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(HarnessError::Grid(format!("bad grid key {path:?}")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| HarnessError::Grid(format!("grid key {path:?}: {p:?} is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn show(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Parses a grid file into its cells. Without a `[grid]` table the file is a
/// single cell labelled `base`.
pub fn expand_grid(text: &str) -> Result<Vec<GridCell>, HarnessError> {
    let mut base: Table = text.parse().map_err(|e: toml::de::Error| HarnessError::Config(e.to_string()))?;
    let axes: Vec<(String, Vec<Value>)> = match base.remove("grid") {
        None => Vec::new(),
        Some(Value::Table(t)) => t
            .into_iter()
            .map(|(k, v)| match v {
                Value::Array(vals) if !vals.is_empty() => Ok((k, vals)),
                _ => Err(HarnessError::Grid(format!("grid key {k:?} needs a non-empty array"))),
            })
            .collect::<Result<_, _>>()?,
        Some(_) => return Err(HarnessError::Grid("`grid` must be a table".into())),
    };
    let total: usize = axes.iter().map(|(_, v)| v.len()).product();
    let mut cells = Vec::with_capacity(total);
    for n in 0..total {
        let mut table = base.clone();
        let mut rest = n;
        let mut picks = vec![0; axes.len()];
        for (i, (_, vals)) in axes.iter().enumerate().rev() {
            picks[i] = rest % vals.len();
            rest /= vals.len();
        }
        let mut label = Vec::new();
        for ((key, vals), &p) in axes.iter().zip(&picks) {
            set_path(&mut table, key, vals[p].clone())?;
            label.push(format!("{key}={}", show(&vals[p])));
        }
        let config = ExperimentConfig::from_table(table)
            .map_err(|e| HarnessError::Grid(format!("cell {n} ({}): {e}", label.join(","))))?;
        let label = if label.is_empty() { "base".to_string() } else { label.join(",") };
        cells.push(GridCell { label, config });
    }
    Ok(cells)
}
