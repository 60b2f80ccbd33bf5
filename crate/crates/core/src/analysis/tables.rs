//! Sweep summary tables: rows are superposition ratios, columns bag sizes.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::trainer::{RunConfig, RunOutcome};

#[derive(Debug, Clone, PartialEq)]
pub enum TableCell {
    Value(f64),
    Failed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    /// Column keys, ascending.
    pub s_values: Vec<usize>,
    /// Row keys, ascending.
    pub r_values: Vec<f64>,
    /// `(r, s, cell)` for every run found.
    pub cells: Vec<(f64, usize, TableCell)>,
}

impl SweepTable {
    pub fn get(&self, r: f64, s: usize) -> Option<&TableCell> {
        self.cells
            .iter()
            .find(|(rr, ss, _)| *rr == r && *ss == s)
            .map(|(_, _, c)| c)
    }

    /// Comma-separated table with an `r\s` corner header. Missing cells are
    /// `--`, failed runs `failed`, values have four decimals.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("r\\s");
        for s in &self.s_values {
            out.push_str(&format!(",{s}"));
        }
        out.push('\n');
        for &r in &self.r_values {
            out.push_str(&format!("{r}"));
            for &s in &self.s_values {
                match self.get(r, s) {
                    Some(TableCell::Value(v)) => out.push_str(&format!(",{v:.4}")),
                    Some(TableCell::Failed) => out.push_str(",failed"),
                    None => out.push_str(",--"),
                }
            }
            out.push('\n');
        }
        out
    }
}

fn cell_for(dir: &Path) -> Result<(f64, usize, TableCell)> {
    match RunOutcome::load(dir) {
        Ok(o) => Ok((o.r, o.s, TableCell::Value(o.final_eval_ce))),
        Err(_) => {
            let cfg = RunConfig::load(&dir.join("config.toml")).map_err(|e| {
                Error::Data(format!("{}: neither summary nor config readable: {e}", dir.display()))
            })?;
            let (s, r) = if cfg.tst.is_baseline() {
                (1, 0.0)
            } else {
                (cfg.tst.s, cfg.tst.r)
            };
            Ok((r, s, TableCell::Failed))
        }
    }
}

/// Collect the final held-out CE of each run directory into a table.
pub fn summarize_sweep(dirs: &[PathBuf]) -> Result<SweepTable> {
    let mut cells = Vec::with_capacity(dirs.len());
    for d in dirs {
        let (r, s, c) = cell_for(d)?;
        let r = if s == 1 { 0.0 } else { r };
        cells.push((r, s, c));
    }
    let s_values: BTreeSet<usize> = cells.iter().map(|c| c.1).collect();
    let mut r_values: Vec<f64> = cells.iter().map(|c| c.0).collect();
    r_values.sort_by(f64::total_cmp);
    r_values.dedup();
    Ok(SweepTable {
        s_values: s_values.into_iter().collect(),
        r_values,
        cells,
    })
}
