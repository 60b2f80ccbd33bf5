//! Grid sweeps over bag size and superposition ratio.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use super::{run_with_corpora, RunConfig, RunOutcome};
use crate::analysis::{summarize_sweep, SweepTable};
use crate::data::Corpus;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub s: Vec<usize>,
    pub r: Vec<f64>,
    /// Give every cell a different seed instead of sharing the template's.
    #[serde(default)]
    pub independent_seeds: bool,
}

impl SweepGrid {
    /// Distinct `(s, r)` cells; every baseline-equivalent cell (`s = 1` or
    /// `r = 0`) collapses into a single `(1, 0)` run.
    pub fn cells(&self) -> Vec<(usize, f64)> {
        let mut out: Vec<(usize, f64)> = Vec::new();
        for &r in &self.r {
            for &s in &self.s {
                let cell = if s == 1 || r == 0.0 { (1, 0.0) } else { (s, r) };
                if !out.contains(&cell) {
                    out.push(cell);
                }
            }
        }
        out
    }
}

/// Directory name of a cell, e.g. `s2_r0.3`.
pub fn cell_dir_name(s: usize, r: f64) -> String {
    format!("s{s}_r{r}")
}

#[derive(Debug, Clone)]
pub struct SweepCell {
    pub s: usize,
    pub r: f64,
    pub dir: PathBuf,
    pub result: std::result::Result<RunOutcome, String>,
}

#[derive(Debug, Clone)]
pub struct SweepReport {
    pub cells: Vec<SweepCell>,
    pub table: SweepTable,
    /// Path of the CSV summary.
    pub table_path: PathBuf,
}

/// Run every cell of `grid` with `jobs` worker threads and write
/// `summary.csv` under `out`. A failing cell is recorded and the sweep
/// carries on.
pub fn run_sweep(
    grid: &SweepGrid,
    template: &RunConfig,
    train: Arc<Corpus>,
    holdout: Arc<Corpus>,
    out: &Path,
    jobs: usize,
) -> Result<SweepReport> {
    let cells = grid.cells();
    if cells.is_empty() {
        return Err(Error::Config("sweep grid is empty".into()));
    }
    std::fs::create_dir_all(out)?;
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<SweepCell>>> = Mutex::new(vec![None; cells.len()]);
    let worker = || loop {
        let i = next.fetch_add(1, Ordering::Relaxed);
        let Some(&(s, r)) = cells.get(i) else { break };
        let mut cfg = template.clone();
        cfg.tst.s = s;
        cfg.tst.r = r;
        if grid.independent_seeds {
            cfg.plan.seed = template.plan.seed.wrapping_add(i as u64);
            cfg.model.init_seed = template.model.init_seed.wrapping_add(i as u64);
        }
        let dir = out.join(cell_dir_name(s, r));
        let result = run_with_corpora(&cfg, train.clone(), holdout.clone(), &dir).map_err(|e| e.to_string());
        results.lock().expect("no panics while locked")[i] = Some(SweepCell { s, r, dir, result });
    };
    let jobs = jobs.clamp(1, cells.len());
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(worker);
        }
    });
    let cells: Vec<SweepCell> = results
        .into_inner()
        .expect("workers finished")
        .into_iter()
        .map(|c| c.expect("every cell visited"))
        .collect();
    let dirs: Vec<PathBuf> = cells.iter().map(|c| c.dir.clone()).collect();
    let table = summarize_sweep(&dirs)?;
    let table_path = out.join("summary.csv");
    std::fs::write(&table_path, table.to_csv())?;
    Ok(SweepReport {
        cells,
        table,
        table_path,
    })
}
