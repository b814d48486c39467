//! Parallel execution of sweep cells with ordered, incremental output.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::mpsc;

use letf::harness::{run_experiment, ScoreReport};
use rayon::prelude::*;

use crate::config::Cell;

pub fn run_cell(cell: &Cell) -> Result<ScoreReport, String> {
    match catch_unwind(AssertUnwindSafe(|| run_experiment(&cell.experiment))) {
        Ok(Ok(report)) => Ok(report),
        Ok(Err(e)) => Err(e.to_string()),
        Err(panic) => Err(panic
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
            .map_or_else(|| "experiment panicked".into(), |m| format!("experiment panicked: {m}"))),
    }
}

/// Runs every cell on a pool of `workers` threads and hands results to
/// `sink` in cell order as soon as each prefix is complete, so partial
/// results survive a later failure.
pub fn run_cells<F>(cells: &[Cell], workers: usize, mut sink: F) -> Result<(), String>
where
    F: FnMut(&Cell, Result<ScoreReport, String>) -> Result<(), String>,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| e.to_string())?;
    let (tx, rx) = mpsc::channel();
    std::thread::scope(|scope| {
        scope.spawn(move || {
            pool.install(|| {
                cells.par_iter().for_each_with(tx, |tx, cell| {
                    // The receiver only disappears after a sink error.
                    let _ = tx.send((cell.index, run_cell(cell)));
                });
            });
        });
        let mut pending = BTreeMap::new();
        let mut next = 0;
        for (index, outcome) in rx {
            pending.insert(index, outcome);
            while let Some(outcome) = pending.remove(&next) {
                sink(&cells[next], outcome)?;
                next += 1;
            }
        }
        Ok(())
    })
}
