//! Resumable architecture sweep.
//!
//! Each completed spec appends one JSON line holding all of its rows. On
//! restart the journal is replayed and only missing specs are trained. A
//! torn final line (the process died mid-write) is discarded; damage
//! anywhere else is reported with its line number.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Mutex;

use celmseg_core::archsearch::{evaluate_spec, QualityBand, SweepReport, SweepRow};
use celmseg_core::celm::TimingProfile;
use celmseg_core::datagen::Sample;
use celmseg_core::encoder::{ArchSpec, InputShape};
use celmseg_core::exec::{Clock, ShardRunner};
use serde::{Deserialize, Serialize};

use crate::error::{AppError, AppResult};

/// JSON cannot carry NaN, which marks failed rows; those become `null`.
#[derive(Serialize, Deserialize)]
struct StoredRow {
    c: f64,
    val_error_mean: Option<f64>,
    val_error_std: Option<f64>,
    train_seconds: f64,
    timing: TimingProfile,
    parameter_count: usize,
    failure: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct JournalEntry {
    spec_index: usize,
    spec: ArchSpec,
    rows: Vec<StoredRow>,
}

fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

impl JournalEntry {
    fn new(spec_index: usize, spec: ArchSpec, rows: &[SweepRow]) -> Self {
        let rows = rows
            .iter()
            .map(|r| StoredRow {
                c: r.c,
                val_error_mean: finite(r.val_error_mean),
                val_error_std: finite(r.val_error_std),
                train_seconds: r.train_seconds,
                timing: r.timing,
                parameter_count: r.parameter_count,
                failure: r.failure.clone(),
            })
            .collect();
        Self { spec_index, spec, rows }
    }

    fn into_rows(self) -> Vec<SweepRow> {
        let (spec_index, spec) = (self.spec_index, self.spec);
        self.rows
            .into_iter()
            .map(|r| SweepRow {
                spec_index,
                spec,
                c: r.c,
                val_error_mean: r.val_error_mean.unwrap_or(f64::NAN),
                val_error_std: r.val_error_std.unwrap_or(f64::NAN),
                train_seconds: r.train_seconds,
                timing: r.timing,
                parameter_count: r.parameter_count,
                failure: r.failure,
                quality_band: None::<QualityBand>,
            })
            .collect()
    }
}

/// Rows already journaled, keyed by spec index. Truncates a torn tail so
/// later appends start on a fresh line.
fn replay(path: &Path, grid: &[ArchSpec]) -> AppResult<Vec<Option<Vec<SweepRow>>>> {
    let mut done: Vec<Option<Vec<SweepRow>>> = vec![None; grid.len()];
    if !path.exists() {
        return Ok(done);
    }
    let f = File::open(path).map_err(|e| AppError::io(path, e))?;
    let lines: Vec<String> = BufReader::new(f).lines().collect::<Result<_, _>>().map_err(|e| AppError::io(path, e))?;
    let mut keep = 0usize;
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            keep += line.len() + 1;
            continue;
        }
        let entry: JournalEntry = match serde_json::from_str(line) {
            Ok(e) => e,
            Err(_) if i + 1 == lines.len() => break,
            Err(e) => {
                return Err(AppError::Parse { path: path.into(), line: i + 1, column: e.column(), message: e.to_string() })
            }
        };
        if grid.get(entry.spec_index) != Some(&entry.spec) {
            return Err(AppError::format(
                path,
                format!("line {}: spec {} does not belong to the configured grid", i + 1, entry.spec_index),
            ));
        }
        keep += line.len() + 1;
        let idx = entry.spec_index;
        done[idx] = Some(entry.into_rows());
    }
    let len = fs::metadata(path).map_err(|e| AppError::io(path, e))?.len();
    if (keep as u64) < len {
        let f = OpenOptions::new().write(true).open(path).map_err(|e| AppError::io(path, e))?;
        f.set_len(keep as u64).map_err(|e| AppError::io(path, e))?;
    } else if (keep as u64) > len {
        // complete last entry without its newline
        let mut f = OpenOptions::new().append(true).open(path).map_err(|e| AppError::io(path, e))?;
        f.write_all(b"\n").map_err(|e| AppError::io(path, e))?;
    }
    Ok(done)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SweepProgress {
    pub resumed: usize,
    pub trained: usize,
}

/// Sweep `grid`, journaling to `journal`. Specs are spread over `runner`;
/// each worker appends its own line under a lock.
#[allow(clippy::too_many_arguments)]
pub fn run_resumable<R: ShardRunner>(
    grid: &[ArchSpec],
    input: InputShape,
    train: &[Sample],
    val: &[Sample],
    c_grid: &[f64],
    root_seed: u64,
    runner: &R,
    clock: &dyn Clock,
    journal: &Path,
) -> AppResult<(SweepReport, SweepProgress)> {
    if grid.is_empty() {
        return Err(AppError::Core(celmseg_core::Error::Config("sweep grid is empty".into())));
    }
    if train.is_empty() || val.is_empty() {
        return Err(AppError::Core(celmseg_core::Error::Input("sweep needs training and validation samples".into())));
    }
    if let Some(dir) = journal.parent() {
        fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))?;
    }
    let mut done = replay(journal, grid)?;
    let pending: Vec<usize> = (0..grid.len()).filter(|&i| done[i].is_none()).collect();
    let progress = SweepProgress { resumed: grid.len() - pending.len(), trained: pending.len() };

    let file = OpenOptions::new().create(true).append(true).open(journal).map_err(|e| AppError::io(journal, e))?;
    let sink = Mutex::new(file);
    let results = runner.run(pending.len(), |k| {
        let i = pending[k];
        let rows = evaluate_spec(i, &grid[i], input, train, val, c_grid, root_seed, clock);
        let mut line = serde_json::to_string(&JournalEntry::new(i, grid[i], &rows)).expect("row serializes");
        line.push('\n');
        let written = {
            let mut f = sink.lock().unwrap_or_else(|p| p.into_inner());
            f.write_all(line.as_bytes()).and_then(|_| f.flush())
        };
        (i, rows, written)
    });
    for (i, rows, written) in results {
        written.map_err(|e| AppError::io(journal, e))?;
        done[i] = Some(rows);
    }
    let rows = done.into_iter().flatten().flatten().collect();
    Ok((SweepReport::assemble(rows), progress))
}

/// Report from a journal alone, without the grid that produced it.
pub fn read_journal(path: &Path) -> AppResult<SweepReport> {
    let f = File::open(path).map_err(|e| AppError::io(path, e))?;
    let lines: Vec<String> = BufReader::new(f).lines().collect::<Result<_, _>>().map_err(|e| AppError::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<JournalEntry>(line) {
            Ok(e) => rows.extend(e.into_rows()),
            Err(_) if i + 1 == lines.len() => break,
            Err(e) => {
                return Err(AppError::Parse { path: path.into(), line: i + 1, column: e.column(), message: e.to_string() })
            }
        }
    }
    Ok(SweepReport::assemble(rows))
}
