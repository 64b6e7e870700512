//! CSV reports.
//!
//! | file | columns |
//! |------|---------|
//! | parallel plot | `P,d0,n,A,K_d,C,run_index,val_error,quality_band` |
//! | sweep table | parallel-plot columns plus `spec_index,val_error_std,parameter_count,train_seconds,forward_train_s,forward_val_s,solve_s,failure` |
//! | training history | `epoch,train_loss,val_loss,val_metric` |
//! | evaluation | `sample_id,metric,value`, then `#mean` and `#std` rows per metric |
//! | histogram | `bin_start,bin_end,probability`, then `#mean`, `#variance` and one `#bias` row per bias value |
//! | ranking | `P,d0,n,A,K_d,best_val_error,best_C,mean_val_error` |
//! | tuning | `batch_size,learning_rate,repeat,best_val_error` |
//! | comparison | `split,celm_mean,celm_std,cnn_mean,cnn_std,ratio` |
//!
//! Failed sweep rows keep their spec columns and leave `val_error` empty.

use std::fs::{self, File};
use std::io::Write;
use std::path::Path;

use celmseg_core::archsearch::{StructuralRank, SweepReport, SweepRow};
use celmseg_core::metrics::{EvalRecord, Histogram, Summary};
use celmseg_core::train::{TrainingHistory, TuneResult};

use crate::error::{AppError, AppResult};

pub const PARALLEL_PLOT_HEADER: [&str; 9] = ["P", "d0", "n", "A", "K_d", "C", "run_index", "val_error", "quality_band"];
pub const HISTORY_HEADER: [&str; 4] = ["epoch", "train_loss", "val_loss", "val_metric"];
pub const EVAL_HEADER: [&str; 3] = ["sample_id", "metric", "value"];
pub const SUMMARY_MEAN: &str = "#mean";
pub const SUMMARY_STD: &str = "#std";

fn writer(path: &Path) -> AppResult<csv::Writer<File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))?;
    }
    let f = File::create(path).map_err(|e| AppError::io(path, e))?;
    Ok(csv::WriterBuilder::new().from_writer(f))
}

fn csv_err(path: &Path, e: csv::Error) -> AppError {
    match e.into_kind() {
        csv::ErrorKind::Io(e) => AppError::io(path, e),
        other => AppError::format(path, format!("{:?}", other)),
    }
}

/// Shortest representation that parses back to the same `f64`.
fn num(x: f64) -> String {
    if x.is_finite() {
        format!("{}", x)
    } else {
        String::new()
    }
}

fn plot_fields(r: &SweepRow) -> Vec<String> {
    vec![
        r.spec.pooling.name().into(),
        r.spec.d0.to_string(),
        r.spec.n_cells.to_string(),
        r.spec.activation.name().into(),
        r.spec.init.name().into(),
        num(r.c),
        r.spec.run_index.to_string(),
        if r.is_ok() { num(r.val_error_mean) } else { String::new() },
        r.quality_band.map(|b| b.name().to_string()).unwrap_or_default(),
    ]
}

pub fn export_parallel_plot(report: &SweepReport, path: &Path) -> AppResult<()> {
    let mut w = writer(path)?;
    w.write_record(PARALLEL_PLOT_HEADER).map_err(|e| csv_err(path, e))?;
    for r in &report.rows {
        w.write_record(plot_fields(r)).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| AppError::io(path, e))
}

pub fn write_sweep_table(report: &SweepReport, path: &Path) -> AppResult<()> {
    let mut w = writer(path)?;
    let mut header: Vec<&str> = PARALLEL_PLOT_HEADER.to_vec();
    header.extend([
        "spec_index",
        "val_error_std",
        "parameter_count",
        "train_seconds",
        "forward_train_s",
        "forward_val_s",
        "solve_s",
        "failure",
    ]);
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for r in &report.rows {
        let mut f = plot_fields(r);
        f.extend([
            r.spec_index.to_string(),
            num(r.val_error_std),
            r.parameter_count.to_string(),
            num(r.train_seconds),
            num(r.timing.forward_train),
            num(r.timing.forward_val),
            num(r.timing.solve),
            r.failure.clone().unwrap_or_default(),
        ]);
        w.write_record(&f).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| AppError::io(path, e))
}

pub fn write_history(history: &TrainingHistory, path: &Path) -> AppResult<()> {
    let mut w = writer(path)?;
    w.write_record(HISTORY_HEADER).map_err(|e| csv_err(path, e))?;
    for e in &history.epochs {
        w.write_record([e.epoch.to_string(), num(e.train_loss), num(e.val_loss), num(e.val_metric)])
            .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| AppError::io(path, e))
}

/// Several metrics over the same samples go into one file, grouped by metric.
pub fn write_eval(records: &[EvalRecord], path: &Path) -> AppResult<()> {
    let mut w = writer(path)?;
    w.write_record(EVAL_HEADER).map_err(|e| csv_err(path, e))?;
    for rec in records {
        for (id, v) in rec.sample_ids.iter().zip(&rec.values) {
            w.write_record([id.as_str(), rec.metric.as_str(), &num(*v)]).map_err(|e| csv_err(path, e))?;
        }
        w.write_record([SUMMARY_MEAN, rec.metric.as_str(), &num(rec.summary.mean)]).map_err(|e| csv_err(path, e))?;
        w.write_record([SUMMARY_STD, rec.metric.as_str(), &num(rec.summary.std)]).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| AppError::io(path, e))
}

/// One parsed evaluation row. Summary rows carry the `#mean`/`#std` ids.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub sample_id: String,
    pub metric: String,
    pub value: f64,
}

pub fn read_eval(path: &Path) -> AppResult<Vec<EvalRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = i + 2;
        if rec.len() != 3 {
            return Err(AppError::Parse { path: path.into(), line, column: 1, message: "expected 3 fields".into() });
        }
        let value = if rec[2].is_empty() {
            f64::NAN
        } else {
            rec[2].parse().map_err(|_| AppError::Parse {
                path: path.into(),
                line,
                column: 3,
                message: format!("not a number: {}", &rec[2]),
            })?
        };
        out.push(EvalRow { sample_id: rec[0].into(), metric: rec[1].into(), value });
    }
    Ok(out)
}

pub fn write_histogram(h: &Histogram, path: &Path) -> AppResult<()> {
    let mut w = writer(path)?;
    w.write_record(["bin_start", "bin_end", "probability"]).map_err(|e| csv_err(path, e))?;
    for (i, p) in h.probabilities.iter().enumerate() {
        w.write_record([num(h.edges[i]), num(h.edges[i + 1]), num(*p)]).map_err(|e| csv_err(path, e))?;
    }
    w.write_record(["#mean", "", &num(h.mean)]).map_err(|e| csv_err(path, e))?;
    w.write_record(["#variance", "", &num(h.variance)]).map_err(|e| csv_err(path, e))?;
    for (i, b) in h.bias.iter().flatten().enumerate() {
        w.write_record(["#bias", &i.to_string(), &num(*b)]).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| AppError::io(path, e))
}

pub fn write_ranking(ranks: &[StructuralRank], path: &Path) -> AppResult<()> {
    let mut w = writer(path)?;
    w.write_record(["P", "d0", "n", "A", "K_d", "best_val_error", "best_C", "mean_val_error"]).map_err(|e| csv_err(path, e))?;
    for r in ranks {
        w.write_record([
            r.spec.pooling.name().to_string(),
            r.spec.d0.to_string(),
            r.spec.n_cells.to_string(),
            r.spec.activation.name().into(),
            r.spec.init.name().into(),
            num(r.best_error),
            num(r.best_c),
            num(r.mean_error),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| AppError::io(path, e))
}

pub fn write_tuning(results: &[TuneResult], path: &Path) -> AppResult<()> {
    let mut w = writer(path)?;
    w.write_record(["batch_size", "learning_rate", "repeat", "best_val_error"]).map_err(|e| csv_err(path, e))?;
    for r in results {
        w.write_record([r.batch_size.to_string(), num(r.learning_rate), r.repeat.to_string(), num(r.best_error)])
            .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| AppError::io(path, e))
}

/// CoB error of the closed-form and the fine-tuned encoder on one split.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComparisonRow {
    pub split: &'static str,
    pub celm: Summary,
    pub cnn: Summary,
}

pub fn write_comparison(rows: &[ComparisonRow], path: &Path) -> AppResult<()> {
    let mut w = writer(path)?;
    w.write_record(["split", "celm_mean", "celm_std", "cnn_mean", "cnn_std", "ratio"]).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record([
            r.split.to_string(),
            num(r.celm.mean),
            num(r.celm.std),
            num(r.cnn.mean),
            num(r.cnn.std),
            num(r.celm.mean / r.cnn.mean),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| AppError::io(path, e))
}

pub fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> AppResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))?;
    }
    let mut f = File::create(path).map_err(|e| AppError::io(path, e))?;
    serde_json::to_writer_pretty(&mut f, value).map_err(|e| AppError::format(path, e.to_string()))?;
    f.write_all(b"\n").map_err(|e| AppError::io(path, e))
}
