//! Command-line front end.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data or I/O
//! error, 3 numerical failure (diverged training, failed factorization).

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::PipelineConfig;
use crate::dataset_io::read_dataset;
use crate::error::{AppError, AppResult};
use crate::eval::{self, Model};
use crate::pipeline::{Pipeline, RunOptions, Stage, StageStatus};
use crate::report;
use crate::sweep;

#[derive(Debug, Parser)]
#[command(name = "celmseg", version, about = "Boulder segmentation from closed-form trained random encoders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// JSON configuration; the built-in desk setup when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root seed, overriding the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "celmseg-run")]
    out: PathBuf,
    /// Worker threads; 0 uses every core. Results do not depend on it.
    #[arg(long, default_value_t = 0)]
    jobs: usize,
    /// Recompute stages even when their outputs exist.
    #[arg(long)]
    force: bool,
    /// Train step 4 from a fresh decoder instead of the step-3 weights.
    #[arg(long)]
    cold_start: bool,
    /// Write this many (input, truth, prediction) PGM triplets per test split.
    #[arg(long, value_name = "K", default_value_t = 0)]
    dump_masks: usize,
    /// Suppress progress messages.
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the single- and multi-boulder datasets.
    Datagen(RunArgs),
    /// Step 1: closed-form sweep over the encoder design space.
    Sweep(RunArgs),
    /// Step 2: gradient fine-tuning of the best swept encoder.
    TrainEncoder(RunArgs),
    /// Steps 3 and 4: UNet training on single- then multi-boulder scenes.
    TrainUnet(RunArgs),
    /// Evaluate a checkpoint on a dataset directory.
    Evaluate(EvaluateArgs),
    /// Write the parallel-plot CSV of a sweep journal.
    ExportPlot(ExportArgs),
    /// Pipeline commands.
    #[command(subcommand)]
    Pipeline(PipelineCommand),
}

#[derive(Debug, Subcommand)]
enum PipelineCommand {
    /// Run every stage in order, skipping finished ones.
    Run(RunArgs),
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory holding manifest.json.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "celmseg-eval")]
    out: PathBuf,
    /// Comma-separated subset of the model's metrics.
    #[arg(long, value_delimiter = ',')]
    metrics: Vec<String>,
    #[arg(long, value_name = "K", default_value_t = 0)]
    dump_masks: usize,
}

#[derive(Debug, Args)]
struct ExportArgs {
    /// Sweep journal (step1/sweep.jsonl).
    #[arg(long)]
    sweep: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

/// Parse `argv` and run. Returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e);
            e.exit_code()
        }
    }
}

fn pipeline(args: RunArgs) -> AppResult<Pipeline> {
    let mut cfg = match &args.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::desk(),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let opts = RunOptions {
        force: args.force,
        cold_start: args.cold_start,
        dump_masks: args.dump_masks,
        jobs: args.jobs,
        quiet: args.quiet,
    };
    Pipeline::new(cfg, args.out, opts)
}

fn stages(args: RunArgs, list: &[Stage]) -> AppResult<()> {
    let p = pipeline(args)?;
    for &s in list {
        if p.run_stage(s)? == StageStatus::Skipped && list.len() == 1 {
            eprintln!("{} is up to date; pass --force to recompute", p.dir(s).display());
        }
    }
    Ok(())
}

fn dispatch(cmd: Command) -> AppResult<()> {
    match cmd {
        Command::Datagen(a) => stages(a, &[Stage::Data]),
        Command::Sweep(a) => stages(a, &[Stage::Data, Stage::Sweep]),
        Command::TrainEncoder(a) => stages(a, &[Stage::Encoder]),
        Command::TrainUnet(a) => stages(a, &[Stage::Segmentation, Stage::Refinement]),
        Command::Pipeline(PipelineCommand::Run(a)) => pipeline(a)?.run_all().map(|_| ()),
        Command::Evaluate(a) => evaluate(a),
        Command::ExportPlot(a) => {
            let rep = sweep::read_journal(&a.sweep)?;
            report::export_parallel_plot(&rep, &a.out)?;
            eprintln!("{} rows written to {}", rep.rows.len(), a.out.display());
            Ok(())
        }
    }
}

fn evaluate(a: EvaluateArgs) -> AppResult<()> {
    let model = Model::load(&a.checkpoint)?;
    if a.dump_masks > 0 && !model.is_segmenter() {
        return Err(AppError::Usage("--dump-masks needs a segmentation checkpoint".into()));
    }
    let ds = read_dataset(&a.data)?;
    let (mut records, masks) = eval::evaluate(&model, &ds.samples, &a.data)?;
    if !a.metrics.is_empty() {
        if let Some(m) = a.metrics.iter().find(|m| !records.iter().any(|r| &r.metric == *m)) {
            let known: Vec<&str> = records.iter().map(|r| r.metric.as_str()).collect();
            return Err(AppError::Usage(format!("metric {} is not available for this model (have {})", m, known.join(", "))));
        }
        records.retain(|r| a.metrics.contains(&r.metric));
    }
    let csv = a.out.join("eval.csv");
    report::write_eval(&records, &csv)?;
    for r in &records {
        eprintln!("{}: mean {:.6}, std {:.6} over {} samples", r.metric, r.summary.mean, r.summary.std, r.summary.count);
    }
    if a.dump_masks > 0 {
        let files = eval::dump_masks(&ds.samples, &masks, a.dump_masks, &a.out.join("masks"))?;
        eprintln!("{} mask files written under {}", files.len(), a.out.join("masks").display());
    }
    Ok(())
}
