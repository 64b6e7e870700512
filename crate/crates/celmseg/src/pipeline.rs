//! The four-step training procedure and its on-disk layout.
//!
//! ```text
//! <out>/config.json            resolved configuration
//! <out>/data/{single,multi}/   datasets (manifest + PGM files)
//! <out>/step1/                 sweep journal and tables, best.json, celm.ckpt
//! <out>/step2/                 cnn.ckpt, history, CELM vs CNN comparison
//! <out>/step3/                 unet.ckpt trained on single-boulder scenes
//! <out>/step4/                 unet.ckpt refined on multi-boulder scenes
//! ```
//!
//! Each stage directory holds a `done.json` marker with a fingerprint of the
//! configuration that produced it. Finished stages are skipped on rerun;
//! `force` recomputes them. Later stages always read their inputs back from
//! disk, so a resumed run trains on exactly what a fresh run would.

use std::fs;
use std::path::{Path, PathBuf};

use celmseg_core::archsearch::{enumerate_grid, SweepReport};
use celmseg_core::celm::{select_regularization, CelmFit, TimingProfile};
use celmseg_core::datagen::{generate_multi, generate_single, postprocess, split, Dataset, Sample, SceneMode};
use celmseg_core::encoder::{build_encoder, Encoder, InputShape};
use celmseg_core::metrics::histogram;
use celmseg_core::rng::derive_seed;
use celmseg_core::train::{grid_tune, train, CobRegression, TrainingHistory};
use celmseg_core::unet::{build_unet, train_segmentation, UNetModel};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{self, Checkpoint};
use crate::config::{DatasetConfig, PipelineConfig};
use crate::dataset_io::{read_dataset, write_dataset};
use crate::error::{AppError, AppResult};
use crate::eval::{self, Model};
use crate::exec::{RayonRunner, WallClock};
use crate::report;
use crate::sweep;

pub const MARKER: &str = "done.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Data,
    Sweep,
    Encoder,
    Segmentation,
    Refinement,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Data, Stage::Sweep, Stage::Encoder, Stage::Segmentation, Stage::Refinement];

    pub fn dir_name(self) -> &'static str {
        match self {
            Stage::Data => "data",
            Stage::Sweep => "step1",
            Stage::Encoder => "step2",
            Stage::Segmentation => "step3",
            Stage::Refinement => "step4",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageStatus {
    Ran,
    Skipped,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub force: bool,
    /// Step 4 starts from a fresh decoder instead of the step-3 weights.
    pub cold_start: bool,
    /// Number of (input, truth, prediction) triplets written per test split.
    pub dump_masks: usize,
    pub jobs: usize,
    pub quiet: bool,
}

#[derive(Serialize, Deserialize)]
struct Marker {
    stage: Stage,
    fingerprint: String,
}

/// The four splits of one dataset, loaded from disk.
pub struct SplitData {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test1: Vec<Sample>,
    pub test2: Vec<Sample>,
}

impl SplitData {
    pub fn tests(&self) -> [(&'static str, &[Sample]); 2] {
        [("test1", &self.test1), ("test2", &self.test2)]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestSpec {
    pub spec: celmseg_core::encoder::ArchSpec,
    pub spec_index: usize,
    pub c: f64,
    pub val_error: f64,
    pub parameter_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingSummary {
    pub totals: TimingProfile,
    pub forward_train_fraction: f64,
    pub forward_val_fraction: f64,
    pub solve_fraction: f64,
    pub specs: usize,
}

pub struct Pipeline {
    pub cfg: PipelineConfig,
    pub out: PathBuf,
    pub opts: RunOptions,
    runner: RayonRunner,
    clock: WallClock,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> AppResult<T> {
    let text = fs::read_to_string(path).map_err(|e| AppError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| AppError::json(path, e))
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig, out: impl Into<PathBuf>, opts: RunOptions) -> AppResult<Self> {
        cfg.validate().map_err(AppError::Usage)?;
        let runner = RayonRunner::new(opts.jobs)?;
        Ok(Self { cfg, out: out.into(), opts, runner, clock: WallClock::new() })
    }

    pub fn dir(&self, stage: Stage) -> PathBuf {
        self.out.join(stage.dir_name())
    }

    fn say(&self, msg: impl AsRef<str>) {
        if !self.opts.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }

    fn input(&self) -> InputShape {
        InputShape::gray(self.cfg.image_size)
    }

    fn fingerprint(&self, stage: Stage) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.cfg).expect("config serializes"));
        h.update(stage.dir_name().as_bytes());
        if stage == Stage::Refinement {
            h.update([self.opts.cold_start as u8]);
        }
        h.finalize().iter().map(|b| format!("{:02x}", b)).collect()
    }

    /// Run `body` unless a matching marker says the stage is done.
    fn stage(&self, stage: Stage, body: impl FnOnce(&Path) -> AppResult<()>) -> AppResult<StageStatus> {
        let dir = self.dir(stage);
        let marker = dir.join(MARKER);
        let fp = self.fingerprint(stage);
        if marker.is_file() && !self.opts.force {
            let m: Marker = read_json(&marker)?;
            if m.fingerprint == fp {
                self.say(format!("{}: done, skipping", stage.dir_name()));
                return Ok(StageStatus::Skipped);
            }
            return Err(AppError::Usage(format!(
                "{} was produced with a different configuration; rerun with --force to recompute it",
                dir.display()
            )));
        }
        if self.opts.force && dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| AppError::io(&dir, e))?;
        }
        fs::create_dir_all(&dir).map_err(|e| AppError::io(&dir, e))?;
        self.say(format!("{}: running", stage.dir_name()));
        body(&dir)?;
        report::write_json(&Marker { stage, fingerprint: fp }, &marker)?;
        Ok(StageStatus::Ran)
    }

    pub fn run_all(&self) -> AppResult<Vec<(Stage, StageStatus)>> {
        fs::create_dir_all(&self.out).map_err(|e| AppError::io(&self.out, e))?;
        report::write_json(&self.cfg, &self.out.join("config.json"))?;
        let mut done = Vec::new();
        for stage in Stage::ALL {
            done.push((stage, self.run_stage(stage)?));
        }
        Ok(done)
    }

    pub fn run_stage(&self, stage: Stage) -> AppResult<StageStatus> {
        match stage {
            Stage::Data => self.stage(stage, |d| self.datagen(d)),
            Stage::Sweep => self.stage(stage, |d| self.step1(d)),
            Stage::Encoder => self.stage(stage, |d| self.step2(d)),
            Stage::Segmentation => self.stage(stage, |d| self.step3(d)),
            Stage::Refinement => self.stage(stage, |d| self.step4(d)),
        }
    }

    // ---- data ----

    fn dataset_dir(&self, mode: SceneMode) -> PathBuf {
        let (d, name) = self.dataset_cfg(mode);
        d.path.clone().unwrap_or_else(|| self.dir(Stage::Data).join(name))
    }

    fn dataset_cfg(&self, mode: SceneMode) -> (&DatasetConfig, &'static str) {
        match mode {
            SceneMode::SingleBoulder => (&self.cfg.single, "single"),
            SceneMode::MultiBoulder => (&self.cfg.multi, "multi"),
        }
    }

    pub fn generate(&self, mode: SceneMode) -> AppResult<Dataset> {
        let (d, name) = self.dataset_cfg(mode);
        let seed = self.cfg.stage_seed(&format!("datagen.{}", name));
        let scene = d.scene(mode, seed);
        let raw = match mode {
            SceneMode::SingleBoulder => generate_single(&scene, d.samples)?,
            SceneMode::MultiBoulder => generate_multi(&scene, d.samples)?,
        };
        let samples = raw
            .samples
            .iter()
            .enumerate()
            .map(|(i, s)| postprocess(s, self.cfg.image_size, &d.noise, derive_seed(seed, "postprocess", i as u64)))
            .collect::<celmseg_core::Result<Vec<_>>>()?;
        Ok(Dataset::new(samples))
    }

    fn datagen(&self, dir: &Path) -> AppResult<()> {
        for mode in [SceneMode::SingleBoulder, SceneMode::MultiBoulder] {
            let (d, name) = self.dataset_cfg(mode);
            if d.path.is_some() {
                continue;
            }
            let ds = self.generate(mode)?;
            write_dataset(&ds, &dir.join(name))?;
            self.say(format!("  {} samples written to {}", ds.len(), dir.join(name).display()));
        }
        Ok(())
    }

    pub fn load_split(&self, mode: SceneMode) -> AppResult<SplitData> {
        let (d, name) = self.dataset_cfg(mode);
        let dir = self.dataset_dir(mode);
        let ds = read_dataset(&dir)?;
        let mismatch = ds.samples.iter().find(|s| s.image.width != self.cfg.image_size || s.image.height != self.cfg.image_size);
        if let Some(s) = mismatch {
            return Err(AppError::format(
                &dir,
                format!("sample {} is {}x{}, configuration expects {} px", s.id, s.image.width, s.image.height, self.cfg.image_size),
            ));
        }
        let sp = split(&ds, &d.split, self.cfg.stage_seed(&format!("split.{}", name))).map_err(|e| AppError::format(&dir, e.to_string()))?;
        let [train, val, test1, test2] = sp.datasets(&ds);
        Ok(SplitData { train: train.samples, val: val.samples, test1: test1.samples, test2: test2.samples })
    }

    // ---- evaluation helpers ----

    fn write_evals(&self, model: &Model, data: &SplitData, dir: &Path, source: &Path) -> AppResult<()> {
        for (name, samples) in data.tests() {
            let (records, masks) = eval::evaluate(model, samples, source)?;
            report::write_eval(&records, &dir.join(format!("eval_{}.csv", name)))?;
            if self.opts.dump_masks > 0 && model.is_segmenter() {
                eval::dump_masks(samples, &masks, self.opts.dump_masks, &dir.join("masks").join(name))?;
            }
            let line: Vec<String> = records.iter().map(|r| format!("{} {:.4}", r.metric, r.summary.mean)).collect();
            self.say(format!("  {}: {}", name, line.join(", ")));
        }
        Ok(())
    }

    fn save_history(&self, h: &TrainingHistory, dir: &Path) -> AppResult<()> {
        report::write_history(h, &dir.join("history.csv"))
    }

    // ---- step 1: closed-form sweep ----

    fn step1(&self, dir: &Path) -> AppResult<()> {
        let data = self.load_split(SceneMode::SingleBoulder)?;
        let grid = enumerate_grid(&self.cfg.sweep.grid)?;
        let root = self.cfg.stage_seed("sweep");
        let (rep, progress) = sweep::run_resumable(
            &grid,
            self.input(),
            &data.train,
            &data.val,
            &self.cfg.sweep.c_grid,
            root,
            &self.runner,
            &self.clock,
            &dir.join("sweep.jsonl"),
        )?;
        self.say(format!("  {} specs trained, {} resumed from the journal", progress.trained, progress.resumed));
        report::export_parallel_plot(&rep, &dir.join("parallel_plot.csv"))?;
        report::write_sweep_table(&rep, &dir.join("sweep.csv"))?;
        report::write_ranking(&rep.ranking(), &dir.join("ranking.csv"))?;
        report::write_json(&timing_summary(&rep), &dir.join("timing.json"))?;

        let best = rep.best().ok_or_else(|| celmseg_core::Error::Numerical("every sweep spec failed".into()))?;
        let best = BestSpec {
            spec: best.spec,
            spec_index: best.spec_index,
            c: best.c,
            val_error: best.val_error_mean,
            parameter_count: best.parameter_count,
        };
        report::write_json(&best, &dir.join("best.json"))?;
        let enc = build_encoder(&best.spec, self.input(), best.spec.seed(root))?;
        let fit = select_regularization(&enc, &data.train, &data.val, &[best.c], &self.clock)?;
        let fit = CelmFit { encoder: enc, beta: fit.solution.beta, c: best.c };
        let ck = checkpoint::from_celm(&fit, serde_json::json!({ "spec_index": best.spec_index }));
        let path = dir.join("celm.ckpt");
        ck.save(&path)?;
        self.say(format!("  best spec #{} (C = {}), validation CoB error {:.3} px", best.spec_index, best.c, best.val_error));
        self.write_evals(&Model::Celm(fit), &data, dir, &path)
    }

    // ---- step 2: gradient fine-tuning of the best encoder ----

    fn step2(&self, dir: &Path) -> AppResult<()> {
        let data = self.load_split(SceneMode::SingleBoulder)?;
        let celm_path = self.dir(Stage::Sweep).join("celm.ckpt");
        let celm = checkpoint::to_celm(&Checkpoint::load(&celm_path)?, &celm_path)?;
        let start = celm.encoder.clone().with_regression_head(self.cfg.stage_seed("head"));
        let mut cfg = self.cfg.encoder.training.train_config(self.cfg.stage_seed("step2"));
        if let Some(t) = &self.cfg.encoder.tune {
            let results = grid_tune(
                |_| Ok(start.clone()),
                &data.train,
                &data.val,
                &t.grid(),
                t.repeats,
                t.short_epochs,
                &cfg,
                &CobRegression,
                &self.runner,
            )?;
            report::write_tuning(&results, &dir.join("tuning.csv"))?;
            cfg.batch_size = results[0].batch_size;
            cfg.learning_rate = results[0].learning_rate;
            self.say(format!("  tuning picked batch {} and learning rate {}", cfg.batch_size, cfg.learning_rate));
        }
        let (cnn, history) = train(&start, &data.train, &data.val, &cfg, &CobRegression, &self.runner)?;
        self.save_history(&history, dir)?;
        let path = dir.join("cnn.ckpt");
        checkpoint::from_encoder(&cnn, eval::training_metadata(&history, None)).save(&path)?;
        self.write_weight_histograms(&celm, &cnn, dir)?;

        let mut rows = Vec::new();
        let celm = Model::Celm(celm);
        let cnn = Model::Cnn(cnn);
        for (name, samples) in data.tests() {
            let (a, _) = eval::evaluate(&celm, samples, &celm_path)?;
            let (b, _) = eval::evaluate(&cnn, samples, &path)?;
            report::write_eval(&b, &dir.join(format!("eval_{}.csv", name)))?;
            let (ca, cb) = (a[0].summary, b[0].summary);
            self.say(format!("  {}: CoB error CELM {:.3} px, CNN {:.3} px", name, ca.mean, cb.mean));
            rows.push(report::ComparisonRow { split: name.into(), celm: ca, cnn: cb });
        }
        report::write_comparison(&rows, &dir.join("comparison.csv"))
    }

    fn write_weight_histograms(&self, celm: &CelmFit, cnn: &Encoder, dir: &Path) -> AppResult<()> {
        let bins = self.cfg.histogram_bins;
        report::write_histogram(&histogram(celm.beta.data(), bins, None)?, &dir.join("celm_weights_hist.csv"))?;
        if let Some(head) = cnn.head {
            let w = cnn.params.value(head.weight).data();
            let bias = head.bias.map(|b| cnn.params.value(b).data().to_vec());
            report::write_histogram(&histogram(w, bins, bias)?, &dir.join("cnn_weights_hist.csv"))?;
        }
        Ok(())
    }

    // ---- steps 3 and 4: segmentation ----

    fn trained_encoder(&self) -> AppResult<Encoder> {
        let path = self.dir(Stage::Encoder).join("cnn.ckpt");
        checkpoint::to_encoder(&Checkpoint::load(&path)?, &path)
    }

    /// A UNet with freshly initialized decoder around the step-2 encoder.
    pub fn fresh_unet(&self) -> AppResult<UNetModel> {
        let enc = self.trained_encoder()?;
        Ok(build_unet(&enc, &self.cfg.unet.decoder_depths, self.cfg.unet.activation, self.cfg.stage_seed("unet"))?)
    }

    fn train_unet(&self, start: &UNetModel, data: &SplitData, step: &str, dir: &Path, warm: bool) -> AppResult<()> {
        let t = if step == "step3" { &self.cfg.unet.step3 } else { &self.cfg.unet.step4 };
        let cfg = t.train_config(self.cfg.stage_seed(step));
        let (unet, mut history, weights) = train_segmentation(start, &data.train, &data.val, &cfg, &self.runner)?;
        history.warm_start = warm;
        self.save_history(&history, dir)?;
        let path = dir.join("unet.ckpt");
        checkpoint::from_unet(&unet, eval::training_metadata(&history, Some(&weights))).save(&path)?;
        if let Some(b) = history.best() {
            self.say(format!("  best validation MIOU {:.4} at epoch {}", b.val_metric, b.epoch));
        }
        self.write_evals(&Model::Unet(unet, weights), data, dir, &path)
    }

    fn step3(&self, dir: &Path) -> AppResult<()> {
        let data = self.load_split(SceneMode::SingleBoulder)?;
        self.train_unet(&self.fresh_unet()?, &data, "step3", dir, false)
    }

    fn step4(&self, dir: &Path) -> AppResult<()> {
        let data = self.load_split(SceneMode::MultiBoulder)?;
        let mut start = self.fresh_unet()?;
        if !self.opts.cold_start {
            let path = self.dir(Stage::Segmentation).join("unet.ckpt");
            let prev = checkpoint::to_unet(&Checkpoint::load(&path)?, &path)?;
            start.warm_start_from(&prev).map_err(|e| AppError::format(&path, e.to_string()))?;
        }
        self.train_unet(&start, &data, "step4", dir, !self.opts.cold_start)
    }
}

/// Timing totals over specs (every row of a spec carries the same profile).
pub fn timing_summary(rep: &SweepReport) -> TimingSummary {
    let mut totals = TimingProfile::default();
    let mut seen = std::collections::BTreeSet::new();
    for r in rep.rows.iter().filter(|r| r.failure.is_none()) {
        if seen.insert(r.spec_index) {
            totals.forward_train += r.timing.forward_train;
            totals.forward_val += r.timing.forward_val;
            totals.solve += r.timing.solve;
        }
    }
    let (a, b, c) = totals.fractions();
    TimingSummary { totals, forward_train_fraction: a, forward_val_fraction: b, solve_fraction: c, specs: seen.len() }
}
