//! Pipeline configuration (JSON).
//!
//! Every field has a default. An omitted section takes its desk value (see
//! [`PipelineConfig::desk`] and `configs/desk.json`); omitted fields inside a
//! dataset section take the generator's own defaults. Lengths are in pixels;
//! boulder radii are fractions of the render size so they scale with it.

use std::fs;
use std::path::{Path, PathBuf};

use celmseg_core::archsearch::GridConfig;
use celmseg_core::datagen::{NoiseConfig, Range, SceneConfig, SceneMode, SplitSpec};
use celmseg_core::init::InitScheme;
use celmseg_core::ops::{Activation, Pooling};
use celmseg_core::rng::derive_seed;
use celmseg_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{AppError, AppResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// Load an existing dataset directory instead of generating one.
    pub path: Option<PathBuf>,
    pub samples: usize,
    /// Scenes are rendered at this size and randomly cropped to the image size.
    pub render_size: usize,
    pub boulder_radius: Option<Range>,
    pub boulder_count: Option<(usize, usize)>,
    pub noise: NoiseConfig,
    pub split: SplitSpec,
}

impl DatasetConfig {
    fn desk(mode: SceneMode) -> Self {
        let (samples, radius, split) = match mode {
            SceneMode::SingleBoulder => (
                4700,
                Some(Range::new(0.12, 0.25)),
                SplitSpec::Counts { train: 3000, val: 200, test1: 750, test2: 750 },
            ),
            SceneMode::MultiBoulder => {
                (1000, None, SplitSpec::Counts { train: 400, val: 100, test1: 250, test2: 250 })
            }
        };
        Self { path: None, samples, render_size: 40, boulder_radius: radius, boulder_count: None, noise: NoiseConfig::default(), split }
    }

    pub fn scene(&self, mode: SceneMode, seed: u64) -> SceneConfig {
        let mut sc = match mode {
            SceneMode::SingleBoulder => SceneConfig::single_boulder(self.render_size, seed),
            SceneMode::MultiBoulder => SceneConfig::multi_boulder(self.render_size, seed),
        };
        if let Some(r) = self.boulder_radius {
            let s = self.render_size as f64;
            sc.boulder_radius = Range::new(r.min * s, r.max * s);
        }
        if let Some(c) = self.boulder_count {
            sc.boulder_count = c;
        }
        sc
    }
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            path: None,
            samples: 1000,
            render_size: 40,
            boulder_radius: None,
            boulder_count: None,
            noise: NoiseConfig::default(),
            split: SplitSpec::Fractions { train: 0.6, val: 0.1, test1: 0.15, test2: 0.15 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub grid: GridConfig,
    pub c_grid: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            grid: GridConfig {
                pooling: vec![Pooling::Mean, Pooling::Max],
                depth_cells: vec![(4, vec![3, 4]), (8, vec![4])],
                activations: vec![Activation::Relu, Activation::Elu],
                inits: vec![InitScheme::Uniform, InitScheme::Orthogonal],
                runs: 2,
                fc_neurons: 64,
            },
            c_grid: vec![1e-3, 1e-2, 1e-1, 1.0, 1e1, 1e2, 1e3],
        }
    }
}

/// Mini-batch SGD settings of one step; the seed comes from the root seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepTraining {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default)]
    pub dropout_rate: f64,
}

impl StepTraining {
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig::new(self.learning_rate, self.batch_size, self.epochs, self.dropout_rate, seed)
    }
}

/// Short runs over `(batch size, learning rate)` pairs before the full run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuneConfig {
    pub batch_sizes: Vec<usize>,
    pub learning_rates: Vec<f64>,
    pub repeats: usize,
    pub short_epochs: usize,
}

impl TuneConfig {
    pub fn grid(&self) -> Vec<(usize, f64)> {
        self.batch_sizes.iter().flat_map(|&b| self.learning_rates.iter().map(move |&lr| (b, lr))).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderStep {
    pub training: StepTraining,
    pub tune: Option<TuneConfig>,
}

impl Default for EncoderStep {
    fn default() -> Self {
        Self { training: StepTraining { learning_rate: 0.03, batch_size: 8, epochs: 100, dropout_rate: 0.0 }, tune: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UNetStep {
    pub decoder_depths: Vec<usize>,
    pub activation: Activation,
    pub step3: StepTraining,
    pub step4: StepTraining,
}

impl Default for UNetStep {
    fn default() -> Self {
        Self {
            decoder_depths: vec![16, 8],
            activation: Activation::Elu,
            step3: StepTraining { learning_rate: 0.3, batch_size: 8, epochs: 10, dropout_rate: 0.0 },
            step4: StepTraining { learning_rate: 0.1, batch_size: 8, epochs: 15, dropout_rate: 0.0 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub image_size: usize,
    pub single: DatasetConfig,
    pub multi: DatasetConfig,
    pub sweep: SweepConfig,
    pub encoder: EncoderStep,
    pub unet: UNetStep,
    pub histogram_bins: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl PipelineConfig {
    pub fn desk() -> Self {
        Self {
            seed: 2024,
            image_size: 32,
            single: DatasetConfig::desk(SceneMode::SingleBoulder),
            multi: DatasetConfig::desk(SceneMode::MultiBoulder),
            sweep: SweepConfig::default(),
            encoder: EncoderStep::default(),
            unet: UNetStep::default(),
            histogram_bins: 20,
        }
    }

    /// Any problem with the configuration file is a usage error.
    pub fn load(path: &Path) -> AppResult<Self> {
        let usage = |e: AppError| AppError::Usage(e.to_string());
        let text = fs::read_to_string(path).map_err(|e| usage(AppError::io(path, e)))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| usage(AppError::json(path, e)))?;
        cfg.validate().map_err(|m| usage(AppError::format(path, m)))?;
        Ok(cfg)
    }

    /// Seed of a named stage, independent of every other stage.
    pub fn stage_seed(&self, stage: &str) -> u64 {
        derive_seed(self.seed, stage, 0)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.image_size < 8 {
            return Err(format!("image_size {} is too small", self.image_size));
        }
        for (name, d, mode) in
            [("single", &self.single, SceneMode::SingleBoulder), ("multi", &self.multi, SceneMode::MultiBoulder)]
        {
            match &d.path {
                Some(p) if !p.join(crate::dataset_io::MANIFEST).is_file() => {
                    return Err(format!("{}.path: no dataset manifest under {}", name, p.display()));
                }
                Some(_) => {}
                None => {
                    if d.render_size < self.image_size {
                        return Err(format!(
                            "{}.render_size {} is smaller than image_size {}",
                            name, d.render_size, self.image_size
                        ));
                    }
                    d.scene(mode, 0).validate().map_err(|e| format!("{}: {}", name, e))?;
                    d.split.resolve(d.samples).map_err(|e| format!("{}.split: {}", name, e))?;
                }
            }
        }
        let g = &self.sweep.grid;
        if g.size() == 0 {
            return Err("sweep grid is empty".into());
        }
        for (d0, ns) in &g.depth_cells {
            for &n in ns {
                celmseg_core::encoder::ArchSpec::check_pairing(*d0, n).map_err(|e| format!("sweep.grid: {}", e))?;
                if self.image_size >> n == 0 {
                    return Err(format!("sweep.grid: {} cells do not fit a {} px image", n, self.image_size));
                }
            }
        }
        if self.sweep.c_grid.is_empty() || self.sweep.c_grid.iter().any(|c| !(*c > 0.0) || !c.is_finite()) {
            return Err("sweep.c_grid must hold positive finite values".into());
        }
        for (name, t) in [("encoder.training", &self.encoder.training), ("unet.step3", &self.unet.step3), ("unet.step4", &self.unet.step4)] {
            t.train_config(0).validate().map_err(|e| format!("{}: {}", name, e))?;
        }
        if let Some(t) = &self.encoder.tune {
            if t.grid().is_empty() || t.repeats == 0 || t.short_epochs == 0 {
                return Err("encoder.tune needs batch sizes, learning rates, repeats and epochs".into());
            }
        }
        if self.unet.decoder_depths.is_empty() || self.unet.decoder_depths.contains(&0) {
            return Err("unet.decoder_depths must list positive depths".into());
        }
        if self.histogram_bins == 0 {
            return Err("histogram_bins must be positive".into());
        }
        Ok(())
    }
}
