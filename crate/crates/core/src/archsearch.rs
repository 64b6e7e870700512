//! Exhaustive search over the encoder design space with closed-form
//! training, and the sweep report it produces.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::celm::{select_regularization, TimingProfile};
use crate::datagen::Sample;
use crate::encoder::{build_encoder, ArchSpec, InputShape};
use crate::error::{Error, Result};
use crate::exec::{Clock, ShardRunner};
use crate::init::InitScheme;
use crate::ops::{Activation, Pooling};

/// A design-space grid: every combination of the listed values, with the
/// initial depth paired to its admissible cell counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub pooling: Vec<Pooling>,
    /// `(d0, cell counts)` pairs.
    pub depth_cells: Vec<(usize, Vec<usize>)>,
    pub activations: Vec<Activation>,
    pub inits: Vec<InitScheme>,
    /// Random restarts per structural point.
    pub runs: usize,
    pub fc_neurons: usize,
}

impl GridConfig {
    /// The full design space: 2 poolings × 9 depth/cell pairs × 7
    /// activations × 3 initializers × 3 runs.
    pub fn full(fc_neurons: usize) -> Self {
        Self {
            pooling: Pooling::ALL.to_vec(),
            depth_cells: alloc::vec![(4, alloc::vec![3, 4, 5]), (8, alloc::vec![4, 5, 6]), (16, alloc::vec![5, 6, 7])],
            activations: Activation::ALL.to_vec(),
            inits: InitScheme::ALL.to_vec(),
            runs: 3,
            fc_neurons,
        }
    }

    pub fn size(&self) -> usize {
        let dn: usize = self.depth_cells.iter().map(|(_, ns)| ns.len()).sum();
        self.pooling.len() * dn * self.activations.len() * self.inits.len() * self.runs
    }
}

/// Enumerate the grid in lexicographic order of (pooling, d0, n, activation,
/// init) as listed, with the run index innermost.
pub fn enumerate_grid(grid: &GridConfig) -> Result<Vec<ArchSpec>> {
    if grid.runs == 0 || grid.fc_neurons == 0 {
        return Err(Error::Config("grid needs at least one run and one hidden neuron".into()));
    }
    for (d0, ns) in &grid.depth_cells {
        for &n in ns {
            ArchSpec::check_pairing(*d0, n)?;
        }
    }
    let mut out = Vec::with_capacity(grid.size());
    for &pooling in &grid.pooling {
        for (d0, ns) in &grid.depth_cells {
            for &n_cells in ns {
                for &activation in &grid.activations {
                    for &init in &grid.inits {
                        for run_index in 0..grid.runs {
                            out.push(ArchSpec {
                                pooling,
                                d0: *d0,
                                n_cells,
                                activation,
                                init,
                                fc_neurons: grid.fc_neurons,
                                run_index,
                            });
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QualityBand {
    Excellent,
    High,
    Medium,
    Low,
}

impl QualityBand {
    pub fn name(self) -> &'static str {
        match self {
            QualityBand::Excellent => "excellent",
            QualityBand::High => "high",
            QualityBand::Medium => "medium",
            QualityBand::Low => "low",
        }
    }
}

/// One (architecture, C) result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub spec_index: usize,
    pub spec: ArchSpec,
    pub c: f64,
    pub val_error_mean: f64,
    pub val_error_std: f64,
    /// Wall-clock seconds of the whole closed-form run for this spec.
    pub train_seconds: f64,
    pub timing: TimingProfile,
    pub parameter_count: usize,
    pub failure: Option<String>,
    pub quality_band: Option<QualityBand>,
}

impl SweepRow {
    pub fn is_ok(&self) -> bool {
        self.failure.is_none() && self.val_error_mean.is_finite()
    }
}

/// Train one spec for every `C` and report one row per grid value. Failures
/// never propagate; they are recorded on the rows.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_spec(
    spec_index: usize,
    spec: &ArchSpec,
    input: InputShape,
    train: &[Sample],
    val: &[Sample],
    c_grid: &[f64],
    root_seed: u64,
    clock: &dyn Clock,
) -> Vec<SweepRow> {
    let start = clock.now_seconds();
    let outcome = build_encoder(spec, input, spec.seed(root_seed)).and_then(|enc| {
        let count = enc.parameter_count() + spec.fc_neurons * crate::encoder::COB_OUTPUTS;
        select_regularization(&enc, train, val, c_grid, clock).map(|r| (r, count))
    });
    let elapsed = clock.now_seconds() - start;
    match outcome {
        Ok((res, count)) => res
            .candidates
            .iter()
            .map(|cand| SweepRow {
                spec_index,
                spec: *spec,
                c: cand.c,
                val_error_mean: cand.error.mean,
                val_error_std: cand.error.std,
                train_seconds: elapsed,
                timing: res.timing,
                parameter_count: count,
                failure: (!cand.error.mean.is_finite()).then(|| "solve failed".to_string()),
                quality_band: None,
            })
            .collect(),
        Err(e) => c_grid
            .iter()
            .map(|&c| SweepRow {
                spec_index,
                spec: *spec,
                c,
                val_error_mean: f64::NAN,
                val_error_std: f64::NAN,
                train_seconds: elapsed,
                timing: TimingProfile::default(),
                parameter_count: 0,
                failure: Some(e.to_string()),
                quality_band: None,
            })
            .collect(),
    }
}

/// Aggregate over the random restarts of one structural point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuralRank {
    pub spec: ArchSpec,
    pub best_error: f64,
    pub best_c: f64,
    /// Mean over runs of each run's best error.
    pub mean_error: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    /// Order rows by (spec index, grid position) and assign quality bands by
    /// validation-error quartile; failed rows are ranked last.
    pub fn assemble(mut rows: Vec<SweepRow>) -> Self {
        rows.sort_by(|a, b| a.spec_index.cmp(&b.spec_index).then(a.c.total_cmp(&b.c)));
        let mut order: Vec<usize> = (0..rows.len()).collect();
        order.sort_by(|&a, &b| {
            let (ra, rb) = (&rows[a], &rows[b]);
            match (ra.is_ok(), rb.is_ok()) {
                (true, true) => ra.val_error_mean.total_cmp(&rb.val_error_mean).then(a.cmp(&b)),
                (true, false) => core::cmp::Ordering::Less,
                (false, true) => core::cmp::Ordering::Greater,
                (false, false) => a.cmp(&b),
            }
        });
        let n = rows.len();
        for (rank, &i) in order.iter().enumerate() {
            let q = rank * 4 / n.max(1);
            rows[i].quality_band = Some(if !rows[i].is_ok() {
                QualityBand::Low
            } else {
                [QualityBand::Excellent, QualityBand::High, QualityBand::Medium, QualityBand::Low][q]
            });
        }
        Self { rows }
    }

    pub fn best(&self) -> Option<&SweepRow> {
        self.rows
            .iter()
            .filter(|r| r.is_ok())
            .min_by(|a, b| a.val_error_mean.total_cmp(&b.val_error_mean).then(a.c.total_cmp(&b.c)))
    }

    /// Structural points ranked by the best run (ties by mean over runs).
    pub fn ranking(&self) -> Vec<StructuralRank> {
        // key: spec with run index cleared
        let mut per_run: BTreeMap<(ArchSpec, usize), (f64, f64)> = BTreeMap::new();
        for r in self.rows.iter().filter(|r| r.is_ok()) {
            let key = ArchSpec { run_index: 0, ..r.spec };
            let e = per_run.entry((key, r.spec.run_index)).or_insert((f64::INFINITY, r.c));
            if r.val_error_mean < e.0 {
                *e = (r.val_error_mean, r.c);
            }
        }
        let mut agg: BTreeMap<ArchSpec, Vec<(f64, f64, usize)>> = BTreeMap::new();
        for ((key, run), (err, c)) in per_run {
            agg.entry(key).or_default().push((err, c, run));
        }
        let mut out: Vec<StructuralRank> = agg
            .into_iter()
            .map(|(spec, runs)| {
                let (best_error, best_c, best_run) = runs
                    .iter()
                    .cloned()
                    .min_by(|a, b| a.0.total_cmp(&b.0))
                    .unwrap();
                StructuralRank {
                    spec: ArchSpec { run_index: best_run, ..spec },
                    best_error,
                    best_c,
                    mean_error: runs.iter().map(|r| r.0).sum::<f64>() / runs.len() as f64,
                }
            })
            .collect();
        out.sort_by(|a, b| a.best_error.total_cmp(&b.best_error).then(a.mean_error.total_cmp(&b.mean_error)));
        out
    }
}

/// Run the whole sweep through `runner`. The result does not depend on the
/// runner's degree of parallelism (apart from timing fields).
#[allow(clippy::too_many_arguments)]
pub fn run_sweep<R: ShardRunner>(
    grid: &[ArchSpec],
    input: InputShape,
    train: &[Sample],
    val: &[Sample],
    c_grid: &[f64],
    root_seed: u64,
    runner: &R,
    clock: &dyn Clock,
) -> SweepReport {
    let rows = runner.run(grid.len(), |i| evaluate_spec(i, &grid[i], input, train, val, c_grid, root_seed, clock));
    SweepReport::assemble(rows.into_iter().flatten().collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_grid_has_1134_points() {
        let g = GridConfig::full(128);
        assert_eq!(g.size(), 1134);
        let specs = enumerate_grid(&g).unwrap();
        assert_eq!(specs.len(), 1134);
        let mut sorted = specs.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), 1134);
    }

    #[test]
    fn single_point_and_desk_grids() {
        let one = GridConfig {
            pooling: alloc::vec![Pooling::Max],
            depth_cells: alloc::vec![(16, alloc::vec![5])],
            activations: alloc::vec![Activation::Elu],
            inits: alloc::vec![InitScheme::Orthogonal],
            runs: 1,
            fc_neurons: 8,
        };
        assert_eq!(enumerate_grid(&one).unwrap().len(), 1);
        let desk = GridConfig {
            pooling: Pooling::ALL.to_vec(),
            depth_cells: alloc::vec![(4, alloc::vec![3, 4])],
            activations: alloc::vec![Activation::Elu, Activation::Relu],
            inits: alloc::vec![InitScheme::Orthogonal],
            runs: 2,
            fc_neurons: 8,
        };
        let specs = enumerate_grid(&desk).unwrap();
        assert_eq!(specs.len(), 16);
        // run index innermost, pooling outermost
        assert_eq!(specs[0].run_index, 0);
        assert_eq!(specs[1].run_index, 1);
        assert_eq!(specs[0].pooling, Pooling::Mean);
        assert_eq!(specs[15].pooling, Pooling::Max);
    }

    #[test]
    fn pairing_violation_is_config_error() {
        let mut g = GridConfig::full(8);
        g.depth_cells = alloc::vec![(8, alloc::vec![3])];
        assert!(matches!(enumerate_grid(&g), Err(Error::Config(_))));
    }

    fn row(i: usize, err: f64) -> SweepRow {
        SweepRow {
            spec_index: i,
            spec: GridConfig::full(8).pooling.iter().map(|&p| ArchSpec {
                pooling: p,
                d0: 4,
                n_cells: 3,
                activation: Activation::Elu,
                init: InitScheme::Orthogonal,
                fc_neurons: 8,
                run_index: 0,
            }).next().unwrap(),
            c: 1.0,
            val_error_mean: err,
            val_error_std: 0.0,
            train_seconds: 0.0,
            timing: TimingProfile::default(),
            parameter_count: 0,
            failure: None,
            quality_band: None,
        }
    }

    #[test]
    fn bands_are_quartiles() {
        let rows: Vec<SweepRow> = (0..10).map(|i| row(i, (10 - i) as f64)).collect();
        let r = SweepReport::assemble(rows);
        let count = |b| r.rows.iter().filter(|x| x.quality_band == Some(b)).count();
        for b in [QualityBand::Excellent, QualityBand::High, QualityBand::Medium, QualityBand::Low] {
            assert!((2..=3).contains(&count(b)), "{:?}: {}", b, count(b));
        }
        assert_eq!(r.rows[9].quality_band, Some(QualityBand::Excellent));
        assert_eq!(r.best().unwrap().spec_index, 9);
    }
}
