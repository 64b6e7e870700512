//! Closed-form training of the output layer of a frozen random encoder.
//!
//! The output weights `β` minimize `‖β‖² + C‖Hβ − T‖²`, whose solution is
//! `Hᵀ(I/C + HHᵀ)⁻¹T` when `N ≤ L` and `(I/C + HᵀH)⁻¹HᵀT` otherwise. Both
//! systems are symmetric positive definite and are solved by Cholesky.

use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::datagen::{image_batch, Sample};
use crate::encoder::Encoder;
use crate::error::{dim_err, Error, Result};
use crate::exec::Clock;
use crate::linalg::{Cholesky, Matrix};
use crate::metrics::{cob_error, summarize, CoB, Summary};
use crate::tensor::Tensor;

/// Samples per forward pass when assembling `H`.
pub const HIDDEN_CHUNK: usize = 32;

/// The standard regularization grid `10⁻³ … 10³`.
pub const DEFAULT_C_GRID: [f64; 7] = [1e-3, 1e-2, 1e-1, 1.0, 1e1, 1e2, 1e3];

/// `N × L` hidden-layer output matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenMatrix(pub Matrix);

/// `N × M` regression targets.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetMatrix(pub Matrix);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    /// `N ≤ L`: factor the `N × N` system.
    Samples,
    /// `N > L`: factor the `L × L` system.
    Features,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RidgeSolution {
    pub beta: Matrix,
    pub c: f64,
    pub branch: Branch,
}

impl RidgeSolution {
    pub fn predict(&self, h: &HiddenMatrix) -> Result<Matrix> {
        h.0.matmul(&self.beta)
    }
}

/// Map CoB pixels to centred, size-normalized regression targets and back.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetScale {
    pub width: f64,
    pub height: f64,
}

impl TargetScale {
    pub fn for_image(width: usize, height: usize) -> Self {
        Self { width: width as f64, height: height as f64 }
    }

    pub fn encode(&self, c: CoB) -> [f64; 2] {
        [c.u / self.width - 0.5, c.v / self.height - 0.5]
    }

    pub fn decode(&self, t: &[f64]) -> CoB {
        CoB::new((t[0] + 0.5) * self.width, (t[1] + 0.5) * self.height)
    }
}

pub fn cob_targets(samples: &[Sample], scale: TargetScale) -> Result<TargetMatrix> {
    let mut data = Vec::with_capacity(samples.len() * 2);
    for s in samples {
        let c = s.cob.ok_or_else(|| Error::Input(alloc::format!("sample {} has no CoB label", s.id)))?;
        data.extend_from_slice(&scale.encode(c));
    }
    Ok(TargetMatrix(Matrix::new(samples.len(), 2, data)?))
}

/// Hidden-layer outputs for a batch tensor; one row per sample.
pub fn compute_hidden(model: &Encoder, batch: &Tensor) -> Result<HiddenMatrix> {
    let n = model.input.check(batch)?;
    let l = model.spec.fc_neurons;
    let mut data = Vec::with_capacity(n * l);
    let mut start = 0;
    while start < n {
        let count = HIDDEN_CHUNK.min(n - start);
        let chunk = if count == n { batch.clone() } else { batch.slice_batch(start, count)? };
        let mut g = Graph::new();
        let x = g.input(chunk);
        let h = model.forward_hidden(&mut g, x)?;
        data.extend_from_slice(g.value(h).data());
        start += count;
    }
    Ok(HiddenMatrix(Matrix::new(n, l, data)?))
}

/// Hidden matrix of a sample list, built chunk by chunk.
pub fn compute_hidden_for(model: &Encoder, samples: &[Sample]) -> Result<HiddenMatrix> {
    if samples.is_empty() {
        return Err(Error::Input("no samples".into()));
    }
    let l = model.spec.fc_neurons;
    let mut data = Vec::with_capacity(samples.len() * l);
    for chunk in samples.chunks(HIDDEN_CHUNK) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let h = compute_hidden(model, &image_batch(&refs)?)?;
        data.extend_from_slice(h.0.data());
    }
    Ok(HiddenMatrix(Matrix::new(samples.len(), l, data)?))
}

fn check_inputs(h: &HiddenMatrix, t: &TargetMatrix, c: f64) -> Result<()> {
    if !(c > 0.0) || !c.is_finite() {
        return Err(Error::Parameter(alloc::format!("regularization C must be positive and finite, got {}", c)));
    }
    if h.0.rows() != t.0.rows() {
        return Err(dim_err!("H has {} rows, T has {}", h.0.rows(), t.0.rows()));
    }
    if h.0.rows() == 0 || h.0.cols() == 0 || t.0.cols() == 0 {
        return Err(Error::Input("empty hidden or target matrix".into()));
    }
    if !h.0.all_finite() || !t.0.all_finite() {
        return Err(Error::Input("hidden or target matrix has non-finite entries".into()));
    }
    Ok(())
}

/// Solve for `β`, choosing the smaller system.
pub fn solve_ridge(h: &HiddenMatrix, t: &TargetMatrix, c: f64) -> Result<RidgeSolution> {
    let branch = if h.0.rows() <= h.0.cols() { Branch::Samples } else { Branch::Features };
    solve_ridge_with(h, t, c, branch)
}

/// Solve for `β` through a specific branch.
pub fn solve_ridge_with(h: &HiddenMatrix, t: &TargetMatrix, c: f64, branch: Branch) -> Result<RidgeSolution> {
    check_inputs(h, t, c)?;
    let (h, t) = (&h.0, &t.0);
    let beta = match branch {
        Branch::Samples => {
            let mut a = h.matmul_t(h)?;
            a.add_diagonal(1.0 / c);
            let x = Cholesky::factor(&a)?.solve(t)?;
            h.t_matmul(&x)?
        }
        Branch::Features => {
            let mut a = h.t_matmul(h)?;
            a.add_diagonal(1.0 / c);
            let rhs = h.t_matmul(t)?;
            Cholesky::factor(&a)?.solve(&rhs)?
        }
    };
    if !beta.all_finite() {
        return Err(Error::Numerical("ridge solution is not finite".into()));
    }
    Ok(RidgeSolution { beta, c, branch })
}

/// `‖β‖² + C‖Hβ − T‖²`.
pub fn ridge_objective(h: &HiddenMatrix, t: &TargetMatrix, beta: &Matrix, c: f64) -> Result<f64> {
    let r = h.0.matmul(beta)?;
    let fit: f64 = r.data().iter().zip(t.0.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    let norm: f64 = beta.data().iter().map(|x| x * x).sum();
    Ok(norm + c * fit)
}

/// Seconds spent in each phase of a closed-form training run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TimingProfile {
    pub forward_train: f64,
    pub forward_val: f64,
    pub solve: f64,
}

impl TimingProfile {
    pub fn total(&self) -> f64 {
        self.forward_train + self.forward_val + self.solve
    }

    /// `(forward_train, forward_val, solve)` fractions summing to 1. A run
    /// with no measurable duration reports equal thirds.
    pub fn fractions(&self) -> (f64, f64, f64) {
        let t = self.total();
        if !(t > 0.0) {
            return (1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0);
        }
        (self.forward_train / t, self.forward_val / t, self.solve / t)
    }
}

/// Validation error of one candidate `C`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CandidateError {
    pub c: f64,
    pub error: Summary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegularizationResult {
    pub solution: RidgeSolution,
    pub c_best: f64,
    /// One entry per grid value, in grid order. Failed solves carry NaN.
    pub candidates: Vec<CandidateError>,
    pub timing: TimingProfile,
}

/// Per-sample CoB errors (pixels) of predictions in target space.
pub fn cob_errors(pred: &Matrix, samples: &[Sample], scale: TargetScale) -> Result<Vec<f64>> {
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let truth = s.cob.ok_or_else(|| Error::Input(alloc::format!("sample {} has no CoB label", s.id)))?;
            Ok(cob_error(scale.decode(pred.row(i)), truth))
        })
        .collect()
}

/// Build `H` for the training and validation sets once, solve for every `C`
/// in the grid, and keep the solution with the lowest mean validation CoB
/// error (ties go to the smaller `C`).
pub fn select_regularization(
    model: &Encoder,
    train: &[Sample],
    val: &[Sample],
    c_grid: &[f64],
    clock: &dyn Clock,
) -> Result<RegularizationResult> {
    if c_grid.is_empty() {
        return Err(Error::Input("empty regularization grid".into()));
    }
    if train.is_empty() || val.is_empty() {
        return Err(Error::Input("training and validation sets must be non-empty".into()));
    }
    let scale = TargetScale::for_image(model.input.width, model.input.height);
    let t_train = cob_targets(train, scale)?;
    let t0 = clock.now_seconds();
    let h_train = compute_hidden_for(model, train)?;
    let t1 = clock.now_seconds();
    let h_val = compute_hidden_for(model, val)?;
    let t2 = clock.now_seconds();

    let mut best: Option<(f64, RidgeSolution)> = None;
    let mut candidates = Vec::with_capacity(c_grid.len());
    let mut last_err = None;
    let mut solve_time = 0.0;
    for &c in c_grid {
        let s0 = clock.now_seconds();
        let solved = solve_ridge(&h_train, &t_train, c);
        solve_time += clock.now_seconds() - s0;
        let solved = solved.and_then(|sol| {
            let pred = sol.predict(&h_val)?;
            Ok((summarize(&cob_errors(&pred, val, scale)?), sol))
        });
        match solved {
            Ok((summary, sol)) => {
                candidates.push(CandidateError { c, error: summary });
                let better = match &best {
                    None => true,
                    Some((e, b)) => summary.mean < *e || (summary.mean == *e && c < b.c),
                };
                if better && summary.mean.is_finite() {
                    best = Some((summary.mean, sol));
                }
            }
            Err(e) => {
                candidates.push(CandidateError { c, error: Summary { mean: f64::NAN, std: f64::NAN, count: 0 } });
                last_err = Some(e);
            }
        }
    }
    let (_, solution) = best.ok_or_else(|| last_err.unwrap_or(Error::Numerical("no usable solution".into())))?;
    Ok(RegularizationResult {
        c_best: solution.c,
        solution,
        candidates,
        timing: TimingProfile { forward_train: t1 - t0, forward_val: t2 - t1, solve: solve_time },
    })
}

/// An encoder together with its closed-form output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct CelmFit {
    pub encoder: Encoder,
    pub beta: Matrix,
    pub c: f64,
}

impl CelmFit {
    pub fn predict_cob(&self, samples: &[Sample]) -> Result<Vec<CoB>> {
        let scale = TargetScale::for_image(self.encoder.input.width, self.encoder.input.height);
        let h = compute_hidden_for(&self.encoder, samples)?;
        let pred = h.0.matmul(&self.beta)?;
        Ok((0..samples.len()).map(|i| scale.decode(pred.row(i))).collect())
    }
}
