use celmseg_core::autodiff::{Graph, NodeId};
use celmseg_core::datagen::{generate_single, GrayImage, Mask, Sample, SampleMeta, SceneConfig};
use celmseg_core::encoder::{build_encoder, ArchSpec, InputShape};
use celmseg_core::exec::Sequential;
use celmseg_core::init::InitScheme;
use celmseg_core::metrics::CoB;
use celmseg_core::ops::{Activation, Pooling};
use celmseg_core::params::{ParamId, ParamStore};
use celmseg_core::rng::rng_from_seed;
use celmseg_core::train::{grid_tune, train, CobRegression, Objective, TrainConfig, Trainable};
use celmseg_core::unet::{build_unet, train_segmentation};
use celmseg_core::{Error, Result, Tensor};
use rand::Rng;

/// y = w·x + b on 1×1 "images": x is the pixel, y is stored in the CoB u field.
#[derive(Clone)]
struct Linear {
    params: ParamStore,
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn new() -> Self {
        let mut params = ParamStore::new();
        let w = params.add("w", Tensor::zeros(&[1, 1]), false);
        let b = params.add("b", Tensor::zeros(&[1]), false);
        Self { params, w, b }
    }
    fn slope(&self) -> f64 {
        self.params.value(self.w).data()[0]
    }
}

impl Trainable for Linear {
    fn params(&self) -> &ParamStore {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }
}

struct LeastSquares;

impl Objective<Linear> for LeastSquares {
    fn units(&self, _: &Sample) -> f64 {
        1.0
    }
    fn loss(&self, m: &Linear, g: &mut Graph, s: &[&Sample], denom: f64, _: Option<(f64, u64)>) -> Result<NodeId> {
        let x = g.input(Tensor::new(vec![s.len(), 1], s.iter().map(|s| s.image.pixels[0]).collect())?);
        let w = g.param(&m.params, m.w);
        let b = g.param(&m.params, m.b);
        let y = g.dense(x, w, Some(b))?;
        let t = Tensor::new(vec![s.len(), 1], s.iter().map(|s| s.cob.unwrap().u).collect())?;
        g.mse_with_denominator(y, &t, denom)
    }
    fn metric(&self, m: &Linear, s: &[&Sample]) -> Result<Vec<f64>> {
        let (w, b) = (m.slope(), m.params.value(m.b).data()[0]);
        Ok(s.iter().map(|s| (w * s.image.pixels[0] + b - s.cob.unwrap().u).abs()).collect())
    }
    fn higher_is_better(&self) -> bool {
        false
    }
    fn metric_name(&self) -> &'static str {
        "abs_error"
    }
}

fn point(i: usize, x: f64, y: f64) -> Sample {
    Sample {
        id: format!("p{}", i),
        image: GrayImage::new(1, 1, vec![x]).unwrap(),
        mask_shadowed: Mask::new(1, 1, vec![0]).unwrap(),
        mask_unshadowed: None,
        cob: Some(CoB::new(y, 0.0)),
        meta: SampleMeta { seed: 0, phase_angle_deg: 0.0, boulder_count: 0 },
    }
}

fn noisy_line(n: usize, seed: u64) -> Vec<Sample> {
    let mut rng = rng_from_seed(seed);
    (0..n)
        .map(|i| {
            let x: f64 = rng.random_range(-1.0..1.0);
            point(i, x, 1.7 * x - 0.3 + rng.random_range(-0.2..0.2))
        })
        .collect()
}

fn least_squares_slope(s: &[Sample]) -> f64 {
    let n = s.len() as f64;
    let mx = s.iter().map(|s| s.image.pixels[0]).sum::<f64>() / n;
    let my = s.iter().map(|s| s.cob.unwrap().u).sum::<f64>() / n;
    let sxy: f64 = s.iter().map(|s| (s.image.pixels[0] - mx) * (s.cob.unwrap().u - my)).sum();
    let sxx: f64 = s.iter().map(|s| (s.image.pixels[0] - mx).powi(2)).sum();
    sxy / sxx
}

#[test]
fn linear_toy_converges_to_least_squares_slope() {
    let data = noisy_line(64, 1);
    let cfg = TrainConfig::new(0.5, 64, 500, 0.0, 3);
    let (m, h) = train(&Linear::new(), &data, &data, &cfg, &LeastSquares, &Sequential).unwrap();
    assert!((m.slope() - least_squares_slope(&data)).abs() < 1e-3, "{} vs {}", m.slope(), least_squares_slope(&data));
    assert_eq!(h.epochs.len(), 500);
    let best = h.best().unwrap().val_metric;
    assert!(h.epochs.iter().all(|r| r.val_metric >= best));
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let data = noisy_line(10, 2);
    let mut start = Linear::new();
    start.params.value_mut(start.w).data_mut()[0] = 0.25;
    let (m, _) = train(&start, &data, &data, &TrainConfig::new(0.0, 3, 4, 0.0, 0), &LeastSquares, &Sequential).unwrap();
    assert_eq!(m.params, start.params);
}

#[test]
fn zero_epochs_is_identity() {
    let data = noisy_line(4, 2);
    let (m, h) = train(&Linear::new(), &data, &data, &TrainConfig::new(0.1, 2, 0, 0.0, 0), &LeastSquares, &Sequential).unwrap();
    assert_eq!(m.params, Linear::new().params);
    assert!(h.epochs.is_empty() && h.best_epoch.is_none());
}

#[test]
fn named_frozen_parameter_is_untouched() {
    let data = noisy_line(16, 4);
    let mut cfg = TrainConfig::new(0.3, 4, 20, 0.0, 0);
    cfg.frozen.insert("b".into());
    let (m, _) = train(&Linear::new(), &data, &data, &cfg, &LeastSquares, &Sequential).unwrap();
    assert_eq!(m.params.value(m.b).data(), &[0.0]);
    assert!(m.slope() != 0.0);
    cfg.frozen.insert("missing".into());
    assert!(matches!(train(&Linear::new(), &data, &data, &cfg, &LeastSquares, &Sequential), Err(Error::Config(_))));
}

#[test]
fn divergence_aborts_with_epoch_and_batch() {
    let data: Vec<Sample> = (0..8).map(|i| point(i, 1e3, -1e3)).collect();
    let cfg = TrainConfig::new(1e3, 2, 50, 0.0, 0);
    match train(&Linear::new(), &data, &data, &cfg, &LeastSquares, &Sequential) {
        Err(Error::NonFiniteLoss { epoch, batch, value }) => {
            assert!(!value.is_finite());
            assert!(epoch < 50 && batch < 4);
        }
        other => panic!("expected a non-finite loss abort, got {:?}", other.map(|r| r.1)),
    }
}

#[test]
fn grid_tune_runs_every_instance_and_ranks() {
    let data = noisy_line(32, 5);
    let grid: Vec<(usize, f64)> = [64, 128, 256, 512].iter().flat_map(|&b| [1e-4, 1e-3, 1e-2].map(|lr| (b, lr))).collect();
    let base = TrainConfig::new(0.0, 1, 1, 0.0, 9);
    let out = grid_tune(|_| Ok(Linear::new()), &data, &data, &grid, 2, 3, &base, &LeastSquares, &Sequential).unwrap();
    assert_eq!(out.len(), 24);
    for w in out.windows(2) {
        assert!(w[0].best_error <= w[1].best_error);
    }
    for r in &out {
        assert_eq!(r.best_error, r.history.epochs.iter().map(|e| e.val_metric).fold(f64::INFINITY, f64::min));
    }
    let one = grid_tune(|_| Ok(Linear::new()), &data, &data, &grid[..1], 1, 1, &base, &LeastSquares, &Sequential).unwrap();
    assert_eq!(one.len(), 1);
}

fn toy_spec() -> ArchSpec {
    ArchSpec { pooling: Pooling::Max, d0: 4, n_cells: 3, activation: Activation::Elu, init: InitScheme::Orthogonal, fc_neurons: 8, run_index: 0 }
}

#[test]
fn dropout_training_is_reproducible_and_head_updates() {
    let data = generate_single(&SceneConfig::single_boulder(16, 3), 12).unwrap().samples;
    let enc = build_encoder(&toy_spec(), InputShape::gray(16), 1).unwrap().with_regression_head(2);
    let cfg = TrainConfig::new(1e-3, 4, 2, 0.2, 17);
    let (a, ha) = train(&enc, &data[..8], &data[8..], &cfg, &CobRegression, &Sequential).unwrap();
    let (b, hb) = train(&enc, &data[..8], &data[8..], &cfg, &CobRegression, &Sequential).unwrap();
    assert_eq!(ha, hb);
    assert_eq!(a.params, b.params);
    let head = enc.head.unwrap();
    assert_ne!(a.params.value(head.weight), enc.params.value(head.weight));
}

#[test]
fn unet_training_never_touches_the_encoder() {
    let data = generate_single(&SceneConfig::single_boulder(16, 4), 10).unwrap().samples;
    let enc = build_encoder(&toy_spec(), InputShape::gray(16), 1).unwrap();
    let unet = build_unet(&enc, &[8, 4], Activation::Elu, 2).unwrap();
    let cfg = TrainConfig::new(0.05, 4, 3, 0.2, 5);
    let (trained, history, weights) = train_segmentation(&unet, &data[..6], &data[6..], &cfg, &Sequential).unwrap();
    assert_eq!(history.epochs.len(), 3);
    assert!((weights.w[0] + weights.w[1] - 1.0).abs() < 1e-12);
    let mut changed = false;
    for ((_, before), (_, after)) in unet.params.iter().zip(trained.params.iter()) {
        if before.frozen {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&before.value), bits(&after.value), "{} moved", before.name);
        } else {
            changed |= before.value != after.value;
        }
    }
    assert!(changed);
}
