//! Mini-batch gradient descent with dropout, parameter freezing, the two
//! losses and per-epoch validation.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph, NodeId};
use crate::celm::TargetScale;
use crate::datagen::{image_batch, Mask, Sample};
use crate::encoder::Encoder;
use crate::error::{dim_err, Error, Result};
use crate::exec::ShardRunner;
use crate::metrics::{cob_error, miou};
use crate::params::ParamStore;
use crate::rng::{derive_seed, rng_from_seed};
use crate::tensor::Tensor;

/// Samples per gradient shard. Shards are fixed by batch position, so the
/// summed gradient does not depend on how many workers evaluate them.
pub const SHARD_SAMPLES: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub dropout_rate: f64,
    pub seed: u64,
    /// Parameter names held fixed in addition to those flagged frozen.
    #[serde(default)]
    pub frozen: BTreeSet<String>,
}

impl TrainConfig {
    pub fn new(learning_rate: f64, batch_size: usize, epochs: usize, dropout_rate: f64, seed: u64) -> Self {
        Self { learning_rate, batch_size, epochs, dropout_rate, seed, frozen: BTreeSet::new() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(alloc::format!("learning rate must be finite and non-negative, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(alloc::format!("dropout rate must be in [0, 1), got {}", self.dropout_rate)));
        }
        Ok(())
    }
}

/// Per-class loss weights, indexed by class label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub w: Vec<f64>,
}

impl ClassWeights {
    pub fn uniform(n_classes: usize) -> Self {
        Self { w: alloc::vec![1.0; n_classes] }
    }
}

/// `w_c = 1 - f_c`, with `f_c` the pixel fraction of class `c` over the masks.
pub fn compute_class_weights(masks: &[&Mask]) -> Result<ClassWeights> {
    let mut counts = [0usize; 2];
    for m in masks {
        for &l in &m.labels {
            let l = l as usize;
            if l > 1 {
                return Err(Error::Input(alloc::format!("mask label {} is not 0 or 1", l)));
            }
            counts[l] += 1;
        }
    }
    let total = counts[0] + counts[1];
    if total == 0 {
        return Err(Error::Input("no mask pixels to compute class weights from".into()));
    }
    Ok(ClassWeights { w: counts.iter().map(|&c| 1.0 - c as f64 / total as f64).collect() })
}

pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    pred.check_same_shape(target)?;
    let s: f64 = pred.data().iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(s / pred.len().max(1) as f64)
}

/// Weighted sparse categorical cross-entropy, averaged over pixels.
pub fn wscce_loss(logits: &Tensor, targets: &[u8], weights: &ClassWeights) -> Result<f64> {
    let mut g = Graph::new();
    let l = g.input(logits.clone());
    let n = targets.len() as f64;
    let loss = g.wscce_with_denominator(l, targets, &weights.w, n)?;
    Ok(g.value(loss).data()[0])
}

/// A model whose parameters the loop can update.
pub trait Trainable: Clone + Sync {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
}

impl Trainable for Encoder {
    fn params(&self) -> &ParamStore {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }
}

/// Loss and validation metric for one kind of model output.
pub trait Objective<M>: Sync {
    /// Loss normalization units contributed by one sample.
    fn units(&self, sample: &Sample) -> f64;
    /// Loss of `samples`, summed and divided by `denom` units.
    fn loss(&self, model: &M, g: &mut Graph, samples: &[&Sample], denom: f64, dropout: Option<(f64, u64)>) -> Result<NodeId>;
    /// Per-sample metric values under inference (dropout off).
    fn metric(&self, model: &M, samples: &[&Sample]) -> Result<Vec<f64>>;
    fn higher_is_better(&self) -> bool;
    fn metric_name(&self) -> &'static str;
}

/// CoB regression through the encoder's dense head (MSE in normalized
/// target space; metric: pixel CoB error).
#[derive(Debug, Clone, Copy)]
pub struct CobRegression;

fn regression_targets(model: &Encoder, samples: &[&Sample]) -> Result<Tensor> {
    let scale = TargetScale::for_image(model.input.width, model.input.height);
    let mut data = Vec::with_capacity(samples.len() * 2);
    for s in samples {
        let c = s.cob.ok_or_else(|| Error::Input(alloc::format!("sample {} has no CoB label", s.id)))?;
        data.extend_from_slice(&scale.encode(c));
    }
    Tensor::new(alloc::vec![samples.len(), 2], data)
}

impl Objective<Encoder> for CobRegression {
    fn units(&self, _: &Sample) -> f64 {
        2.0
    }

    fn loss(&self, model: &Encoder, g: &mut Graph, samples: &[&Sample], denom: f64, dropout: Option<(f64, u64)>) -> Result<NodeId> {
        let target = regression_targets(model, samples)?;
        let x = g.input(image_batch(samples)?);
        let y = model.forward_regression(g, x, dropout)?;
        g.mse_with_denominator(y, &target, denom)
    }

    fn metric(&self, model: &Encoder, samples: &[&Sample]) -> Result<Vec<f64>> {
        let scale = TargetScale::for_image(model.input.width, model.input.height);
        let pred = model.predict_regression(&image_batch(samples)?)?;
        samples
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let truth = s.cob.ok_or_else(|| Error::Input(alloc::format!("sample {} has no CoB label", s.id)))?;
                Ok(cob_error(scale.decode(&pred.data()[2 * i..2 * i + 2]), truth))
            })
            .collect()
    }

    fn higher_is_better(&self) -> bool {
        false
    }

    fn metric_name(&self) -> &'static str {
        "cob_error"
    }
}

/// Two-class segmentation of the shadowed mask (WSCCE; metric: per-image MIOU).
#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation {
    pub weights: ClassWeights,
}

/// Models that map an image batch to per-pixel two-class logits.
pub trait Segmenter: Trainable {
    fn logits(&self, g: &mut Graph, x: NodeId, dropout: Option<(f64, u64)>) -> Result<NodeId>;
    /// Argmax masks, ties to class 0, one label vector per image.
    fn predict_labels(&self, batch: &Tensor) -> Result<Vec<Vec<u8>>>;
}

pub(crate) fn mask_labels(samples: &[&Sample]) -> Vec<u8> {
    samples.iter().flat_map(|s| s.mask_shadowed.labels.iter().copied()).collect()
}

impl<M: Segmenter> Objective<M> for Segmentation {
    fn units(&self, sample: &Sample) -> f64 {
        sample.mask_shadowed.labels.len() as f64
    }

    fn loss(&self, model: &M, g: &mut Graph, samples: &[&Sample], denom: f64, dropout: Option<(f64, u64)>) -> Result<NodeId> {
        let targets = mask_labels(samples);
        let x = g.input(image_batch(samples)?);
        let y = model.logits(g, x, dropout)?;
        g.wscce_with_denominator(y, &targets, &self.weights.w, denom)
    }

    fn metric(&self, model: &M, samples: &[&Sample]) -> Result<Vec<f64>> {
        let pred = model.predict_labels(&image_batch(samples)?)?;
        samples.iter().zip(&pred).map(|(s, p)| miou(p, &s.mask_shadowed.labels, 2)).collect()
    }

    fn higher_is_better(&self) -> bool {
        true
    }

    fn metric_name(&self) -> &'static str {
        "miou"
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_metric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub metric: String,
    pub higher_is_better: bool,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    #[serde(default)]
    pub warm_start: bool,
}

impl TrainingHistory {
    pub fn best(&self) -> Option<&EpochRecord> {
        self.best_epoch.and_then(|e| self.epochs.iter().find(|r| r.epoch == e))
    }

    /// Best validation score as an error (lower is better).
    pub fn best_error(&self) -> f64 {
        match self.best() {
            None => f64::INFINITY,
            Some(r) if self.higher_is_better => 1.0 - r.val_metric,
            Some(r) => r.val_metric,
        }
    }

    fn improves(&self, candidate: f64, current: f64) -> bool {
        if self.higher_is_better { candidate > current } else { candidate < current }
    }
}

fn accumulate(total: &mut Gradients, part: Gradients) -> Result<()> {
    for (id, g) in part {
        match total.get_mut(&id) {
            Some(t) => t.add_assign(&g)?,
            None => {
                total.insert(id, g);
            }
        }
    }
    Ok(())
}

/// Loss and mean metric over `samples`, with dropout off.
pub fn evaluate<M, O, R>(model: &M, objective: &O, samples: &[Sample], runner: &R) -> Result<(f64, f64)>
where
    M: Sync,
    O: Objective<M>,
    R: ShardRunner,
{
    if samples.is_empty() {
        return Err(Error::Input("empty evaluation set".into()));
    }
    let denom: f64 = samples.iter().map(|s| objective.units(s)).sum();
    let chunks: Vec<&[Sample]> = samples.chunks(SHARD_SAMPLES).collect();
    let parts = runner.run(chunks.len(), |i| -> Result<(f64, Vec<f64>)> {
        let refs: Vec<&Sample> = chunks[i].iter().collect();
        let mut g = Graph::new();
        let loss = objective.loss(model, &mut g, &refs, denom, None)?;
        Ok((g.value(loss).data()[0], objective.metric(model, &refs)?))
    });
    let mut loss = 0.0;
    let mut metric = 0.0;
    for p in parts {
        let (l, m) = p?;
        loss += l;
        metric += m.iter().sum::<f64>();
    }
    Ok((loss, metric / samples.len() as f64))
}

/// Train `model` in place of a copy and return it with its history. The
/// returned parameters are those of the best validation epoch.
pub fn train<M, O, R>(model: &M, train_set: &[Sample], val_set: &[Sample], cfg: &TrainConfig, objective: &O, runner: &R) -> Result<(M, TrainingHistory)>
where
    M: Trainable,
    O: Objective<M>,
    R: ShardRunner,
{
    cfg.validate()?;
    let mut history = TrainingHistory {
        metric: objective.metric_name().into(),
        higher_is_better: objective.higher_is_better(),
        epochs: Vec::with_capacity(cfg.epochs),
        best_epoch: None,
        warm_start: false,
    };
    let mut current = model.clone();
    if cfg.epochs == 0 {
        return Ok((current, history));
    }
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Input("training and validation sets must be non-empty".into()));
    }
    for name in &cfg.frozen {
        if current.params().find(name).is_none() {
            return Err(Error::Config(alloc::format!("frozen parameter {} does not exist", name)));
        }
    }
    let mut best: Option<(f64, ParamStore)> = None;
    let dropout = cfg.dropout_rate > 0.0;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut rng_from_seed(derive_seed(cfg.seed, "shuffle", epoch as u64)));
        let mut epoch_loss = 0.0;
        let mut epoch_units = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let samples: Vec<&Sample> = batch.iter().map(|&i| &train_set[i]).collect();
            let denom: f64 = samples.iter().map(|s| objective.units(s)).sum();
            let shards: Vec<&[&Sample]> = samples.chunks(SHARD_SAMPLES).collect();
            let step = (epoch as u64) << 32 | b as u64;
            let state = &current;
            let parts = runner.run(shards.len(), |s| -> Result<(f64, Gradients)> {
                let mut g = Graph::new();
                let drop = dropout.then(|| (cfg.dropout_rate, derive_seed(derive_seed(cfg.seed, "dropout", step), "shard", s as u64)));
                let loss = objective.loss(state, &mut g, shards[s], denom, drop)?;
                Ok((g.value(loss).data()[0], g.backward(loss)?))
            });
            let mut loss = 0.0;
            let mut grads = Gradients::new();
            for p in parts {
                let (l, gr) = p?;
                loss += l;
                accumulate(&mut grads, gr)?;
            }
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b, value: loss });
            }
            epoch_loss += loss * denom;
            epoch_units += denom;
            let store = current.params_mut();
            for (id, g) in grads {
                if store.is_frozen(id) || cfg.frozen.contains(&store.get(id).name) {
                    continue;
                }
                let v = store.value_mut(id);
                if v.shape() != g.shape() {
                    return Err(dim_err!("gradient shape {:?} for parameter of shape {:?}", g.shape(), v.shape()));
                }
                for (x, d) in v.data_mut().iter_mut().zip(g.data()) {
                    *x -= cfg.learning_rate * d;
                }
            }
        }
        let (val_loss, val_metric) = evaluate(&current, objective, val_set, runner)?;
        history.epochs.push(EpochRecord { epoch, train_loss: epoch_loss / epoch_units, val_loss, val_metric });
        let better = match &best {
            None => val_metric.is_finite(),
            Some((m, _)) => history.improves(val_metric, *m),
        };
        if better {
            best = Some((val_metric, current.params().clone()));
            history.best_epoch = Some(epoch);
        }
    }
    if let Some((_, params)) = best {
        *current.params_mut() = params;
    }
    Ok((current, history))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub repeat: usize,
    pub best_error: f64,
    pub history: TrainingHistory,
}

/// Train each `(batch size, learning rate)` pair `repeats` times for
/// `short_epochs` and rank by best validation error (ties to smaller rate).
#[allow(clippy::too_many_arguments)]
pub fn grid_tune<M, O, R, B>(
    build: B,
    train_set: &[Sample],
    val_set: &[Sample],
    grid: &[(usize, f64)],
    repeats: usize,
    short_epochs: usize,
    base: &TrainConfig,
    objective: &O,
    runner: &R,
) -> Result<Vec<TuneResult>>
where
    M: Trainable,
    O: Objective<M>,
    R: ShardRunner,
    B: Fn(usize) -> Result<M>,
{
    if grid.is_empty() || repeats == 0 {
        return Err(Error::Config("tuning grid must be non-empty".into()));
    }
    let mut out = Vec::with_capacity(grid.len() * repeats);
    for (gi, &(batch_size, learning_rate)) in grid.iter().enumerate() {
        for repeat in 0..repeats {
            let model = build(repeat)?;
            let cfg = TrainConfig {
                learning_rate,
                batch_size,
                epochs: short_epochs,
                seed: derive_seed(base.seed, "tune", (gi * repeats + repeat) as u64),
                ..base.clone()
            };
            let (_, history) = train(&model, train_set, val_set, &cfg, objective, runner)?;
            out.push(TuneResult { batch_size, learning_rate, repeat, best_error: history.best_error(), history });
        }
    }
    rank_tuning(&mut out);
    Ok(out)
}

pub fn rank_tuning(results: &mut [TuneResult]) {
    results.sort_by(|a, b| {
        a.best_error
            .total_cmp(&b.best_error)
            .then(a.learning_rate.total_cmp(&b.learning_rate))
            .then(a.batch_size.cmp(&b.batch_size))
            .then(a.repeat.cmp(&b.repeat))
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mse_examples() {
        let p = Tensor::new(alloc::vec![1, 2], alloc::vec![1.0, 0.0]).unwrap();
        let z = Tensor::zeros(&[1, 2]);
        assert_eq!(mse_loss(&p, &z).unwrap(), 0.5);
        assert_eq!(mse_loss(&p, &p).unwrap(), 0.0);
        assert!(mse_loss(&p, &Tensor::zeros(&[2, 1])).is_err());
    }

    #[test]
    fn wscce_examples() {
        let u = Tensor::zeros(&[1, 1, 1, 2]);
        assert!((wscce_loss(&u, &[1], &ClassWeights::uniform(2)).unwrap() - core::f64::consts::LN_2).abs() < 1e-15);
        let l = Tensor::new(alloc::vec![1, 1, 2, 2], alloc::vec![0.0, 0.0, 2.0, 0.0]).unwrap();
        let w = ClassWeights { w: alloc::vec![0.3, 0.7] };
        let expect = (0.7 * core::f64::consts::LN_2 + 0.3 * crate::math::softplus(-2.0)) / 2.0;
        assert!((wscce_loss(&l, &[1, 0], &w).unwrap() - expect).abs() < 1e-15);
        assert!(wscce_loss(&l, &[2, 0], &w).is_err());
    }

    #[test]
    fn class_weights_are_complements() {
        let m = Mask::new(10, 1, alloc::vec![1, 0, 0, 0, 0, 0, 0, 0, 0, 0]).unwrap();
        let w = compute_class_weights(&[&m]).unwrap();
        assert!((w.w[0] - 0.1).abs() < 1e-15 && (w.w[1] - 0.9).abs() < 1e-15);
        let b = Mask::new(2, 1, alloc::vec![0, 1]).unwrap();
        assert_eq!(compute_class_weights(&[&b]).unwrap().w, alloc::vec![0.5, 0.5]);
        assert!(compute_class_weights(&[]).is_err());
    }

    #[test]
    fn ranking_breaks_ties_toward_smaller_rate() {
        let h = TrainingHistory { metric: "x".into(), higher_is_better: false, epochs: Vec::new(), best_epoch: None, warm_start: false };
        let r = |lr: f64, e: f64| TuneResult { batch_size: 4, learning_rate: lr, repeat: 0, best_error: e, history: h.clone() };
        let mut v = alloc::vec![r(1e-2, 0.5), r(1e-3, 0.5), r(1e-4, 0.7)];
        rank_tuning(&mut v);
        assert_eq!(v.iter().map(|t| t.learning_rate).collect::<Vec<_>>(), alloc::vec![1e-3, 1e-2, 1e-4]);
    }
}
