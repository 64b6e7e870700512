//! Reverse-mode automatic differentiation over whole tensors.
//!
//! A [`Graph`] evaluates each operation eagerly and records it on a tape.
//! [`Graph::backward`] walks the tape in reverse and returns gradients for
//! every non-frozen parameter leaf. Nodes that do not depend on a trainable
//! parameter are never differentiated, so a frozen encoder costs only its
//! forward pass.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;
use rand::Rng as _;

use crate::error::{dim_err, Error, Result};
use crate::math;
use crate::ops::{self, Activation, Pooling};
use crate::params::{ParamId, ParamStore};
use crate::rng::rng_from_seed;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

pub type Gradients = BTreeMap<ParamId, Tensor>;

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Conv { x: NodeId, k: NodeId, b: Option<NodeId>, rate: usize },
    Act { x: NodeId, act: Activation },
    Pool { x: NodeId, strategy: Pooling, argmax: Vec<usize> },
    Upsample { x: NodeId, factor: usize },
    Concat { parts: Vec<NodeId>, widths: Vec<usize> },
    Reshape { x: NodeId },
    Dense { x: NodeId, w: NodeId, b: Option<NodeId> },
    Dropout { x: NodeId, mask: Vec<f64> },
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Sum { x: NodeId },
    Mse { pred: NodeId, target: Tensor, denom: f64 },
    Wscce { logits: NodeId, targets: Vec<u8>, weights: Vec<f64>, denom: f64, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn take_value(&mut self, id: NodeId) -> Tensor {
        core::mem::replace(&mut self.nodes[id.0].value, Tensor::scalar(0.0))
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Input, false)
    }

    /// Leaf for a stored parameter; differentiable unless the parameter is frozen.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        let p = store.get(id);
        self.push(p.value.clone(), Op::Param(id), !p.frozen)
    }

    pub fn conv2d(&mut self, x: NodeId, k: NodeId, b: Option<NodeId>, rate: usize) -> Result<NodeId> {
        let v = ops::conv2d(self.value(x), self.value(k), b.map(|b| self.value(b)), rate)?;
        let ng = self.needs(x) || self.needs(k) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(v, Op::Conv { x, k, b, rate }, ng))
    }

    pub fn activation(&mut self, x: NodeId, act: Activation) -> NodeId {
        let v = ops::apply_activation(self.value(x), act);
        let ng = self.needs(x);
        self.push(v, Op::Act { x, act }, ng)
    }

    pub fn pool(&mut self, x: NodeId, strategy: Pooling) -> Result<NodeId> {
        let (v, argmax) = ops::pool2d(self.value(x), strategy)?;
        let ng = self.needs(x);
        Ok(self.push(v, Op::Pool { x, strategy, argmax }, ng))
    }

    pub fn upsample(&mut self, x: NodeId, factor: usize) -> Result<NodeId> {
        if factor == 1 {
            return Ok(x);
        }
        let v = ops::upsample_nearest(self.value(x), factor)?;
        let ng = self.needs(x);
        Ok(self.push(v, Op::Upsample { x, factor }, ng))
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let refs: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = ops::concat_channels(&refs)?;
        let widths = refs.iter().map(|t| t.shape()[3]).collect();
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(v, Op::Concat { parts: parts.to_vec(), widths }, ng))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(x).clone().reshape(shape)?;
        let ng = self.needs(x);
        Ok(self.push(v, Op::Reshape { x }, ng))
    }

    /// Collapse all non-leading axes.
    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.value(x).shape();
        let n = s[0];
        let f = s[1..].iter().product();
        self.reshape(x, &[n, f])
    }

    pub fn dense(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let v = ops::dense(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let ng = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(v, Op::Dense { x, w, b }, ng))
    }

    /// Inverted dropout: each element is zeroed with probability `rate` and
    /// survivors are scaled by `1 / (1 - rate)`.
    pub fn dropout(&mut self, x: NodeId, rate: f64, seed: u64) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Parameter(alloc::format!("dropout rate {} not in [0, 1)", rate)));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let mut rng = rng_from_seed(seed);
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let v = Tensor::new(
            self.value(x).shape().to_vec(),
            self.value(x).data().iter().zip(&mask).map(|(a, m)| a * m).collect(),
        )?;
        let ng = self.needs(x);
        Ok(self.push(v, Op::Dropout { x, mask }, ng))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Add { a, b }, ng))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Mul { a, b }, ng))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(x).sum());
        let ng = self.needs(x);
        self.push(v, Op::Sum { x }, ng)
    }

    /// Sum of squared differences divided by `denom` (the element count for a
    /// plain mean).
    pub fn mse_with_denominator(&mut self, pred: NodeId, target: &Tensor, denom: f64) -> Result<NodeId> {
        let p = self.value(pred);
        p.check_same_shape(target)?;
        let s: f64 = p.data().iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).sum();
        let ng = self.needs(pred);
        Ok(self.push(Tensor::scalar(s / denom), Op::Mse { pred, target: target.clone(), denom }, ng))
    }

    pub fn mse(&mut self, pred: NodeId, target: &Tensor) -> Result<NodeId> {
        let n = target.len() as f64;
        self.mse_with_denominator(pred, target, n)
    }

    /// Class-weighted sparse softmax cross-entropy over the last axis, summed
    /// over pixels and divided by `denom`.
    pub fn wscce_with_denominator(&mut self, logits: NodeId, targets: &[u8], weights: &[f64], denom: f64) -> Result<NodeId> {
        let l = self.value(logits);
        let k = *l.shape().last().unwrap();
        if l.len() / k != targets.len() {
            return Err(dim_err!("{} logit rows vs {} targets", l.len() / k, targets.len()));
        }
        if weights.len() != k {
            return Err(dim_err!("{} class weights for {} classes", weights.len(), k));
        }
        let mut probs = vec![0.0; l.len()];
        let mut total = 0.0;
        for (px, (row, &t)) in l.data().chunks(k).zip(targets).enumerate() {
            let t = t as usize;
            if t >= k {
                return Err(Error::Input(alloc::format!("class index {} out of range for {} classes", t, k)));
            }
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|&v| math::exp(v - m)).sum();
            let lse = m + math::ln(z);
            total += weights[t] * (lse - row[t]);
            for (c, &v) in row.iter().enumerate() {
                probs[px * k + c] = math::exp(v - lse);
            }
        }
        let ng = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(total / denom),
            Op::Wscce { logits, targets: targets.to_vec(), weights: weights.to_vec(), denom, probs },
            ng,
        ))
    }

    /// Differentiate scalar node `loss` with respect to every trainable
    /// parameter leaf reachable from it.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(alloc::format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        let mut out = Gradients::new();
        if !self.needs(loss) {
            return Ok(out);
        }
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let send = |id: NodeId, d: Tensor, grads: &mut Vec<Option<Tensor>>| -> Result<()> {
                if !self.needs(id) {
                    return Ok(());
                }
                match &mut grads[id.0] {
                    Some(acc) => acc.add_assign(&d),
                    slot @ None => {
                        *slot = Some(d);
                        Ok(())
                    }
                }
            };
            match &node.op {
                Op::Input => {}
                Op::Param(pid) => match out.get_mut(pid) {
                    Some(acc) => acc.add_assign(&g)?,
                    None => {
                        out.insert(*pid, g);
                    }
                },
                Op::Conv { x, k, b, rate } => {
                    let (dx, dk, db) = ops::conv2d_backward(self.value(*x), self.value(*k), &g, *rate, self.needs(*x))?;
                    if let Some(dx) = dx {
                        send(*x, dx, &mut grads)?;
                    }
                    send(*k, dk, &mut grads)?;
                    if let Some(b) = b {
                        send(*b, db, &mut grads)?;
                    }
                }
                Op::Act { x, act } => {
                    let dx = ops::activation_backward(self.value(*x), &node.value, &g, *act);
                    send(*x, dx, &mut grads)?;
                }
                Op::Pool { x, strategy, argmax } => {
                    let dx = ops::pool2d_backward(self.value(*x).shape(), *strategy, argmax, &g);
                    send(*x, dx, &mut grads)?;
                }
                Op::Upsample { x, factor } => {
                    let dx = ops::upsample_nearest_backward(self.value(*x).shape(), *factor, &g);
                    send(*x, dx, &mut grads)?;
                }
                Op::Concat { parts, widths } => {
                    for (p, d) in parts.iter().zip(ops::split_channels(&g, widths)?) {
                        send(*p, d, &mut grads)?;
                    }
                }
                Op::Reshape { x } => {
                    let d = g.reshape(self.value(*x).shape())?;
                    send(*x, d, &mut grads)?;
                }
                Op::Dense { x, w, b } => {
                    let (dx, dw, db) = ops::dense_backward(self.value(*x), self.value(*w), &g, self.needs(*x))?;
                    if let Some(dx) = dx {
                        send(*x, dx, &mut grads)?;
                    }
                    send(*w, dw, &mut grads)?;
                    if let Some(b) = b {
                        send(*b, db, &mut grads)?;
                    }
                }
                Op::Dropout { x, mask } => {
                    let d = Tensor::new(g.shape().to_vec(), g.data().iter().zip(mask).map(|(a, m)| a * m).collect())?;
                    send(*x, d, &mut grads)?;
                }
                Op::Add { a, b } => {
                    send(*a, g.clone(), &mut grads)?;
                    send(*b, g, &mut grads)?;
                }
                Op::Mul { a, b } => {
                    let da = g.zip_map(self.value(*b), |x, y| x * y)?;
                    let db = g.zip_map(self.value(*a), |x, y| x * y)?;
                    send(*a, da, &mut grads)?;
                    send(*b, db, &mut grads)?;
                }
                Op::Sum { x } => {
                    let d = Tensor::filled(self.value(*x).shape(), g.data()[0]);
                    send(*x, d, &mut grads)?;
                }
                Op::Mse { pred, target, denom } => {
                    let s = 2.0 * g.data()[0] / denom;
                    let d = self.value(*pred).zip_map(target, |p, t| s * (p - t))?;
                    send(*pred, d, &mut grads)?;
                }
                Op::Wscce { logits, targets, weights, denom, probs } => {
                    let k = weights.len();
                    let s = g.data()[0] / denom;
                    let mut d = probs.clone();
                    for (px, &t) in targets.iter().enumerate() {
                        let w = weights[t as usize] * s;
                        let row = &mut d[px * k..(px + 1) * k];
                        row[t as usize] -= 1.0;
                        for v in row.iter_mut() {
                            *v *= w;
                        }
                    }
                    let d = Tensor::new(self.value(*logits).shape().to_vec(), d)?;
                    send(*logits, d, &mut grads)?;
                }
            }
        }
        Ok(out)
    }
}

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel_error: f64,
}

/// Compare `backward` against central differences with step `h` on `count`
/// randomly chosen trainable scalars. The relative error of each pick is
/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn check_gradients<F>(store: &ParamStore, loss: F, count: usize, h: f64, seed: u64) -> Result<GradCheck>
where
    F: Fn(&ParamStore, &mut Graph) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let l = loss(store, &mut g)?;
    let grads = g.backward(l)?;
    let trainable: Vec<(ParamId, usize)> = store.iter().filter(|(_, p)| !p.frozen).map(|(id, p)| (id, p.value.len())).collect();
    let total: usize = trainable.iter().map(|t| t.1).sum();
    if total == 0 {
        return Err(Error::Usage("no trainable parameters to check".into()));
    }
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let l = loss(s, &mut g)?;
        Ok(g.value(l).data()[0])
    };
    let mut rng = rng_from_seed(seed);
    let mut work = store.clone();
    let mut worst: f64 = 0.0;
    for _ in 0..count {
        let mut k = rng.random_range(0..total);
        let (id, idx) = trainable
            .iter()
            .find_map(|&(id, n)| if k < n { Some((id, k)) } else { k -= n; None })
            .unwrap();
        let analytic = grads.get(&id).map_or(0.0, |t| t.data()[idx]);
        let x0 = work.value(id).data()[idx];
        work.value_mut(id).data_mut()[idx] = x0 + h;
        let lp = eval(&work)?;
        work.value_mut(id).data_mut()[idx] = x0 - h;
        let lm = eval(&work)?;
        work.value_mut(id).data_mut()[idx] = x0;
        let numeric = (lp - lm) / (2.0 * h);
        let scale = analytic.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((analytic - numeric).abs() / scale);
    }
    Ok(GradCheck { checked: count, max_rel_error: worst })
}
