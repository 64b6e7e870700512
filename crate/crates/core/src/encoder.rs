//! Hierarchical pooling encoders.
//!
//! Cell `i` runs three parallel 3×3 convolutions with dilation rates 1, 2 and
//! 3, each with `d0 · 2^i` output channels, concatenates them in rate order,
//! applies the activation, and max- or mean-pools by 2. After the last cell
//! the tensor is flattened into a fully connected layer of `fc_neurons`
//! units. A CELM reads that layer as its hidden matrix; the gradient-trained
//! variant adds a dense regression head on top.

use alloc::format;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::init::{init_bias, init_kernel, InitScheme, KernelInit};
use crate::math;
use crate::ops::{Activation, Pooling};
use crate::params::{ParamId, ParamStore};
use crate::rng::derive_seed;
use crate::tensor::Tensor;

pub const KERNEL_SIZE: usize = 3;
pub const DEPTH_EXPANSION: usize = 2;
pub const DILATION_RATES: [usize; 3] = [1, 2, 3];
/// Outputs of the regression head: the (u, v) CoB coordinates.
pub const COB_OUTPUTS: usize = 2;

/// One point of the encoder design space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ArchSpec {
    pub pooling: Pooling,
    pub d0: usize,
    pub n_cells: usize,
    pub activation: Activation,
    pub init: InitScheme,
    pub fc_neurons: usize,
    pub run_index: usize,
}

impl ArchSpec {
    /// Cell counts admitted for an initial depth `d0 = 2^k`: `k+1 ..= k+3`
    /// (so 4 → 3..5, 8 → 4..6, 16 → 5..7).
    pub fn allowed_cells(d0: usize) -> Option<core::ops::RangeInclusive<usize>> {
        if d0 < 2 || !d0.is_power_of_two() {
            return None;
        }
        let k = d0.trailing_zeros() as usize;
        Some(k + 1..=k + 3)
    }

    pub fn check_pairing(d0: usize, n_cells: usize) -> Result<()> {
        match Self::allowed_cells(d0) {
            Some(r) if r.contains(&n_cells) => Ok(()),
            Some(r) => Err(Error::Config(format!(
                "d0 = {} admits {}..={} cells, got {}",
                d0, r.start(), r.end(), n_cells
            ))),
            None => Err(Error::Config(format!("initial depth d0 = {} is not a power of two >= 2", d0))),
        }
    }

    /// Per-branch depth of cell `i`.
    pub fn branch_depth(&self, i: usize) -> usize {
        self.d0 * DEPTH_EXPANSION.pow(i as u32)
    }

    /// Channels leaving cell `i` (three concatenated branches).
    pub fn cell_channels(&self, i: usize) -> usize {
        DILATION_RATES.len() * self.branch_depth(i)
    }

    pub fn validate(&self, input: InputShape) -> Result<()> {
        Self::check_pairing(self.d0, self.n_cells)?;
        if self.fc_neurons == 0 {
            return Err(Error::Config("fc_neurons must be positive".into()));
        }
        let (mut h, mut w) = (input.height, input.width);
        for i in 0..self.n_cells {
            if h < 2 || w < 2 || h % 2 != 0 || w % 2 != 0 {
                return Err(Error::Config(format!(
                    "input {}x{} exhausted at cell {} ({}x{} before pooling)",
                    input.height, input.width, i, h, w
                )));
            }
            h /= 2;
            w /= 2;
        }
        Ok(())
    }

    /// Stable seed for this structural point and run index.
    pub fn seed(&self, root: u64) -> u64 {
        let key = format!(
            "{}/{}/{}/{}/{}/{}",
            self.pooling.name(), self.d0, self.n_cells, self.activation.name(), self.init.name(), self.fc_neurons
        );
        derive_seed(root, &key, self.run_index as u64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl InputShape {
    pub fn gray(size: usize) -> Self {
        Self { height: size, width: size, channels: 1 }
    }

    pub fn check(&self, batch: &Tensor) -> Result<usize> {
        let [n, h, w, c] = batch.nhwc()?;
        if (h, w, c) != (self.height, self.width, self.channels) {
            return Err(Error::Dimension(format!(
                "batch is {}x{}x{}, model expects {}x{}x{}",
                h, w, c, self.height, self.width, self.channels
            )));
        }
        Ok(n)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub kernels: [ParamId; 3],
    pub biases: [ParamId; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

/// A built encoder: topology plus parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub spec: ArchSpec,
    pub input: InputShape,
    pub params: ParamStore,
    pub cells: Vec<Cell>,
    pub fc: DenseLayer,
    pub head: Option<DenseLayer>,
}

/// The encoder trained in closed form is the encoder itself, frozen.
pub type CelmModel = Encoder;

pub fn build_encoder(spec: &ArchSpec, input: InputShape, seed: u64) -> Result<Encoder> {
    spec.validate(input)?;
    let mut params = ParamStore::new();
    let mut cells = Vec::with_capacity(spec.n_cells);
    let mut cin = input.channels;
    for i in 0..spec.n_cells {
        let d = spec.branch_depth(i);
        let fan_in = KERNEL_SIZE * KERNEL_SIZE * cin;
        let mut kernels = [ParamId(0); 3];
        let mut biases = [ParamId(0); 3];
        for (b, rate) in DILATION_RATES.iter().enumerate() {
            let name = format!("cell{}.rate{}", i, rate);
            let k = init_kernel(
                &[KERNEL_SIZE, KERNEL_SIZE, cin, d],
                KernelInit::new(spec.init, derive_seed(seed, &format!("{}.kernel", name), 0)),
            )?;
            kernels[b] = params.add(format!("{}.kernel", name), k, true);
            let bias = init_bias(d, fan_in, derive_seed(seed, &format!("{}.bias", name), 0));
            biases[b] = params.add(format!("{}.bias", name), bias, true);
        }
        cells.push(Cell { kernels, biases });
        cin = spec.cell_channels(i);
    }
    let flat = flatten_width(spec, input);
    let w = init_kernel(
        &[flat, spec.fc_neurons],
        KernelInit::new(spec.init, derive_seed(seed, "fc.weight", 0)),
    )?;
    let weight = params.add("fc.weight", w, true);
    let bias = params.add("fc.bias", init_bias(spec.fc_neurons, flat, derive_seed(seed, "fc.bias", 0)), true);
    Ok(Encoder {
        spec: *spec,
        input,
        params,
        cells,
        fc: DenseLayer { weight, bias: Some(bias) },
        head: None,
    })
}

/// Width of the flattened tensor entering the fully connected layer.
pub fn flatten_width(spec: &ArchSpec, input: InputShape) -> usize {
    let s = 1usize << spec.n_cells;
    (input.height / s) * (input.width / s) * spec.cell_channels(spec.n_cells - 1)
}

/// Analytic parameter count of the convolutional cells (kernels + biases).
pub fn conv_parameter_count(spec: &ArchSpec, input_channels: usize) -> usize {
    let mut cin = input_channels;
    let mut total = 0;
    for i in 0..spec.n_cells {
        let d = spec.branch_depth(i);
        total += DILATION_RATES.len() * (KERNEL_SIZE * KERNEL_SIZE * cin * d + d);
        cin = spec.cell_channels(i);
    }
    total
}

/// Cell stack forward over parameters held in `params`.
pub fn forward_cells(
    spec: &ArchSpec,
    cells: &[Cell],
    params: &ParamStore,
    g: &mut Graph,
    x: NodeId,
    pool_last: bool,
) -> Result<(Vec<NodeId>, NodeId)> {
    let mut h = x;
    let mut taps = Vec::with_capacity(cells.len());
    for (i, cell) in cells.iter().enumerate() {
        let mut branches = [h; 3];
        for (b, &rate) in DILATION_RATES.iter().enumerate() {
            let k = g.param(params, cell.kernels[b]);
            let bias = g.param(params, cell.biases[b]);
            branches[b] = g.conv2d(h, k, Some(bias), rate)?;
        }
        let cat = g.concat(&branches)?;
        let act = g.activation(cat, spec.activation);
        taps.push(act);
        h = if pool_last || i + 1 < cells.len() { g.pool(act, spec.pooling)? } else { act };
    }
    Ok((taps, h))
}

impl Encoder {
    /// Attach a freshly initialized dense head (`fc_neurons → 2`, with bias)
    /// and unfreeze every parameter, turning the encoder into a network
    /// trainable end to end.
    pub fn with_regression_head(mut self, seed: u64) -> Self {
        let l = self.spec.fc_neurons;
        let bound = math::sqrt(6.0 / (l + COB_OUTPUTS) as f64);
        let mut rng = crate::rng::sub_rng(seed, "head.weight", 0);
        let w = Tensor::from_fn(&[l, COB_OUTPUTS], |_| {
            use rand::Rng as _;
            rng.random_range(-bound..=bound)
        });
        let weight = self.params.add("head.weight", w, false);
        let bias = self.params.add("head.bias", Tensor::zeros(&[COB_OUTPUTS]), false);
        self.head = Some(DenseLayer { weight, bias: Some(bias) });
        let ids: Vec<ParamId> = self.params.iter().map(|(id, _)| id).collect();
        for id in ids {
            self.params.set_frozen(id, false);
        }
        self
    }

    /// Run the cells. Returns the post-activation, pre-pooling tensor of each
    /// cell (the skip taps) and the pooled output of the last cell.
    pub fn forward_cells(&self, g: &mut Graph, x: NodeId, pool_last: bool) -> Result<(Vec<NodeId>, NodeId)> {
        forward_cells(&self.spec, &self.cells, &self.params, g, x, pool_last)
    }

    /// Forward to the activated fully connected layer (the CELM hidden layer).
    pub fn forward_hidden(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let (_, h) = self.forward_cells(g, x, true)?;
        let flat = g.flatten(h)?;
        let w = g.param(&self.params, self.fc.weight);
        let b = self.fc.bias.map(|b| g.param(&self.params, b));
        let z = g.dense(flat, w, b)?;
        Ok(g.activation(z, self.spec.activation))
    }

    /// Forward through the regression head, with optional dropout
    /// `(rate, seed)` on the hidden layer.
    pub fn forward_regression(&self, g: &mut Graph, x: NodeId, dropout: Option<(f64, u64)>) -> Result<NodeId> {
        let head = self.head.ok_or_else(|| Error::Usage("encoder has no regression head".into()))?;
        let mut h = self.forward_hidden(g, x)?;
        if let Some((rate, seed)) = dropout {
            h = g.dropout(h, rate, seed)?;
        }
        let w = g.param(&self.params, head.weight);
        let b = head.bias.map(|b| g.param(&self.params, b));
        g.dense(h, w, b)
    }

    /// Predict CoB outputs (in the model's target space) for a batch.
    pub fn predict_regression(&self, batch: &Tensor) -> Result<Tensor> {
        self.input.check(batch)?;
        let mut g = Graph::new();
        let x = g.input(batch.clone());
        let y = self.forward_regression(&mut g, x, None)?;
        Ok(g.take_value(y))
    }

    pub fn parameter_count(&self) -> usize {
        self.params.total_scalars()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(d0: usize, n: usize) -> ArchSpec {
        ArchSpec {
            pooling: Pooling::Max,
            d0,
            n_cells: n,
            activation: Activation::Elu,
            init: InitScheme::Orthogonal,
            fc_neurons: 8,
            run_index: 0,
        }
    }

    #[test]
    fn pairing_follows_depth() {
        for (d0, ok) in [(4, 3..=5), (8, 4..=6), (16, 5..=7)] {
            for n in 1..9 {
                assert_eq!(ArchSpec::check_pairing(d0, n).is_ok(), ok.contains(&n), "d0={} n={}", d0, n);
            }
        }
        assert!(ArchSpec::check_pairing(5, 4).is_err());
    }

    #[test]
    fn five_cells_reduce_128_to_4() {
        let s = spec(16, 5);
        assert_eq!(flatten_width(&s, InputShape::gray(128)), 4 * 4 * 3 * 256);
    }

    #[test]
    fn first_cell_emits_three_branches() {
        let s = spec(16, 5);
        assert_eq!(s.cell_channels(0), 48);
        let s4 = spec(4, 3);
        let e = build_encoder(&s4, InputShape::gray(16), 1).unwrap();
        let mut g = Graph::new();
        let x = g.input(Tensor::filled(&[2, 16, 16, 1], 0.5));
        let (taps, out) = e.forward_cells(&mut g, x, true).unwrap();
        assert_eq!(g.value(taps[0]).shape(), &[2, 16, 16, 12]);
        assert_eq!(g.value(taps[2]).shape(), &[2, 4, 4, 48]);
        assert_eq!(g.value(out).shape(), &[2, 2, 2, 48]);
    }

    #[test]
    fn build_is_deterministic_and_frozen() {
        let s = spec(4, 3);
        let a = build_encoder(&s, InputShape::gray(16), 9).unwrap();
        let b = build_encoder(&s, InputShape::gray(16), 9).unwrap();
        assert_eq!(a, b);
        assert!(a.params.iter().all(|(_, p)| p.frozen));
        assert_eq!(a.parameter_count(), conv_parameter_count(&s, 1) + flatten_width(&s, a.input) * 8 + 8);
    }

    #[test]
    fn spatial_exhaustion_is_config_error() {
        let s = spec(4, 5);
        assert!(matches!(build_encoder(&s, InputShape::gray(16), 0), Err(Error::Config(_))));
    }
}
