//! UNet segmentation around a frozen encoder.
//!
//! Skip taps are the activated, un-pooled output of every cell. The last
//! cell's activation is the bottleneck; decoder stage `j` upsamples to the
//! resolution of the next-shallower tap, concatenates it and applies two
//! 3×3 convolutions. When fewer stages than taps are requested the deepest
//! taps are bridged by a single larger upsampling step.

use alloc::format;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::datagen::Sample;
use crate::encoder::{conv_parameter_count, forward_cells, ArchSpec, Cell, Encoder, InputShape, COB_OUTPUTS, KERNEL_SIZE};
use crate::error::{Error, Result};
use crate::exec::ShardRunner;
use crate::init::glorot_uniform;
use crate::ops::Activation;
use crate::params::{ParamId, ParamStore};
use crate::rng::derive_seed;
use crate::tensor::Tensor;
use crate::train::{compute_class_weights, train, ClassWeights, Segmentation, Segmenter, TrainConfig, Trainable, TrainingHistory};

pub const N_CLASSES: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub kernel: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderStage {
    pub depth: usize,
    /// Encoder cell whose tap is concatenated at this stage.
    pub skip_cell: usize,
    pub upsample: usize,
    pub convs: [ConvLayer; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UNetModel {
    pub spec: ArchSpec,
    pub input: InputShape,
    /// Encoder cells; their parameters are frozen.
    pub cells: Vec<Cell>,
    pub params: ParamStore,
    pub decoder_depths: Vec<usize>,
    pub activation: Activation,
    pub stages: Vec<DecoderStage>,
    pub head: ConvLayer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationOutput {
    /// `[n, h, w, 2]`.
    pub logits: Tensor,
    /// One label vector (row-major, `h·w`) per image.
    pub masks: Vec<Vec<u8>>,
}

fn add_conv(params: &mut ParamStore, name: &str, k: usize, cin: usize, cout: usize, seed: u64) -> Result<ConvLayer> {
    let kernel = glorot_uniform(&[k, k, cin, cout], derive_seed(seed, name, 0))?;
    let kernel = params.add(format!("{}.kernel", name), kernel, false);
    let bias = params.add(format!("{}.bias", name), Tensor::zeros(&[cout]), false);
    Ok(ConvLayer { kernel, bias })
}

/// Wrap `encoder` with a decoder of the given stage depths. At most
/// `n_cells - 1` stages; the decoder activation defaults to ELU.
pub fn build_unet(encoder: &Encoder, decoder_depths: &[usize], activation: Activation, seed: u64) -> Result<UNetModel> {
    let n = encoder.cells.len();
    if decoder_depths.is_empty() || decoder_depths.len() > n.saturating_sub(1) {
        return Err(Error::Config(format!(
            "{} decoder depths for an encoder of {} cells (need 1..={})",
            decoder_depths.len(),
            n,
            n.saturating_sub(1)
        )));
    }
    if decoder_depths.contains(&0) {
        return Err(Error::Config("decoder depths must be positive".into()));
    }
    // Copy only the cell parameters; the dense layers are dropped.
    let mut params = ParamStore::new();
    let mut copy = |id: ParamId| {
        let p = encoder.params.get(id);
        params.add(p.name.clone(), p.value.clone(), true)
    };
    let cells: Vec<Cell> = encoder
        .cells
        .iter()
        .map(|c| Cell { kernels: c.kernels.map(&mut copy), biases: c.biases.map(&mut copy) })
        .collect();
    let m = decoder_depths.len();
    let spec = encoder.spec;
    let mut cin = spec.cell_channels(n - 1);
    let mut stages = Vec::with_capacity(m);
    for (j, &depth) in decoder_depths.iter().enumerate() {
        let skip_cell = m - 1 - j;
        let upsample = if j == 0 { 1 << (n - m) } else { 2 };
        let c0 = add_conv(&mut params, &format!("dec{}.conv0", j), KERNEL_SIZE, cin + spec.cell_channels(skip_cell), depth, seed)?;
        let c1 = add_conv(&mut params, &format!("dec{}.conv1", j), KERNEL_SIZE, depth, depth, seed)?;
        stages.push(DecoderStage { depth, skip_cell, upsample, convs: [c0, c1] });
        cin = depth;
    }
    let head = add_conv(&mut params, "head", 1, cin, N_CLASSES, seed)?;
    Ok(UNetModel { spec, input: encoder.input, cells, params, decoder_depths: decoder_depths.to_vec(), activation, stages, head })
}

impl UNetModel {
    pub fn forward(&self, g: &mut Graph, x: NodeId, dropout: Option<(f64, u64)>) -> Result<NodeId> {
        let (taps, mut h) = forward_cells(&self.spec, &self.cells, &self.params, g, x, false)?;
        if let Some((rate, seed)) = dropout {
            h = g.dropout(h, rate, seed)?;
        }
        let p = &self.params;
        for st in &self.stages {
            h = g.upsample(h, st.upsample)?;
            h = g.concat(&[h, taps[st.skip_cell]])?;
            for c in &st.convs {
                let k = g.param(p, c.kernel);
                let b = g.param(p, c.bias);
                h = g.conv2d(h, k, Some(b), 1)?;
                h = g.activation(h, self.activation);
            }
        }
        let k = g.param(p, self.head.kernel);
        let b = g.param(p, self.head.bias);
        g.conv2d(h, k, Some(b), 1)
    }

    /// Deterministic prediction; argmax ties go to class 0.
    pub fn predict_mask(&self, batch: &Tensor) -> Result<SegmentationOutput> {
        self.input.check(batch)?;
        let mut g = Graph::new();
        let x = g.input(batch.clone());
        let y = self.forward(&mut g, x, None)?;
        let logits = g.take_value(y);
        let [n, h, w, _] = logits.nhwc()?;
        let labels: Vec<u8> = logits.data().chunks(N_CLASSES).map(|px| u8::from(px[1] > px[0])).collect();
        let masks = labels.chunks(h * w).map(|c| c.to_vec()).collect::<Vec<_>>();
        debug_assert_eq!(masks.len(), n);
        Ok(SegmentationOutput { logits, masks })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.total_scalars()
    }

    pub fn trainable_parameter_count(&self) -> usize {
        self.params.trainable_scalars()
    }

    /// Replace every parameter value with the matching one from `checkpoint`.
    pub fn warm_start_from(&mut self, checkpoint: &UNetModel) -> Result<()> {
        self.params.load_values_from(&checkpoint.params)
    }
}

impl Trainable for UNetModel {
    fn params(&self) -> &ParamStore {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }
}

impl Segmenter for UNetModel {
    fn logits(&self, g: &mut Graph, x: NodeId, dropout: Option<(f64, u64)>) -> Result<NodeId> {
        self.forward(g, x, dropout)
    }

    fn predict_labels(&self, batch: &Tensor) -> Result<Vec<Vec<u8>>> {
        Ok(self.predict_mask(batch)?.masks)
    }
}

/// Class weights from the training masks, then WSCCE training keeping the
/// best-validation-MIOU parameters.
pub fn train_segmentation<R: ShardRunner>(
    unet: &UNetModel,
    train_set: &[Sample],
    val_set: &[Sample],
    cfg: &TrainConfig,
    runner: &R,
) -> Result<(UNetModel, TrainingHistory, ClassWeights)> {
    let masks: Vec<_> = train_set.iter().map(|s| &s.mask_shadowed).collect();
    let weights = compute_class_weights(&masks)?;
    let objective = Segmentation { weights: weights.clone() };
    let (model, history) = train(unet, train_set, val_set, cfg, &objective, runner)?;
    Ok((model, history, weights))
}

/// Analytic parameter counts `(total, trainable)` of the resize-convolution
/// UNet built by [`build_unet`], for a gray or multi-channel input.
pub fn resize_conv_parameter_count(spec: &ArchSpec, input_channels: usize, decoder_depths: &[usize]) -> (usize, usize) {
    let n = spec.n_cells;
    let m = decoder_depths.len();
    let k2 = KERNEL_SIZE * KERNEL_SIZE;
    let mut cin = spec.cell_channels(n - 1);
    let mut trainable = 0;
    for (j, &d) in decoder_depths.iter().enumerate() {
        let skip = spec.cell_channels(m - 1 - j);
        trainable += k2 * (cin + skip) * d + d + k2 * d * d + d;
        cin = d;
    }
    trainable += cin * N_CLASSES + N_CLASSES;
    (conv_parameter_count(spec, input_channels) + trainable, trainable)
}

/// Counts `(total, trainable)` for the alternative decoder layout in which
/// each stage is a single stride-2 3×3 transposed convolution followed by a
/// batch normalization with one trainable and two running statistics per
/// channel, the skip is concatenated after it, and the head is a 3×3
/// convolution. This layout is not built; it is reported for comparison.
pub fn transpose_bn_parameter_count(spec: &ArchSpec, input_channels: usize, decoder_depths: &[usize]) -> (usize, usize) {
    let n = spec.n_cells;
    let m = decoder_depths.len();
    let k2 = KERNEL_SIZE * KERNEL_SIZE;
    let mut cin = spec.cell_channels(n - 1);
    let mut trainable = 0;
    let mut running = 0;
    for (j, &d) in decoder_depths.iter().enumerate() {
        trainable += k2 * cin * d + d + d;
        running += 2 * d;
        cin = d + spec.cell_channels(m - 1 - j);
    }
    trainable += k2 * cin * N_CLASSES + N_CLASSES;
    (conv_parameter_count(spec, input_channels) + trainable + running, trainable)
}

/// Dense `L → 2` head parameter count.
pub fn dense_head_parameter_count(fc_neurons: usize) -> usize {
    fc_neurons * COB_OUTPUTS + COB_OUTPUTS
}
