//! Evaluation of any checkpoint on any dataset.

use std::path::{Path, PathBuf};

use celmseg_core::celm::CelmFit;
use celmseg_core::datagen::{image_batch, Sample};
use celmseg_core::encoder::{Encoder, InputShape};
use celmseg_core::metrics::{accuracy, boulder_iou, cob_error, miou, EvalRecord};
use celmseg_core::train::{wscce_loss, ClassWeights, CobRegression, Objective};
use celmseg_core::unet::{UNetModel, N_CLASSES};
use celmseg_core::Tensor;
use serde_json::Value;

use crate::checkpoint::{self, Checkpoint, ModelKind};
use crate::error::{AppError, AppResult};
use crate::pgm;

const PREDICT_CHUNK: usize = 32;

pub enum Model {
    Celm(CelmFit),
    Cnn(Encoder),
    Unet(UNetModel, ClassWeights),
}

impl Model {
    pub fn load(path: &Path) -> AppResult<Self> {
        let ck = Checkpoint::load(path)?;
        Ok(match ck.kind {
            ModelKind::Celm => Model::Celm(checkpoint::to_celm(&ck, path)?),
            ModelKind::Cnn => Model::Cnn(checkpoint::to_encoder(&ck, path)?),
            ModelKind::Unet => {
                let unet = checkpoint::to_unet(&ck, path)?;
                let weights = match ck.metadata.get("class_weights") {
                    Some(v) => serde_json::from_value(v.clone()).map_err(|e| AppError::format(path, e.to_string()))?,
                    None => ClassWeights::uniform(N_CLASSES),
                };
                Model::Unet(unet, weights)
            }
        })
    }

    pub fn input(&self) -> InputShape {
        match self {
            Model::Celm(f) => f.encoder.input,
            Model::Cnn(e) => e.input,
            Model::Unet(u, _) => u.input,
        }
    }

    pub fn is_segmenter(&self) -> bool {
        matches!(self, Model::Unet(..))
    }
}

/// Per-sample evaluation: CoB error for encoders; WSCCE, accuracy, MIOU and
/// boulder IoU for the UNet. Also returns the predicted masks of a UNet.
pub fn evaluate(model: &Model, samples: &[Sample], source: &Path) -> AppResult<(Vec<EvalRecord>, Vec<Vec<u8>>)> {
    let input = model.input();
    if samples.is_empty() {
        return Err(AppError::format(source, "no samples to evaluate"));
    }
    for s in samples {
        if s.image.width != input.width || s.image.height != input.height {
            return Err(AppError::format(
                source,
                format!(
                    "sample {} is {}x{} but the model expects {}x{} images",
                    s.id, s.image.width, s.image.height, input.width, input.height
                ),
            ));
        }
        if !model.is_segmenter() && s.cob.is_none() {
            return Err(AppError::format(
                source,
                format!("sample {} has no CoB label, which a CoB regression model needs", s.id),
            ));
        }
    }
    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    match model {
        Model::Celm(fit) => {
            let mut errors = Vec::with_capacity(samples.len());
            for chunk in samples.chunks(PREDICT_CHUNK) {
                let pred = fit.predict_cob(chunk)?;
                errors.extend(chunk.iter().zip(pred).map(|(s, p)| cob_error(p, s.cob.unwrap())));
            }
            Ok((vec![EvalRecord::new("cob_error", ids, errors)], Vec::new()))
        }
        Model::Cnn(enc) => {
            let mut errors = Vec::with_capacity(samples.len());
            for chunk in samples.chunks(PREDICT_CHUNK) {
                let refs: Vec<&Sample> = chunk.iter().collect();
                errors.extend(CobRegression.metric(enc, &refs)?);
            }
            Ok((vec![EvalRecord::new("cob_error", ids, errors)], Vec::new()))
        }
        Model::Unet(unet, weights) => {
            let (mut loss, mut acc, mut mi, mut bi) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
            let mut masks = Vec::with_capacity(samples.len());
            for chunk in samples.chunks(PREDICT_CHUNK) {
                let refs: Vec<&Sample> = chunk.iter().collect();
                let out = unet.predict_mask(&image_batch(&refs)?)?;
                let px = input.height * input.width;
                for (i, s) in chunk.iter().enumerate() {
                    let logits = Tensor::new(
                        vec![1, input.height, input.width, N_CLASSES],
                        out.logits.data()[i * px * N_CLASSES..(i + 1) * px * N_CLASSES].to_vec(),
                    )?;
                    let truth = &s.mask_shadowed.labels;
                    loss.push(wscce_loss(&logits, truth, weights)?);
                    acc.push(accuracy(&out.masks[i], truth)?);
                    mi.push(miou(&out.masks[i], truth, N_CLASSES)?);
                    bi.push(boulder_iou(&out.masks[i], truth)?);
                }
                masks.extend(out.masks);
            }
            let records = vec![
                EvalRecord::new("wscce", ids.clone(), loss),
                EvalRecord::new("accuracy", ids.clone(), acc),
                EvalRecord::new("miou", ids.clone(), mi),
                EvalRecord::new("boulder_iou", ids, bi),
            ];
            Ok((records, masks))
        }
    }
}

/// MIOU of predicting background everywhere, per sample.
pub fn background_baseline(samples: &[Sample]) -> AppResult<EvalRecord> {
    let mut v = Vec::with_capacity(samples.len());
    for s in samples {
        let truth = &s.mask_shadowed.labels;
        v.push(miou(&vec![0u8; truth.len()], truth, N_CLASSES)?);
    }
    Ok(EvalRecord::new("miou", samples.iter().map(|s| s.id.clone()).collect(), v))
}

/// Write `k` (input, truth, prediction) PGM triplets. Returns the files.
pub fn dump_masks(samples: &[Sample], predictions: &[Vec<u8>], k: usize, dir: &Path) -> AppResult<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))?;
    let mut files = Vec::with_capacity(3 * k);
    for (s, p) in samples.iter().zip(predictions).take(k) {
        let (w, h) = (s.image.width, s.image.height);
        let to_u8 = |m: &[u8]| m.iter().map(|&l| if l > 0 { 255 } else { 0 }).collect::<Vec<u8>>();
        for (tag, data) in
            [("input", pgm::quantize(&s.image.pixels)), ("truth", to_u8(&s.mask_shadowed.labels)), ("pred", to_u8(p))]
        {
            let path = dir.join(format!("{}_{}.pgm", s.id, tag));
            pgm::write(&path, w, h, &data)?;
            files.push(path);
        }
    }
    Ok(files)
}

/// Metadata attached to a trained checkpoint.
pub fn training_metadata(history: &impl serde::Serialize, weights: Option<&ClassWeights>) -> Value {
    let mut m = serde_json::Map::new();
    m.insert("history".into(), serde_json::to_value(history).expect("history serializes"));
    if let Some(w) = weights {
        m.insert("class_weights".into(), serde_json::to_value(w).expect("weights serialize"));
    }
    Value::Object(m)
}
