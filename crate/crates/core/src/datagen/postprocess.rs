use alloc::vec::Vec;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{render::mask_centroid, GrayImage, Mask, Sample};
use crate::error::{Error, Result};
use crate::metrics::CoB;
use crate::rng::rng_from_seed;

/// Image-only corruption applied after cropping.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    /// Standard deviation of additive Gaussian noise.
    pub sigma: f64,
    /// Apply a 3×3 box blur before adding noise.
    pub blur: bool,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self { sigma: 0.01, blur: false }
    }
}

impl NoiseConfig {
    pub fn none() -> Self {
        Self { sigma: 0.0, blur: false }
    }
}

fn crop_mask(m: &Mask, ox: usize, oy: usize, size: usize) -> Mask {
    let mut labels = Vec::with_capacity(size * size);
    for y in oy..oy + size {
        labels.extend_from_slice(&m.labels[y * m.width + ox..y * m.width + ox + size]);
    }
    Mask { width: size, height: size, labels }
}

fn bbox(m: &Mask) -> Option<(usize, usize, usize, usize)> {
    let mut b: Option<(usize, usize, usize, usize)> = None;
    for (i, &l) in m.labels.iter().enumerate() {
        if l != 0 {
            let (x, y) = (i % m.width, i / m.width);
            b = Some(match b {
                None => (x, y, x, y),
                Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
            });
        }
    }
    b
}

/// Offset range along one axis keeping `[lo, hi]` inside a window of `crop`.
fn feasible(lo: usize, hi: usize, crop: usize, full: usize) -> Option<(usize, usize)> {
    let min = (hi + 1).saturating_sub(crop);
    let max = lo.min(full - crop);
    (min <= max).then_some((min, max))
}

/// Random square crop to `crop_to` pixels followed by image noise.
///
/// The crop offset is drawn so that every labeled boulder pixel stays in the
/// window whenever that is possible; the CoB then shifts by exactly minus the
/// offset. When the boulder cannot fit, the offset is unconstrained and the
/// CoB is recomputed from the cropped mask.
pub fn postprocess(sample: &Sample, crop_to: usize, noise: &NoiseConfig, seed: u64) -> Result<Sample> {
    let (w, h) = (sample.image.width, sample.image.height);
    if crop_to > w || crop_to > h || crop_to == 0 {
        return Err(Error::Parameter(alloc::format!("crop {} does not fit a {}x{} image", crop_to, w, h)));
    }
    if !(noise.sigma >= 0.0) {
        return Err(Error::Parameter("noise sigma must be non-negative".into()));
    }
    let mut rng = rng_from_seed(seed);
    let keep = sample.mask_unshadowed.as_ref().unwrap_or(&sample.mask_shadowed);
    let ranges = bbox(keep).and_then(|(x0, y0, x1, y1)| {
        Some((feasible(x0, x1, crop_to, w)?, feasible(y0, y1, crop_to, h)?))
    });
    let contained = ranges.is_some();
    let ((xmin, xmax), (ymin, ymax)) = ranges.unwrap_or(((0, w - crop_to), (0, h - crop_to)));
    let ox = rng.random_range(xmin..=xmax);
    let oy = rng.random_range(ymin..=ymax);

    let mut pixels = Vec::with_capacity(crop_to * crop_to);
    for y in oy..oy + crop_to {
        pixels.extend_from_slice(&sample.image.pixels[y * w + ox..y * w + ox + crop_to]);
    }
    if noise.blur {
        let src = pixels.clone();
        let n = crop_to as isize;
        for y in 0..n {
            for x in 0..n {
                let (mut s, mut c) = (0.0, 0.0);
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let (px, py) = (x + dx, y + dy);
                        if px >= 0 && py >= 0 && px < n && py < n {
                            s += src[(py * n + px) as usize];
                            c += 1.0;
                        }
                    }
                }
                pixels[(y * n + x) as usize] = s / c;
            }
        }
    }
    if noise.sigma > 0.0 {
        let dist = Normal::new(0.0, noise.sigma).map_err(|e| Error::Parameter(alloc::format!("{}", e)))?;
        for p in pixels.iter_mut() {
            *p = (*p + dist.sample(&mut rng)).clamp(0.0, 1.0);
        }
    }
    let mask_shadowed = crop_mask(&sample.mask_shadowed, ox, oy, crop_to);
    let mask_unshadowed = sample.mask_unshadowed.as_ref().map(|m| crop_mask(m, ox, oy, crop_to));
    let cob = match sample.cob {
        Some(c) if contained => Some(CoB::new(c.u - ox as f64, c.v - oy as f64)),
        Some(_) => mask_centroid(&mask_shadowed),
        None => None,
    };
    Ok(Sample {
        id: sample.id.clone(),
        image: GrayImage { width: crop_to, height: crop_to, pixels },
        mask_shadowed,
        mask_unshadowed,
        cob,
        meta: sample.meta.clone(),
    })
}
