//! Procedural boulder scenes with ground truth.
//!
//! Single-boulder scenes put one irregular boulder on a rough, gently curved
//! heightfield, with the camera aimed at the boulder; the CoB label is the
//! centroid of the boulder's lit (shadow-free) pixels. Multi-boulder scenes
//! scatter many boulders over an ellipsoidal body seen against black space.
//! Shading is Lambertian; cast shadows come from ray-marching the
//! heightfield toward the light.

mod postprocess;
mod render;
mod split;

use alloc::string::String;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

pub use postprocess::{postprocess, NoiseConfig};
pub use render::{
    archetypes, generate_multi, generate_single, mask_centroid, render_multi, render_single, sample_multi_scene,
    sample_single_scene, Archetype, Light, MultiScene, Rendered, ShadingModel, SingleScene,
};
pub use split::{phase_bucket, split, SplitCounts, SplitSpec, Splits, PHASE_BUCKETS};

use crate::error::{dim_err, Result};
use crate::metrics::CoB;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(dim_err!("{}x{} image needs {} pixels, got {}", width, height, width * height, pixels.len()));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }
}

/// Binary label grid: 1 = boulder, 0 = everything else.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u8>,
}

impl Mask {
    pub fn new(width: usize, height: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != width * height {
            return Err(dim_err!("{}x{} mask needs {} labels, got {}", width, height, width * height, labels.len()));
        }
        Ok(Self { width, height, labels })
    }

    pub fn count(&self) -> usize {
        self.labels.iter().filter(|&&l| l != 0).count()
    }

    /// Every labeled pixel of `self` is labeled in `other`.
    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.labels.iter().zip(&other.labels).all(|(&a, &b)| a == 0 || b != 0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneMode {
    SingleBoulder,
    MultiBoulder,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub seed: u64,
    /// Angle between the light direction and the (nadir) view axis, degrees.
    pub phase_angle_deg: f64,
    pub boulder_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub image: GrayImage,
    pub mask_shadowed: Mask,
    pub mask_unshadowed: Option<Mask>,
    pub cob: Option<CoB>,
    pub meta: SampleMeta,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Self {
        Self { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset::new(indices.iter().map(|&i| self.samples[i].clone()).collect())
    }

    /// Common `(height, width)` of every image, or a dimension error.
    pub fn image_dims(&self) -> Result<(usize, usize)> {
        let first = self.samples.first().ok_or_else(|| crate::Error::Input("empty dataset".into()))?;
        let dims = (first.image.height, first.image.width);
        for s in &self.samples {
            if (s.image.height, s.image.width) != dims {
                return Err(dim_err!("sample {} is {}x{}, expected {}x{}", s.id, s.image.height, s.image.width, dims.0, dims.1));
            }
        }
        Ok(dims)
    }
}

/// Stack the images of `samples` into an `[n, h, w, 1]` batch.
pub fn image_batch(samples: &[&Sample]) -> Result<Tensor> {
    let first = samples.first().ok_or_else(|| dim_err!("empty batch"))?;
    let (h, w) = (first.image.height, first.image.width);
    let mut data = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if (s.image.height, s.image.width) != (h, w) {
            return Err(dim_err!("sample {} is {}x{}, batch is {}x{}", s.id, s.image.height, s.image.width, h, w));
        }
        data.extend_from_slice(&s.image.pixels);
    }
    Tensor::new(alloc::vec![samples.len(), h, w, 1], data)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub min: f64,
    pub max: f64,
}

impl Range {
    pub const fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    pub fn is_valid(&self) -> bool {
        self.min.is_finite() && self.max.is_finite() && self.min <= self.max
    }

    pub fn lerp(&self, t: f64) -> f64 {
        self.min + (self.max - self.min) * t
    }
}

/// How the light direction is chosen per sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LightSpec {
    /// One direction for every sample (x = columns, y = rows, z = up).
    Fixed { direction: [f64; 3] },
    /// Zenith angle `min + (max - min) · u^skew` and uniform azimuth, degrees.
    Random { zenith_deg: Range, azimuth_deg: Range, zenith_skew: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub mode: SceneMode,
    pub image_size: usize,
    pub n_boulder_archetypes: usize,
    /// Multi mode only; a zero-width range pins the count.
    pub boulder_count: (usize, usize),
    /// Boulder base radius in pixels.
    pub boulder_radius: Range,
    pub light: LightSpec,
    pub surface_albedo: Range,
    pub boulder_albedo: Range,
    /// Amplitude of the fractal roughness, in pixel height units.
    pub roughness_amplitude: f64,
    /// Feature size of the roughness' coarsest octave, in pixels.
    pub roughness_scale: f64,
    /// Curvature of the quasi-spherical surface (height drop at the image
    /// corner, in pixels).
    pub surface_curvature: f64,
    /// Multi mode: remove boulder labels touching the body silhouette edge.
    pub drop_limb_labels: bool,
    pub shading: ShadingModel,
    pub seed: u64,
}

impl SceneConfig {
    pub fn single_boulder(image_size: usize, seed: u64) -> Self {
        let s = image_size as f64;
        Self {
            mode: SceneMode::SingleBoulder,
            image_size,
            n_boulder_archetypes: 30,
            boulder_count: (1, 1),
            boulder_radius: Range::new(0.06 * s, 0.14 * s),
            light: LightSpec::Random {
                zenith_deg: Range::new(0.0, 70.0),
                azimuth_deg: Range::new(0.0, 360.0),
                zenith_skew: 1.3,
            },
            surface_albedo: Range::new(0.25, 0.55),
            boulder_albedo: Range::new(0.55, 0.95),
            roughness_amplitude: 0.04 * s,
            roughness_scale: 0.25 * s,
            surface_curvature: 0.05 * s,
            drop_limb_labels: false,
            shading: ShadingModel::Lambert,
            seed,
        }
    }

    pub fn multi_boulder(image_size: usize, seed: u64) -> Self {
        let s = image_size as f64;
        Self {
            mode: SceneMode::MultiBoulder,
            image_size,
            n_boulder_archetypes: 30,
            boulder_count: (28, 44),
            boulder_radius: Range::new(0.035 * s, 0.075 * s),
            light: LightSpec::Random {
                zenith_deg: Range::new(0.0, 60.0),
                azimuth_deg: Range::new(0.0, 360.0),
                zenith_skew: 1.3,
            },
            surface_albedo: Range::new(0.25, 0.5),
            boulder_albedo: Range::new(0.5, 0.9),
            roughness_amplitude: 0.015 * s,
            roughness_scale: 0.2 * s,
            surface_curvature: 0.0,
            drop_limb_labels: false,
            shading: ShadingModel::Lambert,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        use crate::Error::Config;
        if self.image_size < 8 {
            return Err(Config(alloc::format!("image size {} too small", self.image_size)));
        }
        if self.n_boulder_archetypes == 0 {
            return Err(Config("need at least one boulder archetype".into()));
        }
        if self.boulder_count.0 > self.boulder_count.1 {
            return Err(Config("boulder count range is reversed".into()));
        }
        for (name, r) in [
            ("boulder_radius", self.boulder_radius),
            ("surface_albedo", self.surface_albedo),
            ("boulder_albedo", self.boulder_albedo),
        ] {
            if !r.is_valid() {
                return Err(Config(alloc::format!("range {} is empty or unordered", name)));
            }
        }
        if self.boulder_radius.min <= 0.0 {
            return Err(Config("boulder radius must be positive".into()));
        }
        match self.light {
            LightSpec::Fixed { direction } => {
                let n = crate::math::sqrt(direction.iter().map(|v| v * v).sum());
                if (n - 1.0).abs() > 1e-9 {
                    return Err(Config(alloc::format!("light direction has norm {}, expected 1", n)));
                }
                if direction[2] <= 0.0 {
                    return Err(Config("light must come from above the surface".into()));
                }
            }
            LightSpec::Random { zenith_deg, azimuth_deg, zenith_skew } => {
                if !zenith_deg.is_valid() || !azimuth_deg.is_valid() || zenith_deg.min < 0.0 || zenith_deg.max >= 90.0 {
                    return Err(Config("light zenith range must lie in [0, 90)".into()));
                }
                if !(zenith_skew > 0.0) {
                    return Err(Config("zenith skew must be positive".into()));
                }
            }
        }
        Ok(())
    }
}
