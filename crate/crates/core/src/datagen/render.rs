use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{Dataset, GrayImage, LightSpec, Mask, Sample, SampleMeta, SceneConfig, SceneMode};
use crate::error::{Error, Result};
use crate::math::{self, sq};
use crate::metrics::CoB;
use crate::rng::{derive_seed, rng_from_seed, sub_rng, Rng};

const MAX_ATTEMPTS: usize = 100;
const HARMONICS: usize = 4;
const MARCH_STEP: f64 = 0.5;

/// Reflectance model used for shading. Only Lambert is implemented; other
/// photometric laws slot in here.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShadingModel {
    Lambert,
}

impl ShadingModel {
    fn radiance(self, albedo: f64, cos_incidence: f64) -> f64 {
        match self {
            ShadingModel::Lambert => albedo * cos_incidence.max(0.0),
        }
    }
}

/// Star-convex boulder outline `r(θ) = R (1 + Σ a_j cos(jθ + φ_j))`,
/// harmonics `j = 2..=5`, with a dome of height `height_ratio · R`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Archetype {
    pub amplitudes: [f64; HARMONICS],
    pub phases: [f64; HARMONICS],
    pub height_ratio: f64,
}

impl Archetype {
    fn sample(rng: &mut Rng) -> Self {
        let mut amplitudes = [0.0; HARMONICS];
        let mut phases = [0.0; HARMONICS];
        let budget = rng.random_range(0.1..0.35);
        let raw: [f64; HARMONICS] = core::array::from_fn(|j| rng.random_range(0.0..1.0) / (j + 1) as f64);
        let total: f64 = raw.iter().sum();
        for j in 0..HARMONICS {
            amplitudes[j] = budget * raw[j] / total;
            phases[j] = rng.random_range(0.0..2.0 * PI);
        }
        Self { amplitudes, phases, height_ratio: rng.random_range(0.45..0.9) }
    }

    fn radius_factor(&self, theta: f64) -> f64 {
        1.0 + (0..HARMONICS)
            .map(|j| self.amplitudes[j] * math::cos((j + 2) as f64 * theta + self.phases[j]))
            .sum::<f64>()
    }

    /// Largest extent relative to the base radius.
    pub fn max_factor(&self) -> f64 {
        1.0 + self.amplitudes.iter().sum::<f64>()
    }
}

pub fn archetypes(config: &SceneConfig) -> Vec<Archetype> {
    (0..config.n_boulder_archetypes)
        .map(|k| Archetype::sample(&mut sub_rng(config.seed, "archetype", k as u64)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Boulder {
    pub center: (f64, f64),
    pub radius: f64,
    pub rotation: f64,
    pub albedo: f64,
    pub shape: Archetype,
}

impl Boulder {
    /// Dome height above the underlying surface, if `(x, y)` lies inside.
    fn height_at(&self, x: f64, y: f64) -> Option<f64> {
        let dx = x - self.center.0;
        let dy = y - self.center.1;
        let rho2 = dx * dx + dy * dy;
        let reach = self.radius * self.shape.max_factor();
        if rho2 >= reach * reach {
            return None;
        }
        let theta = math::atan2(dy, dx) - self.rotation;
        let r = self.radius * self.shape.radius_factor(theta);
        let q = rho2 / (r * r);
        (q < 1.0).then(|| self.radius * self.shape.height_ratio * math::sqrt(1.0 - q))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Light {
    /// Unit vector toward the light (x = columns, y = rows, z = up).
    pub direction: [f64; 3],
}

impl Light {
    pub fn from_angles(zenith_deg: f64, azimuth_deg: f64) -> Self {
        let z = zenith_deg.to_radians();
        let a = azimuth_deg.to_radians();
        Self { direction: [math::sin(z) * math::cos(a), math::sin(z) * math::sin(a), math::cos(z)] }
    }

    pub fn zenith_deg(&self) -> f64 {
        math::acos(self.direction[2].clamp(-1.0, 1.0)).to_degrees()
    }

    fn sample(spec: &LightSpec, rng: &mut Rng) -> Self {
        match *spec {
            LightSpec::Fixed { direction } => Self { direction },
            LightSpec::Random { zenith_deg, azimuth_deg, zenith_skew } => {
                let u: f64 = rng.random_range(0.0..1.0);
                let z = zenith_deg.lerp(libm::pow(u, zenith_skew));
                let a = azimuth_deg.lerp(rng.random_range(0.0..1.0));
                Self::from_angles(z, a)
            }
        }
    }
}

/// Seeded fractal value noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct Roughness {
    seed: u64,
    amplitude: f64,
    scale: f64,
}

impl Roughness {
    fn lattice(&self, octave: u64, ix: i64, iy: i64) -> f64 {
        let h = derive_seed(self.seed ^ octave.wrapping_mul(0x9e37_79b9), "lattice", ((ix as u64) << 32) ^ (iy as u64 & 0xffff_ffff));
        (h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
    }

    fn value(&self, octave: u64, x: f64, y: f64) -> f64 {
        let (fx, fy) = (math::floor(x), math::floor(y));
        let (ix, iy) = (fx as i64, fy as i64);
        let s = |t: f64| t * t * (3.0 - 2.0 * t);
        let (tx, ty) = (s(x - fx), s(y - fy));
        let a = self.lattice(octave, ix, iy);
        let b = self.lattice(octave, ix + 1, iy);
        let c = self.lattice(octave, ix, iy + 1);
        let d = self.lattice(octave, ix + 1, iy + 1);
        let top = a + (b - a) * tx;
        let bot = c + (d - c) * tx;
        top + (bot - top) * ty
    }

    fn height(&self, x: f64, y: f64) -> f64 {
        if self.amplitude == 0.0 {
            return 0.0;
        }
        let mut total = 0.0;
        let mut amp = 1.0;
        let mut freq = 1.0 / self.scale.max(1.0);
        for o in 0..4 {
            total += amp * self.value(o, x * freq, y * freq);
            amp *= 0.5;
            freq *= 2.0;
        }
        total * self.amplitude / 1.875
    }
}

/// A single-boulder scene, before lighting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingleScene {
    pub size: usize,
    pub boulder: Boulder,
    pub surface_albedo: f64,
    roughness: Roughness,
    curvature: f64,
}

/// A multi-boulder scene: ellipsoidal body plus scattered boulders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiScene {
    pub size: usize,
    pub body_center: (f64, f64),
    pub body_axes: (f64, f64),
    pub body_rotation: f64,
    pub boulders: Vec<Boulder>,
    pub surface_albedo: f64,
    roughness: Roughness,
}

impl MultiScene {
    /// Normalized elliptical radius² (`< 1` inside the body).
    fn body_q(&self, x: f64, y: f64) -> f64 {
        let (c, s) = (math::cos(self.body_rotation), math::sin(self.body_rotation));
        let dx = x - self.body_center.0;
        let dy = y - self.body_center.1;
        let xr = c * dx + s * dy;
        let yr = -s * dx + c * dy;
        sq(xr / self.body_axes.0) + sq(yr / self.body_axes.1)
    }
}

/// Output of one render.
#[derive(Debug, Clone, PartialEq)]
pub struct Rendered {
    pub image: GrayImage,
    pub mask_shadowed: Mask,
    pub mask_unshadowed: Mask,
    /// Pixels belonging to the body (all pixels in single mode).
    pub silhouette: Vec<bool>,
    pub boulder_count: usize,
}

fn draw_boulder(rng: &mut Rng, config: &SceneConfig, archetypes: &[Archetype], center: (f64, f64)) -> Boulder {
    let k = rng.random_range(0..archetypes.len());
    Boulder {
        center,
        radius: config.boulder_radius.lerp(rng.random_range(0.0..1.0)),
        rotation: rng.random_range(0.0..2.0 * PI),
        albedo: config.boulder_albedo.lerp(rng.random_range(0.0..1.0)),
        shape: archetypes[k],
    }
}

pub fn sample_single_scene(config: &SceneConfig, archetypes: &[Archetype], seed: u64) -> (SingleScene, Light) {
    let mut rng = rng_from_seed(seed);
    let light = Light::sample(&config.light, &mut rng);
    let c = config.image_size as f64 / 2.0;
    let boulder = draw_boulder(&mut rng, config, archetypes, (c, c));
    let scene = SingleScene {
        size: config.image_size,
        boulder,
        surface_albedo: config.surface_albedo.lerp(rng.random_range(0.0..1.0)),
        roughness: Roughness {
            seed: rng.random(),
            amplitude: config.roughness_amplitude,
            scale: config.roughness_scale,
        },
        curvature: config.surface_curvature,
    };
    (scene, light)
}

pub fn sample_multi_scene(config: &SceneConfig, archetypes: &[Archetype], seed: u64) -> (MultiScene, Light) {
    let mut rng = rng_from_seed(seed);
    let light = Light::sample(&config.light, &mut rng);
    let s = config.image_size as f64;
    let mut scene = MultiScene {
        size: config.image_size,
        body_center: (s / 2.0 + rng.random_range(-0.05..0.05) * s, s / 2.0 + rng.random_range(-0.05..0.05) * s),
        body_axes: (rng.random_range(0.36..0.47) * s, rng.random_range(0.3..0.42) * s),
        body_rotation: rng.random_range(0.0..PI),
        boulders: Vec::new(),
        surface_albedo: config.surface_albedo.lerp(rng.random_range(0.0..1.0)),
        roughness: Roughness {
            seed: rng.random(),
            amplitude: config.roughness_amplitude,
            scale: config.roughness_scale,
        },
    };
    let (lo, hi) = config.boulder_count;
    let count = if lo == hi { lo } else { rng.random_range(lo..=hi) };
    while scene.boulders.len() < count {
        let p = (rng.random_range(0.0..s), rng.random_range(0.0..s));
        if scene.body_q(p.0, p.1) < 0.9 {
            let b = draw_boulder(&mut rng, config, archetypes, p);
            scene.boulders.push(b);
        }
    }
    (scene, light)
}

struct Fields {
    size: usize,
    height: Vec<f64>,
    albedo: Vec<f64>,
    boulder: Vec<bool>,
    body: Vec<bool>,
}

impl Fields {
    fn h(&self, x: isize, y: isize) -> f64 {
        let n = self.size as isize;
        self.height[(y.clamp(0, n - 1) * n + x.clamp(0, n - 1)) as usize]
    }

    fn bilinear(&self, x: f64, y: f64) -> f64 {
        let (fx, fy) = (math::floor(x), math::floor(y));
        let (ix, iy) = (fx as isize, fy as isize);
        let (tx, ty) = (x - fx, y - fy);
        let top = self.h(ix, iy) * (1.0 - tx) + self.h(ix + 1, iy) * tx;
        let bot = self.h(ix, iy + 1) * (1.0 - tx) + self.h(ix + 1, iy + 1) * tx;
        top * (1.0 - ty) + bot * ty
    }

    fn normal(&self, x: usize, y: usize) -> [f64; 3] {
        let (x, y) = (x as isize, y as isize);
        let gx = (self.h(x + 1, y) - self.h(x - 1, y)) / 2.0;
        let gy = (self.h(x, y + 1) - self.h(x, y - 1)) / 2.0;
        let n = math::sqrt(gx * gx + gy * gy + 1.0);
        [-gx / n, -gy / n, 1.0 / n]
    }

    /// Ray-march from pixel `(x, y)` toward the light over a fixed step grid.
    fn cast_shadow(&self, x: usize, y: usize, light: &Light, h_max: f64) -> bool {
        let [lx, ly, lz] = light.direction;
        let horiz = math::sqrt(lx * lx + ly * ly);
        if horiz < 1e-12 {
            return false;
        }
        let (dx, dy) = (lx / horiz, ly / horiz);
        let slope = lz / horiz;
        let h0 = self.height[y * self.size + x];
        let n = self.size as f64;
        let mut t = MARCH_STEP;
        loop {
            let ray = h0 + t * slope;
            if ray >= h_max {
                return false;
            }
            let (px, py) = (x as f64 + t * dx, y as f64 + t * dy);
            if px < 0.0 || py < 0.0 || px > n - 1.0 || py > n - 1.0 {
                return false;
            }
            if self.bilinear(px, py) > ray + 1e-9 {
                return true;
            }
            t += MARCH_STEP;
        }
    }

    fn render(&self, light: &Light, shading: ShadingModel, boulder_count: usize) -> Rendered {
        let n = self.size;
        let h_max = self.height.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut pixels = vec![0.0; n * n];
        let mut shadowed = vec![0u8; n * n];
        let mut unshadowed = vec![0u8; n * n];
        for y in 0..n {
            for x in 0..n {
                let i = y * n + x;
                if !self.body[i] {
                    continue;
                }
                let nrm = self.normal(x, y);
                let cos_i = nrm[0] * light.direction[0] + nrm[1] * light.direction[1] + nrm[2] * light.direction[2];
                let lit = cos_i > 0.0 && !self.cast_shadow(x, y, light, h_max);
                if lit {
                    pixels[i] = shading.radiance(self.albedo[i], cos_i).clamp(0.0, 1.0);
                }
                if self.boulder[i] {
                    unshadowed[i] = 1;
                    if lit {
                        shadowed[i] = 1;
                    }
                }
            }
        }
        Rendered {
            image: GrayImage { width: n, height: n, pixels },
            mask_shadowed: Mask { width: n, height: n, labels: shadowed },
            mask_unshadowed: Mask { width: n, height: n, labels: unshadowed },
            silhouette: self.body.clone(),
            boulder_count,
        }
    }
}

pub fn render_single(scene: &SingleScene, light: &Light, shading: ShadingModel) -> Rendered {
    let n = scene.size;
    let c = n as f64 / 2.0;
    let mut f = Fields {
        size: n,
        height: vec![0.0; n * n],
        albedo: vec![0.0; n * n],
        boulder: vec![false; n * n],
        body: vec![true; n * n],
    };
    for y in 0..n {
        for x in 0..n {
            let (fx, fy) = (x as f64, y as f64);
            let i = y * n + x;
            let r2 = (sq(fx - c) + sq(fy - c)) / (2.0 * c * c);
            let base = scene.roughness.height(fx, fy) - scene.curvature * r2;
            let grain = 1.0 + 0.15 * scene.roughness.value(7, fx * 0.5, fy * 0.5);
            match scene.boulder.height_at(fx, fy) {
                Some(dome) => {
                    f.height[i] = base + dome;
                    f.albedo[i] = scene.boulder.albedo;
                    f.boulder[i] = true;
                }
                None => {
                    f.height[i] = base;
                    f.albedo[i] = scene.surface_albedo * grain;
                }
            }
        }
    }
    f.render(light, shading, 1)
}

pub fn render_multi(scene: &MultiScene, light: &Light, shading: ShadingModel, drop_limb_labels: bool) -> Rendered {
    let n = scene.size;
    let mut f = Fields {
        size: n,
        height: vec![0.0; n * n],
        albedo: vec![0.0; n * n],
        boulder: vec![false; n * n],
        body: vec![false; n * n],
    };
    let depth = 0.6 * scene.body_axes.0.min(scene.body_axes.1);
    for y in 0..n {
        for x in 0..n {
            let (fx, fy) = (x as f64, y as f64);
            let q = scene.body_q(fx, fy);
            if q >= 1.0 {
                continue;
            }
            let i = y * n + x;
            let dome = math::sqrt(1.0 - q);
            f.body[i] = true;
            let mut h = depth * dome + scene.roughness.height(fx, fy) * dome;
            f.albedo[i] = scene.surface_albedo * (1.0 + 0.15 * scene.roughness.value(7, fx * 0.5, fy * 0.5));
            let mut top = 0.0;
            for b in &scene.boulders {
                if let Some(bh) = b.height_at(fx, fy) {
                    if bh > top {
                        top = bh;
                        f.albedo[i] = b.albedo;
                    }
                    f.boulder[i] = true;
                }
            }
            h += top;
            f.height[i] = h;
        }
    }
    let mut out = f.render(light, shading, scene.boulders.len());
    if drop_limb_labels {
        let touches_space = |x: usize, y: usize| {
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let (nx, ny) = (x as isize + dx, y as isize + dy);
                    if nx < 0 || ny < 0 || nx >= n as isize || ny >= n as isize || !f.body[ny as usize * n + nx as usize] {
                        return true;
                    }
                }
            }
            false
        };
        for y in 0..n {
            for x in 0..n {
                if touches_space(x, y) {
                    out.mask_shadowed.labels[y * n + x] = 0;
                    out.mask_unshadowed.labels[y * n + x] = 0;
                }
            }
        }
    }
    out
}

/// Centroid `(u, v)` of the labeled pixels, or `None` for an empty mask.
pub fn mask_centroid(mask: &Mask) -> Option<CoB> {
    let (mut su, mut sv, mut count) = (0.0, 0.0, 0usize);
    for (i, &l) in mask.labels.iter().enumerate() {
        if l != 0 {
            su += (i % mask.width) as f64;
            sv += (i / mask.width) as f64;
            count += 1;
        }
    }
    (count > 0).then(|| CoB::new(su / count as f64, sv / count as f64))
}

fn finish(index: usize, seed: u64, light: &Light, r: Rendered, with_cob: bool) -> Sample {
    let cob = if with_cob { mask_centroid(&r.mask_shadowed) } else { None };
    Sample {
        id: format!("{:06}", index),
        image: r.image,
        mask_shadowed: r.mask_shadowed,
        mask_unshadowed: Some(r.mask_unshadowed),
        cob,
        meta: SampleMeta { seed, phase_angle_deg: light.zenith_deg(), boulder_count: r.boulder_count },
    }
}

/// Generate `n` single-boulder samples at full render size (see
/// [`super::postprocess`] for cropping and noise). A sample whose boulder has
/// no lit pixel is redrawn, up to 100 attempts.
pub fn generate_single(config: &SceneConfig, n: usize) -> Result<Dataset> {
    if config.mode != SceneMode::SingleBoulder {
        return Err(Error::Config("generate_single needs a single_boulder config".into()));
    }
    config.validate()?;
    let arch = archetypes(config);
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let mut found = None;
        for attempt in 0..MAX_ATTEMPTS {
            let seed = derive_seed(config.seed, "sample", ((i as u64) << 8) | attempt as u64);
            let (scene, light) = sample_single_scene(config, &arch, seed);
            let r = render_single(&scene, &light, config.shading);
            if r.mask_shadowed.count() > 0 {
                found = Some(finish(i, seed, &light, r, true));
                break;
            }
        }
        samples.push(found.ok_or_else(|| {
            Error::Input(format!("sample {}: no visible boulder after {} attempts", i, MAX_ATTEMPTS))
        })?);
    }
    Ok(Dataset::new(samples))
}

/// Generate `n` multi-boulder samples. No CoB is attached.
pub fn generate_multi(config: &SceneConfig, n: usize) -> Result<Dataset> {
    if config.mode != SceneMode::MultiBoulder {
        return Err(Error::Config("generate_multi needs a multi_boulder config".into()));
    }
    config.validate()?;
    let arch = archetypes(config);
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let seed = derive_seed(config.seed, "sample", (i as u64) << 8);
        let (scene, light) = sample_multi_scene(config, &arch, seed);
        let r = render_multi(&scene, &light, config.shading, config.drop_limb_labels);
        samples.push(finish(i, seed, &light, r, false));
    }
    Ok(Dataset::new(samples))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zenith_light_casts_no_shadow() {
        let mut cfg = SceneConfig::single_boulder(48, 3);
        cfg.light = LightSpec::Fixed { direction: [0.0, 0.0, 1.0] };
        let ds = generate_single(&cfg, 10).unwrap();
        for s in &ds.samples {
            assert_eq!(Some(&s.mask_shadowed), s.mask_unshadowed.as_ref());
        }
    }

    #[test]
    fn obliquity_never_adds_lit_boulder_pixels() {
        let cfg = SceneConfig::single_boulder(48, 5);
        let arch = archetypes(&cfg);
        for k in 0..6 {
            let (scene, _) = sample_single_scene(&cfg, &arch, 100 + k);
            let mut prev = usize::MAX;
            for z in [0.0, 15.0, 30.0, 45.0, 60.0, 75.0, 85.0] {
                let r = render_single(&scene, &Light::from_angles(z, 40.0 * k as f64), cfg.shading);
                let c = r.mask_shadowed.count();
                assert!(c <= prev, "scene {} zenith {}: {} > {}", k, z, c, prev);
                prev = c;
            }
        }
    }

    #[test]
    fn zero_boulders_give_empty_mask() {
        let mut cfg = SceneConfig::multi_boulder(32, 1);
        cfg.boulder_count = (0, 0);
        let ds = generate_multi(&cfg, 3).unwrap();
        assert!(ds.samples.iter().all(|s| s.mask_shadowed.count() == 0 && s.cob.is_none()));
    }
}
