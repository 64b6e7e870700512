//! Dataset directories: `manifest.json`, `images/*.pgm`, `masks/*.pgm`.

use std::fs;
use std::path::{Path, PathBuf};

use celmseg_core::datagen::{Dataset, GrayImage, Mask, Sample, SampleMeta};
use celmseg_core::metrics::CoB;
use serde::{Deserialize, Serialize};

use crate::error::{AppError, AppResult};
use crate::pgm;

pub const MANIFEST: &str = "manifest.json";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub samples: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub files: SampleFiles,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cob: Option<CoB>,
    #[serde(default)]
    pub metadata: SampleMeta,
}

/// Paths relative to the dataset directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleFiles {
    pub image: String,
    pub mask: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_unshadowed: Option<String>,
}

fn check_id(id: &str) -> AppResult<()> {
    if id.is_empty() || !id.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-' || c == '.') || id.starts_with('.') {
        return Err(AppError::Usage(format!("sample id {:?} is not a safe file name", id)));
    }
    Ok(())
}

fn mask_bytes(m: &Mask) -> Vec<u8> {
    m.labels.iter().map(|&l| if l > 0 { 255 } else { 0 }).collect()
}

pub fn write_dataset(ds: &Dataset, dir: &Path) -> AppResult<()> {
    for sub in ["images", "masks"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| AppError::io(&p, e))?;
    }
    let mut entries = Vec::with_capacity(ds.len());
    for s in &ds.samples {
        check_id(&s.id)?;
        let files = SampleFiles {
            image: format!("images/{}.pgm", s.id),
            mask: format!("masks/{}.pgm", s.id),
            mask_unshadowed: s.mask_unshadowed.as_ref().map(|_| format!("masks/{}_unshadowed.pgm", s.id)),
        };
        pgm::write(&dir.join(&files.image), s.image.width, s.image.height, &pgm::quantize(&s.image.pixels))?;
        pgm::write(&dir.join(&files.mask), s.mask_shadowed.width, s.mask_shadowed.height, &mask_bytes(&s.mask_shadowed))?;
        if let (Some(m), Some(f)) = (&s.mask_unshadowed, &files.mask_unshadowed) {
            pgm::write(&dir.join(f), m.width, m.height, &mask_bytes(m))?;
        }
        entries.push(ManifestEntry { id: s.id.clone(), files, cob: s.cob, metadata: s.meta.clone() });
    }
    let manifest = Manifest { schema_version: SCHEMA_VERSION, samples: entries };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| AppError::io(&path, e))
}

fn read_mask(path: &Path) -> AppResult<Mask> {
    let p = pgm::read(path)?;
    let labels = p
        .data
        .iter()
        .map(|&v| match v {
            0 => Ok(0),
            255 => Ok(1),
            other => Err(AppError::format(path, format!("mask value {} is neither 0 nor 255", other))),
        })
        .collect::<AppResult<Vec<u8>>>()?;
    Ok(Mask::new(p.width, p.height, labels)?)
}

pub fn read_manifest(dir: &Path) -> AppResult<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| AppError::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| AppError::json(&path, e))?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(AppError::format(
            &path,
            format!("schema version {} is not supported (expected {})", manifest.schema_version, SCHEMA_VERSION),
        ));
    }
    Ok(manifest)
}

/// Load a dataset directory. Images come back as `value / 255`.
pub fn read_dataset(dir: &Path) -> AppResult<Dataset> {
    let manifest = read_manifest(dir)?;
    let resolve = |rel: &str| -> AppResult<PathBuf> {
        let p = dir.join(rel);
        if !p.is_file() {
            return Err(AppError::MissingFile(p));
        }
        Ok(p)
    };
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for e in manifest.samples {
        let ip = resolve(&e.files.image)?;
        let img = pgm::read(&ip)?;
        let image = GrayImage::new(img.width, img.height, img.data.iter().map(|&v| v as f64 / 255.0).collect())?;
        let mp = resolve(&e.files.mask)?;
        let mask_shadowed = read_mask(&mp)?;
        if (mask_shadowed.width, mask_shadowed.height) != (image.width, image.height) {
            return Err(AppError::format(mp, format!("mask is {}x{}, image is {}x{}", mask_shadowed.width, mask_shadowed.height, image.width, image.height)));
        }
        let mask_unshadowed = match &e.files.mask_unshadowed {
            Some(f) => Some(read_mask(&resolve(f)?)?),
            None => None,
        };
        samples.push(Sample { id: e.id, image, mask_shadowed, mask_unshadowed, cob: e.cob, meta: e.metadata });
    }
    Ok(Dataset::new(samples))
}

/// Round-trip a dataset through 8-bit storage without touching disk.
pub fn quantized(ds: &Dataset) -> Dataset {
    let mut out = ds.clone();
    for s in &mut out.samples {
        for p in &mut s.image.pixels {
            *p = (p.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
    }
    out
}
