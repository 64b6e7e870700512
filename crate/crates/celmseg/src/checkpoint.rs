//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "CELMSEG\0" | u32 format version | u64 header length | JSON header
//! | f64 tensor data in header order | SHA-256 of everything before it
//! ```
//!
//! The header names every tensor with its shape and frozen flag, carries the
//! model topology (everything except parameter values) and free-form
//! metadata such as the training history.

use std::fs;
use std::path::Path;

use celmseg_core::celm::CelmFit;
use celmseg_core::encoder::Encoder;
use celmseg_core::linalg::Matrix;
use celmseg_core::params::{Param, ParamStore};
use celmseg_core::unet::UNetModel;
use celmseg_core::Tensor;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{AppError, AppResult};

pub const MAGIC: &[u8; 8] = b"CELMSEG\0";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Frozen encoder plus closed-form output weights.
    Celm,
    /// Encoder with a gradient-trained dense head.
    Cnn,
    Unet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub architecture: Value,
    pub tensors: Vec<Param>,
    pub metadata: Value,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    frozen: bool,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    kind: ModelKind,
    architecture: Value,
    tensors: Vec<TensorEntry>,
    metadata: Value,
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let header = Header {
            format_version: FORMAT_VERSION,
            kind: self.kind,
            architecture: self.architecture.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|p| TensorEntry { name: p.name.clone(), shape: p.value.shape().to_vec(), frozen: p.frozen })
                .collect(),
            metadata: self.metadata.clone(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let scalars: usize = self.tensors.iter().map(|p| p.value.len()).sum();
        let mut out = Vec::with_capacity(MAGIC.len() + 12 + json.len() + 8 * scalars + DIGEST_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for p in &self.tensors {
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, String> {
        let prefix = MAGIC.len() + 12;
        if bytes.len() < prefix + DIGEST_LEN {
            return Err("file too short to be a checkpoint".into());
        }
        if &bytes[..MAGIC.len()] != MAGIC {
            return Err("not a checkpoint (bad magic)".into());
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err("checksum mismatch".into());
        }
        let version = u32::from_le_bytes(body[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(format!("format version {} is not supported (expected {})", version, FORMAT_VERSION));
        }
        let hlen = u64::from_le_bytes(body[12..20].try_into().unwrap()) as usize;
        let json = body.get(prefix..prefix + hlen).ok_or("truncated header")?;
        let header: Header = serde_json::from_slice(json).map_err(|e| format!("header: {}", e))?;
        let mut pos = prefix + hlen;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for t in header.tensors {
            let n: usize = t.shape.iter().product();
            let raw = body.get(pos..pos + 8 * n).ok_or_else(|| format!("tensor {} is truncated", t.name))?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            pos += 8 * n;
            let value = Tensor::new(t.shape, data).map_err(|e| format!("tensor {}: {}", t.name, e))?;
            tensors.push(Param { name: t.name, value, frozen: t.frozen });
        }
        if pos != body.len() {
            return Err(format!("{} trailing bytes after tensor data", body.len() - pos));
        }
        Ok(Self { kind: header.kind, architecture: header.architecture, tensors, metadata: header.metadata })
    }

    /// Hex SHA-256 of the encoded checkpoint (its trailing digest).
    pub fn checksum(&self) -> String {
        let enc = self.encode();
        hex(&enc[enc.len() - DIGEST_LEN..])
    }

    pub fn save(&self, path: &Path) -> AppResult<String> {
        let enc = self.encode();
        let sum = hex(&enc[enc.len() - DIGEST_LEN..]);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))?;
        }
        fs::write(path, &enc).map_err(|e| AppError::io(path, e))?;
        Ok(sum)
    }

    pub fn load(path: &Path) -> AppResult<Self> {
        let bytes = fs::read(path).map_err(|e| AppError::io(path, e))?;
        Self::decode(&bytes).map_err(|m| AppError::format(path, m))
    }

    fn expect(&self, kinds: &[ModelKind]) -> Result<(), String> {
        if kinds.contains(&self.kind) {
            Ok(())
        } else {
            Err(format!("checkpoint holds a {:?} model, expected one of {:?}", self.kind, kinds))
        }
    }

    fn store(&self, skip: &[&str]) -> ParamStore {
        let mut s = ParamStore::new();
        for p in self.tensors.iter().filter(|p| !skip.contains(&p.name.as_str())) {
            s.add(p.name.clone(), p.value.clone(), p.frozen);
        }
        s
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{:02x}", b)).collect()
}

/// Topology of a model: its JSON form with the parameter store removed.
fn topology<T: Serialize>(model: &T) -> Value {
    let mut v = serde_json::to_value(model).expect("model serializes");
    if let Value::Object(m) = &mut v {
        m.remove("params");
    }
    v
}

fn rebuild<T: DeserializeOwned>(architecture: &Value) -> Result<T, String> {
    let mut v = architecture.clone();
    match &mut v {
        Value::Object(m) => {
            m.insert("params".into(), serde_json::json!({ "params": [] }));
        }
        _ => return Err("architecture is not an object".into()),
    }
    serde_json::from_value(v).map_err(|e| format!("architecture: {}", e))
}

fn tensors_of(store: &ParamStore) -> Vec<Param> {
    store.iter().map(|(_, p)| p.clone()).collect()
}

pub fn from_celm(fit: &CelmFit, metadata: Value) -> Checkpoint {
    let mut tensors = tensors_of(&fit.encoder.params);
    let beta = Tensor::new(vec![fit.beta.rows(), fit.beta.cols()], fit.beta.data().to_vec()).expect("beta shape");
    tensors.push(Param { name: "beta".into(), value: beta, frozen: true });
    let mut metadata = metadata;
    if let Value::Object(m) = &mut metadata {
        m.insert("c".into(), serde_json::json!(fit.c));
    }
    Checkpoint { kind: ModelKind::Celm, architecture: topology(&fit.encoder), tensors, metadata }
}

pub fn from_encoder(enc: &Encoder, metadata: Value) -> Checkpoint {
    Checkpoint { kind: ModelKind::Cnn, architecture: topology(enc), tensors: tensors_of(&enc.params), metadata }
}

pub fn from_unet(unet: &UNetModel, metadata: Value) -> Checkpoint {
    Checkpoint { kind: ModelKind::Unet, architecture: topology(unet), tensors: tensors_of(&unet.params), metadata }
}

fn check_store(path: &Path, expected: usize, got: usize) -> AppResult<()> {
    if expected != got {
        return Err(AppError::format(path, format!("checkpoint has {} tensors, topology needs {}", got, expected)));
    }
    Ok(())
}

/// Load the encoder of a CELM or CNN checkpoint.
pub fn to_encoder(ck: &Checkpoint, path: &Path) -> AppResult<Encoder> {
    ck.expect(&[ModelKind::Celm, ModelKind::Cnn]).map_err(|m| AppError::format(path, m))?;
    let mut enc: Encoder = rebuild(&ck.architecture).map_err(|m| AppError::format(path, m))?;
    enc.params = ck.store(&["beta"]);
    let needed = enc.cells.len() * 6 + 1 + enc.fc.bias.iter().count() + enc.head.map_or(0, |h| 1 + h.bias.iter().count());
    check_store(path, needed, enc.params.len())?;
    Ok(enc)
}

pub fn to_celm(ck: &Checkpoint, path: &Path) -> AppResult<CelmFit> {
    ck.expect(&[ModelKind::Celm]).map_err(|m| AppError::format(path, m))?;
    let encoder = to_encoder(ck, path)?;
    let beta = ck
        .tensors
        .iter()
        .find(|p| p.name == "beta")
        .ok_or_else(|| AppError::format(path, "CELM checkpoint has no beta tensor"))?;
    let shape = beta.value.shape();
    if shape.len() != 2 {
        return Err(AppError::format(path, "beta is not a matrix"));
    }
    let beta = Matrix::new(shape[0], shape[1], beta.value.data().to_vec())?;
    let c = ck.metadata.get("c").and_then(Value::as_f64).ok_or_else(|| AppError::format(path, "CELM checkpoint has no regularization value"))?;
    Ok(CelmFit { encoder, beta, c })
}

pub fn to_unet(ck: &Checkpoint, path: &Path) -> AppResult<UNetModel> {
    ck.expect(&[ModelKind::Unet]).map_err(|m| AppError::format(path, m))?;
    let mut unet: UNetModel = rebuild(&ck.architecture).map_err(|m| AppError::format(path, m))?;
    unet.params = ck.store(&[]);
    check_store(path, unet.cells.len() * 6 + unet.stages.len() * 4 + 2, unet.params.len())?;
    Ok(unet)
}
