//! Binary parameter archives.
//!
//! Layout: magic, header length (u64 LE), JSON header, raw f64 LE tensor data
//! in header order, then a SHA-256 of everything before it. Backbone archives
//! hold every parameter; delta archives hold only what a strategy trains
//! (plus head buffers) and name the digest of the base they apply to.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adaptation::{AdaptationSpec, AdaptedModel};
use crate::autograd::Mat;
use crate::backbone::{ToyBackbone, ToyBackboneConfig};
use crate::error::{Error, Result};
use crate::params::ParamStore;

const MAGIC: &[u8; 8] = b"FSVLMCK1";
const TRAILER: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Meta {
    Backbone {
        config: ToyBackboneConfig,
    },
    Delta {
        config: ToyBackboneConfig,
        spec: AdaptationSpec,
        base_digest: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    meta: Meta,
    tensors: Vec<TensorEntry>,
}

fn encode(meta: Meta, tensors: &[(String, &Mat, bool)]) -> Result<Vec<u8>> {
    let header = Header {
        meta,
        tensors: tensors
            .iter()
            .map(|(n, m, t)| TensorEntry {
                name: n.clone(),
                rows: m.nrows(),
                cols: m.ncols(),
                trainable: *t,
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + tensors.iter().map(|t| t.1.len() * 8).sum::<usize>() + TRAILER);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, m, _) in tensors {
        for v in m.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

fn decode(bytes: &[u8]) -> Result<(Meta, Vec<(TensorEntry, Mat)>)> {
    let bad = |why: &str| Error::Checkpoint(why.to_string());
    if bytes.len() < MAGIC.len() + 8 + TRAILER || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint archive"));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - TRAILER);
    if Sha256::digest(body).as_slice() != trailer {
        return Err(bad("content hash mismatch (corrupted archive)"));
    }
    let len = u64::from_le_bytes(body[8..16].try_into().expect("8 bytes")) as usize;
    let json = body.get(16..16 + len).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(json)?;
    let mut data = &body[16 + len..];
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for t in header.tensors {
        let n = t.rows * t.cols;
        if data.len() < n * 8 {
            return Err(bad("truncated tensor data"));
        }
        let (chunk, rest) = data.split_at(n * 8);
        data = rest;
        let values = chunk
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        let m = Mat::from_shape_vec((t.rows, t.cols), values).expect("size checked");
        tensors.push((t, m));
    }
    if !data.is_empty() {
        return Err(bad("trailing bytes after tensor data"));
    }
    Ok((header.meta, tensors))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn backbone_bytes(backbone: &ToyBackbone) -> Result<Vec<u8>> {
    if backbone.lora.is_some() {
        return Err(Error::Checkpoint("backbone archives hold un-adapted backbones only".into()));
    }
    let tensors: Vec<_> = backbone
        .params
        .iter()
        .map(|(n, p)| (n.clone(), &p.value, p.trainable))
        .collect();
    encode(
        Meta::Backbone {
            config: backbone.config.clone(),
        },
        &tensors,
    )
}

pub fn backbone_from_bytes(bytes: &[u8]) -> Result<ToyBackbone> {
    let (meta, tensors) = decode(bytes)?;
    let Meta::Backbone { config } = meta else {
        return Err(Error::Checkpoint("expected a backbone archive, found a delta".into()));
    };
    let mut params = ParamStore::new();
    for (t, m) in tensors {
        params.insert(t.name, m, t.trainable);
    }
    // Rebuild the registry layout from config and check the archive fits it.
    let reference = ToyBackbone::new(config.clone())?;
    if reference.params.names() != params.names()
        || reference
            .params
            .iter()
            .any(|(n, p)| params.get(n).map(|q| q.value.dim()) != Some(p.value.dim()))
    {
        return Err(Error::Checkpoint("archive does not match its declared backbone layout".into()));
    }
    Ok(ToyBackbone {
        config,
        params,
        lora: None,
    })
}

pub fn save_backbone(backbone: &ToyBackbone, path: &Path) -> Result<()> {
    write(path, &backbone_bytes(backbone)?)
}

pub fn load_backbone(path: &Path) -> Result<ToyBackbone> {
    backbone_from_bytes(&read(path)?)
}

/// Names stored in a delta: trainable parameters plus head buffers.
fn delta_names(model: &AdaptedModel) -> Vec<String> {
    let mut names = model.trainable_parameters();
    if let Some(h) = &model.head {
        names.extend(h.params.iter().filter(|(_, p)| !p.trainable).map(|(n, _)| n.clone()));
    }
    names.sort();
    names
}

pub fn delta_bytes(model: &AdaptedModel) -> Result<Vec<u8>> {
    let spec = model
        .spec
        .clone()
        .ok_or_else(|| Error::Checkpoint("zero-shot models have no delta to store".into()))?;
    let names = delta_names(model);
    let tensors: Vec<_> = names
        .iter()
        .map(|n| {
            let p = model.param(n).expect("listed by the model");
            (n.clone(), &p.value, p.trainable)
        })
        .collect();
    encode(
        Meta::Delta {
            config: model.backbone.config.clone(),
            spec,
            base_digest: model.base_digest.clone(),
        },
        &tensors,
    )
}

/// Rebuild an adapted model from `base` and a delta archive. The base must
/// be the exact backbone the delta was trained from.
pub fn delta_from_bytes(bytes: &[u8], base: &ToyBackbone) -> Result<AdaptedModel> {
    let (meta, tensors) = decode(bytes)?;
    let Meta::Delta {
        config,
        spec,
        base_digest,
    } = meta
    else {
        return Err(Error::Checkpoint("expected a delta archive, found a backbone".into()));
    };
    if config != base.config {
        return Err(Error::Checkpoint("delta was trained on a differently configured backbone".into()));
    }
    let digest = base.params.digest();
    if digest != base_digest {
        return Err(Error::Checkpoint(format!(
            "base backbone digest {digest} does not match the delta's {base_digest}"
        )));
    }
    let mut model = AdaptedModel::adapt(base.clone(), &spec)?;
    let expected = delta_names(&model);
    let stored: Vec<&str> = tensors.iter().map(|(t, _)| t.name.as_str()).collect();
    if expected.iter().map(String::as_str).ne(stored.iter().copied()) {
        return Err(Error::Checkpoint("delta tensors do not match the strategy's parameter set".into()));
    }
    for (t, m) in tensors {
        let p = model.param_mut(&t.name).expect("name checked");
        if p.value.dim() != m.dim() {
            return Err(Error::Checkpoint(format!("shape mismatch for {}", t.name)));
        }
        p.value = m;
    }
    Ok(model)
}

pub fn save_delta(model: &AdaptedModel, path: &Path) -> Result<()> {
    write(path, &delta_bytes(model)?)
}

pub fn load_delta(path: &Path, base: &ToyBackbone) -> Result<AdaptedModel> {
    delta_from_bytes(&read(path)?, base)
}
