//! Checkpoint persistence: a JSON header (names, shapes, offsets, config,
//! stage) followed by one concatenated little-endian f64 blob. The file
//! starts with the header's byte length as a little-endian u64, so the
//! blob boundary is explicit and length-checked on load.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{FasError, Result};
use crate::model::ChannelId;
use crate::nn::ParamStore;
use crate::tensor::Tensor;
use crate::uncertainty::{ChannelPrior, PriorSet};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageTag {
    Stage1,
    Stage2,
}

/// Adam state captured alongside parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamSnapshot {
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// (parameter name, first moment, second moment)
    pub moments: Vec<(String, Vec<f64>, Vec<f64>)>,
}

/// Everything a resumed or evaluated run needs.
#[derive(Debug)]
pub struct Checkpoint {
    pub stage: StageTag,
    pub config: RunConfig,
    pub params: ParamStore,
    pub adam: Option<AdamSnapshot>,
    pub priors: Option<PriorSet>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct AdamMomentEntry {
    name: String,
    offset_m: usize,
    offset_v: usize,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct AdamHeader {
    t: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    moments: Vec<AdamMomentEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct PriorEntry {
    channel: String,
    sigma_mu_sq: f64,
    d_u: usize,
    #[serde(default = "default_var_norm")]
    var_norm: f64,
    mu_shape: Vec<usize>,
    mu_offset: usize,
}

fn default_var_norm() -> f64 {
    1.0
}

#[derive(Debug, Serialize, Deserialize)]
struct PriorsHeader {
    tau_d: f64,
    tau_r: f64,
    channels: Vec<PriorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    stage: StageTag,
    config: RunConfig,
    total_elems: usize,
    params: Vec<ParamEntry>,
    adam: Option<AdamHeader>,
    priors: Option<PriorsHeader>,
}

fn channel_from_key(key: &str) -> Result<ChannelId> {
    match key {
        "z" => Ok(ChannelId::Z),
        "d" => Ok(ChannelId::D),
        "r" => Ok(ChannelId::R),
        "f" => Ok(ChannelId::F),
        other => Err(FasError::Integrity(format!(
            "unknown channel key {other:?}"
        ))),
    }
}

/// Serializes a checkpoint to bytes.
pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut blob: Vec<f64> = Vec::new();
    let mut params = Vec::with_capacity(ckpt.params.len());
    for (name, tensor) in ckpt.params.iter() {
        params.push(ParamEntry {
            name: name.to_string(),
            shape: tensor.shape().to_vec(),
            offset: blob.len(),
        });
        blob.extend_from_slice(tensor.data());
    }
    let adam = ckpt.adam.as_ref().map(|snap| {
        let mut moments = Vec::with_capacity(snap.moments.len());
        for (name, m, v) in &snap.moments {
            let offset_m = blob.len();
            blob.extend_from_slice(m);
            let offset_v = blob.len();
            blob.extend_from_slice(v);
            moments.push(AdamMomentEntry {
                name: name.clone(),
                offset_m,
                offset_v,
                len: m.len(),
            });
        }
        AdamHeader {
            t: snap.t,
            lr: snap.lr,
            beta1: snap.beta1,
            beta2: snap.beta2,
            eps: snap.eps,
            moments,
        }
    });
    let priors = ckpt.priors.as_ref().map(|set| {
        let mut channels = Vec::with_capacity(4);
        for id in ChannelId::ALL {
            let prior = set.get(id);
            channels.push(PriorEntry {
                channel: id.key().to_string(),
                sigma_mu_sq: prior.sigma_mu_sq,
                d_u: prior.d_u,
                var_norm: prior.var_norm,
                mu_shape: prior.mu.shape().to_vec(),
                mu_offset: blob.len(),
            });
            blob.extend_from_slice(prior.mu.data());
        }
        PriorsHeader {
            tau_d: set.tau_d,
            tau_r: set.tau_r,
            channels,
        }
    });

    let header = Header {
        version: CHECKPOINT_VERSION,
        stage: ckpt.stage,
        config: ckpt.config.clone(),
        total_elems: blob.len(),
        params,
        adam,
        priors,
    };
    let header_json = serde_json::to_string(&header)
        .map_err(|e| FasError::Io(format!("serializing checkpoint header: {e}")))?;

    let mut bytes = Vec::with_capacity(8 + header_json.len() + blob.len() * 8);
    bytes.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(header_json.as_bytes());
    for v in &blob {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    Ok(bytes)
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)
                .map_err(|e| FasError::Io(format!("creating {parent:?}: {e}")))?;
        }
    }
    fs::write(path, encode_checkpoint(ckpt)?)
        .map_err(|e| FasError::Io(format!("writing checkpoint {path:?}: {e}")))
}

fn blob_slice<'a>(blob: &'a [f64], offset: usize, len: usize, what: &str) -> Result<&'a [f64]> {
    blob.get(offset..offset + len).ok_or_else(|| {
        FasError::Integrity(format!(
            "{what}: range {offset}..{} exceeds blob of {} elements",
            offset + len,
            blob.len()
        ))
    })
}

/// Parses checkpoint bytes, verifying the version and that the header's
/// declared element count matches the blob length exactly.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 8 {
        return Err(FasError::Integrity(
            "checkpoint shorter than its length prefix".into(),
        ));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let header_end = 8 + header_len;
    if bytes.len() < header_end {
        return Err(FasError::Integrity(format!(
            "header claims {header_len} bytes, file holds {}",
            bytes.len() - 8
        )));
    }
    let header: Header = serde_json::from_slice(&bytes[8..header_end])
        .map_err(|e| FasError::Integrity(format!("checkpoint header parse: {e}")))?;
    if header.version != CHECKPOINT_VERSION {
        return Err(FasError::Version {
            found: header.version,
            supported: CHECKPOINT_VERSION,
        });
    }
    let blob_bytes = &bytes[header_end..];
    if blob_bytes.len() != header.total_elems * 8 {
        return Err(FasError::Integrity(format!(
            "header declares {} elements ({} bytes), blob holds {} bytes",
            header.total_elems,
            header.total_elems * 8,
            blob_bytes.len()
        )));
    }
    let blob: Vec<f64> = blob_bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();

    let mut params = ParamStore::new();
    for entry in &header.params {
        let numel: usize = entry.shape.iter().product();
        let data = blob_slice(&blob, entry.offset, numel, &entry.name)?.to_vec();
        params.insert(&entry.name, Tensor::leaf(&entry.shape, data)?)?;
    }
    let adam = match &header.adam {
        None => None,
        Some(h) => {
            let mut moments = Vec::with_capacity(h.moments.len());
            for entry in &h.moments {
                let m = blob_slice(&blob, entry.offset_m, entry.len, "adam m")?.to_vec();
                let v = blob_slice(&blob, entry.offset_v, entry.len, "adam v")?.to_vec();
                moments.push((entry.name.clone(), m, v));
            }
            Some(AdamSnapshot {
                t: h.t,
                lr: h.lr,
                beta1: h.beta1,
                beta2: h.beta2,
                eps: h.eps,
                moments,
            })
        }
    };
    let priors = match &header.priors {
        None => None,
        Some(h) => {
            let mut by_key = std::collections::BTreeMap::new();
            for entry in &h.channels {
                let numel: usize = entry.mu_shape.iter().product();
                let data = blob_slice(&blob, entry.mu_offset, numel, "prior mu")?.to_vec();
                let id = channel_from_key(&entry.channel)?;
                by_key.insert(
                    entry.channel.clone(),
                    ChannelPrior {
                        channel: id,
                        mu: Tensor::from_vec(&entry.mu_shape, data)?,
                        sigma_mu_sq: entry.sigma_mu_sq,
                        d_u: entry.d_u,
                        var_norm: entry.var_norm,
                    },
                );
            }
            let mut take = |key: &str| -> Result<ChannelPrior> {
                by_key
                    .remove(key)
                    .ok_or_else(|| FasError::Integrity(format!("priors missing channel {key}")))
            };
            Some(PriorSet {
                z: take("z")?,
                d: take("d")?,
                r: take("r")?,
                f: take("f")?,
                tau_d: h.tau_d,
                tau_r: h.tau_r,
            })
        }
    };
    Ok(Checkpoint {
        stage: header.stage,
        config: header.config,
        params,
        adam,
        priors,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes =
        fs::read(path).map_err(|e| FasError::Io(format!("reading checkpoint {path:?}: {e}")))?;
    decode_checkpoint(&bytes)
}
