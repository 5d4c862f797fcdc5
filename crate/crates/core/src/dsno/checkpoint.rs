//! Binary checkpoint: magic, version, a JSON header, the parameters as
//! little-endian `f64` in declaration order, optional Adam moments, and a
//! trailing FNV-1a checksum of everything before it.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DsnoConfig, DsnoParams, ParamSet};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DSNOCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Optimizer state needed to resume training exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSnapshot {
    pub step: u64,
    pub first_moment: DsnoParams,
    pub second_moment: DsnoParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: DsnoParams,
    pub training: Option<TrainingSnapshot>,
    /// Free-form run description (typically the training config).
    pub metadata: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: DsnoConfig,
    step: u64,
    optimizer: bool,
    tensors: Vec<(String, usize)>,
    metadata: serde_json::Value,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

fn push_tensors(out: &mut Vec<u8>, p: &DsnoParams) {
    for (_, t) in p.tensors() {
        for v in t {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

fn fmt_err(reason: impl Into<String>) -> Error {
    Error::format("checkpoint", reason.into())
}

impl Checkpoint {
    pub fn new(params: DsnoParams) -> Self {
        Self {
            params,
            training: None,
            metadata: serde_json::Value::Null,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            model: self.params.config,
            step: self.training.as_ref().map_or(0, |t| t.step),
            optimizer: self.training.is_some(),
            tensors: self.params.tensors().into_iter().map(|(n, t)| (n, t.len())).collect(),
            metadata: self.metadata.clone(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| fmt_err(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        push_tensors(&mut out, &self.params);
        if let Some(t) = &self.training {
            push_tensors(&mut out, &t.first_moment);
            push_tensors(&mut out, &t.second_moment);
        }
        let sum = fnv1a(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 28 {
            return Err(fmt_err("truncated header"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        if &body[..8] != CHECKPOINT_MAGIC {
            return Err(fmt_err("bad magic"));
        }
        let version = u32::from_le_bytes(body[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(fmt_err(format!("unsupported version {version}")));
        }
        if fnv1a(body) != u64::from_le_bytes(tail.try_into().unwrap()) {
            return Err(fmt_err("checksum mismatch"));
        }
        let json_len = u64::from_le_bytes(body[12..20].try_into().unwrap()) as usize;
        let json = body.get(20..20usize.saturating_add(json_len)).ok_or_else(|| fmt_err("truncated header"))?;
        let header: Header = serde_json::from_slice(json).map_err(|e| fmt_err(e.to_string()))?;
        header.model.validate()?;

        let mut rest = &body[20 + json_len..];
        let read_params = |rest: &mut &[u8]| -> Result<DsnoParams> {
            let mut p = DsnoParams::zeros(header.model);
            let layout: Vec<(String, usize)> = p.tensors().into_iter().map(|(n, t)| (n, t.len())).collect();
            if layout != header.tensors {
                return Err(fmt_err("tensor layout does not match the model config"));
            }
            let n = p.param_count();
            if rest.len() < 8 * n {
                return Err(fmt_err("truncated tensor data"));
            }
            let flat: Vec<f64> = rest[..8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            p.assign_flat(&flat)?;
            *rest = &rest[8 * n..];
            Ok(p)
        };
        let params = read_params(&mut rest)?;
        let training = if header.optimizer {
            let first_moment = read_params(&mut rest)?;
            let second_moment = read_params(&mut rest)?;
            Some(TrainingSnapshot {
                step: header.step,
                first_moment,
                second_moment,
            })
        } else {
            None
        };
        if !rest.is_empty() {
            return Err(fmt_err("trailing bytes"));
        }
        Ok(Self {
            params,
            training,
            metadata: header.metadata,
        })
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    /// Writes to a sibling temporary file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()?)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
