//! Binary parameter container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "ACTKDCKP"
//! version  u32
//! hlen     u64      length of the JSON header
//! header   hlen bytes
//! payload  f64 values of every tensor, in header order
//! digest   32 bytes SHA-256 of everything above
//! ```
//!
//! Values are widened to `f64`, which round-trips `f32` exactly.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::ksm::{KsmConfig, KsmNetworks, KsmShape};
use crate::models::{Encoder, EncoderConfig};
use crate::scalar::Scalar;
use crate::tensor::{Param, Rng};

use super::{io_err, PersistError, Result};

const MAGIC: &[u8; 8] = b"ACTKDCKP";
pub const CHECKPOINT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Encoder,
    Ksm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    kind: CheckpointKind,
    /// Scalar type the parameters were trained in.
    scalar: String,
    config: Value,
    meta: Value,
    tensors: Vec<TensorEntry>,
}

/// Named parameter arrays plus the configuration needed to rebuild the
/// model that owns them.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub scalar: String,
    pub config: Value,
    /// Free-form provenance, e.g. the run that produced the weights.
    pub meta: Value,
    pub tensors: Vec<(TensorEntry, Vec<f64>)>,
}

fn scalar_name<T: Scalar>() -> String {
    if std::mem::size_of::<T>() == 4 {
        "f32"
    } else {
        "f64"
    }
    .to_string()
}

fn capture<T: Scalar>(params: Vec<&Param<T>>) -> Vec<(TensorEntry, Vec<f64>)> {
    params
        .into_iter()
        .map(|p| {
            (
                TensorEntry {
                    name: p.name().to_string(),
                    shape: p.shape().to_vec(),
                },
                p.data.iter().map(|v| v.as_f64()).collect(),
            )
        })
        .collect()
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            kind: self.kind,
            scalar: self.scalar.clone(),
            config: self.config.clone(),
            meta: self.meta.clone(),
            tensors: self.tensors.iter().map(|(e, _)| e.clone()).collect(),
        };
        let header = serde_json::to_vec(&header)?;
        let values: usize = self.tensors.iter().map(|(_, v)| v.len()).sum();
        let mut out = Vec::with_capacity(MAGIC.len() + 12 + header.len() + 8 * values + DIGEST_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (entry, data) in &self.tensors {
            if entry.shape.iter().product::<usize>() != data.len() {
                return Err(PersistError::Format(format!(
                    "tensor `{}` does not match its shape",
                    entry.name
                )));
            }
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let min = MAGIC.len() + 12 + DIGEST_LEN;
        if bytes.len() < min || &bytes[..MAGIC.len()] != MAGIC {
            return Err(PersistError::Integrity(
                "not a checkpoint or truncated header".into(),
            ));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(PersistError::Integrity(
                "checksum mismatch (file truncated or corrupted)".into(),
            ));
        }
        let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(PersistError::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let hlen = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
        let header_end = 20usize
            .checked_add(hlen)
            .filter(|&e| e <= body.len())
            .ok_or_else(|| PersistError::Integrity("header length exceeds file".into()))?;
        let header: Header = serde_json::from_slice(&body[20..header_end])?;
        let mut payload = body[header_end..].chunks_exact(8);
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in header.tensors {
            let n: usize = entry.shape.iter().product();
            let data: Vec<f64> = payload
                .by_ref()
                .take(n)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            if data.len() != n {
                return Err(PersistError::Integrity(format!(
                    "payload ends inside tensor `{}`",
                    entry.name
                )));
            }
            tensors.push((entry, data));
        }
        if payload.next().is_some() || !payload.remainder().is_empty() {
            return Err(PersistError::Integrity(
                "trailing bytes after the last tensor".into(),
            ));
        }
        Ok(Checkpoint {
            kind: header.kind,
            scalar: header.scalar,
            config: header.config,
            meta: header.meta,
            tensors,
        })
    }

    /// Writes through a temporary file and renames, so a crash never leaves a
    /// half-written checkpoint under the final name.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        let write = || -> std::io::Result<()> {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
            fs::rename(&tmp, path)
        };
        write().map_err(|e| io_err(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
        Self::from_bytes(&bytes)
    }

    fn expect_kind(&self, kind: CheckpointKind) -> Result<()> {
        if self.kind != kind {
            return Err(PersistError::Format(format!(
                "expected a {kind:?} checkpoint, found {:?}",
                self.kind
            )));
        }
        Ok(())
    }

    /// Copies stored values into `params`, which must match by name and
    /// shape in the same order.
    fn restore<T: Scalar>(&self, params: Vec<&mut Param<T>>) -> Result<()> {
        if params.len() != self.tensors.len() {
            return Err(PersistError::Format(format!(
                "checkpoint has {} tensors, model has {}",
                self.tensors.len(),
                params.len()
            )));
        }
        for (p, (entry, data)) in params.into_iter().zip(&self.tensors) {
            if p.name() != entry.name || p.shape() != entry.shape.as_slice() {
                return Err(PersistError::Format(format!(
                    "tensor `{}` {:?} does not match model parameter `{}` {:?}",
                    entry.name,
                    entry.shape,
                    p.name(),
                    p.shape()
                )));
            }
            p.data
                .iter_mut()
                .zip(data)
                .for_each(|(d, &v)| *d = T::lit(v));
        }
        Ok(())
    }

    pub fn from_encoder<T: Scalar>(model: &Encoder<T>, meta: Value) -> Result<Self> {
        Ok(Checkpoint {
            kind: CheckpointKind::Encoder,
            scalar: scalar_name::<T>(),
            config: serde_json::to_value(model.config())?,
            meta,
            tensors: capture(model.params()),
        })
    }

    pub fn to_encoder<T: Scalar>(&self) -> Result<Encoder<T>> {
        self.expect_kind(CheckpointKind::Encoder)?;
        let cfg: EncoderConfig = serde_json::from_value(self.config.clone())?;
        let mut model = Encoder::new(cfg, &mut Rng::new(0))?;
        self.restore(model.params_mut())?;
        Ok(model)
    }

    /// Stores the networks with the configuration they were trained under.
    pub fn from_ksm<T: Scalar>(
        nets: &KsmNetworks<T>,
        cfg: &KsmConfig,
        meta: Value,
    ) -> Result<Self> {
        Ok(Checkpoint {
            kind: CheckpointKind::Ksm,
            scalar: scalar_name::<T>(),
            config: serde_json::json!({ "shape": nets.shape, "ksm": cfg }),
            meta,
            tensors: capture(nets.params()),
        })
    }

    pub fn to_ksm<T: Scalar>(&self) -> Result<(KsmNetworks<T>, KsmConfig)> {
        self.expect_kind(CheckpointKind::Ksm)?;
        #[derive(Deserialize)]
        struct Stored {
            shape: KsmShape,
            ksm: KsmConfig,
        }
        let stored: Stored = serde_json::from_value(self.config.clone())?;
        let mut nets = KsmNetworks::new(stored.shape, &mut Rng::new(0))?;
        self.restore(nets.params_mut())?;
        Ok((nets, stored.ksm))
    }
}

pub fn save_encoder<T: Scalar>(path: &Path, model: &Encoder<T>, meta: Value) -> Result<()> {
    Checkpoint::from_encoder(model, meta)?.save(path)
}

pub fn load_encoder<T: Scalar>(path: &Path) -> Result<Encoder<T>> {
    Checkpoint::load(path)?.to_encoder()
}

pub fn save_ksm<T: Scalar>(
    path: &Path,
    nets: &KsmNetworks<T>,
    cfg: &KsmConfig,
    meta: Value,
) -> Result<()> {
    Checkpoint::from_ksm(nets, cfg, meta)?.save(path)
}

pub fn load_ksm<T: Scalar>(path: &Path) -> Result<(KsmNetworks<T>, KsmConfig)> {
    Checkpoint::load(path)?.to_ksm()
}
