//! Binary denoiser checkpoints.
//!
//! Layout: the 8-byte magic `DIFFPLAN`, a little-endian `u32` format version,
//! a little-endian `u64` header length, a JSON header, then every tensor's
//! values as little-endian `f64` in header order (row-major).

use crate::conditioning::SceneFeaturizerConfig;
use crate::denoiser::{DenoiserConfig, DenoiserParams};
use crate::error::{Error, Result};
use crate::tensor::Mat;
use crate::traj::NormalizationSpec;
use crate::Scalar;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DIFFPLAN";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub denoiser: DenoiserConfig,
    pub normalization: NormalizationSpec,
    pub conditioning: SceneFeaturizerConfig,
    pub tensors: Vec<TensorEntry>,
    /// Free-form provenance (training stage, steps, config hash).
    #[serde(default)]
    pub meta: serde_json::Value,
}

#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub params: DenoiserParams<T>,
    pub normalization: NormalizationSpec,
    pub conditioning: SceneFeaturizerConfig,
    pub meta: serde_json::Value,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = CheckpointHeader {
            denoiser: *self.params.config(),
            normalization: self.normalization,
            conditioning: self.conditioning,
            tensors: self
                .params
                .names()
                .iter()
                .zip(self.params.tensors())
                .map(|(n, m)| TensorEntry { name: n.clone(), rows: m.rows(), cols: m.cols() })
                .collect(),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + json.len() + 8 * self.params.num_scalars());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for m in self.params.tensors() {
            for v in m.data() {
                out.extend_from_slice(&v.as_f64().to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic, "magic")?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Validation("not a checkpoint file (bad magic)".into()));
        }
        let mut b4 = [0u8; 4];
        read_exact(&mut r, &mut b4, "version")?;
        let version = u32::from_le_bytes(b4);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version { found: version, expected: CHECKPOINT_VERSION });
        }
        let mut b8 = [0u8; 8];
        read_exact(&mut r, &mut b8, "header length")?;
        let len = u64::from_le_bytes(b8) as usize;
        if len > r.len() {
            return Err(Error::Validation("checkpoint header is truncated".into()));
        }
        let header: CheckpointHeader = serde_json::from_slice(&r[..len])?;
        r = &r[len..];
        let mut named = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            let n = e.rows * e.cols;
            if r.len() < 8 * n {
                return Err(Error::Validation(format!("checkpoint payload is truncated at tensor {}", e.name)));
            }
            let data = r[..8 * n]
                .chunks_exact(8)
                .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8-byte chunk"))))
                .collect();
            r = &r[8 * n..];
            named.push((e.name.clone(), Mat::from_vec(e.rows, e.cols, data)));
        }
        if !r.is_empty() {
            return Err(Error::Validation(format!("checkpoint has {} trailing bytes", r.len())));
        }
        let params = DenoiserParams::from_named(header.denoiser, named)?;
        Ok(Self { params, normalization: header.normalization, conditioning: header.conditioning, meta: header.meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|_| Error::Validation(format!("checkpoint is truncated in the {what}")))
}
