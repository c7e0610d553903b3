//! Checkpoint file: one line of JSON header, then every tensor as raw
//! little-endian `f64` values in layout order (see `params::layout`).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::layout;
use super::{ModelConfig, ModelParams, Variant};
use crate::error::{Error, Result};
use crate::numkernel::Matrix;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const FORMAT_NAME: &str = "omniseq-checkpoint";

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    format_version: u32,
    variant: Variant,
    seed: u64,
    catalog_size: usize,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub variant: Variant,
    pub seed: u64,
    pub params: ModelParams,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            format: FORMAT_NAME.into(),
            format_version: CHECKPOINT_FORMAT_VERSION,
            variant: self.variant,
            seed: self.seed,
            catalog_size: self.params.config.catalog_size,
            config: self.params.config.clone(),
            tensors: layout(&self.params.config)
                .into_iter()
                .map(|(name, rows, cols)| TensorEntry { name, rows, cols })
                .collect(),
        };
        let mut out = serde_json::to_vec(&header).expect("header serializes");
        out.push(b'\n');
        for t in &self.params.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let split = bytes
            .iter()
            .position(|b| *b == b'\n')
            .ok_or_else(|| Error::Checkpoint("missing header line".into()))?;
        let header: Header = serde_json::from_slice(&bytes[..split])
            .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        if header.format != FORMAT_NAME || header.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format {} v{}",
                header.format, header.format_version
            )));
        }
        if header.catalog_size != header.config.catalog_size {
            return Err(Error::Checkpoint("catalog size disagrees with config".into()));
        }
        let mut body = &bytes[split + 1..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in &header.tensors {
            let n = entry.rows * entry.cols;
            if body.len() < n * 8 {
                return Err(Error::Checkpoint(format!("truncated at tensor {}", entry.name)));
            }
            let (chunk, rest) = body.split_at(n * 8);
            let data = chunk
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            tensors.push(Matrix::from_vec(entry.rows, entry.cols, data)?);
            body = rest;
        }
        if !body.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", body.len())));
        }
        let params = ModelParams::from_tensors(header.config, tensors)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(Checkpoint {
            variant: header.variant,
            seed: header.seed,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::EncoderKind;

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = ModelConfig::new(12, EncoderKind::AttnPool).with_dim(4);
        let mut params = ModelParams::init(cfg, 9).unwrap();
        params.tensors[0].set(0, 0, f64::MIN_POSITIVE);
        params.tensors[0].set(0, 1, -0.0);
        let ck = Checkpoint {
            variant: Variant::AttnEnc,
            seed: 9,
            params,
        };
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        for (a, b) in ck.params.tensors.iter().zip(&back.params.tensors) {
            let bits = |m: &Matrix| m.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        let header = std::str::from_utf8(&bytes[..bytes.iter().position(|b| *b == b'\n').unwrap()]).unwrap();
        let v: serde_json::Value = serde_json::from_str(header).unwrap();
        assert_eq!(v["format_version"], 1);
        assert_eq!(v["tensors"][0]["name"], "item_embedding");
    }

    #[test]
    fn rejects_damage() {
        let cfg = ModelConfig::new(5, EncoderKind::AvgPool).with_dim(2);
        let ck = Checkpoint {
            variant: Variant::AvgEnc,
            seed: 1,
            params: ModelParams::init(cfg, 1).unwrap(),
        };
        let bytes = ck.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        assert!(Checkpoint::from_bytes(b"no header").is_err());
    }
}
