//! Binary checkpoint: the magic `HTVCKPT1`, a u64 little-endian header
//! length, a JSON header (model config plus tensor names and shapes), then
//! every tensor's data as little-endian f64 in header order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{HtvError, Result};
use crate::model::{HtvModel, ModelConfig, ParamSet};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"HTVCKPT1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
}

fn header_err(msg: impl Into<String>) -> HtvError {
    HtvError::CheckpointHeader(msg.into())
}

pub fn write_checkpoint<W: Write>(model: &HtvModel, mut w: W) -> Result<()> {
    let header = CheckpointHeader {
        config: model.config.clone(),
        tensors: model
            .params
            .names()
            .iter()
            .zip(model.params.tensors())
            .map(|(n, t)| TensorEntry {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    w.write_all(MAGIC)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for t in model.params.tensors() {
        for x in t.data() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Parses the header and raw tensors without checking them against a layout.
pub fn read_raw<R: Read>(mut r: R) -> Result<(CheckpointHeader, ParamSet)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| header_err("file too short for magic"))?;
    if &magic != MAGIC {
        return Err(header_err("bad magic"));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)
        .map_err(|_| header_err("missing header length"))?;
    let len = u64::from_le_bytes(len);
    if len > 64 << 20 {
        return Err(header_err(format!("implausible header length {len}")));
    }
    let mut json = vec![0u8; len as usize];
    r.read_exact(&mut json).map_err(|_| header_err("truncated header"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&json).map_err(|e| header_err(format!("header JSON: {e}")))?;

    let mut names = Vec::with_capacity(header.tensors.len());
    let mut tensors = Vec::with_capacity(header.tensors.len());
    let mut buf = [0u8; 8];
    for entry in &header.tensors {
        let n: usize = entry.shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut buf)
                .map_err(|_| header_err(format!("data for `{}` truncated", entry.name)))?;
            data.push(f64::from_le_bytes(buf));
        }
        names.push(entry.name.clone());
        tensors.push(Tensor::new(&entry.shape, data).map_err(|e| header_err(format!("`{}`: {e}", entry.name)))?);
    }
    if r.read(&mut buf)? != 0 {
        return Err(header_err("trailing bytes after tensor data"));
    }
    Ok((header, ParamSet::new(names, tensors)?))
}

/// Loads a model with the checkpoint's own config.
pub fn read_checkpoint<R: Read>(r: R) -> Result<HtvModel> {
    let (header, params) = read_raw(r)?;
    HtvModel::from_params(header.config, params)
}

/// Loads tensors into the layout of `config`; mismatches are listed by name.
pub fn read_checkpoint_for<R: Read>(r: R, config: &ModelConfig) -> Result<HtvModel> {
    let (_, params) = read_raw(r)?;
    HtvModel::from_params(config.clone(), params)
}

pub fn save(model: &HtvModel, path: &Path) -> Result<()> {
    let mut bytes = Vec::new();
    write_checkpoint(model, &mut bytes)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<HtvModel> {
    read_checkpoint(std::fs::read(path)?.as_slice())
}

pub fn load_for(path: &Path, config: &ModelConfig) -> Result<HtvModel> {
    read_checkpoint_for(std::fs::read(path)?.as_slice(), config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(d: usize) -> HtvModel {
        HtvModel::new(ModelConfig::new(8, 4, 2, d, 2, 2), &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
    }

    fn bytes(m: &HtvModel) -> Vec<u8> {
        let mut b = Vec::new();
        write_checkpoint(m, &mut b).unwrap();
        b
    }

    #[test]
    fn round_trip_is_exact() {
        let m = model(4);
        let b = bytes(&m);
        let back = read_checkpoint(b.as_slice()).unwrap();
        assert_eq!(back.params, m.params);
        assert_eq!(back.config, m.config);
        assert_eq!(bytes(&back), b);
    }

    #[test]
    fn corrupt_header() {
        let mut b = bytes(&model(4));
        b[0] = b'X';
        assert!(matches!(
            read_checkpoint(b.as_slice()),
            Err(HtvError::CheckpointHeader(_))
        ));
        let mut b = bytes(&model(4));
        b[20] = b'#';
        assert!(matches!(
            read_checkpoint(b.as_slice()),
            Err(HtvError::CheckpointHeader(_))
        ));
        let b = bytes(&model(4));
        assert!(matches!(
            read_checkpoint(&b[..b.len() - 3]),
            Err(HtvError::CheckpointHeader(_))
        ));
    }

    #[test]
    fn mismatched_config_lists_tensors() {
        let b = bytes(&model(4));
        let other = model(6).config;
        match read_checkpoint_for(b.as_slice(), &other) {
            Err(HtvError::CheckpointIncompatible(list)) => {
                assert!(list.iter().any(|s| s.contains("backbone.w_value")), "{list:?}");
            }
            other => panic!("{:?}", other.map(|m| m.config)),
        }
    }
}
