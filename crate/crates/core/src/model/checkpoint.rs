//! Flat binary checkpoints.
//!
//! Layout: the 8-byte magic `STRMATT1`, a little-endian `u64` header length,
//! a JSON header, then every tensor as little-endian floats in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, Parameters};
use crate::error::{Error, Result};
use crate::paradigm::{ParadigmId, PositionRemoval};
use crate::scalar::{Precision, Scalar};

const MAGIC: &[u8; 8] = b"STRMATT1";

/// How a checkpoint was trained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub paradigm: ParadigmId,
    pub k: usize,
    pub phi: f64,
    pub removal: PositionRemoval,
    pub steps: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    seed: u64,
    dtype: Precision,
    tensors: Vec<TensorEntry>,
    train: Option<TrainMeta>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub model: Model<T>,
    pub seed: u64,
    pub train: Option<TrainMeta>,
}

pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    model: &Model<T>,
    seed: u64,
    train: Option<&TrainMeta>,
) -> Result<()> {
    let tensors = model.params.tensors();
    let header = Header {
        config: model.config,
        seed,
        dtype: T::PRECISION,
        tensors: tensors
            .iter()
            .map(|t| TensorEntry {
                name: t.name.clone(),
                shape: t.shape.clone(),
            })
            .collect(),
        train: train.cloned(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out =
        Vec::with_capacity(16 + json.len() + model.params.num_parameters() * T::PRECISION.bytes());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in &tensors {
        for &x in t.data {
            x.write_le(&mut out);
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn read_values<S: Scalar, T: Scalar>(bytes: &[u8], into: &mut [T]) {
    let width = S::PRECISION.bytes();
    for (x, chunk) in into.iter_mut().zip(bytes.chunks_exact(width)) {
        *x = T::of(S::read_le(chunk).f64());
    }
}

fn bad(path: &Path, msg: &str) -> Error {
    Error::Checkpoint(format!("{}: {msg}", path.display()))
}

/// The parsed header and the offset where tensor data starts.
fn read_header(path: &Path, bytes: &[u8]) -> Result<(Header, usize)> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad(path, "not a checkpoint (bad magic)"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = 16usize
        .checked_add(len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| bad(path, "truncated header"))?;
    let header: Header =
        serde_json::from_slice(&bytes[16..body]).map_err(|e| bad(path, &e.to_string()))?;
    header.config.validate()?;
    Ok((header, body))
}

/// Storage precision of a checkpoint, read from its header only.
pub fn checkpoint_precision(path: &Path) -> Result<Precision> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(read_header(path, &bytes)?.0.dtype)
}

/// Loads a checkpoint, converting stored values to `T` if the dtypes differ.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| bad(path, msg);
    let (header, body) = read_header(path, &bytes)?;
    let mut params = Parameters::<T>::zeros(&header.config);
    let expected: Vec<(String, Vec<usize>)> = params
        .tensors()
        .into_iter()
        .map(|t| (t.name, t.shape))
        .collect();
    let listed: Vec<(String, Vec<usize>)> = header
        .tensors
        .iter()
        .map(|t| (t.name.clone(), t.shape.clone()))
        .collect();
    if expected != listed {
        return Err(bad("tensor list does not match the config"));
    }
    let width = header.dtype.bytes();
    let mut offset = body;
    for slot in params.tensors_mut() {
        let end = offset + slot.len() * width;
        if end > bytes.len() {
            return Err(bad("truncated tensor data"));
        }
        match header.dtype {
            Precision::Fp32 => read_values::<f32, T>(&bytes[offset..end], slot),
            Precision::Fp64 => read_values::<f64, T>(&bytes[offset..end], slot),
        }
        offset = end;
    }
    if offset != bytes.len() {
        return Err(bad("trailing bytes after tensor data"));
    }
    Ok(Checkpoint {
        model: Model::new(header.config, params)?,
        seed: header.seed,
        train: header.train,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> Model<f64> {
        let cfg = ModelConfig {
            layers: 1,
            heads: 2,
            d_model: 8,
            vocab_size: 11,
            ..ModelConfig::default()
        };
        Model::init(cfg, 5).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = model();
        let meta = TrainMeta {
            paradigm: ParadigmId::GroupStream,
            k: 3,
            phi: 0.5,
            removal: PositionRemoval::None,
            steps: 10,
        };
        save_checkpoint(&path, &m, 5, Some(&meta)).unwrap();
        let back = load_checkpoint::<f64>(&path).unwrap();
        assert_eq!(back.model, m);
        assert_eq!(back.seed, 5);
        assert_eq!(back.train, Some(meta));
        let first = fs::read(&path).unwrap();
        save_checkpoint(&path, &back.model, 5, back.train.as_ref()).unwrap();
        assert_eq!(fs::read(&path).unwrap(), first);
    }

    #[test]
    fn dtype_conversion_on_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = model();
        save_checkpoint(&path, &m, 5, None).unwrap();
        let narrow = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(
            narrow.model.params.embed[[0, 0]],
            m.params.embed[[0, 0]] as f32
        );
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        fs::write(&path, b"nonsense").unwrap();
        assert!(matches!(
            load_checkpoint::<f64>(&path),
            Err(Error::Checkpoint(_))
        ));
        save_checkpoint(&path, &model(), 5, None).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.pop();
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint::<f64>(&path),
            Err(Error::Checkpoint(_))
        ));
        assert!(matches!(
            load_checkpoint::<f64>(&dir.path().join("missing")),
            Err(Error::Io { .. })
        ));
    }
}
