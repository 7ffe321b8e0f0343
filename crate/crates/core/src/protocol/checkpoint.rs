//! Checkpoint files (`.avck`), little-endian: magic `AVCK`, u32 version=1,
//! u32 config_json_len, config JSON bytes, u32 tensor_count, then per
//! tensor `u32 name_len, name, u32 ndim, ndim x u32 dims, f32 data`.
//! Batch-norm running buffers ride along as `<block>.running_mean` /
//! `<block>.running_var` tensors.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataio::DataError;
use crate::model::{AvcaConfig, AvcaParams};
use crate::numerics::TensorData;

const MAGIC: [u8; 4] = *b"AVCK";
const VERSION: u32 = 1;

/// Calibration outcome stored next to the weights so evaluation can default
/// to the constant the protocol selected.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredCalibration {
    pub gamma: f32,
    pub hm: f32,
    pub selected_epochs: usize,
}

/// The JSON head of a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: AvcaConfig,
    pub seed: u64,
    pub stage: u8,
    pub calibration: Option<StoredCalibration>,
}

pub fn save_checkpoint(
    path: &Path,
    meta: &CheckpointMeta,
    params: &AvcaParams<f32>,
) -> Result<(), DataError> {
    let file = File::create(path).map_err(|e| DataError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut write = |bytes: &[u8]| w.write_all(bytes).map_err(|e| DataError::io(path, e));
    let config_json = serde_json::to_vec(meta)?;
    write(&MAGIC)?;
    write(&VERSION.to_le_bytes())?;
    write(&(config_json.len() as u32).to_le_bytes())?;
    write(&config_json)?;

    let mut tensors: Vec<(String, Vec<usize>, Vec<f32>)> = params
        .learnables()
        .into_iter()
        .map(|(name, t)| (name, t.shape().to_vec(), t.data().to_vec()))
        .collect();
    for (prefix, running) in params.runnings() {
        let dim = running.mean.len();
        tensors.push((format!("{prefix}.running_mean"), vec![1, dim], running.mean.clone()));
        tensors.push((format!("{prefix}.running_var"), vec![1, dim], running.var.clone()));
    }
    write(&(tensors.len() as u32).to_le_bytes())?;
    for (name, shape, data) in &tensors {
        write(&(name.len() as u32).to_le_bytes())?;
        write(name.as_bytes())?;
        write(&(shape.len() as u32).to_le_bytes())?;
        for d in shape {
            write(&(*d as u32).to_le_bytes())?;
        }
        for v in data {
            write(&v.to_le_bytes())?;
        }
    }
    w.flush().map_err(|e| DataError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointMeta, AvcaParams<f32>), DataError> {
    let file = File::open(path).map_err(|e| DataError::io(path, e))?;
    let mut r = BufReader::new(file);
    let io = |e: std::io::Error| DataError::io(path, e);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if magic != MAGIC {
        return Err(DataError::BadMagic {
            path: path.to_path_buf(),
            expected: MAGIC,
            found: magic,
        });
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf).map_err(io)?;
    let version = u32::from_le_bytes(u32buf);
    if version != VERSION {
        return Err(DataError::VersionMismatch {
            path: path.to_path_buf(),
            expected: VERSION,
            found: version,
        });
    }
    r.read_exact(&mut u32buf).map_err(io)?;
    let json_len = u32::from_le_bytes(u32buf) as usize;
    let mut json = vec![0u8; json_len];
    r.read_exact(&mut json).map_err(io)?;
    let meta: CheckpointMeta = serde_json::from_slice(&json)?;

    r.read_exact(&mut u32buf).map_err(io)?;
    let tensor_count = u32::from_le_bytes(u32buf) as usize;
    let mut by_name: BTreeMap<String, TensorData<f32>> = BTreeMap::new();
    for _ in 0..tensor_count {
        r.read_exact(&mut u32buf).map_err(io)?;
        let name_len = u32::from_le_bytes(u32buf) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(io)?;
        let name = String::from_utf8(name).map_err(|_| DataError::DimMismatch {
            context: "tensor name is not UTF-8".into(),
            expected: 0,
            found: 0,
        })?;
        r.read_exact(&mut u32buf).map_err(io)?;
        let ndim = u32::from_le_bytes(u32buf) as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            r.read_exact(&mut u32buf).map_err(io)?;
            shape.push(u32::from_le_bytes(u32buf) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut bytes = vec![0u8; 4 * numel];
        r.read_exact(&mut bytes).map_err(io)?;
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let tensor = TensorData::matrix(shape[0], shape[1], data).map_err(|_| {
            DataError::DimMismatch {
                context: format!("tensor {name}"),
                expected: numel,
                found: 0,
            }
        })?;
        by_name.insert(name, tensor);
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).map_err(io)? != 0 {
        return Err(DataError::Truncated {
            path: path.to_path_buf(),
            expected_bytes: 0,
            found_bytes: 1,
        });
    }

    let mut params = AvcaParams::<f32>::shaped(&meta.config);
    for (name, tensor) in params.learnables_mut() {
        let stored = by_name.remove(&name).ok_or_else(|| DataError::DimMismatch {
            context: format!("checkpoint misses tensor {name}"),
            expected: 1,
            found: 0,
        })?;
        if stored.shape() != tensor.shape() {
            return Err(DataError::DimMismatch {
                context: format!("tensor {name}"),
                expected: tensor.numel(),
                found: stored.numel(),
            });
        }
        *tensor = stored;
    }
    for (prefix, running) in params.runnings_mut() {
        for (suffix, buf) in [("running_mean", &mut running.mean), ("running_var", &mut running.var)] {
            let name = format!("{prefix}.{suffix}");
            let stored = by_name.remove(&name).ok_or_else(|| DataError::DimMismatch {
                context: format!("checkpoint misses buffer {name}"),
                expected: 1,
                found: 0,
            })?;
            if stored.numel() != buf.len() {
                return Err(DataError::DimMismatch {
                    context: format!("buffer {name}"),
                    expected: buf.len(),
                    found: stored.numel(),
                });
            }
            buf.copy_from_slice(stored.data());
        }
    }
    if let Some(extra) = by_name.keys().next() {
        return Err(DataError::DimMismatch {
            context: format!("checkpoint carries unknown tensor {extra}"),
            expected: 0,
            found: by_name.len(),
        });
    }
    Ok((meta, params))
}
