//! Checkpoint files: one JSON header line describing the model, then every
//! tensor as little-endian f32 in declaration order.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::{ModelConfig, ModelParams};
use crate::error::{M3Error, Result};

const FORMAT: &str = "m3-checkpoint/1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub config: ModelConfig,
    pub seed: u64,
    pub tensors: Vec<TensorEntry>,
}

pub fn write_checkpoint_to<W: Write>(mut out: W, params: &ModelParams<f32>, seed: u64) -> Result<()> {
    let header = CheckpointHeader {
        format: FORMAT.into(),
        config: params.config().clone(),
        seed,
        tensors: params
            .names()
            .into_iter()
            .zip(params.shapes())
            .map(|(name, shape)| TensorEntry { name, shape })
            .collect(),
    };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    for s in params.slices() {
        for v in s {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_checkpoint_from<R: BufRead>(mut input: R) -> Result<(ModelParams<f32>, CheckpointHeader)> {
    let mut line = String::new();
    input.read_line(&mut line)?;
    let header: CheckpointHeader = serde_json::from_str(line.trim_end())
        .map_err(|e| M3Error::Format(format!("bad checkpoint header: {e}")))?;
    if header.format != FORMAT {
        return Err(M3Error::Format(format!("unsupported checkpoint format {:?}", header.format)));
    }
    let mut params = ModelParams::<f32>::zeros(&header.config)?;
    let names = params.names();
    let shapes = params.shapes();
    if header.tensors.len() != names.len() {
        return Err(M3Error::Format(format!(
            "checkpoint lists {} tensors, config implies {}",
            header.tensors.len(),
            names.len()
        )));
    }
    for ((entry, name), shape) in header.tensors.iter().zip(&names).zip(&shapes) {
        if &entry.name != name || &entry.shape != shape {
            return Err(M3Error::Format(format!(
                "tensor {}{:?} does not match expected {}{:?}",
                entry.name, entry.shape, name, shape
            )));
        }
    }
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let expected = params.num_parameters() * 4;
    if bytes.len() != expected {
        return Err(M3Error::Format(format!("checkpoint body has {} bytes, expected {expected}", bytes.len())));
    }
    let mut chunks = bytes.chunks_exact(4);
    for s in params.slices_mut() {
        for v in s.iter_mut() {
            let b = chunks.next().expect("length checked");
            *v = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
        }
    }
    if !params.is_finite() {
        return Err(M3Error::NonFinite("checkpoint contains non-finite parameters".into()));
    }
    Ok((params, header))
}

pub fn write_checkpoint(path: &Path, params: &ModelParams<f32>, seed: u64) -> Result<()> {
    write_checkpoint_to(BufWriter::new(File::create(path)?), params, seed)
}

pub fn read_checkpoint(path: &Path) -> Result<(ModelParams<f32>, CheckpointHeader)> {
    read_checkpoint_from(BufReader::new(File::open(path)?))
}
