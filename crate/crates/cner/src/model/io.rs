//! Checkpoint container: a one-line JSON manifest (format version, config,
//! tag space, per-weight name/shape/dtype/offset) followed by a contiguous
//! little-endian f32 payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelCheckpoint, TaggerConfig};
use crate::tensor::Tensor;

const FORMAT: &str = "cner-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct WeightEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    config: TaggerConfig,
    tag_space: Vec<String>,
    step_index: usize,
    weights: Vec<WeightEntry>,
}

/// Writes the checkpoint, down-casting weights to f32.
pub fn save_checkpoint(model: &ModelCheckpoint, path: &Path) -> Result<()> {
    let mut weights = Vec::with_capacity(model.named_weights.len());
    let mut offset = 0u64;
    for (name, tensor) in &model.named_weights {
        weights.push(WeightEntry {
            name: name.clone(),
            shape: tensor.shape.clone(),
            dtype: "f32".into(),
            offset,
        });
        offset += 4 * tensor.numel() as u64;
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        config: model.config.clone(),
        tag_space: model.tag_space.clone(),
        step_index: model.step_index,
        weights,
    };

    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut out, &manifest)
        .map_err(|e| Error::Checkpoint(format!("manifest write failed: {e}")))?;
    out.write_all(b"\n")?;
    for tensor in model.named_weights.values() {
        for &v in &tensor.data {
            out.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Reads a checkpoint written by [`save_checkpoint`], up-casting to f64.
/// Weights come back trainable.
pub fn load_checkpoint(path: &Path) -> Result<ModelCheckpoint> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut header = Vec::new();
    loop {
        let mut byte = [0u8; 1];
        reader.read_exact(&mut byte).map_err(|_| {
            Error::Checkpoint("unexpected end of file while reading manifest".into())
        })?;
        if byte[0] == b'\n' {
            break;
        }
        header.push(byte[0]);
    }
    let manifest: Manifest = serde_json::from_slice(&header)
        .map_err(|e| Error::Checkpoint(format!("bad manifest: {e}")))?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint format {}/{}",
            manifest.format, manifest.version
        )));
    }
    let mut payload = Vec::new();
    reader.read_to_end(&mut payload)?;

    let mut named_weights = IndexMap::new();
    for entry in &manifest.weights {
        if entry.dtype != "f32" {
            return Err(Error::Checkpoint(format!(
                "unsupported dtype {} for {}",
                entry.dtype, entry.name
            )));
        }
        let numel: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + 4 * numel;
        if end > payload.len() {
            return Err(Error::Checkpoint(format!(
                "payload too short for weight {}",
                entry.name
            )));
        }
        let data: Vec<f64> = payload[start..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        let tensor = Tensor::new(entry.shape.clone(), data)
            .map_err(|e| Error::Checkpoint(e.to_string()))?
            .with_grad();
        if named_weights.insert(entry.name.clone(), tensor).is_some() {
            return Err(Error::Checkpoint(format!(
                "duplicate weight name {}",
                entry.name
            )));
        }
    }

    let model = ModelCheckpoint {
        config: manifest.config,
        named_weights,
        tag_space: manifest.tag_space,
        step_index: manifest.step_index,
    };
    let rows = model.named_weights["classifier.weight"].shape[0];
    if rows != model.tag_space.len() {
        return Err(Error::Checkpoint(format!(
            "classifier has {} rows but tag space has {} tags",
            rows,
            model.tag_space.len()
        )));
    }
    Ok(model)
}
