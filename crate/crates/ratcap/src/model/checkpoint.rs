//! Bit-exact model persistence.
//!
//! Layout: magic "RATCAP1", u32 LE header length, JSON header holding the
//! ModelConfig and a parameter manifest (name, shape, byte offset into the
//! data section), then raw little-endian f64 parameter data.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CaptionModel, ModelConfig, ModelError};

const MAGIC: &[u8; 7] = b"RATCAP1";

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    manifest: Vec<ManifestEntry>,
}

pub fn save(model: &CaptionModel, path: &Path) -> Result<(), ModelError> {
    let params = model.parameters();
    let mut manifest = Vec::with_capacity(params.len());
    let mut offset = 0u64;
    for p in &params {
        manifest.push(ManifestEntry {
            name: p.name.clone(),
            shape: p.tensor.shape(),
            offset,
        });
        offset += (p.tensor.numel() * 8) as u64;
    }
    let header = serde_json::to_vec(&Header {
        config: model.config.clone(),
        manifest,
    })
    .map_err(|e| ModelError::Checkpoint(e.to_string()))?;

    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&(header.len() as u32).to_le_bytes())?;
    out.write_all(&header)?;
    for p in &params {
        for v in p.tensor.data().iter() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Rebuild the model from its config and overwrite every parameter from the
/// data section; parameters are matched by name.
pub fn load(path: &Path) -> Result<CaptionModel, ModelError> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 7];
    file.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(ModelError::Checkpoint("bad magic".into()));
    }
    let mut len_bytes = [0u8; 4];
    file.read_exact(&mut len_bytes)?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    file.read_exact(&mut header_bytes)?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    let mut data = Vec::new();
    file.read_to_end(&mut data)?;

    // Structure comes from the config; the seed is irrelevant because every
    // value is overwritten below.
    let model = CaptionModel::new(header.config, 0)?;
    let params = model.parameters();
    if params.len() != header.manifest.len() {
        return Err(ModelError::Checkpoint(format!(
            "manifest has {} parameters, model has {}",
            header.manifest.len(),
            params.len()
        )));
    }
    for entry in &header.manifest {
        let param = params
            .iter()
            .find(|p| p.name == entry.name)
            .ok_or_else(|| {
                ModelError::Checkpoint(format!("unknown parameter {}", entry.name))
            })?;
        if param.tensor.shape() != entry.shape {
            return Err(ModelError::Checkpoint(format!(
                "shape mismatch for {}: file {:?}, model {:?}",
                entry.name,
                entry.shape,
                param.tensor.shape()
            )));
        }
        let numel: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + numel * 8;
        if end > data.len() {
            return Err(ModelError::Checkpoint(format!(
                "data section too short for {}",
                entry.name
            )));
        }
        let values: Vec<f64> = data[start..end]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("chunked by 8")))
            .collect();
        param.tensor.set_data(&values);
    }
    Ok(model)
}
