//! Corpus ingestion: JSON manifests pointing at binary feature-grid files
//! (or carrying grids inline), with captions normalized on the way in.

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::retrieval::FeatureGrid;
use crate::tokenizer::normalize;

const GRID_MAGIC: &[u8; 6] = b"RGRID1";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("duplicate image id {0}")]
    DuplicateImage(String),
    #[error("image {0} has no captions")]
    NoCaptions(String),
    #[error("image {id}: feature dim {got} does not match manifest dim {expected}")]
    DimMismatch {
        id: String,
        expected: usize,
        got: usize,
    },
    #[error("image {0}: neither feature_file nor inline grid present")]
    MissingFeatures(String),
    #[error("feature file {0}: {1}")]
    BadGridFile(PathBuf, String),
    #[error("manifest {0}: {1}")]
    BadManifest(PathBuf, String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestItem {
    pub image_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_file: Option<PathBuf>,
    /// Row-major grid carried directly in the manifest.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inline_grid: Option<Vec<Vec<f64>>>,
    pub captions: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub split: String,
    pub feature_dim: usize,
    /// Text normalization recorded for reproducibility.
    #[serde(default = "default_normalization")]
    pub normalization: String,
    pub items: Vec<ManifestItem>,
}

fn default_normalization() -> String {
    "lowercase, collapsed whitespace".to_string()
}

/// One ingested image: grid plus normalized captions.
#[derive(Debug, Clone)]
pub struct CorpusItem {
    pub image_id: String,
    pub grid: FeatureGrid,
    pub captions: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub split: String,
    pub feature_dim: usize,
    pub items: Vec<CorpusItem>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Content digest over ids, grids and captions, for reproducibility
    /// blocks and tamper checks.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for item in &self.items {
            hasher.update(item.image_id.as_bytes());
            hasher.update((item.grid.positions as u64).to_le_bytes());
            hasher.update((item.grid.dim as u64).to_le_bytes());
            for v in &item.grid.data {
                hasher.update(v.to_le_bytes());
            }
            for c in &item.captions {
                hasher.update(c.as_bytes());
                hasher.update([0]);
            }
        }
        hex_string(&hasher.finalize())
    }
}

pub fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Load a manifest and all referenced feature files; captions come out
/// normalized. Relative feature paths resolve against the manifest's parent.
pub fn ingest(manifest_path: &Path) -> Result<Corpus, CorpusError> {
    let text = std::fs::read_to_string(manifest_path)?;
    let manifest: CorpusManifest = serde_json::from_str(&text)
        .map_err(|e| CorpusError::BadManifest(manifest_path.to_path_buf(), e.to_string()))?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));

    let mut seen = BTreeSet::new();
    let mut items = Vec::with_capacity(manifest.items.len());
    for entry in &manifest.items {
        if !seen.insert(entry.image_id.clone()) {
            return Err(CorpusError::DuplicateImage(entry.image_id.clone()));
        }
        if entry.captions.is_empty() {
            return Err(CorpusError::NoCaptions(entry.image_id.clone()));
        }
        let grid = if let Some(file) = &entry.feature_file {
            let path = if file.is_absolute() {
                file.clone()
            } else {
                base.join(file)
            };
            read_grid_file(&path, &entry.image_id)?
        } else if let Some(rows) = &entry.inline_grid {
            let dim = rows.first().map(|r| r.len()).unwrap_or(0);
            if rows.iter().any(|r| r.len() != dim) || dim == 0 {
                return Err(CorpusError::BadManifest(
                    manifest_path.to_path_buf(),
                    format!("ragged inline grid for {}", entry.image_id),
                ));
            }
            FeatureGrid::new(
                &entry.image_id,
                rows.len(),
                dim,
                rows.iter().flatten().copied().collect(),
            )
        } else {
            return Err(CorpusError::MissingFeatures(entry.image_id.clone()));
        };
        if grid.dim != manifest.feature_dim {
            return Err(CorpusError::DimMismatch {
                id: entry.image_id.clone(),
                expected: manifest.feature_dim,
                got: grid.dim,
            });
        }
        items.push(CorpusItem {
            image_id: entry.image_id.clone(),
            grid,
            captions: entry.captions.iter().map(|c| normalize(c)).collect(),
        });
    }
    Ok(Corpus {
        split: manifest.split,
        feature_dim: manifest.feature_dim,
        items,
    })
}

/// Write a corpus back out as manifest + one RGRID1 file per image.
pub fn persist(corpus: &Corpus, dir: &Path) -> Result<PathBuf, CorpusError> {
    std::fs::create_dir_all(dir)?;
    let feature_dir = dir.join("features");
    std::fs::create_dir_all(&feature_dir)?;
    let mut items = Vec::with_capacity(corpus.items.len());
    for item in &corpus.items {
        let rel = PathBuf::from("features").join(format!("{}.rgrid", item.image_id));
        write_grid_file(&dir.join(&rel), &item.grid)?;
        items.push(ManifestItem {
            image_id: item.image_id.clone(),
            feature_file: Some(rel),
            inline_grid: None,
            captions: item.captions.clone(),
        });
    }
    let manifest = CorpusManifest {
        split: corpus.split.clone(),
        feature_dim: corpus.feature_dim,
        normalization: default_normalization(),
        items,
    };
    let path = dir.join(format!("{}.json", corpus.split));
    std::fs::write(
        &path,
        serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )?;
    Ok(path)
}

/// Binary grid file: magic, u32 positions, u32 dim, little-endian f32 rows.
pub fn write_grid_file(path: &Path, grid: &FeatureGrid) -> Result<(), CorpusError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(GRID_MAGIC)?;
    out.write_all(&(grid.positions as u32).to_le_bytes())?;
    out.write_all(&(grid.dim as u32).to_le_bytes())?;
    for v in &grid.data {
        out.write_all(&(*v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_grid_file(path: &Path, image_id: &str) -> Result<FeatureGrid, CorpusError> {
    let bad = |msg: &str| CorpusError::BadGridFile(path.to_path_buf(), msg.to_string());
    let mut file = std::io::BufReader::new(
        std::fs::File::open(path).map_err(|e| bad(&e.to_string()))?,
    );
    let mut magic = [0u8; 6];
    file.read_exact(&mut magic).map_err(|e| bad(&e.to_string()))?;
    if &magic != GRID_MAGIC {
        return Err(bad("bad magic"));
    }
    let mut u32buf = [0u8; 4];
    file.read_exact(&mut u32buf).map_err(|e| bad(&e.to_string()))?;
    let positions = u32::from_le_bytes(u32buf) as usize;
    file.read_exact(&mut u32buf).map_err(|e| bad(&e.to_string()))?;
    let dim = u32::from_le_bytes(u32buf) as usize;
    let mut data = Vec::with_capacity(positions * dim);
    for _ in 0..positions * dim {
        file.read_exact(&mut u32buf).map_err(|_| bad("truncated grid data"))?;
        data.push(f32::from_le_bytes(u32buf) as f64);
    }
    Ok(FeatureGrid::new(image_id, positions, dim, data))
}
