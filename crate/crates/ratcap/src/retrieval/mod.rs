//! The knowledge retriever: embed feature grids, search the external memory
//! by inner product, and hand back the captions of the most similar images.
//!
//! The memory is frozen — nothing here participates in gradients.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{self, IdfTable};
use crate::numerics::Tensor;

pub mod hnsw;

pub use hnsw::HnswIndex;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("feature grid of {0} has no rows")]
    EmptyGrid(String),
    #[error("all grid rows are zero; l2norm_sum embedding undefined for {0}")]
    ZeroEmbedding(String),
    #[error("duplicate image id {0}")]
    DuplicateImage(String),
    #[error("image {0} has no captions")]
    NoCaptions(String),
    #[error("datastore uses {store:?} aggregation but the query asked for {query:?}")]
    AggregationMismatch { store: Aggregation, query: Aggregation },
    #[error("search over an empty index")]
    EmptyIndex,
    #[error("empty datastore")]
    EmptyStore,
    #[error("index has {index_len} vertices but datastore has {store_len} entries")]
    IndexStoreMismatch { index_len: usize, store_len: usize },
    #[error("ef_search {ef} below k {k}")]
    EfBelowK { ef: usize, k: usize },
    #[error("malformed file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Per-image grid of feature vectors, the system's sole view of an image.
#[derive(Debug, Clone)]
pub struct FeatureGrid {
    pub image_id: String,
    pub positions: usize,
    pub dim: usize,
    /// Row-major positions × dim.
    pub data: Vec<f64>,
}

impl FeatureGrid {
    pub fn new(image_id: impl Into<String>, positions: usize, dim: usize, data: Vec<f64>) -> FeatureGrid {
        assert_eq!(data.len(), positions * dim, "grid data size mismatch");
        FeatureGrid {
            image_id: image_id.into(),
            positions,
            dim,
            data,
        }
    }

    pub fn row(&self, p: usize) -> &[f64] {
        &self.data[p * self.dim..(p + 1) * self.dim]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(self.data.clone(), &[self.positions, self.dim])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    Mean,
    Max,
    L2normSum,
}

impl std::str::FromStr for Aggregation {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mean" => Ok(Aggregation::Mean),
            "max" => Ok(Aggregation::Max),
            "l2norm_sum" => Ok(Aggregation::L2normSum),
            other => Err(format!("unknown aggregation {other:?}")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EmbeddingVector {
    pub image_id: String,
    pub vec: Vec<f64>,
}

/// Collapse a feature grid into one retrieval embedding.
pub fn embed_aggregate(
    grid: &FeatureGrid,
    method: Aggregation,
) -> Result<EmbeddingVector, RetrievalError> {
    if grid.positions == 0 {
        return Err(RetrievalError::EmptyGrid(grid.image_id.clone()));
    }
    let d = grid.dim;
    let vec = match method {
        Aggregation::Mean => {
            let mut out = vec![0.0; d];
            for p in 0..grid.positions {
                for (o, v) in out.iter_mut().zip(grid.row(p)) {
                    *o += v;
                }
            }
            for o in out.iter_mut() {
                *o /= grid.positions as f64;
            }
            out
        }
        Aggregation::Max => {
            let mut out = grid.row(0).to_vec();
            for p in 1..grid.positions {
                for (o, v) in out.iter_mut().zip(grid.row(p)) {
                    *o = o.max(*v);
                }
            }
            out
        }
        Aggregation::L2normSum => {
            // Normalize each row, sum, normalize the sum. Zero rows carry
            // no direction and are skipped.
            let mut out = vec![0.0; d];
            let mut used = 0;
            for p in 0..grid.positions {
                let row = grid.row(p);
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm == 0.0 {
                    continue;
                }
                used += 1;
                for (o, v) in out.iter_mut().zip(row) {
                    *o += v / norm;
                }
            }
            if used == 0 {
                return Err(RetrievalError::ZeroEmbedding(grid.image_id.clone()));
            }
            let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(RetrievalError::ZeroEmbedding(grid.image_id.clone()));
            }
            for o in out.iter_mut() {
                *o /= norm;
            }
            out
        }
    };
    Ok(EmbeddingVector {
        image_id: grid.image_id.clone(),
        vec,
    })
}

/// Inner-product relevance between two embeddings.
pub fn relevance(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, RetrievalError> {
    if a.vec.len() != b.vec.len() {
        return Err(RetrievalError::DimMismatch {
            expected: a.vec.len(),
            got: b.vec.len(),
        });
    }
    Ok(dot(&a.vec, &b.vec))
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone)]
pub struct StoreEntry {
    pub embedding: Vec<f64>,
    pub captions: Vec<String>,
}

/// The external memory: image id → (embedding, captions), with the
/// aggregation method recorded so queries embed the same way.
#[derive(Debug, Clone)]
pub struct Datastore {
    entries: BTreeMap<String, StoreEntry>,
    aggregation: Aggregation,
    dim: usize,
}

impl Datastore {
    pub fn new(aggregation: Aggregation) -> Datastore {
        Datastore {
            entries: BTreeMap::new(),
            aggregation,
            dim: 0,
        }
    }

    pub fn aggregation(&self) -> Aggregation {
        self.aggregation
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(
        &mut self,
        image_id: &str,
        embedding: Vec<f64>,
        captions: Vec<String>,
    ) -> Result<(), RetrievalError> {
        if captions.is_empty() {
            return Err(RetrievalError::NoCaptions(image_id.to_string()));
        }
        if self.entries.contains_key(image_id) {
            return Err(RetrievalError::DuplicateImage(image_id.to_string()));
        }
        if self.dim == 0 {
            self.dim = embedding.len();
        } else if embedding.len() != self.dim {
            return Err(RetrievalError::DimMismatch {
                expected: self.dim,
                got: embedding.len(),
            });
        }
        self.entries.insert(
            image_id.to_string(),
            StoreEntry {
                embedding,
                captions,
            },
        );
        Ok(())
    }

    /// Embed a grid with the store's own aggregation and insert it.
    pub fn insert_grid(
        &mut self,
        grid: &FeatureGrid,
        captions: Vec<String>,
    ) -> Result<(), RetrievalError> {
        let emb = embed_aggregate(grid, self.aggregation)?;
        self.insert(&grid.image_id, emb.vec, captions)
    }

    pub fn get(&self, image_id: &str) -> Option<&StoreEntry> {
        self.entries.get(image_id)
    }

    /// Image ids in lexicographic order; vertex i of a built index is ids()[i].
    pub fn ids(&self) -> Vec<&str> {
        self.entries.keys().map(String::as_str).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &StoreEntry)> {
        self.entries.iter()
    }

    // ── Persistence: JSON lines with a header record ─────────────────

    pub fn save(&self, path: &Path) -> Result<(), RetrievalError> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        let header = serde_json::json!({
            "format": "ratcap-datastore",
            "version": 1,
            "aggregation": self.aggregation,
            "dim": self.dim,
            "count": self.entries.len(),
        });
        writeln!(out, "{header}")?;
        for (id, entry) in &self.entries {
            let line = serde_json::json!({
                "image_id": id,
                "embedding": entry.embedding,
                "captions": entry.captions,
            });
            writeln!(out, "{line}")?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Datastore, RetrievalError> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut lines = file.lines();
        let header: serde_json::Value = serde_json::from_str(
            &lines
                .next()
                .ok_or_else(|| RetrievalError::Malformed("empty datastore file".into()))??,
        )
        .map_err(|e| RetrievalError::Malformed(e.to_string()))?;
        if header["format"] != "ratcap-datastore" {
            return Err(RetrievalError::Malformed("missing datastore header".into()));
        }
        let aggregation: Aggregation = serde_json::from_value(header["aggregation"].clone())
            .map_err(|e| RetrievalError::Malformed(e.to_string()))?;
        let mut store = Datastore::new(aggregation);
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            #[derive(Deserialize)]
            struct Row {
                image_id: String,
                embedding: Vec<f64>,
                captions: Vec<String>,
            }
            let row: Row = serde_json::from_str(&line)
                .map_err(|e| RetrievalError::Malformed(e.to_string()))?;
            store.insert(&row.image_id, row.embedding, row.captions)?;
        }
        Ok(store)
    }
}

/// How `k` is counted when collecting retrieved captions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KUnit {
    Captions,
    Images,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetrievalConfig {
    pub k: usize,
    pub k_unit: KUnit,
    pub aggregation: Aggregation,
    /// Exact brute-force search instead of the HNSW index.
    pub exact: bool,
    pub ef_search: usize,
    pub ef_construction: usize,
    pub max_links: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            k: 10,
            k_unit: KUnit::Captions,
            aggregation: Aggregation::Mean,
            exact: false,
            ef_search: 64,
            ef_construction: 200,
            max_links: 32,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SearchHits {
    /// (image_id, inner-product score), best first.
    pub hits: Vec<(String, f64)>,
    /// True when fewer results than requested existed.
    pub exhausted: bool,
}

/// Brute-force top-k by relevance; ties break on lexicographic image id.
pub fn exact_knn(query: &[f64], store: &Datastore, k: usize) -> Result<SearchHits, RetrievalError> {
    if store.is_empty() {
        return Err(RetrievalError::EmptyStore);
    }
    if query.len() != store.dim() {
        return Err(RetrievalError::DimMismatch {
            expected: store.dim(),
            got: query.len(),
        });
    }
    let mut scored: Vec<(String, f64)> = store
        .iter()
        .map(|(id, e)| (id.clone(), dot(query, &e.embedding)))
        .collect();
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .expect("finite scores")
            .then_with(|| a.0.cmp(&b.0))
    });
    let exhausted = k > scored.len();
    scored.truncate(k);
    Ok(SearchHits {
        hits: scored,
        exhausted,
    })
}

/// Build an HNSW index over the datastore in sorted-id order, so vertex i
/// corresponds to `store.ids()[i]`.
pub fn build_index(
    store: &Datastore,
    cfg: &RetrievalConfig,
    seed: u64,
) -> Result<HnswIndex, RetrievalError> {
    if store.is_empty() {
        return Err(RetrievalError::EmptyStore);
    }
    let mut index = HnswIndex::new(store.dim(), cfg.max_links, cfg.ef_construction, seed);
    for (_, entry) in store.iter() {
        index.insert(&entry.embedding);
    }
    Ok(index)
}

/// Approximate top-k image ids from an index paired with its datastore.
pub fn hnsw_knn(
    index: &HnswIndex,
    store: &Datastore,
    query: &[f64],
    k: usize,
    ef_search: usize,
) -> Result<SearchHits, RetrievalError> {
    if index.len() != store.len() {
        return Err(RetrievalError::IndexStoreMismatch {
            index_len: index.len(),
            store_len: store.len(),
        });
    }
    let ids = store.ids();
    let raw = index.search(query, k, ef_search)?;
    let exhausted = raw.len() < k;
    Ok(SearchHits {
        hits: raw
            .into_iter()
            .map(|(v, s)| (ids[v as usize].to_string(), s))
            .collect(),
        exhausted,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct RetrievedCaption {
    pub image_id: String,
    pub caption: String,
    pub score: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Retrieved {
    pub captions: Vec<RetrievedCaption>,
    /// True when fewer than k non-excluded candidates existed.
    pub shortfall: bool,
}

/// Embed the query grid, search (exact or approximate), drop the excluded
/// image, and collect captions image by image in rank order.
pub fn retrieve_captions(
    query_grid: &FeatureGrid,
    store: &Datastore,
    index: Option<&HnswIndex>,
    cfg: &RetrievalConfig,
    exclude_id: Option<&str>,
) -> Result<Retrieved, RetrievalError> {
    if cfg.aggregation != store.aggregation() {
        return Err(RetrievalError::AggregationMismatch {
            store: store.aggregation(),
            query: cfg.aggregation,
        });
    }
    let query = embed_aggregate(query_grid, cfg.aggregation)?;
    // k never needs more images than itself under either unit; +1 headroom
    // covers the excluded image.
    let want_images = cfg.k + usize::from(exclude_id.is_some());
    let hits = if cfg.exact {
        exact_knn(&query.vec, store, want_images)?
    } else {
        let index = index.ok_or(RetrievalError::EmptyIndex)?;
        let ef = cfg.ef_search.max(want_images);
        hnsw_knn(index, store, &query.vec, want_images, ef)?
    };

    let mut captions = Vec::new();
    let mut images_used = 0;
    let mut done = false;
    for (image_id, score) in &hits.hits {
        if Some(image_id.as_str()) == exclude_id {
            continue;
        }
        match cfg.k_unit {
            KUnit::Images => {
                if images_used == cfg.k {
                    done = true;
                    break;
                }
            }
            KUnit::Captions => {
                if captions.len() >= cfg.k {
                    done = true;
                    break;
                }
            }
        }
        images_used += 1;
        let entry = store.get(image_id).expect("hit ids come from the store");
        for caption in &entry.captions {
            if cfg.k_unit == KUnit::Captions && captions.len() >= cfg.k {
                break;
            }
            captions.push(RetrievedCaption {
                image_id: image_id.clone(),
                caption: caption.clone(),
                score: *score,
            });
        }
    }
    let shortfall = !done
        && match cfg.k_unit {
            KUnit::Images => images_used < cfg.k,
            KUnit::Captions => captions.len() < cfg.k,
        };
    Ok(Retrieved {
        captions,
        shortfall,
    })
}

// ── Nearest-neighbor quality report ──────────────────────────────────

#[derive(Debug, Clone, Serialize)]
pub struct MetricRow {
    pub bleu: [f64; 4],
    pub rouge_l: f64,
    pub cider_d: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct NnReportRow {
    pub k: usize,
    pub mean: MetricRow,
    pub oracle: MetricRow,
}

#[derive(Debug, Clone, Serialize)]
pub struct NnReport {
    pub rows: Vec<NnReportRow>,
    /// Images skipped because nothing was retrieved for them.
    pub skipped: usize,
}

pub struct NnQueryItem {
    pub grid: FeatureGrid,
    pub references: Vec<String>,
}

/// Mean and best-of-retrieved ("oracle") scores of the k nearest captions
/// against ground truth, for each requested k.
///
/// One search at max(ks) per image; smaller k reads a prefix, which makes the
/// oracle column non-decreasing in k by construction.
pub fn nn_quality_report(
    test_items: &[NnQueryItem],
    store: &Datastore,
    index: Option<&HnswIndex>,
    cfg: &RetrievalConfig,
    ks: &[usize],
) -> Result<NnReport, RetrievalError> {
    let max_k = ks.iter().copied().max().unwrap_or(0);
    let mut fetch_cfg = cfg.clone();
    fetch_cfg.k = max_k;

    let refs_by_image: BTreeMap<String, Vec<String>> = test_items
        .iter()
        .map(|item| (item.grid.image_id.clone(), item.references.clone()))
        .collect();
    let idf = IdfTable::from_references(&refs_by_image);

    struct ScoredCaption {
        scores: MetricRow,
    }
    let mut per_image: Vec<Vec<ScoredCaption>> = Vec::new();
    let mut skipped = 0;
    for item in test_items {
        let retrieved = retrieve_captions(&item.grid, store, index, &fetch_cfg, None)?;
        if retrieved.captions.is_empty() {
            skipped += 1;
            continue;
        }
        let scored = retrieved
            .captions
            .iter()
            .map(|rc| ScoredCaption {
                scores: MetricRow {
                    bleu: {
                        let b = metrics::bleu(&rc.caption, &item.references, 4);
                        [b[0], b[1], b[2], b[3]]
                    },
                    rouge_l: metrics::rouge_l(&rc.caption, &item.references),
                    cider_d: metrics::cider_d(&rc.caption, &item.references, &idf),
                },
            })
            .collect();
        per_image.push(scored);
    }

    let mut rows = Vec::new();
    for &k in ks {
        let mut mean = MetricRow {
            bleu: [0.0; 4],
            rouge_l: 0.0,
            cider_d: 0.0,
        };
        let mut oracle = mean.clone();
        let mut caption_count = 0usize;
        for image in &per_image {
            let prefix = &image[..k.min(image.len())];
            let mut best = MetricRow {
                bleu: [0.0; 4],
                rouge_l: 0.0,
                cider_d: 0.0,
            };
            for sc in prefix {
                caption_count += 1;
                for n in 0..4 {
                    mean.bleu[n] += sc.scores.bleu[n];
                    best.bleu[n] = best.bleu[n].max(sc.scores.bleu[n]);
                }
                mean.rouge_l += sc.scores.rouge_l;
                mean.cider_d += sc.scores.cider_d;
                best.rouge_l = best.rouge_l.max(sc.scores.rouge_l);
                best.cider_d = best.cider_d.max(sc.scores.cider_d);
            }
            for n in 0..4 {
                oracle.bleu[n] += best.bleu[n];
            }
            oracle.rouge_l += best.rouge_l;
            oracle.cider_d += best.cider_d;
        }
        let images = per_image.len().max(1) as f64;
        let captions = caption_count.max(1) as f64;
        for n in 0..4 {
            mean.bleu[n] /= captions;
            oracle.bleu[n] /= images;
        }
        mean.rouge_l /= captions;
        mean.cider_d /= captions;
        oracle.rouge_l /= images;
        oracle.cider_d /= images;
        rows.push(NnReportRow { k, mean, oracle });
    }
    Ok(NnReport { rows, skipped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn unit_vec(rng: &mut ChaCha20Rng, d: usize) -> Vec<f64> {
        let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect()
    }

    fn grid_of(id: &str, rows: &[&[f64]]) -> FeatureGrid {
        let dim = rows[0].len();
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        FeatureGrid::new(id, rows.len(), dim, data)
    }

    /// Independent ranking: full sort of all scores, same tie rule.
    fn brute_force_ids(query: &[f64], store: &Datastore, k: usize) -> Vec<String> {
        let mut all: Vec<(String, f64)> = store
            .iter()
            .map(|(id, e)| (id.clone(), dot(query, &e.embedding)))
            .collect();
        all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
        all.into_iter().take(k).map(|(id, _)| id).collect()
    }

    #[test]
    fn aggregate_mean_and_max() {
        let grid = grid_of("g", &[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(
            embed_aggregate(&grid, Aggregation::Mean).unwrap().vec,
            vec![2.0, 3.0]
        );
        assert_eq!(
            embed_aggregate(&grid, Aggregation::Max).unwrap().vec,
            vec![3.0, 4.0]
        );
    }

    #[test]
    fn aggregate_l2norm_sum_matches_formula() {
        let grid = grid_of("g", &[&[1.0, 2.0], &[3.0, 4.0]]);
        let got = embed_aggregate(&grid, Aggregation::L2normSum).unwrap().vec;
        // Independent evaluation: normalize rows, sum, normalize result.
        let r1n = (1.0f64 + 4.0).sqrt();
        let r2n = (9.0f64 + 16.0).sqrt();
        let sum = [1.0 / r1n + 3.0 / r2n, 2.0 / r1n + 4.0 / r2n];
        let n = (sum[0] * sum[0] + sum[1] * sum[1]).sqrt();
        let expect = [sum[0] / n, sum[1] / n];
        assert!((got[0] - expect[0]).abs() < 1e-12);
        assert!((got[1] - expect[1]).abs() < 1e-12);
        assert!((got[0] - 0.5257).abs() < 1e-4);
        assert!((got[1] - 0.8506).abs() < 1e-4);
    }

    #[test]
    fn aggregate_l2norm_sum_skips_zero_rows() {
        let grid = grid_of("g", &[&[0.0, 0.0], &[3.0, 4.0]]);
        let got = embed_aggregate(&grid, Aggregation::L2normSum).unwrap().vec;
        assert!((got[0] - 0.6).abs() < 1e-12 && (got[1] - 0.8).abs() < 1e-12);

        let all_zero = grid_of("z", &[&[0.0, 0.0], &[0.0, 0.0]]);
        assert!(matches!(
            embed_aggregate(&all_zero, Aggregation::L2normSum),
            Err(RetrievalError::ZeroEmbedding(_))
        ));
    }

    #[test]
    fn single_row_grid_is_identity_for_all_methods() {
        let grid = grid_of("g", &[&[3.0, 4.0]]);
        for method in [Aggregation::Mean, Aggregation::Max] {
            assert_eq!(embed_aggregate(&grid, method).unwrap().vec, vec![3.0, 4.0]);
        }
        let l2 = embed_aggregate(&grid, Aggregation::L2normSum).unwrap().vec;
        assert!((l2[0] - 0.6).abs() < 1e-12 && (l2[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn relevance_is_inner_product() {
        let a = EmbeddingVector { image_id: "a".into(), vec: vec![1.0, 0.0] };
        let b = EmbeddingVector { image_id: "b".into(), vec: vec![0.0, 1.0] };
        assert_eq!(relevance(&a, &b).unwrap(), 0.0);
        let u = EmbeddingVector { image_id: "u".into(), vec: vec![0.6, 0.8] };
        assert!((relevance(&u, &u).unwrap() - 1.0).abs() < 1e-12);

        let mut rng = ChaCha20Rng::seed_from_u64(3);
        for _ in 0..50 {
            let x: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let y: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let expect: f64 = x.iter().zip(&y).map(|(a, b)| a * b).sum();
            let ev = |v: Vec<f64>| EmbeddingVector { image_id: "r".into(), vec: v };
            assert_eq!(relevance(&ev(x), &ev(y)).unwrap(), expect);
        }

        let short = EmbeddingVector { image_id: "s".into(), vec: vec![1.0] };
        assert!(matches!(
            relevance(&a, &short),
            Err(RetrievalError::DimMismatch { .. })
        ));
    }

    #[test]
    fn exact_knn_basics() {
        let mut store = Datastore::new(Aggregation::Mean);
        store.insert("A", vec![1.0, 0.0], vec!["a cap".into()]).unwrap();
        store.insert("B", vec![0.0, 1.0], vec!["b cap".into()]).unwrap();
        let hits = exact_knn(&[1.0, 0.0], &store, 1).unwrap();
        assert_eq!(hits.hits[0].0, "A");
        assert!(!hits.exhausted);

        // Query equal to a stored unit embedding ranks that id first.
        let hits = exact_knn(&[0.0, 1.0], &store, 2).unwrap();
        assert_eq!(hits.hits[0].0, "B");

        let over = exact_knn(&[1.0, 0.0], &store, 5).unwrap();
        assert_eq!(over.hits.len(), 2);
        assert!(over.exhausted);
    }

    #[test]
    fn exact_knn_matches_brute_force_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let d = 16;
        let mut store = Datastore::new(Aggregation::Mean);
        for i in 0..1000 {
            store
                .insert(&format!("img{i:04}"), unit_vec(&mut rng, d), vec!["c".into()])
                .unwrap();
        }
        for _ in 0..20 {
            let q = unit_vec(&mut rng, d);
            for k in [1, 5, 10] {
                let got: Vec<String> = exact_knn(&q, &store, k)
                    .unwrap()
                    .hits
                    .into_iter()
                    .map(|(id, _)| id)
                    .collect();
                assert_eq!(got, brute_force_ids(&q, &store, k));
            }
        }
    }

    #[test]
    fn exact_knn_scores_non_increasing() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let mut store = Datastore::new(Aggregation::Mean);
        for i in 0..100 {
            store
                .insert(&format!("i{i}"), unit_vec(&mut rng, 8), vec!["c".into()])
                .unwrap();
        }
        let hits = exact_knn(&unit_vec(&mut rng, 8), &store, 20).unwrap().hits;
        for w in hits.windows(2) {
            assert!(w[0].1 >= w[1].1);
        }
    }

    #[test]
    fn datastore_rejects_duplicates_and_empty_captions() {
        let mut store = Datastore::new(Aggregation::Mean);
        store.insert("A", vec![1.0], vec!["x".into()]).unwrap();
        assert!(matches!(
            store.insert("A", vec![1.0], vec!["y".into()]),
            Err(RetrievalError::DuplicateImage(_))
        ));
        assert!(matches!(
            store.insert("B", vec![1.0], vec![]),
            Err(RetrievalError::NoCaptions(_))
        ));
        assert!(matches!(
            store.insert("C", vec![1.0, 2.0], vec!["z".into()]),
            Err(RetrievalError::DimMismatch { .. })
        ));
    }

    #[test]
    fn datastore_jsonl_roundtrip() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let mut store = Datastore::new(Aggregation::L2normSum);
        for i in 0..20 {
            store
                .insert(
                    &format!("img{i}"),
                    unit_vec(&mut rng, 6),
                    vec![format!("caption {i}"), format!("second {i}")],
                )
                .unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.jsonl");
        store.save(&path).unwrap();
        let loaded = Datastore::load(&path).unwrap();
        assert_eq!(loaded.len(), store.len());
        assert_eq!(loaded.aggregation(), store.aggregation());
        for (id, e) in store.iter() {
            let l = loaded.get(id).unwrap();
            assert_eq!(l.embedding, e.embedding);
            assert_eq!(l.captions, e.captions);
        }
    }

    #[test]
    fn hnsw_single_element_index() {
        let mut index = HnswIndex::new(2, 4, 16, 1);
        index.insert(&[0.6, 0.8]);
        let hits = index.search(&[1.0, 0.0], 1, 16).unwrap();
        assert_eq!(hits[0].0, 0);
    }

    #[test]
    fn hnsw_query_of_stored_vector_finds_it() {
        let mut rng = ChaCha20Rng::seed_from_u64(13);
        let vecs: Vec<Vec<f64>> = (0..3).map(|_| unit_vec(&mut rng, 8)).collect();
        let mut index = HnswIndex::new(8, 4, 32, 2);
        for v in &vecs {
            index.insert(v);
        }
        for (i, v) in vecs.iter().enumerate() {
            let hits = index.search(v, 1, 8).unwrap();
            assert_eq!(hits[0].0 as usize, i);
        }
    }

    #[test]
    fn hnsw_k_equal_to_size_returns_all() {
        let mut rng = ChaCha20Rng::seed_from_u64(17);
        let mut index = HnswIndex::new(8, 4, 32, 3);
        for _ in 0..50 {
            index.insert(&unit_vec(&mut rng, 8));
        }
        let hits = index.search(&unit_vec(&mut rng, 8), 50, 64).unwrap();
        let mut ids: Vec<u32> = hits.iter().map(|(id, _)| *id).collect();
        ids.sort();
        assert_eq!(ids, (0..50).collect::<Vec<u32>>());
        for w in hits.windows(2) {
            assert!(w[0].1 >= w[1].1);
        }
    }

    #[test]
    fn hnsw_connectivity_and_recall_smoke() {
        let mut rng = ChaCha20Rng::seed_from_u64(19);
        let d = 16;
        let mut store = Datastore::new(Aggregation::Mean);
        for i in 0..500 {
            store
                .insert(&format!("v{i:03}"), unit_vec(&mut rng, d), vec!["c".into()])
                .unwrap();
        }
        let cfg = RetrievalConfig {
            max_links: 16,
            ef_construction: 100,
            ..Default::default()
        };
        let index = build_index(&store, &cfg, 42).unwrap();
        assert!(index.is_connected());

        let ids = store.ids();
        let mut hit = 0;
        let mut total = 0;
        for _ in 0..50 {
            let q = unit_vec(&mut rng, d);
            let exact: Vec<String> = brute_force_ids(&q, &store, 10);
            let approx = index.search(&q, 10, 64).unwrap();
            for (v, _) in approx {
                if exact.contains(&ids[v as usize].to_string()) {
                    hit += 1;
                }
            }
            total += 10;
        }
        let recall = hit as f64 / total as f64;
        assert!(recall >= 0.9, "recall {recall}");
    }

    #[test]
    fn hnsw_recall_monotone_in_ef() {
        let mut rng = ChaCha20Rng::seed_from_u64(23);
        let d = 32;
        let mut store = Datastore::new(Aggregation::Mean);
        for i in 0..2000 {
            store
                .insert(&format!("v{i:04}"), unit_vec(&mut rng, d), vec!["c".into()])
                .unwrap();
        }
        let cfg = RetrievalConfig {
            max_links: 8,
            ef_construction: 60,
            ..Default::default()
        };
        let index = build_index(&store, &cfg, 7).unwrap();
        let ids = store.ids();
        let queries: Vec<Vec<f64>> = (0..300).map(|_| unit_vec(&mut rng, d)).collect();
        let mut recalls = Vec::new();
        for ef in [16, 32, 64, 128] {
            let mut hit = 0;
            for q in &queries {
                let exact = brute_force_ids(q, &store, 10);
                for (v, _) in index.search(q, 10, ef).unwrap() {
                    if exact.contains(&ids[v as usize].to_string()) {
                        hit += 1;
                    }
                }
            }
            recalls.push(hit as f64 / (300.0 * 10.0));
        }
        for w in recalls.windows(2) {
            assert!(w[0] <= w[1], "recall curve not monotone: {recalls:?}");
        }
        assert!(recalls[3] > 0.8, "recall too low: {recalls:?}");
    }

    #[test]
    fn hnsw_save_load_answers_identically() {
        let mut rng = ChaCha20Rng::seed_from_u64(29);
        let mut index = HnswIndex::new(8, 8, 50, 31);
        for _ in 0..200 {
            index.insert(&unit_vec(&mut rng, 8));
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("index.rhnsw");
        index.save(&path).unwrap();
        let loaded = HnswIndex::load(&path).unwrap();
        assert_eq!(loaded.len(), index.len());
        for _ in 0..30 {
            let q = unit_vec(&mut rng, 8);
            assert_eq!(index.search(&q, 5, 32).unwrap(), loaded.search(&q, 5, 32).unwrap());
        }
    }

    fn attribute_store() -> (Datastore, Vec<FeatureGrid>) {
        // Two clusters: "red" near e0, "blue" near e1.
        let mut store = Datastore::new(Aggregation::Mean);
        let mut grids = Vec::new();
        for i in 0..5 {
            let eps = i as f64 * 0.01;
            store
                .insert(
                    &format!("red{i}"),
                    vec![1.0 - eps, eps],
                    vec![format!("a red ball {i}"), format!("the red ball {i}")],
                )
                .unwrap();
            store
                .insert(
                    &format!("blue{i}"),
                    vec![eps, 1.0 - eps],
                    vec![format!("a blue box {i}"), format!("the blue box {i}")],
                )
                .unwrap();
            grids.push(grid_of(&format!("red{i}"), &[&[1.0 - eps, eps]]));
        }
        (store, grids)
    }

    #[test]
    fn retrieve_never_returns_excluded_image() {
        let (store, grids) = attribute_store();
        let cfg = RetrievalConfig {
            k: 1,
            k_unit: KUnit::Images,
            exact: true,
            ..Default::default()
        };
        let got = retrieve_captions(&grids[0], &store, None, &cfg, Some("red0")).unwrap();
        assert!(!got.captions.is_empty());
        for rc in &got.captions {
            assert_ne!(rc.image_id, "red0");
        }
        // Still the nearest non-excluded image (another red).
        assert!(got.captions[0].image_id.starts_with("red"));
    }

    #[test]
    fn retrieve_k_images_collects_full_caption_lists_in_rank_order() {
        let (store, grids) = attribute_store();
        let cfg = RetrievalConfig {
            k: 2,
            k_unit: KUnit::Images,
            exact: true,
            ..Default::default()
        };
        let got = retrieve_captions(&grids[0], &store, None, &cfg, None).unwrap();
        assert_eq!(got.captions.len(), 4); // 2 images x 2 captions
        assert_eq!(got.captions[0].image_id, got.captions[1].image_id);
        assert_eq!(got.captions[0].image_id, "red0");
    }

    #[test]
    fn retrieve_k_captions_truncates_mid_image() {
        let (store, grids) = attribute_store();
        let cfg = RetrievalConfig {
            k: 3,
            k_unit: KUnit::Captions,
            exact: true,
            ..Default::default()
        };
        let got = retrieve_captions(&grids[0], &store, None, &cfg, None).unwrap();
        assert_eq!(got.captions.len(), 3);
        assert!(!got.shortfall);
    }

    #[test]
    fn retrieve_flags_shortfall() {
        let (store, grids) = attribute_store();
        let cfg = RetrievalConfig {
            k: 50,
            k_unit: KUnit::Images,
            exact: true,
            ..Default::default()
        };
        let got = retrieve_captions(&grids[0], &store, None, &cfg, None).unwrap();
        assert!(got.shortfall);
        assert_eq!(got.captions.len(), 20);
    }

    #[test]
    fn retrieve_rejects_aggregation_mismatch() {
        let (store, grids) = attribute_store();
        let cfg = RetrievalConfig {
            aggregation: Aggregation::Max,
            exact: true,
            ..Default::default()
        };
        assert!(matches!(
            retrieve_captions(&grids[0], &store, None, &cfg, None),
            Err(RetrievalError::AggregationMismatch { .. })
        ));
    }

    #[test]
    fn nn_report_oracle_non_decreasing_and_identity_case() {
        let (store, _) = attribute_store();
        let items: Vec<NnQueryItem> = (0..5)
            .map(|i| {
                let eps = i as f64 * 0.01;
                NnQueryItem {
                    grid: grid_of(&format!("q{i}"), &[&[1.0 - eps, eps]]),
                    references: vec![format!("a red ball {i}"), format!("the red ball {i}")],
                }
            })
            .collect();
        let cfg = RetrievalConfig {
            exact: true,
            k_unit: KUnit::Captions,
            ..Default::default()
        };
        let report = nn_quality_report(&items, &store, None, &cfg, &[1, 3, 5, 10]).unwrap();
        assert_eq!(report.skipped, 0);
        for pair in report.rows.windows(2) {
            for n in 0..4 {
                assert!(pair[0].oracle.bleu[n] <= pair[1].oracle.bleu[n] + 1e-15);
            }
            assert!(pair[0].oracle.rouge_l <= pair[1].oracle.rouge_l + 1e-15);
            assert!(pair[0].oracle.cider_d <= pair[1].oracle.cider_d + 1e-15);
        }
        // The retrieved set contains each query's ground truth, so oracle
        // BLEU-1 is exact.
        let last = report.rows.last().unwrap();
        assert_eq!(last.oracle.bleu[0], 1.0);
    }
}
