//! Hierarchical navigable small-world graph over inner-product similarity.
//!
//! Single-threaded, deterministic construction: levels come from a seeded
//! RNG and every ordering ties on vertex id. Vectors are rounded through f32
//! on insert, matching the persisted representation, so a saved and reloaded
//! index answers queries identically.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use super::{dot, RetrievalError};

const MAGIC: &[u8; 6] = b"RHNSW1";

#[derive(Debug, Clone, Copy, PartialEq)]
struct Candidate {
    score: f64,
    id: u32,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.score
            .partial_cmp(&other.score)
            .expect("finite scores")
            .then_with(|| self.id.cmp(&other.id))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

pub struct HnswIndex {
    dim: usize,
    max_links: usize,
    ef_construction: usize,
    /// Flat count × dim, f32-rounded values.
    vectors: Vec<f64>,
    /// links[vertex][level] = neighbor ids.
    links: Vec<Vec<Vec<u32>>>,
    levels: Vec<u32>,
    entry: u32,
    max_level: u32,
    rng: ChaCha20Rng,
    level_mult: f64,
}

impl HnswIndex {
    pub fn new(dim: usize, max_links: usize, ef_construction: usize, seed: u64) -> HnswIndex {
        assert!(max_links >= 2, "need at least two links per vertex");
        HnswIndex {
            dim,
            max_links,
            ef_construction,
            vectors: Vec::new(),
            links: Vec::new(),
            levels: Vec::new(),
            entry: 0,
            max_level: 0,
            rng: ChaCha20Rng::seed_from_u64(seed),
            level_mult: 1.0 / (max_links as f64).ln(),
        }
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn max_links(&self) -> usize {
        self.max_links
    }

    fn vector(&self, id: u32) -> &[f64] {
        let i = id as usize * self.dim;
        &self.vectors[i..i + self.dim]
    }

    fn similarity(&self, id: u32, q: &[f64]) -> f64 {
        dot(self.vector(id), q)
    }

    fn sample_level(&mut self) -> u32 {
        let u: f64 = self.rng.gen_range(f64::MIN_POSITIVE..1.0);
        (-u.ln() * self.level_mult).floor() as u32
    }

    pub fn insert(&mut self, vector: &[f64]) -> u32 {
        assert_eq!(vector.len(), self.dim, "vector dimension mismatch");
        let id = self.len() as u32;
        let level = self.sample_level();
        // Store the f32-quantized values the file format will carry.
        self.vectors
            .extend(vector.iter().map(|&v| v as f32 as f64));
        self.levels.push(level);
        self.links
            .push((0..=level).map(|_| Vec::new()).collect());

        if id == 0 {
            self.entry = 0;
            self.max_level = level;
            return id;
        }

        let q = self.vector(id).to_vec();
        let mut ep = vec![Candidate {
            score: self.similarity(self.entry, &q),
            id: self.entry,
        }];
        for lev in ((level + 1)..=self.max_level).rev() {
            ep = self.search_layer(&q, &ep, 1, lev, Some(id));
        }
        for lev in (0..=level.min(self.max_level)).rev() {
            let found = self.search_layer(&q, &ep, self.ef_construction, lev, Some(id));
            let neighbors = self.select_neighbors(&found, self.max_links);
            for n in &neighbors {
                self.links[id as usize][lev as usize].push(n.id);
                self.links[n.id as usize][lev as usize].push(id);
                self.prune(n.id, lev);
            }
            ep = found;
        }
        if level > self.max_level {
            self.entry = id;
            self.max_level = level;
        }
        id
    }

    /// Re-select a vertex's neighbor list when it exceeds the link cap.
    fn prune(&mut self, id: u32, level: u32) {
        if self.links[id as usize][level as usize].len() <= self.max_links {
            return;
        }
        let v = self.vector(id).to_vec();
        let mut cands: Vec<Candidate> = self.links[id as usize][level as usize]
            .iter()
            .map(|&n| Candidate {
                score: self.similarity(n, &v),
                id: n,
            })
            .collect();
        cands.sort_by(|a, b| b.cmp(a));
        let kept = self.select_neighbors(&cands, self.max_links);
        self.links[id as usize][level as usize] = kept.iter().map(|c| c.id).collect();
    }

    /// Diversity heuristic: keep a candidate when it is more similar to the
    /// query (its carried score) than to any already-kept neighbor; fill
    /// remaining slots with the best pruned candidates.
    fn select_neighbors(&self, candidates: &[Candidate], m: usize) -> Vec<Candidate> {
        let mut sorted = candidates.to_vec();
        sorted.sort_by(|a, b| b.cmp(a));
        sorted.dedup_by_key(|c| c.id);
        let mut selected: Vec<Candidate> = Vec::with_capacity(m);
        let mut pruned: Vec<Candidate> = Vec::new();
        for c in &sorted {
            if selected.len() >= m {
                break;
            }
            let diverse = selected
                .iter()
                .all(|s| dot(self.vector(c.id), self.vector(s.id)) < c.score);
            if diverse {
                selected.push(*c);
            } else {
                pruned.push(*c);
            }
        }
        for c in pruned {
            if selected.len() >= m {
                break;
            }
            selected.push(c);
        }
        selected
    }

    /// Best-first expansion at one level; returns up to `ef` results sorted
    /// by descending similarity.
    fn search_layer(
        &self,
        q: &[f64],
        entries: &[Candidate],
        ef: usize,
        level: u32,
        skip: Option<u32>,
    ) -> Vec<Candidate> {
        let mut visited = vec![false; self.len()];
        if let Some(s) = skip {
            visited[s as usize] = true;
        }
        let mut frontier: BinaryHeap<Candidate> = BinaryHeap::new();
        let mut results: BinaryHeap<std::cmp::Reverse<Candidate>> = BinaryHeap::new();
        for e in entries {
            if visited[e.id as usize] {
                continue;
            }
            visited[e.id as usize] = true;
            frontier.push(*e);
            results.push(std::cmp::Reverse(*e));
        }
        while let Some(c) = frontier.pop() {
            let worst = results.peek().map(|r| r.0.score).unwrap_or(f64::NEG_INFINITY);
            if results.len() >= ef && c.score < worst {
                break;
            }
            if self.levels[c.id as usize] < level {
                continue;
            }
            for &n in &self.links[c.id as usize][level as usize] {
                if visited[n as usize] {
                    continue;
                }
                visited[n as usize] = true;
                let cand = Candidate {
                    score: self.similarity(n, q),
                    id: n,
                };
                let worst = results.peek().map(|r| r.0.score).unwrap_or(f64::NEG_INFINITY);
                if results.len() < ef || cand.score > worst {
                    frontier.push(cand);
                    results.push(std::cmp::Reverse(cand));
                    if results.len() > ef {
                        results.pop();
                    }
                }
            }
        }
        let mut out: Vec<Candidate> = results.into_iter().map(|r| r.0).collect();
        out.sort_by(|a, b| b.cmp(a));
        out
    }

    /// Approximate top-k vertex ids by inner product, best first.
    pub fn search(
        &self,
        query: &[f64],
        k: usize,
        ef_search: usize,
    ) -> Result<Vec<(u32, f64)>, RetrievalError> {
        if self.is_empty() {
            return Err(RetrievalError::EmptyIndex);
        }
        if ef_search < k {
            return Err(RetrievalError::EfBelowK { ef: ef_search, k });
        }
        if query.len() != self.dim {
            return Err(RetrievalError::DimMismatch {
                expected: self.dim,
                got: query.len(),
            });
        }
        let mut ep = vec![Candidate {
            score: self.similarity(self.entry, query),
            id: self.entry,
        }];
        for lev in (1..=self.max_level).rev() {
            ep = self.search_layer(query, &ep, 1, lev, None);
        }
        let found = self.search_layer(query, &ep, ef_search, 0, None);
        Ok(found
            .into_iter()
            .take(k)
            .map(|c| (c.id, c.score))
            .collect())
    }

    /// Every vertex reachable from the entry point over base-layer links?
    pub fn is_connected(&self) -> bool {
        if self.is_empty() {
            return true;
        }
        let mut seen = vec![false; self.len()];
        let mut queue = std::collections::VecDeque::new();
        seen[self.entry as usize] = true;
        queue.push_back(self.entry);
        let mut count = 1;
        while let Some(v) = queue.pop_front() {
            for &n in &self.links[v as usize][0] {
                if !seen[n as usize] {
                    seen[n as usize] = true;
                    count += 1;
                    queue.push_back(n);
                }
            }
        }
        count == self.len()
    }

    // ── Persistence ──────────────────────────────────────────────────

    pub fn save(&self, path: &Path) -> Result<(), RetrievalError> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        out.write_all(MAGIC)?;
        let write_u32 = |out: &mut dyn Write, v: u32| out.write_all(&v.to_le_bytes());
        write_u32(&mut out, self.len() as u32)?;
        write_u32(&mut out, self.dim as u32)?;
        write_u32(&mut out, self.max_links as u32)?;
        write_u32(&mut out, self.entry)?;
        write_u32(&mut out, self.max_level)?;
        for v in 0..self.len() {
            write_u32(&mut out, self.levels[v])?;
            for lev in 0..=self.levels[v] {
                let neighbors = &self.links[v][lev as usize];
                write_u32(&mut out, neighbors.len() as u32)?;
                for &n in neighbors {
                    write_u32(&mut out, n)?;
                }
            }
        }
        for &x in &self.vectors {
            out.write_all(&(x as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<HnswIndex, RetrievalError> {
        let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 6];
        file.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(RetrievalError::Malformed("bad index magic".into()));
        }
        let read_u32 = |file: &mut dyn Read| -> Result<u32, RetrievalError> {
            let mut b = [0u8; 4];
            file.read_exact(&mut b)?;
            Ok(u32::from_le_bytes(b))
        };
        let count = read_u32(&mut file)? as usize;
        let dim = read_u32(&mut file)? as usize;
        let max_links = read_u32(&mut file)? as usize;
        let entry = read_u32(&mut file)?;
        let max_level = read_u32(&mut file)?;
        let mut levels = Vec::with_capacity(count);
        let mut links = Vec::with_capacity(count);
        for _ in 0..count {
            let level = read_u32(&mut file)?;
            levels.push(level);
            let mut per_level = Vec::with_capacity(level as usize + 1);
            for _ in 0..=level {
                let n = read_u32(&mut file)? as usize;
                let mut neighbors = Vec::with_capacity(n);
                for _ in 0..n {
                    neighbors.push(read_u32(&mut file)?);
                }
                per_level.push(neighbors);
            }
            links.push(per_level);
        }
        let mut vectors = Vec::with_capacity(count * dim);
        for _ in 0..count * dim {
            let mut b = [0u8; 4];
            file.read_exact(&mut b)?;
            vectors.push(f32::from_le_bytes(b) as f64);
        }
        Ok(HnswIndex {
            dim,
            max_links,
            ef_construction: 200,
            vectors,
            links,
            levels,
            entry,
            max_level,
            rng: ChaCha20Rng::seed_from_u64(0),
            level_mult: 1.0 / (max_links as f64).ln(),
        })
    }
}
