use std::cmp::Ordering;
use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::embed::{dot, embed_text, EmbeddingProvider};
use super::kmeans::{kmeans, nearest, sq_dist};
use super::{RetrievalError, RetrievalHit};
use crate::corpus::SentimentRecord;
use crate::text::sha256_hex;

const MAGIC: &[u8; 4] = b"EMIX";
const VERSION: u32 = 1;
const KMEANS_ITERATIONS: usize = 25;
const KMEANS_SEED: u64 = 0x5eed;
const UNIT_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    Flat,
    Ivf { n_lists: usize, n_probe: usize },
}

/// Store of unit-norm corpus vectors searchable by inner product.
///
/// Immutable after construction; `top_k` takes `&self`, so one index can be
/// queried from many threads at once.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingIndex {
    dim: usize,
    backend: Backend,
    ids: Vec<String>,
    vectors: Vec<f64>,
    centroids: Vec<f64>,
    assignments: Vec<usize>,
    lists: Vec<Vec<usize>>,
    fingerprint: String,
}

/// Descending similarity, then ascending id.
pub(crate) fn hit_order(a: (f64, &str), b: (f64, &str)) -> Ordering {
    b.0.partial_cmp(&a.0).expect("finite similarities").then_with(|| a.1.cmp(b.1))
}

pub(crate) fn to_hits<'a>(ranked: impl IntoIterator<Item = (f64, &'a str)>) -> Vec<RetrievalHit> {
    ranked
        .into_iter()
        .enumerate()
        .map(|(i, (sim, id))| RetrievalHit {
            record_id: id.to_owned(),
            // fold -0.0 into 0.0 so serialized hits are canonical
            similarity: if sim == 0.0 { 0.0 } else { sim },
            rank: i + 1,
        })
        .collect()
}

fn check_query(query: &[f64], dim: usize, k: usize) -> Result<(), RetrievalError> {
    if k == 0 {
        return Err(RetrievalError::Precondition("k must be at least 1".into()));
    }
    if query.len() != dim {
        return Err(RetrievalError::Shape(format!(
            "query has {} dims, index has {dim}",
            query.len()
        )));
    }
    let norm = dot(query, query).sqrt();
    if (norm - 1.0).abs() > UNIT_TOLERANCE {
        return Err(RetrievalError::Precondition(format!("query is not unit-norm (norm {norm})")));
    }
    Ok(())
}

fn build_lists(assignments: &[usize], n_lists: usize) -> Vec<Vec<usize>> {
    let mut lists = vec![Vec::new(); n_lists];
    for (i, &a) in assignments.iter().enumerate() {
        lists[a].push(i);
    }
    lists
}

/// Embed every record and build an index with the requested backend.
pub fn build_index(
    records: &[SentimentRecord],
    provider: &dyn EmbeddingProvider,
    backend: Backend,
) -> Result<EmbeddingIndex, RetrievalError> {
    if records.is_empty() {
        return Err(RetrievalError::Precondition("cannot index an empty corpus".into()));
    }
    let n = records.len();
    if let Backend::Ivf { n_lists, n_probe } = backend {
        if n_lists == 0 || n_lists > n {
            return Err(RetrievalError::Precondition(format!(
                "ivf needs 1 <= n_lists <= {n}, got {n_lists}"
            )));
        }
        if n_probe == 0 || n_probe > n_lists {
            return Err(RetrievalError::Precondition(format!(
                "ivf needs 1 <= n_probe <= n_lists, got {n_probe}"
            )));
        }
    }
    let mut seen = HashSet::new();
    for r in records {
        if !seen.insert(r.id.as_str()) {
            return Err(RetrievalError::Validation(format!("duplicate record id `{}`", r.id)));
        }
    }
    let dim = provider.dim();
    let mut vectors = Vec::with_capacity(n * dim);
    for r in records {
        vectors.extend(embed_text(&r.text, provider)?);
    }
    let ids = records.iter().map(|r| r.id.clone()).collect();
    let (centroids, assignments, lists) = match backend {
        Backend::Flat => (Vec::new(), Vec::new(), Vec::new()),
        Backend::Ivf { n_lists, .. } => {
            let (c, a) = kmeans(&vectors, dim, n_lists, KMEANS_ITERATIONS, KMEANS_SEED);
            let lists = build_lists(&a, n_lists);
            (c, a, lists)
        }
    };
    let mut index = EmbeddingIndex {
        dim,
        backend,
        ids,
        vectors,
        centroids,
        assignments,
        lists,
        fingerprint: String::new(),
    };
    index.fingerprint = sha256_hex(&index.to_bytes());
    Ok(index)
}

impl EmbeddingIndex {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn backend(&self) -> Backend {
        self.backend
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    /// IVF list membership (empty for the flat backend).
    pub fn lists(&self) -> &[Vec<usize>] {
        &self.lists
    }

    pub fn assignments(&self) -> &[usize] {
        &self.assignments
    }

    pub fn centroids(&self) -> &[f64] {
        &self.centroids
    }

    /// SHA-256 of the serialized index (backend config, ids, vectors, and
    /// the IVF partition).
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    /// Same index with a different probe count; vectors and partition are
    /// shared, so only the search changes.
    pub fn with_probe(&self, n_probe: usize) -> Result<EmbeddingIndex, RetrievalError> {
        match self.backend {
            Backend::Flat => Err(RetrievalError::Precondition("flat index has no probe count".into())),
            Backend::Ivf { n_lists, .. } => {
                if n_probe == 0 || n_probe > n_lists {
                    return Err(RetrievalError::Precondition(format!(
                        "n_probe must be in 1..={n_lists}"
                    )));
                }
                let mut idx = self.clone();
                idx.backend = Backend::Ivf { n_lists, n_probe };
                idx.fingerprint = sha256_hex(&idx.to_bytes());
                Ok(idx)
            }
        }
    }

    fn rank_candidates(&self, query: &[f64], candidates: impl Iterator<Item = usize>, k: usize) -> Vec<RetrievalHit> {
        let mut scored: Vec<(f64, &str)> =
            candidates.map(|i| (dot(query, self.vector(i)), self.ids[i].as_str())).collect();
        let k = k.min(scored.len());
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, |a, b| hit_order(*a, *b));
            scored.truncate(k);
        }
        scored.sort_by(|a, b| hit_order(*a, *b));
        to_hits(scored)
    }

    /// The `k` most similar records (fewer only when the corpus is smaller).
    pub fn top_k(&self, query: &[f64], k: usize) -> Result<Vec<RetrievalHit>, RetrievalError> {
        check_query(query, self.dim, k)?;
        let want = k.min(self.len());
        match self.backend {
            Backend::Flat => Ok(self.rank_candidates(query, 0..self.len(), k)),
            Backend::Ivf { n_probe, .. } => {
                let mut order: Vec<(f64, usize)> = self
                    .centroids
                    .chunks(self.dim)
                    .enumerate()
                    .map(|(c, centroid)| (sq_dist(query, centroid), c))
                    .collect();
                order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                let mut candidates = Vec::new();
                for (probed, (_, list)) in order.iter().enumerate() {
                    // keep probing past n_probe only while short of k candidates
                    if probed >= n_probe && candidates.len() >= want {
                        break;
                    }
                    candidates.extend_from_slice(&self.lists[*list]);
                }
                Ok(self.rank_candidates(query, candidates.into_iter(), k))
            }
        }
    }

    /// Serialize to the `EMIX` container.
    ///
    /// Layout (little-endian): magic, `u32` version, `u32` dim, `u8` backend
    /// tag (0 flat, 1 ivf), `u64` n, for ivf `u32` n_lists and `u32` n_probe;
    /// then each id as `u32` byte length + UTF-8; then `n * dim` `f64`
    /// vector components; for ivf, `n_lists * dim` `f64` centroid components
    /// and `n` `u32` assignments.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + self.vectors.len() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        match self.backend {
            Backend::Flat => {
                out.push(0);
                out.extend_from_slice(&(self.len() as u64).to_le_bytes());
            }
            Backend::Ivf { n_lists, n_probe } => {
                out.push(1);
                out.extend_from_slice(&(self.len() as u64).to_le_bytes());
                out.extend_from_slice(&(n_lists as u32).to_le_bytes());
                out.extend_from_slice(&(n_probe as u32).to_le_bytes());
            }
        }
        for id in &self.ids {
            out.extend_from_slice(&(id.len() as u32).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
        }
        for v in &self.vectors {
            out.extend_from_slice(&v.to_le_bytes());
        }
        if let Backend::Ivf { .. } = self.backend {
            for c in &self.centroids {
                out.extend_from_slice(&c.to_le_bytes());
            }
            for &a in &self.assignments {
                out.extend_from_slice(&(a as u32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<EmbeddingIndex, RetrievalError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(RetrievalError::Format("bad magic, not an EMIX index".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(RetrievalError::Format(format!("unsupported index version {version}")));
        }
        let dim = r.u32()? as usize;
        let tag = r.take(1)?[0];
        let n = r.u64()? as usize;
        let backend = match tag {
            0 => Backend::Flat,
            1 => Backend::Ivf {
                n_lists: r.u32()? as usize,
                n_probe: r.u32()? as usize,
            },
            t => return Err(RetrievalError::Format(format!("unknown backend tag {t}"))),
        };
        if dim == 0 || n == 0 {
            return Err(RetrievalError::Format("index must have positive dim and size".into()));
        }
        let mut ids = Vec::with_capacity(n);
        let mut seen = HashSet::new();
        for _ in 0..n {
            let len = r.u32()? as usize;
            let id = std::str::from_utf8(r.take(len)?)
                .map_err(|_| RetrievalError::Format("id is not UTF-8".into()))?
                .to_owned();
            if !seen.insert(id.clone()) {
                return Err(RetrievalError::Format(format!("duplicate id `{id}`")));
            }
            ids.push(id);
        }
        let vectors = r.f64s(n * dim)?;
        for (i, v) in vectors.chunks(dim).enumerate() {
            let norm = dot(v, v).sqrt();
            if (norm - 1.0).abs() > UNIT_TOLERANCE {
                return Err(RetrievalError::Format(format!("vector {i} is not unit-norm ({norm})")));
            }
        }
        let (centroids, assignments, lists) = match backend {
            Backend::Flat => (Vec::new(), Vec::new(), Vec::new()),
            Backend::Ivf { n_lists, n_probe } => {
                if n_lists == 0 || n_lists > n || n_probe == 0 || n_probe > n_lists {
                    return Err(RetrievalError::Format(format!(
                        "invalid ivf parameters ({n_lists}, {n_probe}) for {n} vectors"
                    )));
                }
                let centroids = r.f64s(n_lists * dim)?;
                let mut assignments = Vec::with_capacity(n);
                for i in 0..n {
                    let a = r.u32()? as usize;
                    if a != nearest(&vectors[i * dim..(i + 1) * dim], &centroids, dim) {
                        return Err(RetrievalError::Format(format!(
                            "vector {i} is not assigned to its nearest centroid"
                        )));
                    }
                    assignments.push(a);
                }
                let lists = build_lists(&assignments, n_lists);
                (centroids, assignments, lists)
            }
        };
        if r.pos != bytes.len() {
            return Err(RetrievalError::Format("trailing bytes after index".into()));
        }
        Ok(EmbeddingIndex {
            dim,
            backend,
            ids,
            vectors,
            centroids,
            assignments,
            lists,
            fingerprint: sha256_hex(bytes),
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), RetrievalError> {
        fs::write(path, self.to_bytes()).map_err(|source| RetrievalError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<EmbeddingIndex, RetrievalError> {
        let bytes = fs::read(path).map_err(|source| RetrievalError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], RetrievalError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| RetrievalError::Format("index file is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, RetrievalError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, RetrievalError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, RetrievalError> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| RetrievalError::Format("size overflow".into()))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}

/// Full-scan cosine ranking straight from the records, sharing no code with
/// the index search path beyond the provider and the tie rule.
pub fn brute_force_top_k(
    records: &[SentimentRecord],
    provider: &dyn EmbeddingProvider,
    query_text: &str,
    k: usize,
) -> Result<Vec<RetrievalHit>, RetrievalError> {
    if k == 0 {
        return Err(RetrievalError::Precondition("k must be at least 1".into()));
    }
    let q = embed_text(query_text, provider)?;
    let mut all = Vec::with_capacity(records.len());
    for r in records {
        let v = embed_text(&r.text, provider)?;
        let mut s = 0.0;
        for j in 0..q.len() {
            s += q[j] * v[j];
        }
        all.push((s, r.id.as_str()));
    }
    all.sort_by(|a, b| hit_order(*a, *b));
    all.truncate(k);
    Ok(to_hits(all))
}
