use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::embed::{embed_text, EmbeddingProvider};
use super::{EmbeddingIndex, RetrievalError, RetrievalHit};
use crate::corpus::Sample;
use crate::text::sha256_hex;

/// Offline top-k results per sample, bound to the index they came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalCache {
    pub k: usize,
    pub index_fingerprint: String,
    pub entries: BTreeMap<String, Vec<RetrievalHit>>,
}

#[derive(Serialize, Deserialize)]
struct CacheFile {
    k: usize,
    index_fingerprint: String,
    entries: BTreeMap<String, Vec<RetrievalHit>>,
    entries_sha256: String,
}

fn entries_digest(entries: &BTreeMap<String, Vec<RetrievalHit>>) -> String {
    sha256_hex(serde_json::to_string(entries).expect("entries serialize").as_bytes())
}

/// Query the index with every sample's transcript.
pub fn precompute_cache<'a>(
    samples: impl IntoIterator<Item = &'a Sample>,
    index: &EmbeddingIndex,
    provider: &dyn EmbeddingProvider,
    k: usize,
) -> Result<RetrievalCache, RetrievalError> {
    if k == 0 {
        return Err(RetrievalError::Precondition("k must be at least 1".into()));
    }
    let mut entries = BTreeMap::new();
    for s in samples {
        let q = embed_text(&s.text, provider)?;
        entries.insert(s.id.clone(), index.top_k(&q, k)?);
    }
    Ok(RetrievalCache {
        k,
        index_fingerprint: index.fingerprint().to_owned(),
        entries,
    })
}

impl RetrievalCache {
    pub fn hits(&self, sample_id: &str) -> Option<&[RetrievalHit]> {
        self.entries.get(sample_id).map(Vec::as_slice)
    }

    pub fn to_json(&self) -> String {
        let file = CacheFile {
            k: self.k,
            index_fingerprint: self.index_fingerprint.clone(),
            entries: self.entries.clone(),
            entries_sha256: entries_digest(&self.entries),
        };
        serde_json::to_string_pretty(&file).expect("cache serializes") + "\n"
    }

    pub fn save(&self, path: &Path) -> Result<(), RetrievalError> {
        fs::write(path, self.to_json()).map_err(|source| RetrievalError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    /// Parse and verify a cache file against the fingerprint of the index it
    /// must have been built from. Any corruption, digest mismatch or
    /// fingerprint mismatch is reported as [`RetrievalError::StaleCache`].
    pub fn from_json(text: &str, expected_fingerprint: &str, corpus_size: usize) -> Result<Self, RetrievalError> {
        let file: CacheFile = serde_json::from_str(text)
            .map_err(|e| RetrievalError::StaleCache(format!("cache is unreadable: {e}")))?;
        if file.index_fingerprint != expected_fingerprint {
            return Err(RetrievalError::StaleCache(format!(
                "cache was built for index {}, current index is {expected_fingerprint}",
                file.index_fingerprint
            )));
        }
        if entries_digest(&file.entries) != file.entries_sha256 {
            return Err(RetrievalError::StaleCache("cache entries do not match their digest".into()));
        }
        let expected_len = file.k.min(corpus_size);
        for (id, hits) in &file.entries {
            let ranks_ok = hits.iter().enumerate().all(|(i, h)| h.rank == i + 1);
            if hits.len() != expected_len || !ranks_ok {
                return Err(RetrievalError::StaleCache(format!("cache entry `{id}` is malformed")));
            }
        }
        Ok(RetrievalCache {
            k: file.k,
            index_fingerprint: file.index_fingerprint,
            entries: file.entries,
        })
    }

    pub fn load(path: &Path, index: &EmbeddingIndex) -> Result<Self, RetrievalError> {
        let text = fs::read_to_string(path).map_err(|source| RetrievalError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text, index.fingerprint(), index.len())
    }
}
