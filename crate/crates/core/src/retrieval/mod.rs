//! Top-k retrieval over the sentiment corpus: embedding providers, an exact
//! flat index, an inverted-file index, a brute-force reference, and the
//! per-sample offline cache.

mod cache;
mod embed;
mod index;
mod kmeans;

use serde::{Deserialize, Serialize};

pub use cache::{precompute_cache, RetrievalCache};
pub use embed::{dot, embed_text, l2_normalize, EmbeddingProvider, HashingProvider, ProviderSpec};
pub use index::{brute_force_top_k, build_index, Backend, EmbeddingIndex};

#[derive(Debug, thiserror::Error)]
pub enum RetrievalError {
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("malformed index file: {0}")]
    Format(String),
    #[error("stale cache: {0}")]
    StaleCache(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// One ranked result. Lists are ordered by similarity (descending), ties by
/// ascending `record_id`, with ranks `1..=k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalHit {
    pub record_id: String,
    pub similarity: f64,
    pub rank: usize,
}
