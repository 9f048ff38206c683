use serde::{Deserialize, Serialize};

use super::RetrievalError;
use crate::text::{fnv1a64, tokenize};

/// Maps text to a dense vector. Implementations must be deterministic.
pub trait EmbeddingProvider: Send + Sync {
    /// Stable identity, recorded next to artifacts built with this provider.
    fn id(&self) -> String;
    fn dim(&self) -> usize;
    /// Unnormalized embedding; [`embed_text`] normalizes it.
    fn embed_raw(&self, text: &str) -> Result<Vec<f64>, RetrievalError>;
}

/// Signed feature hashing of a bag of tokens.
///
/// Each token adds `±1` to bucket `h(token) mod dim`; the sign comes from the
/// top bit of the same hash.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashingProvider {
    pub dim: usize,
    pub seed: u64,
}

impl Default for HashingProvider {
    fn default() -> Self {
        Self { dim: 256, seed: 0 }
    }
}

impl HashingProvider {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self { dim, seed }
    }

    pub fn bucket(&self, token: &str) -> (usize, f64) {
        let h = fnv1a64(self.seed, token.as_bytes());
        let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
        ((h % self.dim as u64) as usize, sign)
    }
}

impl EmbeddingProvider for HashingProvider {
    fn id(&self) -> String {
        format!("hashing-bag(dim={},seed={})", self.dim, self.seed)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_raw(&self, text: &str) -> Result<Vec<f64>, RetrievalError> {
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return Err(RetrievalError::Precondition("text has no tokens".into()));
        }
        let mut v = vec![0.0; self.dim];
        for t in &tokens {
            let (b, s) = self.bucket(t);
            v[b] += s;
        }
        Ok(v)
    }
}

/// Serializable choice of provider, as stored in pipeline configs.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderSpec {
    Hashing(HashingProvider),
}

impl Default for ProviderSpec {
    fn default() -> Self {
        ProviderSpec::Hashing(HashingProvider::default())
    }
}

impl ProviderSpec {
    pub fn build(&self) -> Box<dyn EmbeddingProvider> {
        match self {
            ProviderSpec::Hashing(p) => Box::new(*p),
        }
    }
}

pub fn l2_normalize(mut v: Vec<f64>) -> Result<Vec<f64>, RetrievalError> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(RetrievalError::Numeric(format!("cannot normalize vector with norm {norm}")));
    }
    for x in &mut v {
        *x /= norm;
    }
    Ok(v)
}

/// Unit-length embedding of `text`.
pub fn embed_text(text: &str, provider: &dyn EmbeddingProvider) -> Result<Vec<f64>, RetrievalError> {
    if text.trim().is_empty() {
        return Err(RetrievalError::Precondition("cannot embed empty text".into()));
    }
    let raw = provider.embed_raw(text)?;
    if raw.len() != provider.dim() {
        return Err(RetrievalError::Shape(format!(
            "provider {} returned {} dims, declared {}",
            provider.id(),
            raw.len(),
            provider.dim()
        )));
    }
    l2_normalize(raw)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
