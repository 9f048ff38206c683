//! Four-modality severity regressor: a shared hashed-bag encoder for the
//! transcript and the Emotion Prompt, frame encoders for audio and video,
//! text-queried cross-attention per modality, and a two-layer predictor.

mod checkpoint;
mod loss;
mod model;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{FeatureMatrix, Sample};
use crate::numkit::{NumError, ParamStore, Tensor};
use crate::promptgen::EmotionPrompt;
use crate::text::{fnv1a64, tokenize};

pub use checkpoint::Checkpoint;
pub use loss::ccc_loss;
pub use model::{
    cross_attention, encode_sequence, encode_text, encode_text_tokens, forward, forward_on_tape, predict, ForwardTrace, TapeTrace,
};

#[derive(Debug, thiserror::Error)]
pub enum FusionError {
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl From<NumError> for FusionError {
    fn from(e: NumError) -> Self {
        match e {
            NumError::Shape(m) => FusionError::Shape(m),
            NumError::NonFinite(m) => FusionError::Numeric(m),
            NumError::Usage(m) | NumError::Precondition(m) => FusionError::Precondition(m),
        }
    }
}

/// How the modality embeddings enter cross-attention.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    /// One pooled key/value vector per modality.
    #[default]
    Pooled,
    /// Keys/values are the per-frame (per-token for the prompt) encodings
    /// before pooling.
    Sequence,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub max_frames: usize,
    pub text_vocab_hash_dim: usize,
    pub use_emotion_prompt: bool,
    pub prediction_clamp: bool,
    pub audio_dim: usize,
    pub video_dim: usize,
    pub attention: AttentionMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            max_frames: 128,
            text_vocab_hash_dim: 1024,
            use_emotion_prompt: true,
            prediction_clamp: true,
            audio_dim: 4,
            video_dim: 4,
            attention: AttentionMode::Pooled,
        }
    }
}

/// PHQ-8 range of reported predictions.
pub const SEVERITY_RANGE: (f64, f64) = (0.0, 24.0);

/// Parameters updated at the reduced text-encoder rate.
pub const TEXT_ENCODER_PREFIX: &str = "text_encoder.";

const MODALITIES: [&str; 3] = ["audio", "video", "prompt"];

impl ModelConfig {
    pub fn validate(&self) -> Result<(), FusionError> {
        let positive = [
            self.d_model,
            self.n_heads,
            self.max_frames,
            self.text_vocab_hash_dim,
            self.audio_dim,
            self.video_dim,
        ];
        if positive.contains(&0) {
            return Err(FusionError::Precondition(format!("model sizes must be positive: {self:?}")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(FusionError::Precondition(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    /// Every parameter as (name, rows, cols, fan_in), in canonical order.
    pub fn parameter_layout(&self) -> Vec<(String, usize, usize, usize)> {
        let d = self.d_model;
        let mut out = vec![
            // a table row is a lookup, not a weighted sum
            ("text_encoder.embedding".to_owned(), self.text_vocab_hash_dim, d, 1),
            ("text_encoder.proj_w".to_owned(), d, d, d),
            ("text_encoder.proj_b".to_owned(), 1, d, d),
            ("audio_encoder.w".to_owned(), self.audio_dim, d, self.audio_dim),
            ("audio_encoder.b".to_owned(), 1, d, self.audio_dim),
            ("video_encoder.w".to_owned(), self.video_dim, d, self.video_dim),
            ("video_encoder.b".to_owned(), 1, d, self.video_dim),
        ];
        for m in MODALITIES {
            for w in ["w_q", "w_k", "w_v", "w_o"] {
                out.push((format!("attn_{m}.{w}"), d, d, d));
            }
        }
        out.extend([
            ("predictor.w1".to_owned(), 4 * d, d, 4 * d),
            ("predictor.b1".to_owned(), 1, d, 4 * d),
            ("predictor.w2".to_owned(), d, 1, d),
            ("predictor.b2".to_owned(), 1, 1, d),
        ]);
        out
    }

    /// Bucket of a token in the text encoder's embedding table.
    pub fn token_bucket(&self, token: &str) -> usize {
        (fnv1a64(TEXT_HASH_SEED, token.as_bytes()) % self.text_vocab_hash_dim as u64) as usize
    }

    pub fn token_ids(&self, text: &str) -> Result<Vec<usize>, FusionError> {
        let ids: Vec<usize> = tokenize(text).iter().map(|t| self.token_bucket(t)).collect();
        if ids.is_empty() {
            return Err(FusionError::Precondition("text has no tokens".into()));
        }
        Ok(ids)
    }
}

/// Distinct from the retrieval provider's seed so the two hashings are
/// unrelated.
const TEXT_HASH_SEED: u64 = 0x7e47;

/// Seeded uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ParamStore, FusionError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for (name, rows, cols, fan_in) in config.parameter_layout() {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
        store.insert(name, Tensor::matrix(rows, cols, data)?)?;
    }
    Ok(store)
}

/// A sample reduced to what the model consumes.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInput {
    pub id: String,
    pub text_ids: Vec<usize>,
    /// `None` exactly when the prompt is ablated.
    pub prompt_ids: Option<Vec<usize>>,
    pub audio: Tensor,
    pub video: Tensor,
    pub target: f64,
}

fn frames(m: &FeatureMatrix, max_frames: usize, expected_dim: usize, what: &str) -> Result<Tensor, FusionError> {
    if m.cols() != expected_dim {
        return Err(FusionError::Shape(format!(
            "{what} frames have {} features, model expects {expected_dim}",
            m.cols()
        )));
    }
    if m.rows() == 0 {
        return Err(FusionError::Precondition(format!("{what} has no frames")));
    }
    let t = m.rows().min(max_frames);
    Ok(Tensor::matrix(t, m.cols(), m.data()[..t * m.cols()].to_vec())?)
}

impl ModelInput {
    /// The prompt is required when the model uses it and ignored otherwise.
    pub fn prepare(sample: &Sample, prompt: Option<&EmotionPrompt>, config: &ModelConfig) -> Result<Self, FusionError> {
        let prompt_ids = if config.use_emotion_prompt {
            let p = prompt.ok_or_else(|| {
                FusionError::Precondition(format!("sample `{}` has no Emotion Prompt", sample.id))
            })?;
            Some(config.token_ids(&p.text)?)
        } else {
            None
        };
        Ok(ModelInput {
            id: sample.id.clone(),
            text_ids: config.token_ids(&sample.text)?,
            prompt_ids,
            audio: frames(&sample.audio, config.max_frames, config.audio_dim, "audio")?,
            video: frames(&sample.video, config.max_frames, config.video_dim, "video")?,
            target: sample.target(),
        })
    }
}
