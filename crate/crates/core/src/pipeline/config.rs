use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::corpus::FixtureSpec;
use crate::fusion::ModelConfig;
use crate::promptgen::LiveClientConfig;
use crate::retrieval::{Backend, ProviderSpec};
use crate::trainer::TrainConfig;

/// Artifact locations. Relative paths resolve against the config file's
/// directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub dataset: PathBuf,
    pub corpus: PathBuf,
    pub index: PathBuf,
    pub cache: PathBuf,
    pub prompts: PathBuf,
    pub run_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            dataset: "data".into(),
            corpus: "data/corpus.jsonl".into(),
            index: "artifacts/index.emix".into(),
            cache: "artifacts/retrieval_cache.json".into(),
            prompts: "artifacts/prompts.jsonl".into(),
            run_dir: "runs/main".into(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FixtureSizes {
    pub n_samples: usize,
    pub n_corpus: usize,
    pub audio_dim: usize,
    pub video_dim: usize,
}

impl Default for FixtureSizes {
    fn default() -> Self {
        FixtureSizes {
            n_samples: 200,
            n_corpus: 200,
            audio_dim: 4,
            video_dim: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    pub backend: Backend,
    pub k: usize,
    pub provider: ProviderSpec,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            backend: Backend::Flat,
            k: 5,
            provider: ProviderSpec::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LlmMode {
    #[default]
    Mock,
    Live,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmConfig {
    pub mode: LlmMode,
    pub base_url: String,
    pub model: String,
    pub max_in_flight: usize,
    pub timeout_secs: u64,
    pub attempts: u32,
    pub backoff_ms: u64,
}

impl Default for LlmConfig {
    fn default() -> Self {
        let live = LiveClientConfig::default();
        LlmConfig {
            mode: LlmMode::Mock,
            base_url: live.base_url,
            model: live.model,
            max_in_flight: live.max_in_flight,
            timeout_secs: live.timeout_secs,
            attempts: live.attempts,
            backoff_ms: live.backoff_ms,
        }
    }
}

impl LlmConfig {
    pub fn live_client_config(&self) -> LiveClientConfig {
        LiveClientConfig {
            base_url: self.base_url.clone(),
            model: self.model.clone(),
            max_in_flight: self.max_in_flight,
            timeout_secs: self.timeout_secs,
            attempts: self.attempts,
            backoff_ms: self.backoff_ms,
        }
    }
}

/// Gradient-check settings. The model is the configured one with these
/// sizes substituted, checked in both prompt arms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub step: f64,
    pub threshold: f64,
    pub batch_size: usize,
    pub init_seed: u64,
    pub d_model: usize,
    pub n_heads: usize,
    pub text_vocab_hash_dim: usize,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            step: 1e-5,
            threshold: 1e-4,
            batch_size: 4,
            init_seed: 0,
            d_model: 8,
            n_heads: 2,
            text_vocab_hash_dim: 64,
        }
    }
}

/// One JSON file drives every stage. `seed` seeds the fixture and the
/// parameter initialization; shuffling uses `train.seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub paths: PathsConfig,
    pub fixture: FixtureSizes,
    pub retrieval: RetrievalConfig,
    pub llm: LlmConfig,
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub gradcheck: GradcheckConfig,
    /// Directory relative paths resolve against; not serialized.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 7,
            paths: PathsConfig::default(),
            fixture: FixtureSizes::default(),
            retrieval: RetrievalConfig::default(),
            llm: LlmConfig::default(),
            train: TrainConfig::default(),
            model: ModelConfig::default(),
            gradcheck: GradcheckConfig::default(),
            base_dir: PathBuf::from("."),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path)
            .map_err(|e| PipelineError::Validation(format!("{}: {e}", path.display())))?;
        let mut cfg: PipelineConfig = serde_json::from_str(&text)
            .map_err(|e| PipelineError::Validation(format!("{}: {e}", path.display())))?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        if cfg.base_dir.as_os_str().is_empty() {
            cfg.base_dir = PathBuf::from(".");
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Validation(m));
        if self.retrieval.k == 0 {
            return bad("retrieval.k must be at least 1".into());
        }
        if self.retrieval.k != self.train.k_retrieved {
            return bad(format!(
                "retrieval.k ({}) and train.k_retrieved ({}) disagree",
                self.retrieval.k, self.train.k_retrieved
            ));
        }
        if let Backend::Ivf { n_lists, n_probe } = self.retrieval.backend {
            if n_lists == 0 || n_probe == 0 || n_probe > n_lists {
                return bad(format!("ivf needs 1 <= n_probe <= n_lists, got {n_probe} of {n_lists}"));
            }
        }
        let gc = &self.gradcheck;
        if !(gc.step > 0.0 && gc.threshold > 0.0) || gc.batch_size < 2 {
            return bad("gradcheck needs positive step and threshold and batch_size >= 2".into());
        }
        self.train.validate().map_err(|e| PipelineError::Validation(format!("train: {e}")))?;
        self.model.validate().map_err(|e| PipelineError::Validation(format!("model: {e}")))?;
        self.gradcheck_model(true).validate().map_err(|e| PipelineError::Validation(format!("gradcheck: {e}")))?;
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn fixture_spec(&self) -> FixtureSpec {
        FixtureSpec {
            seed: self.seed,
            n_samples: self.fixture.n_samples,
            n_corpus: self.fixture.n_corpus,
            audio_dim: self.fixture.audio_dim,
            video_dim: self.fixture.video_dim,
        }
    }

    pub fn gradcheck_model(&self, use_emotion_prompt: bool) -> ModelConfig {
        ModelConfig {
            d_model: self.gradcheck.d_model,
            n_heads: self.gradcheck.n_heads,
            text_vocab_hash_dim: self.gradcheck.text_vocab_hash_dim,
            use_emotion_prompt,
            ..self.model.clone()
        }
    }
}
