//! Shared inputs for the benchmarks.

use emorag_core::corpus::{build_fixture, Dataset, FixtureSpec, GeneratedFixture, Split};
use emorag_core::fusion::{ModelConfig, ModelInput};
use emorag_core::pipeline::{build_requests, generate_prompts};
use emorag_core::promptgen::MockClient;
use emorag_core::retrieval::{build_index, precompute_cache, Backend, HashingProvider};
use emorag_core::trainer::{prepare_split, PromptMap};

pub fn fixture(n_samples: usize, n_corpus: usize) -> GeneratedFixture {
    build_fixture(FixtureSpec {
        seed: 7,
        n_samples,
        n_corpus,
        audio_dim: 4,
        video_dim: 4,
    })
    .expect("fixture sizes are valid")
}

/// Mock prompts for every sample, retrieved through a flat top-5 index.
pub fn mock_prompts(fx: &GeneratedFixture) -> (Dataset, PromptMap) {
    let dataset = Dataset {
        manifest: fx.manifest.clone(),
        samples: fx.samples.clone(),
    };
    let provider = HashingProvider::default();
    let index = build_index(&fx.corpus, &provider, Backend::Flat).expect("corpus is non-empty");
    let cache = precompute_cache(&fx.samples, &index, &provider, 5).expect("k fits the corpus");
    let requests = build_requests(&dataset, &cache, &fx.corpus).expect("cache covers the dataset");
    let prompts = generate_prompts(&requests, &MockClient)
        .expect("mock never fails")
        .into_iter()
        .map(|e| (e.sample_id.clone(), e.prompt()))
        .collect();
    (dataset, prompts)
}

pub fn train_inputs(n_samples: usize, config: &ModelConfig) -> Vec<ModelInput> {
    let fx = fixture(n_samples, 200);
    let (dataset, prompts) = mock_prompts(&fx);
    prepare_split(&dataset, Split::Train, &prompts, config).expect("prompts cover the split")
}
