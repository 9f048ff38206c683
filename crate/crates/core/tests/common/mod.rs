#![allow(dead_code)]

use emorag_core::corpus::{build_fixture, Dataset, FixtureSpec, GeneratedFixture};
use emorag_core::pipeline::{build_requests, generate_prompts};
use emorag_core::promptgen::MockClient;
use emorag_core::retrieval::{build_index, precompute_cache, Backend, HashingProvider, RetrievalCache};
use emorag_core::trainer::PromptMap;

/// A fixture with its flat-index top-5 cache and mock prompts, all in memory.
pub struct World {
    pub fixture: GeneratedFixture,
    pub dataset: Dataset,
    pub cache: RetrievalCache,
    pub prompts: PromptMap,
}

pub fn mock_world(seed: u64, n_samples: usize, n_corpus: usize) -> World {
    let fixture = build_fixture(FixtureSpec {
        seed,
        n_samples,
        n_corpus,
        audio_dim: 4,
        video_dim: 4,
    })
    .unwrap();
    let dataset = Dataset {
        manifest: fixture.manifest.clone(),
        samples: fixture.samples.clone(),
    };
    let provider = HashingProvider::default();
    let index = build_index(&fixture.corpus, &provider, Backend::Flat).unwrap();
    let cache = precompute_cache(&fixture.samples, &index, &provider, 5).unwrap();
    let requests = build_requests(&dataset, &cache, &fixture.corpus).unwrap();
    let prompts = generate_prompts(&requests, &MockClient)
        .unwrap()
        .into_iter()
        .map(|e| (e.sample_id.clone(), e.prompt()))
        .collect();
    World {
        fixture,
        dataset,
        cache,
        prompts,
    }
}
