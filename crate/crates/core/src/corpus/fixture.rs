//! Seeded synthetic stand-in for the restricted interview dataset and the
//! sentiment corpus.
//!
//! Every corpus record belongs to a *topic* identified by a small invented
//! vocabulary and a latent valence. Each interview transcript mentions three
//! of its topic's words, and its severity is a noisy decreasing function of
//! the mean sentiment of that topic's corpus records. Topics are disjoint
//! across splits, so the keywords themselves carry no transferable signal:
//! only the retrieved sentiment does.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::retrieval::HashingProvider;
use super::io::write_dataset;
use super::{
    write_sentiment_corpus, CorpusError, DataSource, DatasetManifest, FeatureMatrix, Sample,
    SentimentRecord, Split, MAX_SEVERITY,
};

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const TRUTH_FILE: &str = "fixture_truth.json";

const RECORDS_PER_TOPIC: usize = 5;

const SYLLABLES: &[&str] = &[
    "ba", "ko", "ri", "zu", "me", "ta", "lo", "vi", "ne", "su", "ga", "pe", "do", "fi", "ku", "mo",
    "ra", "te", "xi", "yo", "wa", "ze", "hu", "ni",
];

const SAMPLE_TEMPLATES: &[&str] = &[
    "lately i keep thinking about {a} and {c}, the whole {b} thing. {f}",
    "most days it comes back to {a} {c}, and then {b} again. {f}",
    "when people ask how i am i end up talking about {b} and {a} {c}. {f}",
    "honestly {a} has been on my mind, {b} and {c} too. {f}",
    "i guess the main thing right now is {c} {a}. also {b}. {f}",
];

const SAMPLE_FILLERS: &[&str] = &[
    "i moved here a few years ago for work.",
    "my sleep schedule has been different recently.",
    "i usually spend evenings at home.",
    "my family lives in another city.",
    "i have been cooking more these weeks.",
    "the commute takes about an hour.",
    "i used to play music in school.",
    "weekends are mostly quiet for me.",
];

/// Audio feature 0 drifts by this much per 6 points of severity: a weak
/// cue next to the retrieved sentiment.
const AUDIO_SHIFT: f64 = 0.1;
/// Words per topic vocabulary; each corpus record uses all but one.
const TOPIC_WORDS: usize = 4;

/// Arguments of [`generate_fixture`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureSpec {
    pub seed: u64,
    pub n_samples: usize,
    pub n_corpus: usize,
    pub audio_dim: usize,
    pub video_dim: usize,
}

/// Severity = clamp(round(intercept + slope * m + N(0, noise_sd)), 0, 24),
/// where `m` is the mean sentiment of the sample's topic records.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedMapping {
    pub intercept: f64,
    pub slope: f64,
    pub noise_sd: f64,
    pub clamp: (u8, u8),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedTopic {
    pub topic: usize,
    pub keywords: Vec<String>,
    pub split: Split,
    pub valence: f64,
    pub record_ids: Vec<String>,
    pub mean_sentiment: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedSample {
    pub id: String,
    pub split: Split,
    pub topic: usize,
    pub planted_mean_sentiment: f64,
    pub severity: u8,
}

/// Contents of `fixture_truth.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixtureTruth {
    pub spec: FixtureSpec,
    pub mapping: PlantedMapping,
    pub topics: Vec<PlantedTopic>,
    pub samples: Vec<PlantedSample>,
    pub corpus_ids: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedFixture {
    pub manifest: DatasetManifest,
    pub samples: Vec<Sample>,
    pub corpus: Vec<SentimentRecord>,
    pub truth: FixtureTruth,
}

fn pseudo_word(rng: &mut ChaCha8Rng) -> String {
    (0..3).map(|_| *SYLLABLES.choose(rng).expect("non-empty")).collect()
}

fn round_to(x: f64, decimals: i32) -> f64 {
    let f = 10f64.powi(decimals);
    (x * f).round() / f
}

fn split_sizes(n: usize) -> [usize; 3] {
    let train = ((n as f64 * 0.6).round() as usize).clamp(1, n);
    let val = ((n as f64 * 0.2).round() as usize).min(n - train);
    [train, val, n - train - val]
}

fn noise_frames(rng: &mut ChaCha8Rng, rows: usize, cols: usize, shift0: f64) -> FeatureMatrix {
    let normal = Normal::new(0.0, 1.0).expect("valid sd");
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        for c in 0..cols {
            let v: f64 = normal.sample(rng) + if c == 0 { shift0 } else { 0.0 };
            data.push(round_to(v, 4));
        }
    }
    FeatureMatrix::new(rows, cols, data).expect("positive dims")
}

fn fill(template: &str, a: &str, b: &str, c: &str, f: &str) -> String {
    template.replace("{a}", a).replace("{b}", b).replace("{c}", c).replace("{f}", f)
}

/// Build the fixture in memory (pure function of `spec`).
pub fn build_fixture(spec: FixtureSpec) -> Result<GeneratedFixture, CorpusError> {
    if spec.n_samples == 0 || spec.n_corpus == 0 || spec.audio_dim == 0 || spec.video_dim == 0 {
        return Err(CorpusError::Precondition(format!(
            "fixture sizes must be positive: {spec:?}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n_topics = spec.n_corpus.div_ceil(RECORDS_PER_TOPIC).max(1);

    let reserved: BTreeSet<String> = SAMPLE_TEMPLATES
        .iter()
        .chain(SAMPLE_FILLERS)
        .flat_map(|s| crate::text::tokenize(s))
        .collect();
    // Invented words avoid the hashing buckets of template words under the
    // default provider, so no corpus record matches every transcript.
    let hasher = HashingProvider::default();
    let reserved_buckets: BTreeSet<usize> = reserved.iter().map(|w| hasher.bucket(w).0).collect();
    let mut used = BTreeSet::new();
    let mut accept = |w: &String| {
        !reserved.contains(w) && !reserved_buckets.contains(&hasher.bucket(w).0) && used.insert(w.clone())
    };
    let mut keywords = Vec::with_capacity(n_topics);
    for _ in 0..n_topics {
        let mut words = Vec::with_capacity(TOPIC_WORDS);
        while words.len() < TOPIC_WORDS {
            let w = pseudo_word(&mut rng);
            if accept(&w) {
                words.push(w);
            }
        }
        keywords.push(words);
    }

    // Topics are partitioned across splits in the same proportions as samples.
    let topic_sizes = split_sizes(n_topics);
    let mut topic_split = Vec::with_capacity(n_topics);
    for (split, &n) in Split::ALL.iter().zip(&topic_sizes) {
        topic_split.extend(std::iter::repeat_n(*split, n));
    }
    // Stratified valences per split so that each split spans the range.
    let mut valence = vec![0.0; n_topics];
    let mut start = 0;
    for &n in &topic_sizes {
        let mut vals: Vec<f64> = (0..n)
            .map(|i| -2.6 + 5.2 * (i as f64 + rng.random::<f64>()) / n as f64)
            .collect();
        vals.shuffle(&mut rng);
        valence[start..start + n].copy_from_slice(&vals);
        start += n;
    }

    let sentiment_noise = Normal::new(0.0, 0.35).expect("valid sd");
    let mut corpus = Vec::with_capacity(spec.n_corpus);
    let mut topic_records: Vec<Vec<usize>> = vec![Vec::new(); n_topics];
    for j in 0..spec.n_corpus {
        let topic = j % n_topics;
        let omit = topic_records[topic].len() % TOPIC_WORDS;
        let mut words: Vec<&str> = keywords[topic]
            .iter()
            .enumerate()
            .filter(|&(w, _)| w != omit)
            .map(|(_, w)| w.as_str())
            .collect();
        words.shuffle(&mut rng);
        let sentiment = round_to((valence[topic] + sentiment_noise.sample(&mut rng)).clamp(-3.0, 3.0), 2);
        topic_records[topic].push(j);
        corpus.push(SentimentRecord {
            id: format!("mosei_{j:05}"),
            text: words.join(" "),
            sentiment,
        });
    }
    let topic_mean: Vec<f64> = topic_records
        .iter()
        .map(|rs| rs.iter().map(|&j| corpus[j].sentiment).sum::<f64>() / rs.len() as f64)
        .collect();

    let mapping = PlantedMapping {
        intercept: 12.0,
        slope: -3.6,
        noise_sd: 1.5,
        clamp: (0, MAX_SEVERITY),
    };
    let severity_noise = Normal::new(0.0, mapping.noise_sd).expect("valid sd");
    let sample_sizes = split_sizes(spec.n_samples);
    let mut samples = Vec::with_capacity(spec.n_samples);
    let mut planted = Vec::with_capacity(spec.n_samples);
    let mut idx = 0;
    for (split, &n) in Split::ALL.iter().zip(&sample_sizes) {
        let mut pool: Vec<usize> = (0..n_topics).filter(|&t| topic_split[t] == *split).collect();
        if pool.is_empty() {
            pool = (0..n_topics).collect();
        }
        pool.shuffle(&mut rng);
        for k in 0..n {
            let topic = pool[k % pool.len()];
            let m = topic_mean[topic];
            let raw = mapping.intercept + mapping.slope * m + severity_noise.sample(&mut rng);
            let severity = raw.round().clamp(0.0, f64::from(MAX_SEVERITY)) as u8;
            let [a, b, c] = [&keywords[topic][0], &keywords[topic][1], &keywords[topic][2]];
            let template = SAMPLE_TEMPLATES.choose(&mut rng).expect("non-empty");
            let filler = SAMPLE_FILLERS.choose(&mut rng).expect("non-empty");
            let id = format!("{}_P", 300 + idx);
            let shift = AUDIO_SHIFT * (f64::from(severity) - 12.0) / 6.0;
            let t_audio = rng.random_range(20..=60);
            let t_video = rng.random_range(20..=60);
            let audio = noise_frames(&mut rng, t_audio, spec.audio_dim, shift);
            let video = noise_frames(&mut rng, t_video, spec.video_dim, 0.0);
            let gender = if rng.random::<bool>() { "female" } else { "male" };
            planted.push(PlantedSample {
                id: id.clone(),
                split: *split,
                topic,
                planted_mean_sentiment: m,
                severity,
            });
            samples.push(Sample {
                id,
                split: *split,
                text: fill(template, a, b, c, filler),
                audio,
                video,
                severity,
                gender: Some(gender.to_string()),
            });
            idx += 1;
        }
    }

    let split_counts: BTreeMap<Split, usize> = Split::ALL
        .iter()
        .zip(sample_sizes)
        .filter(|(_, n)| *n > 0)
        .map(|(s, n)| (*s, n))
        .collect();
    let manifest = DatasetManifest {
        name: format!("synthetic-interviews-seed{}", spec.seed),
        split_counts,
        feature_dims: (spec.audio_dim, spec.video_dim),
        source: DataSource::Synthetic { seed: spec.seed },
    };
    let topics = (0..n_topics)
        .map(|t| PlantedTopic {
            topic: t,
            keywords: keywords[t].clone(),
            split: topic_split[t],
            valence: valence[t],
            record_ids: topic_records[t].iter().map(|&j| corpus[j].id.clone()).collect(),
            mean_sentiment: topic_mean[t],
        })
        .collect();
    let truth = FixtureTruth {
        spec,
        mapping,
        topics,
        samples: planted,
        corpus_ids: corpus.iter().map(|r| r.id.clone()).collect(),
    };
    Ok(GeneratedFixture {
        manifest,
        samples,
        corpus,
        truth,
    })
}

/// Generate a fixture and write it under `dir`: the dataset layout,
/// `corpus.jsonl` and `fixture_truth.json`. Refuses a non-empty `dir`.
pub fn generate_fixture(dir: &Path, spec: FixtureSpec) -> Result<GeneratedFixture, CorpusError> {
    let fixture = build_fixture(spec)?;
    if dir.exists() {
        let mut entries = fs::read_dir(dir).map_err(|source| CorpusError::Io {
            path: dir.display().to_string(),
            source,
        })?;
        if entries.next().is_some() {
            return Err(CorpusError::TargetNotEmpty(dir.display().to_string()));
        }
    }
    fs::create_dir_all(dir).map_err(|source| CorpusError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    write_dataset(dir, &fixture.manifest, &fixture.samples)?;
    write_sentiment_corpus(&dir.join(CORPUS_FILE), &fixture.corpus)?;
    let truth_path = dir.join(TRUTH_FILE);
    let json = serde_json::to_string_pretty(&fixture.truth).expect("truth serializes");
    fs::write(&truth_path, json + "\n").map_err(|source| CorpusError::Io {
        path: truth_path.display().to_string(),
        source,
    })?;
    Ok(fixture)
}
