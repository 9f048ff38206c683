//! Depression-dataset and sentiment-corpus data model, on-disk loaders, and
//! the seeded synthetic fixture generator.

mod fixture;
mod io;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

pub use fixture::{
    build_fixture, generate_fixture, FixtureSpec, FixtureTruth, GeneratedFixture, PlantedMapping,
    PlantedSample, PlantedTopic, CORPUS_FILE, TRUTH_FILE,
};
pub use io::{load_depression_dataset, load_sentiment_corpus, write_dataset, write_sentiment_corpus};

/// Highest PHQ-8 score.
pub const MAX_SEVERITY: u8 = 24;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("ingestion error: {0}")]
    Ingestion(String),
    #[error("validation error at {location}: {message}")]
    Validation { location: String, message: String },
    #[error("format error at {location}: {message}")]
    Format { location: String, message: String },
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("refusing to overwrite non-empty directory {0}")]
    TargetNotEmpty(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CorpusError {
    pub(crate) fn validation(location: impl Into<String>, message: impl Into<String>) -> Self {
        Self::Validation {
            location: location.into(),
            message: message.into(),
        }
    }

    pub(crate) fn format(location: impl Into<String>, message: impl Into<String>) -> Self {
        Self::Format {
            location: location.into(),
            message: message.into(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "validation" | "dev" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

/// Frame-by-feature matrix (row = frame), row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, CorpusError> {
        if rows == 0 || cols == 0 {
            return Err(CorpusError::Precondition("feature matrix must be non-empty".into()));
        }
        if data.len() != rows * cols {
            return Err(CorpusError::Precondition(format!(
                "{rows}x{cols} feature matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// One depression-dataset record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub split: Split,
    pub text: String,
    /// MFCC frames.
    pub audio: FeatureMatrix,
    /// AU-pose frames.
    pub video: FeatureMatrix,
    /// PHQ-8 score in `0..=24`.
    pub severity: u8,
    pub gender: Option<String>,
}

impl Sample {
    pub fn target(&self) -> f64 {
        f64::from(self.severity)
    }
}

/// One sentiment-corpus record; `sentiment` lies in `[-3, 3]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SentimentRecord {
    pub id: String,
    pub text: String,
    pub sentiment: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Real,
    Synthetic { seed: u64 },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub split_counts: BTreeMap<Split, usize>,
    /// `(audio columns, video columns)`.
    pub feature_dims: (usize, usize),
    pub source: DataSource,
}

/// A loaded, validated dataset. Immutable once built.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    pub fn get(&self, id: &str) -> Option<&Sample> {
        self.samples.iter().find(|s| s.id == id)
    }
}

pub(crate) fn validate_record(rec: &SentimentRecord, location: &str) -> Result<(), CorpusError> {
    if rec.id.is_empty() {
        return Err(CorpusError::validation(location, "empty id"));
    }
    if rec.text.trim().is_empty() {
        return Err(CorpusError::validation(location, format!("record `{}` has empty text", rec.id)));
    }
    if !(-3.0..=3.0).contains(&rec.sentiment) {
        return Err(CorpusError::validation(
            location,
            format!("record `{}` sentiment {} outside [-3, 3]", rec.id, rec.sentiment),
        ));
    }
    Ok(())
}

pub(crate) fn validate_sample(s: &Sample, dims: (usize, usize)) -> Result<(), CorpusError> {
    let loc = format!("sample {}", s.id);
    if s.severity > MAX_SEVERITY {
        return Err(CorpusError::validation(loc, format!("severity {} outside [0, 24]", s.severity)));
    }
    if s.text.trim().is_empty() {
        return Err(CorpusError::validation(loc, "empty transcript"));
    }
    if s.audio.cols() != dims.0 || s.video.cols() != dims.1 {
        return Err(CorpusError::validation(
            loc,
            format!(
                "feature widths ({}, {}) differ from dataset ({}, {})",
                s.audio.cols(),
                s.video.cols(),
                dims.0,
                dims.1
            ),
        ));
    }
    Ok(())
}
