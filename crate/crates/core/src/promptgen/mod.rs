//! Emotion Prompt generation: the LLM request built from a transcript and its
//! retrieved corpus records, completion by a live endpoint or a deterministic
//! mock, and the on-disk prompt store.

mod client;
mod mock;
mod store;

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::SentimentRecord;
use crate::retrieval::RetrievalHit;
use crate::text::sha256_hex;

pub use client::{generate, generate_batch, LiveClient, LiveClientConfig, LlmClient, MockClient, TOKEN_ENV};
pub use mock::mock_complete;
pub use store::{load_prompts, persist_prompts, verify_prompts, PromptStoreEntry};

/// Retrieved texts longer than this many characters are cut and marked.
pub const MAX_RETRIEVED_CHARS: usize = 500;
pub const TRUNCATION_MARKER: &str = " [...]";

pub const INSTRUCTION_DEPRESSION: &str = "1. Ask one question that probes how depressed the speaker \
seems and what may be driving that state.";
pub const INSTRUCTION_PATTERNS: &str = "2. Ask a second question that reads the related texts \
against the transcript: the themes they have in common, where their sentiment diverges, and \
what those differences imply emotionally.";
pub const ANSWER_DIRECTIVE: &str = "Answer both of your questions. Reply in the form \
Q1: ... A1: ... Q2: ... A2: ...";

#[derive(Debug, thiserror::Error)]
pub enum PromptError {
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("provenance error: {0}")]
    Provenance(String),
    #[error("endpoint error: {0}")]
    Endpoint(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("corrupt prompt store: {0}")]
    Corruption(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// One retrieved corpus record as it appears in a request.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievedText {
    pub record_id: String,
    pub text: String,
    pub sentiment: f64,
    pub similarity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptRequest {
    pub original_text: String,
    pub retrieved: Vec<RetrievedText>,
    pub instruction_block: String,
    pub request_hash: String,
}

#[derive(Serialize)]
struct HashedFields<'a> {
    original_text: &'a str,
    retrieved: &'a [RetrievedText],
    instruction_block: &'a str,
}

impl PromptRequest {
    /// SHA-256 of the canonical JSON of every field except the hash itself.
    pub fn compute_hash(&self) -> String {
        let fields = HashedFields {
            original_text: &self.original_text,
            retrieved: &self.retrieved,
            instruction_block: &self.instruction_block,
        };
        sha256_hex(serde_json::to_string(&fields).expect("request serializes").as_bytes())
    }

    pub fn retrieved_ids(&self) -> Vec<String> {
        self.retrieved.iter().map(|r| r.record_id.clone()).collect()
    }

    /// The single user message sent to the LLM.
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str("Below is a transcript from a clinical interview, followed by related texts ");
        out.push_str("drawn from a corpus annotated with sentiment scores between -3 and 3, most similar first.\n\n");
        out.push_str("Transcript:\n\"\"\"\n");
        out.push_str(&self.original_text);
        out.push_str("\n\"\"\"\n\nRelated texts:\n");
        for (i, r) in self.retrieved.iter().enumerate() {
            let _ = writeln!(out, "[{}] (sentiment {}) {}", i + 1, fmt2(r.sentiment), truncate_chars(&r.text));
        }
        out.push_str("\nInstructions:\n");
        out.push_str(&self.instruction_block);
        out.push('\n');
        out
    }
}

pub fn instruction_block() -> String {
    format!("{INSTRUCTION_DEPRESSION}\n{INSTRUCTION_PATTERNS}\n{ANSWER_DIRECTIVE}")
}

/// Two decimals, with negative zero printed as `0.00`.
pub(crate) fn fmt2(x: f64) -> String {
    let s = format!("{x:.2}");
    if s == "-0.00" { "0.00".to_owned() } else { s }
}

pub(crate) fn truncate_chars(text: &str) -> String {
    match text.char_indices().nth(MAX_RETRIEVED_CHARS) {
        Some((cut, _)) => format!("{}{TRUNCATION_MARKER}", &text[..cut]),
        None => text.to_owned(),
    }
}

/// Assemble the request for one transcript from its ranked hits.
pub fn build_request(
    original_text: &str,
    hits: &[RetrievalHit],
    corpus: &[SentimentRecord],
) -> Result<PromptRequest, PromptError> {
    if hits.is_empty() {
        return Err(PromptError::Precondition("no retrieved texts for request".into()));
    }
    if original_text.trim().is_empty() {
        return Err(PromptError::Precondition("original text is empty".into()));
    }
    let by_id: HashMap<&str, &SentimentRecord> = corpus.iter().map(|r| (r.id.as_str(), r)).collect();
    let mut ordered: Vec<&RetrievalHit> = hits.iter().collect();
    ordered.sort_by_key(|h| h.rank);
    let retrieved = ordered
        .into_iter()
        .map(|h| {
            let rec = by_id.get(h.record_id.as_str()).ok_or_else(|| {
                PromptError::Provenance(format!("retrieved id `{}` is not in the corpus", h.record_id))
            })?;
            Ok(RetrievedText {
                record_id: rec.id.clone(),
                text: rec.text.clone(),
                sentiment: rec.sentiment,
                similarity: h.similarity,
            })
        })
        .collect::<Result<Vec<_>, PromptError>>()?;
    let mut req = PromptRequest {
        original_text: original_text.to_owned(),
        retrieved,
        instruction_block: instruction_block(),
        request_hash: String::new(),
    };
    req.request_hash = req.compute_hash();
    Ok(req)
}

/// Where a prompt's text came from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PromptSource {
    Mock,
    Live(String),
}

impl PromptSource {
    pub fn as_string(&self) -> String {
        match self {
            PromptSource::Mock => "mock".to_owned(),
            PromptSource::Live(model) => format!("live:{model}"),
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "mock" => Some(PromptSource::Mock),
            _ => s
                .strip_prefix("live:")
                .filter(|m| !m.is_empty())
                .map(|m| PromptSource::Live(m.to_owned())),
        }
    }
}

impl Serialize for PromptSource {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.as_string())
    }
}

impl<'de> Deserialize<'de> for PromptSource {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        PromptSource::parse(&s).ok_or_else(|| serde::de::Error::custom(format!("unknown prompt source `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmotionPrompt {
    pub text: String,
    pub source: PromptSource,
    pub request_hash: String,
    pub retrieved_ids: Vec<String>,
}
