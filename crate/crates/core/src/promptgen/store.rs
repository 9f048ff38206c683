//! `prompts.jsonl`: one prompt per line, keyed by sample id.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EmotionPrompt, PromptError, PromptRequest, PromptSource};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptStoreEntry {
    pub sample_id: String,
    pub text: String,
    pub source: PromptSource,
    pub request_hash: String,
    pub retrieved_ids: Vec<String>,
}

impl PromptStoreEntry {
    pub fn new(sample_id: impl Into<String>, prompt: EmotionPrompt) -> Self {
        Self {
            sample_id: sample_id.into(),
            text: prompt.text,
            source: prompt.source,
            request_hash: prompt.request_hash,
            retrieved_ids: prompt.retrieved_ids,
        }
    }

    pub fn prompt(&self) -> EmotionPrompt {
        EmotionPrompt {
            text: self.text.clone(),
            source: self.source.clone(),
            request_hash: self.request_hash.clone(),
            retrieved_ids: self.retrieved_ids.clone(),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PromptError + '_ {
    move |source| PromptError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Written to a sibling temp file and renamed, so readers never see a
/// partial store.
pub fn persist_prompts(entries: &[PromptStoreEntry], path: &Path) -> Result<(), PromptError> {
    let mut seen = HashSet::new();
    let mut out = String::new();
    for e in entries {
        if !seen.insert(e.sample_id.as_str()) {
            return Err(PromptError::Precondition(format!("duplicate sample id `{}`", e.sample_id)));
        }
        out.push_str(&serde_json::to_string(e).expect("entry serializes"));
        out.push('\n');
    }
    let tmp = path.with_extension("jsonl.tmp");
    fs::write(&tmp, out).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn is_sha256_hex(s: &str) -> bool {
    s.len() == 64 && s.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b))
}

/// Parse and structurally validate the store. Any defect rejects the whole
/// file.
pub fn load_prompts(path: &Path) -> Result<Vec<PromptStoreEntry>, PromptError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    if !text.is_empty() && !text.ends_with('\n') {
        return Err(PromptError::Corruption(format!("{}: last line is truncated", path.display())));
    }
    let mut seen = HashSet::new();
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let at = format!("{}:{}", path.display(), i + 1);
        let e: PromptStoreEntry =
            serde_json::from_str(line).map_err(|err| PromptError::Corruption(format!("{at}: {err}")))?;
        if !is_sha256_hex(&e.request_hash) {
            return Err(PromptError::Corruption(format!("{at}: malformed request hash")));
        }
        if e.text.trim().is_empty() || e.retrieved_ids.is_empty() {
            return Err(PromptError::Corruption(format!("{at}: empty prompt or provenance")));
        }
        if !seen.insert(e.sample_id.clone()) {
            return Err(PromptError::Corruption(format!("{at}: duplicate sample id `{}`", e.sample_id)));
        }
        entries.push(e);
    }
    Ok(entries)
}

/// Check that every stored prompt re-derives from the request it claims to
/// answer: same hash, same retrieved ids, and no request left unanswered.
pub fn verify_prompts(
    entries: &[PromptStoreEntry],
    requests: &BTreeMap<String, PromptRequest>,
) -> Result<(), PromptError> {
    if entries.len() != requests.len() {
        return Err(PromptError::Corruption(format!(
            "store has {} prompts for {} requests",
            entries.len(),
            requests.len()
        )));
    }
    for e in entries {
        let req = requests
            .get(&e.sample_id)
            .ok_or_else(|| PromptError::Corruption(format!("prompt for unknown sample `{}`", e.sample_id)))?;
        if req.compute_hash() != e.request_hash || e.retrieved_ids != req.retrieved_ids() {
            return Err(PromptError::Corruption(format!(
                "prompt for `{}` does not match its request",
                e.sample_id
            )));
        }
    }
    Ok(())
}
