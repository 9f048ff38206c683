//! Stage fingerprints. Each artifact gets a `<artifact>.meta.json` sidecar
//! holding its own content hash and the hashes of what it was built from,
//! so a changed upstream artifact is detected before it is consumed.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use walkdir::WalkDir;

use super::PipelineError;
use crate::text::sha256_hex;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputRef {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArtifactMeta {
    pub stage: String,
    pub sha256: String,
    pub inputs: BTreeMap<String, InputRef>,
    /// Stage settings that shape the artifact; a change makes it stale.
    pub params: Value,
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Validation(format!("{}: {e}", path.display()))
}

pub fn meta_path(artifact: &Path) -> PathBuf {
    let mut name = artifact.file_name().unwrap_or_default().to_os_string();
    name.push(".meta.json");
    artifact.with_file_name(name)
}

/// SHA-256 of a file, or of a directory tree: the hash over sorted
/// `relative/path NUL file-hash LF` lines, so it ignores timestamps and
/// traversal order.
pub fn content_hash(path: &Path) -> Result<String, PipelineError> {
    if path.is_dir() {
        let mut lines = Vec::new();
        for entry in WalkDir::new(path).sort_by_file_name() {
            let entry = entry.map_err(|e| io_err(path, e))?;
            if entry.file_type().is_file() {
                let rel = entry.path().strip_prefix(path).expect("walk stays under root");
                let rel = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
                lines.push(format!("{rel}\0{}\n", content_hash(entry.path())?));
            }
        }
        lines.sort();
        let mut h = Sha256::new();
        for l in lines {
            h.update(l.as_bytes());
        }
        Ok(hex::encode(h.finalize()))
    } else {
        let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
        Ok(sha256_hex(&bytes))
    }
}

pub fn input_ref(path: &Path) -> Result<InputRef, PipelineError> {
    if !path.exists() {
        return Err(PipelineError::Validation(format!("required input {} does not exist", path.display())));
    }
    Ok(InputRef {
        path: path.display().to_string(),
        sha256: content_hash(path)?,
    })
}

pub fn write_meta(artifact: &Path, meta: &ArtifactMeta) -> Result<(), PipelineError> {
    let path = meta_path(artifact);
    let json = serde_json::to_string_pretty(meta).expect("meta serializes") + "\n";
    fs::write(&path, json).map_err(|e| io_err(&path, e))
}

pub fn read_meta(artifact: &Path) -> Result<Option<ArtifactMeta>, PipelineError> {
    let path = meta_path(artifact);
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    serde_json::from_str(&text)
        .map(Some)
        .map_err(|e| PipelineError::Stale(format!("{}: unreadable fingerprint ({e}); rebuild it", path.display())))
}

/// Confirm `artifact` is the file its stage wrote and that everything it
/// was built from is unchanged, following sidecars upstream.
pub fn require_fresh(artifact: &Path, stage: &str) -> Result<ArtifactMeta, PipelineError> {
    if !artifact.exists() {
        return Err(PipelineError::Validation(format!(
            "{} does not exist; run `{stage}` first",
            artifact.display()
        )));
    }
    let meta = read_meta(artifact)?.ok_or_else(|| {
        PipelineError::Stale(format!("{} has no fingerprint; rebuild upstream (`{stage}`)", artifact.display()))
    })?;
    if content_hash(artifact)? != meta.sha256 {
        return Err(PipelineError::Stale(format!(
            "{} changed since `{stage}` wrote it; rebuild upstream (`{stage}`)",
            artifact.display()
        )));
    }
    for (name, input) in &meta.inputs {
        let p = Path::new(&input.path);
        let current = if p.exists() { Some(content_hash(p)?) } else { None };
        if current.as_deref() != Some(input.sha256.as_str()) {
            return Err(PipelineError::Stale(format!(
                "{} was built from a different {name} ({}); rebuild upstream (`{stage}`)",
                artifact.display(),
                input.path
            )));
        }
        if meta_path(p).exists() {
            require_fresh(p, &read_meta(p)?.expect("sidecar exists").stage)?;
        }
    }
    Ok(meta)
}

/// True when `artifact` is fresh and was built from exactly `inputs` and
/// `params`, so rerunning the stage would reproduce it.
pub fn up_to_date(artifact: &Path, inputs: &BTreeMap<String, InputRef>, params: &Value) -> bool {
    match read_meta(artifact) {
        Ok(Some(meta)) => {
            meta.inputs == *inputs
                && meta.params == *params
                && content_hash(artifact).is_ok_and(|h| h == meta.sha256)
        }
        _ => false,
    }
}

pub fn record(
    artifact: &Path,
    stage: &str,
    inputs: BTreeMap<String, InputRef>,
    params: Value,
) -> Result<ArtifactMeta, PipelineError> {
    let meta = ArtifactMeta {
        stage: stage.to_owned(),
        sha256: content_hash(artifact)?,
        inputs,
        params,
    };
    write_meta(artifact, &meta)?;
    Ok(meta)
}
