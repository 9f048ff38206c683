use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Deserialize;

use super::{
    validate_record, validate_sample, CorpusError, Dataset, DatasetManifest, FeatureMatrix, Sample,
    SentimentRecord, Split,
};

pub(crate) const MANIFEST_FILE: &str = "manifest.json";
pub(crate) const LABELS_FILE: &str = "labels.csv";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Deserialize)]
struct LabelRow {
    id: String,
    split: String,
    severity: String,
    gender: String,
}

fn read_features(path: &Path, id: &str, modality: &str) -> Result<FeatureMatrix, CorpusError> {
    let location = format!("{modality} features of sample {id}");
    let text = fs::read_to_string(path)
        .map_err(|e| CorpusError::Ingestion(format!("{location}: cannot read {}: {e}", path.display())))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut cols = None;
    let mut rows = 0;
    let mut data = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| CorpusError::format(&location, e.to_string()))?;
        match cols {
            None => cols = Some(record.len()),
            Some(c) if c != record.len() => {
                return Err(CorpusError::format(
                    &location,
                    format!("ragged row {}: {} values, expected {c}", line + 1, record.len()),
                ))
            }
            _ => {}
        }
        for field in record.iter() {
            let v: f64 = field.trim().parse().map_err(|_| {
                CorpusError::format(&location, format!("row {}: `{field}` is not a number", line + 1))
            })?;
            if !v.is_finite() {
                return Err(CorpusError::format(&location, format!("row {}: non-finite value", line + 1)));
            }
            data.push(v);
        }
        rows += 1;
    }
    let cols = cols.ok_or_else(|| CorpusError::format(&location, "no frames"))?;
    FeatureMatrix::new(rows, cols, data).map_err(|e| CorpusError::format(&location, e.to_string()))
}

/// Load and validate a dataset directory.
///
/// Layout: `manifest.json`, `labels.csv` (`id,split,severity,gender`),
/// `transcripts/<id>.txt`, `audio/<id>.csv`, `video/<id>.csv`. Either every
/// sample validates or an error is returned; nothing partial escapes.
pub fn load_depression_dataset(root: &Path) -> Result<Dataset, CorpusError> {
    let manifest_path = root.join(MANIFEST_FILE);
    let manifest_text = fs::read_to_string(&manifest_path).map_err(|e| {
        CorpusError::Ingestion(format!("cannot read {}: {e}", manifest_path.display()))
    })?;
    let manifest: DatasetManifest = serde_json::from_str(&manifest_text)
        .map_err(|e| CorpusError::format(MANIFEST_FILE, e.to_string()))?;

    let labels_path = root.join(LABELS_FILE);
    let labels_text = fs::read_to_string(&labels_path)
        .map_err(|e| CorpusError::Ingestion(format!("cannot read {}: {e}", labels_path.display())))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(labels_text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| CorpusError::format(LABELS_FILE, e.to_string()))?
        .clone();
    if headers.iter().collect::<Vec<_>>() != ["id", "split", "severity", "gender"] {
        return Err(CorpusError::format(
            LABELS_FILE,
            format!("header must be `id,split,severity,gender`, got `{}`", headers.iter().collect::<Vec<_>>().join(",")),
        ));
    }

    let mut samples = Vec::new();
    let mut seen = HashSet::new();
    for (i, row) in reader.deserialize::<LabelRow>().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| CorpusError::format(format!("{LABELS_FILE}:{line}"), e.to_string()))?;
        let loc = format!("{LABELS_FILE}:{line} (sample {})", row.id);
        if !seen.insert(row.id.clone()) {
            return Err(CorpusError::validation(loc, "duplicate sample id"));
        }
        let split: Split = row.split.parse().map_err(|e: String| CorpusError::validation(&loc, e))?;
        let severity: i64 = row
            .severity
            .trim()
            .parse()
            .map_err(|_| CorpusError::validation(&loc, format!("severity `{}` is not an integer", row.severity)))?;
        if !(0..=24).contains(&severity) {
            return Err(CorpusError::validation(&loc, format!("severity {severity} outside [0, 24]")));
        }
        let transcript_path = root.join("transcripts").join(format!("{}.txt", row.id));
        let text = fs::read_to_string(&transcript_path).map_err(|e| {
            CorpusError::Ingestion(format!("sample {}: cannot read transcript: {e}", row.id))
        })?;
        let audio = read_features(&root.join("audio").join(format!("{}.csv", row.id)), &row.id, "audio")?;
        let video = read_features(&root.join("video").join(format!("{}.csv", row.id)), &row.id, "video")?;
        let sample = Sample {
            id: row.id,
            split,
            text,
            audio,
            video,
            severity: severity as u8,
            gender: (!row.gender.is_empty()).then_some(row.gender),
        };
        validate_sample(&sample, manifest.feature_dims)?;
        samples.push(sample);
    }

    let mut counts: BTreeMap<Split, usize> = BTreeMap::new();
    for s in &samples {
        *counts.entry(s.split).or_default() += 1;
    }
    let declared: BTreeMap<Split, usize> =
        manifest.split_counts.iter().filter(|(_, &n)| n > 0).map(|(k, v)| (*k, *v)).collect();
    if counts != declared {
        return Err(CorpusError::validation(
            MANIFEST_FILE,
            format!("split counts {declared:?} do not match labels {counts:?}"),
        ));
    }
    Ok(Dataset { manifest, samples })
}

fn write_features(path: &Path, m: &FeatureMatrix) -> Result<(), CorpusError> {
    let mut out = String::new();
    for r in 0..m.rows() {
        let row: Vec<String> = m.row(r).iter().map(|v| v.to_string()).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    fs::write(path, out).map_err(io_err(path))
}

/// Write a dataset in the layout read by [`load_depression_dataset`].
/// Floats use the shortest round-trip representation, so reloading is exact.
pub fn write_dataset(root: &Path, manifest: &DatasetManifest, samples: &[Sample]) -> Result<(), CorpusError> {
    for dir in ["transcripts", "audio", "video"] {
        let p = root.join(dir);
        fs::create_dir_all(&p).map_err(io_err(&p))?;
    }
    let manifest_path = root.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    fs::write(&manifest_path, json + "\n").map_err(io_err(&manifest_path))?;

    let labels_path = root.join(LABELS_FILE);
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["id", "split", "severity", "gender"]).expect("in-memory write");
    for s in samples {
        let sev = s.severity.to_string();
        w.write_record([s.id.as_str(), s.split.as_str(), sev.as_str(), s.gender.as_deref().unwrap_or("")])
            .expect("in-memory write");
    }
    let bytes = w.into_inner().expect("in-memory flush");
    fs::write(&labels_path, bytes).map_err(io_err(&labels_path))?;

    for s in samples {
        let t = root.join("transcripts").join(format!("{}.txt", s.id));
        fs::write(&t, &s.text).map_err(io_err(&t))?;
        write_features(&root.join("audio").join(format!("{}.csv", s.id)), &s.audio)?;
        write_features(&root.join("video").join(format!("{}.csv", s.id)), &s.video)?;
    }
    Ok(())
}

/// Load a JSON-lines sentiment corpus (`{"id", "text", "sentiment"}` per
/// line). Order is preserved; blank lines are skipped.
pub fn load_sentiment_corpus(path: &Path) -> Result<Vec<SentimentRecord>, CorpusError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CorpusError::Ingestion(format!("cannot read {}: {e}", path.display())))?;
    let mut records = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let location = format!("{}:{}", path.display(), i + 1);
        let rec: SentimentRecord =
            serde_json::from_str(line).map_err(|e| CorpusError::format(&location, e.to_string()))?;
        validate_record(&rec, &location)?;
        if !ids.insert(rec.id.clone()) {
            return Err(CorpusError::validation(location, format!("duplicate record id `{}`", rec.id)));
        }
        records.push(rec);
    }
    Ok(records)
}

pub fn write_sentiment_corpus(path: &Path, records: &[SentimentRecord]) -> Result<(), CorpusError> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).expect("record serializes");
        out.write_all(b"\n").expect("in-memory write");
    }
    fs::write(path, out).map_err(io_err(path))
}
