use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn write_config(dir: &Path, epochs: usize) -> PathBuf {
    let cfg = format!(
        r#"{{
  "seed": 7,
  "fixture": {{ "n_samples": 120, "n_corpus": 120, "audio_dim": 4, "video_dim": 4 }},
  "train": {{ "batch_size": 16, "epochs": {epochs}, "seed": 7 }},
  "model": {{ "d_model": 16, "n_heads": 2 }}
}}
"#
    );
    let path = dir.join("pipeline.json");
    fs::write(&path, cfg).unwrap();
    path
}

fn emorag(args: &[&str], config: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_emorag"))
        .args(args)
        .arg("--config")
        .arg(config)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tree_hash(o: &Output) -> String {
    stdout(o)
        .lines()
        .find_map(|l| l.strip_prefix("tree sha256 "))
        .expect("fixture prints its tree hash")
        .to_owned()
}

fn ok(o: Output) -> Output {
    assert_eq!(o.status.code(), Some(0), "stdout:\n{}\nstderr:\n{}", stdout(&o), stderr(&o));
    o
}

#[test]
fn fixture_refuses_to_overwrite_and_force_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), 2);
    let first = tree_hash(&ok(emorag(&["fixture"], &cfg)));
    assert!(dir.path().join("data/fixture_truth.json").exists());

    let again = emorag(&["fixture"], &cfg);
    assert_eq!(again.status.code(), Some(2));
    assert!(stderr(&again).starts_with("error: "));

    let forced = tree_hash(&ok(emorag(&["fixture", "--force"], &cfg)));
    let forced_again = tree_hash(&ok(emorag(&["fixture", "--force"], &cfg)));
    assert_eq!(first, forced);
    assert_eq!(forced, forced_again);

    let other = tree_hash(&ok(emorag(&["fixture", "--force", "--seed", "8"], &cfg)));
    assert_ne!(other, first);
}

#[test]
fn mock_pipeline_runs_end_to_end() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), 3);
    ok(emorag(&["fixture"], &cfg));
    ok(emorag(&["index"], &cfg));
    assert!(stdout(&ok(emorag(&["index"], &cfg))).contains("up to date"));
    ok(emorag(&["retrieve"], &cfg));
    assert!(stdout(&ok(emorag(&["prompt"], &cfg))).contains("mock"));
    let train = stdout(&ok(emorag(&["train"], &cfg)));
    assert!(train.contains("best epoch index"), "{train}");
    assert!(stdout(&ok(emorag(&["train"], &cfg))).contains("up to date"));

    let eval = stdout(&ok(emorag(&["eval"], &cfg)));
    for split in ["validation", "test"] {
        let line = eval.lines().find(|l| l.starts_with(split)).unwrap_or_else(|| panic!("{eval}"));
        assert!(line.contains("CCC") && line.contains("MAE"), "{line}");
    }
    let run = dir.path().join("runs/main");
    for f in ["model.ckpt", "run.json", "metrics_test.json", "predictions_test.csv", "metrics_validation.json"] {
        assert!(run.join(f).exists(), "missing {f}");
    }

    let ablation = stdout(&ok(emorag(&["eval", "--ablation"], &cfg)));
    assert!(ablation.lines().any(|l| l.starts_with("with prompt")), "{ablation}");
    assert!(ablation.lines().any(|l| l.starts_with("without prompt")), "{ablation}");
    assert!(run.join("ablation/ablation.json").exists());
}

#[test]
fn tampered_cache_is_reported_stale_downstream() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), 2);
    for stage in ["fixture", "index", "retrieve", "prompt"] {
        ok(emorag(&[stage], &cfg));
    }
    let cache = dir.path().join("artifacts/retrieval_cache.json");
    let mut text = fs::read_to_string(&cache).unwrap();
    text.push('\n');
    fs::write(&cache, text).unwrap();
    for stage in ["prompt", "train"] {
        let o = emorag(&[stage], &cfg);
        assert_eq!(o.status.code(), Some(3), "{stage}: {}", stderr(&o));
        assert!(stderr(&o).contains("stale"), "{}", stderr(&o));
    }
}

#[test]
fn missing_upstream_and_bad_config_are_validation_errors() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), 2);
    assert_eq!(emorag(&["index"], &cfg).status.code(), Some(2));

    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{ "retrieval": { "k": 3 } }"#).unwrap();
    let o = emorag(&["fixture"], &bad);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("k_retrieved"), "{}", stderr(&o));

    fs::write(&bad, r#"{ "sed": 7 }"#).unwrap();
    assert_eq!(emorag(&["fixture"], &bad).status.code(), Some(2));
}

#[test]
fn live_mode_without_a_server_is_an_endpoint_error() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("live.json");
    fs::write(
        &cfg,
        r#"{
  "fixture": { "n_samples": 40, "n_corpus": 40, "audio_dim": 4, "video_dim": 4 },
  "llm": { "base_url": "http://127.0.0.1:9/v1", "attempts": 1, "backoff_ms": 1, "timeout_secs": 2 }
}
"#,
    )
    .unwrap();
    for stage in ["fixture", "index", "retrieve"] {
        ok(emorag(&[stage], &cfg));
    }
    let o = emorag(&["prompt", "--mode", "live"], &cfg);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
}

#[test]
fn gradcheck_reports_both_arms() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), 2);
    for stage in ["fixture", "index", "retrieve", "prompt"] {
        ok(emorag(&[stage], &cfg));
    }
    let o = emorag(&["gradcheck"], &cfg);
    let out = stdout(&o);
    assert!(out.contains("with prompt:") && out.contains("without prompt:"), "{out}");
    assert!(out.contains("max relative error"), "{out}");
    // pass or fail, the verdict and the exit code agree
    let code = o.status.code().unwrap();
    assert!(code == 0 || code == 1, "{}", stderr(&o));
}
