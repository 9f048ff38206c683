//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each,
//! and exits non-zero if any criterion fails.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use emorag_core::corpus::{
    generate_fixture, load_depression_dataset, load_sentiment_corpus, FixtureSpec, Split, CORPUS_FILE,
};
use emorag_core::fusion::ccc_loss;
use emorag_core::numkit::{Tape, Tensor};
use emorag_core::pipeline::{
    build_requests, gradcheck_batch, run_ablation, run_stage, PipelineConfig, Stage, StageOptions, RUN_FILE,
};
use emorag_core::promptgen::{build_request, load_prompts};
use emorag_core::retrieval::{
    brute_force_top_k, build_index, embed_text, precompute_cache, Backend, EmbeddingIndex, HashingProvider,
    RetrievalCache, RetrievalError,
};
use emorag_core::trainer::{ccc_metric, lr_at_epoch, mae_metric, RunRecord, TrainConfig};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond { Ok(()) } else { Err(msg()) }
}

fn within(elapsed: Duration, budget_secs: u64) -> Result<(), String> {
    ensure(elapsed.as_secs_f64() < budget_secs as f64, || {
        format!("took {:.1}s, budget {budget_secs}s", elapsed.as_secs_f64())
    })
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

/// 1000 seeded pairs with lengths 2..=64, shared by criteria 1 and 2.
fn random_pairs() -> Vec<(Vec<f64>, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    (0..1000)
        .map(|i| {
            let n = rng.random_range(2..=64);
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..30.0)).collect();
            let y: Vec<f64> = match i % 4 {
                // correlated, anti-correlated and constant partners as well as noise
                0 => x.iter().map(|v| 0.8 * v + rng.random_range(-2.0..2.0)).collect(),
                1 => x.iter().map(|v| 12.0 - v).collect(),
                2 if i % 40 == 2 => vec![5.0; n],
                _ => (0..n).map(|_| rng.random_range(0.0..24.0)).collect(),
            };
            (x, y)
        })
        .collect()
}

/// Concordance straight from its definition with 1/N moments.
fn ccc_oracle(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / n;
    let (mx, my) = (mean(x), mean(y));
    let var_x = x.iter().map(|a| (a - mx) * (a - mx)).sum::<f64>() / n;
    let var_y = y.iter().map(|b| (b - my) * (b - my)).sum::<f64>() / n;
    let cov = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / n;
    let den = var_x + var_y + (mx - my) * (mx - my);
    if den == 0.0 { 0.0 } else { 2.0 * cov / den }
}

fn mae_oracle(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b).abs()).sum::<f64>() / x.len() as f64
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let pairs = random_pairs();
    let (mut worst_ccc, mut worst_mae) = (0.0f64, 0.0f64);
    for (x, y) in &pairs {
        worst_ccc = worst_ccc.max((ok(ccc_metric(x, y))? - ccc_oracle(x, y)).abs());
        worst_mae = worst_mae.max((ok(mae_metric(x, y))? - mae_oracle(x, y)).abs());
    }
    ensure(worst_ccc <= 1e-12, || format!("ccc deviates by {worst_ccc:e}"))?;
    ensure(worst_mae <= 1e-12, || format!("mae deviates by {worst_mae:e}"))?;

    let y = [2.0, 7.0, 11.0, 19.0, 4.0];
    let anchors = [
        ("identical", ok(ccc_metric(&y, &y))?, 1.0),
        ("zero covariance", ok(ccc_metric(&[1.0, -1.0, 1.0, -1.0], &[1.0, 1.0, -1.0, -1.0]))?, 0.0),
        ("reversal", ok(ccc_metric(&[1.0, 2.0, 3.0, 4.0], &[4.0, 3.0, 2.0, 1.0]))?, -1.0),
        ("mae identical", ok(mae_metric(&y, &y))?, 0.0),
        ("mae constant offset", ok(mae_metric(&[1.0, 2.0, 3.0], &[3.0, 4.0, 5.0]))?, 2.0),
        ("mae mixed", ok(mae_metric(&[0.0, 10.0, 4.0, 6.0], &[1.0, 7.0, 4.0, 8.0]))?, 1.5),
    ];
    for (name, got, want) in anchors {
        ensure(got == want, || format!("{name}: {got} != {want}"))?;
    }
    within(start.elapsed(), 5)?;
    Ok(format!(
        "1000 pairs, max deviation ccc {worst_ccc:.1e} mae {worst_mae:.1e}, 6 anchors exact, {:.2}s",
        start.elapsed().as_secs_f64()
    ))
}

fn criterion_2() -> Outcome {
    let mut worst = 0.0f64;
    for (x, y) in random_pairs() {
        let mut tape = Tape::new();
        let p = ok(tape.leaf(ok(Tensor::matrix(x.len(), 1, x.clone()))?, true))?;
        let loss = ok(ccc_loss(&mut tape, p, &y))?;
        let l = ok(tape.item(loss))?;
        worst = worst.max((l - (1.0 - ok(ccc_metric(&x, &y))?)).abs());
    }
    ensure(worst <= 1e-12, || format!("loss and 1 - metric differ by {worst:e}"))?;
    Ok(format!("1000 pairs, max |loss - (1 - ccc)| {worst:.1e}"))
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let cfg = PipelineConfig::default();
    ensure(cfg.gradcheck.step == 1e-5, || format!("step is {}", cfg.gradcheck.step))?;
    let world = common::mock_world(cfg.seed, cfg.fixture.n_samples, cfg.fixture.n_corpus);
    let rows = ok(gradcheck_batch(&world.dataset, &world.prompts, &cfg))?;
    let elapsed = start.elapsed();
    let summary = rows
        .iter()
        .map(|(arm, r)| {
            let at = r.worst.as_ref().map(|(n, k)| format!(" at {n}[{k}]")).unwrap_or_default();
            format!("{arm} {:.2e}{at}", r.max_relative_error)
        })
        .collect::<Vec<_>>()
        .join(", ");
    ensure(rows.len() == 2 && rows.iter().all(|(_, r)| r.checked > 0), || "expected two checked arms".into())?;
    ensure(rows.iter().all(|(_, r)| r.max_relative_error < 1e-4), || {
        format!("max relative error not below 1e-4: {summary}")
    })?;
    within(elapsed, 60)?;
    Ok(format!("{summary}, {:.1}s", elapsed.as_secs_f64()))
}

/// Half real transcripts, half random bags of fixture vocabulary.
fn random_queries(world: &common::World, n: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fx = &world.fixture;
    let vocab: Vec<String> = fx
        .corpus
        .iter()
        .map(|r| r.text.as_str())
        .chain(fx.samples.iter().map(|s| s.text.as_str()))
        .flat_map(emorag_core::text::tokenize)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let p = HashingProvider::default();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let q = if out.len() % 2 == 0 {
            fx.samples.choose(&mut rng).expect("fixture has samples").text.clone()
        } else {
            let len = rng.random_range(1..8);
            (0..len).map(|_| vocab.choose(&mut rng).expect("vocab").as_str()).collect::<Vec<_>>().join(" ")
        };
        // signed hashes can cancel to the zero vector
        if embed_text(&q, &p).is_ok() {
            out.push(q);
        }
    }
    out
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let world = common::mock_world(7, 200, 200);
    let corpus = &world.fixture.corpus;
    ensure(corpus.len() == 200, || format!("corpus has {} records", corpus.len()))?;
    let p = HashingProvider::default();
    let flat = ok(build_index(corpus, &p, Backend::Flat))?;
    let ivf_all = ok(build_index(corpus, &p, Backend::Ivf { n_lists: 8, n_probe: 8 }))?;
    let ivf_two = ok(build_index(corpus, &p, Backend::Ivf { n_lists: 8, n_probe: 2 }))?;
    for q in random_queries(&world, 100, 1) {
        let qv = ok(embed_text(&q, &p))?;
        for k in [1, 5, 200] {
            ensure(ok(flat.top_k(&qv, k))? == ok(brute_force_top_k(corpus, &p, &q, k))?, || {
                format!("flat differs from brute force at k={k} for `{q}`")
            })?;
        }
        ensure(ok(ivf_all.top_k(&qv, 5))? == ok(flat.top_k(&qv, 5))?, || {
            format!("ivf(8, 8) differs from flat for `{q}`")
        })?;
    }
    // recall is measured on the retrieval workload: transcripts
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut found, mut total) = (0, 0);
    for _ in 0..100 {
        let s = world.fixture.samples.choose(&mut rng).expect("fixture has samples");
        let qv = ok(embed_text(&s.text, &p))?;
        let truth: BTreeSet<String> = ok(flat.top_k(&qv, 5))?.into_iter().map(|h| h.record_id).collect();
        let got: BTreeSet<String> = ok(ivf_two.top_k(&qv, 5))?.into_iter().map(|h| h.record_id).collect();
        found += truth.intersection(&got).count();
        total += truth.len();
    }
    let recall = found as f64 / total as f64;
    ensure(recall >= 0.9, || format!("ivf(8, 2) recall@5 {recall:.3}"))?;
    within(start.elapsed(), 10)?;
    Ok(format!(
        "flat == brute force at k 1/5/200, ivf(8, 8) == flat, ivf(8, 2) recall@5 {recall:.3}, {:.2}s",
        start.elapsed().as_secs_f64()
    ))
}

fn criterion_5() -> Outcome {
    let tc = TrainConfig::default();
    let expected = [(0, (6e-4, 6e-5)), (100, (6e-5, 6e-6)), (200, (6e-6, 6e-7)), (300, (6e-7, 6e-8))];
    for (epoch, want) in expected {
        let got = ok(lr_at_epoch(epoch, &tc))?;
        ensure(got == want, || format!("epoch {epoch}: {got:?} != {want:?}"))?;
    }
    Ok("epochs 0/100/200/300 exact".into())
}

fn stage(stage: Stage, cfg: &PipelineConfig, ablation: bool) -> Result<String, String> {
    let mut out = Vec::new();
    let opts = StageOptions { force: false, ablation };
    run_stage(stage, cfg, opts, &mut out).map_err(|e| format!("{stage:?}: {e}"))?;
    Ok(String::from_utf8_lossy(&out).into_owned())
}

fn mock_pipeline(dir: &Path, epochs: usize) -> PipelineConfig {
    let base = PipelineConfig::default();
    PipelineConfig {
        base_dir: dir.to_path_buf(),
        train: TrainConfig {
            epochs,
            seed: 7,
            ..base.train.clone()
        },
        ..base
    }
}

fn criterion_6() -> Outcome {
    let start = Instant::now();
    let dir = ok(tempfile::tempdir())?;
    let cfg = mock_pipeline(dir.path(), 100);
    for s in [Stage::Fixture, Stage::Index, Stage::Retrieve, Stage::Prompt] {
        stage(s, &cfg, false)?;
    }
    let dataset = ok(load_depression_dataset(&cfg.resolve(&cfg.paths.dataset)))?;
    let n_train = dataset.split(Split::Train).count();
    ensure(n_train >= 120, || format!("only {n_train} train samples"))?;
    let rows = ok(run_ablation(&cfg, StageOptions::default(), &mut std::io::sink()))?;
    let with = rows.iter().find(|r| r.use_emotion_prompt).ok_or("no prompt arm")?;
    let without = rows.iter().find(|r| !r.use_emotion_prompt).ok_or("no ablated arm")?;
    let gap = with.validation.ccc - without.validation.ccc;
    let detail = format!(
        "validation CCC {:.4} with prompt vs {:.4} without (gap {gap:+.4}; test MAE {:.3} vs {:.3})",
        with.validation.ccc, without.validation.ccc, with.test.mae, without.test.mae
    );
    ensure(gap > 0.05, || detail.clone())?;
    within(start.elapsed(), 15 * 60)?;
    Ok(format!("{detail}, {:.0}s", start.elapsed().as_secs_f64()))
}

fn run_full(dir: &Path) -> Result<(PathBuf, RunRecord), String> {
    let cfg = mock_pipeline(dir, 20);
    for s in [Stage::Fixture, Stage::Index, Stage::Retrieve, Stage::Prompt, Stage::Train, Stage::Eval] {
        stage(s, &cfg, false)?;
    }
    let run_dir = cfg.resolve(&cfg.paths.run_dir);
    let record = ok(RunRecord::load(&run_dir.join(RUN_FILE)))?;
    Ok((run_dir, record))
}

fn criterion_7() -> Outcome {
    let (a, b) = (ok(tempfile::tempdir())?, ok(tempfile::tempdir())?);
    let (dir_a, rec_a) = run_full(a.path())?;
    let (dir_b, rec_b) = run_full(b.path())?;
    let mut compared = 0;
    for split in Split::ALL {
        let name = format!("predictions_{}.csv", split.as_str());
        let (pa, pb) = (dir_a.join(&name), dir_b.join(&name));
        if !pa.exists() && !pb.exists() {
            continue;
        }
        ensure(ok(fs::read(&pa))? == ok(fs::read(&pb))?, || format!("{name} differs"))?;
        compared += 1;
    }
    ensure(compared >= 2, || format!("only {compared} prediction files written"))?;
    ensure(rec_a.metrics == rec_b.metrics, || "run.json metrics differ".into())?;
    ensure(rec_a.history == rec_b.history, || "run.json history differs".into())?;
    ensure(rec_a.best_epoch == rec_b.best_epoch, || "run.json best epoch differs".into())?;
    ensure(rec_a.checkpoint_fingerprint == rec_b.checkpoint_fingerprint, || "checkpoints differ".into())?;
    Ok(format!("{compared} prediction CSVs and run.json metrics bitwise identical"))
}

/// Two decimals with negative zero printed unsigned.
fn two_decimals(x: f64) -> String {
    let s = format!("{x:.2}");
    if s == "-0.00" { "0.00".into() } else { s }
}

fn criterion_8() -> Outcome {
    let golden_path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden/request_seed7.txt");
    let golden = ok(fs::read_to_string(&golden_path))?;
    let world = common::mock_world(7, 200, 200);
    let first = &world.fixture.samples[0];
    let hits = world.cache.hits(&first.id).ok_or("first sample has no hits")?;
    for _ in 0..2 {
        let rendered = ok(build_request(&first.text, hits, &world.fixture.corpus))?.render();
        ensure(rendered == golden, || "rendered request differs from golden file".into())?;
    }

    let dir = ok(tempfile::tempdir())?;
    let cfg = mock_pipeline(dir.path(), 1);
    for s in [Stage::Fixture, Stage::Index, Stage::Retrieve, Stage::Prompt] {
        stage(s, &cfg, false)?;
    }
    let dataset = ok(load_depression_dataset(&cfg.resolve(&cfg.paths.dataset)))?;
    let corpus = ok(load_sentiment_corpus(&cfg.resolve(&cfg.paths.corpus)))?;
    let index = ok(EmbeddingIndex::load(&cfg.resolve(&cfg.paths.index)))?;
    let cache = ok(RetrievalCache::load(&cfg.resolve(&cfg.paths.cache), &index))?;
    let entries = ok(load_prompts(&cfg.resolve(&cfg.paths.prompts)))?;
    let requests = ok(build_requests(&dataset, &cache, &corpus))?;
    let sentiment: BTreeMap<&str, f64> = corpus.iter().map(|r| (r.id.as_str(), r.sentiment)).collect();
    ensure(entries.len() == dataset.samples.len(), || {
        format!("{} prompts for {} samples", entries.len(), dataset.samples.len())
    })?;
    for e in &entries {
        let req = requests.get(&e.sample_id).ok_or_else(|| format!("no request for {}", e.sample_id))?;
        ensure(req.compute_hash() == e.request_hash, || format!("{}: request hash does not re-derive", e.sample_id))?;
        ensure(req.retrieved_ids() == e.retrieved_ids, || format!("{}: retrieved ids differ", e.sample_id))?;
        let scores: Vec<f64> = e
            .retrieved_ids
            .iter()
            .map(|id| sentiment.get(id.as_str()).copied().ok_or_else(|| format!("unknown record {id}")))
            .collect::<Result<_, _>>()?;
        let mean = two_decimals(scores.iter().sum::<f64>() / scores.len() as f64);
        ensure(e.text.contains(&mean), || format!("{}: mean sentiment {mean} missing", e.sample_id))?;
    }
    Ok(format!("golden request stable, {} prompt hashes re-derived with mean sentiment", entries.len()))
}

fn criterion_9() -> Outcome {
    let dir = ok(tempfile::tempdir())?;
    let root = dir.path().join("fixture");
    let spec = FixtureSpec {
        seed: 7,
        n_samples: 200,
        n_corpus: 200,
        audio_dim: 4,
        video_dim: 4,
    };
    let generated = ok(generate_fixture(&root, spec))?;
    let dataset = ok(load_depression_dataset(&root))?;
    ensure(dataset.samples == generated.samples, || "loaded samples differ from generated".into())?;
    let mut ids = BTreeSet::new();
    for s in &dataset.samples {
        let features_ok = [(&s.audio, spec.audio_dim), (&s.video, spec.video_dim)]
            .iter()
            .all(|(m, cols)| m.cols() == *cols && m.rows() >= 1 && m.data().iter().all(|v| v.is_finite()));
        ensure(
            s.severity <= 24 && !s.text.trim().is_empty() && features_ok && ids.insert(s.id.clone()),
            || format!("sample {} violates an invariant", s.id),
        )?;
    }
    let corpus = ok(load_sentiment_corpus(&root.join(CORPUS_FILE)))?;
    ensure(corpus == generated.corpus, || "loaded corpus differs from generated".into())?;
    ensure(corpus.iter().all(|r| (-3.0..=3.0).contains(&r.sentiment)), || "sentiment out of range".into())?;

    let p = HashingProvider::default();
    for backend in [Backend::Flat, Backend::Ivf { n_lists: 8, n_probe: 2 }] {
        let index = ok(build_index(&corpus, &p, backend))?;
        let path = dir.path().join("index.emix");
        ok(index.save(&path))?;
        let back = ok(EmbeddingIndex::load(&path))?;
        ensure(back == index && back.fingerprint() == index.fingerprint(), || {
            format!("{backend:?} index does not round-trip")
        })?;
    }
    let index = ok(build_index(&corpus, &p, Backend::Flat))?;
    let cache = ok(precompute_cache(&dataset.samples, &index, &p, 5))?;
    let cache_path = dir.path().join("cache.json");
    ok(cache.save(&cache_path))?;
    let back = ok(RetrievalCache::load(&cache_path, &index))?;
    ensure(back == cache && back.index_fingerprint == index.fingerprint(), || "cache does not round-trip".into())?;

    let json = cache.to_json();
    let corruptions = [
        json[..json.len() / 2].to_owned(),
        json.replacen("\"rank\": 2", "\"rank\": 3", 1),
        json.replacen(index.fingerprint(), &"0".repeat(64), 1),
    ];
    for (i, bad) in corruptions.iter().enumerate() {
        ensure(bad != &json, || format!("corruption {i} changed nothing"))?;
        ok(fs::write(&cache_path, bad))?;
        let got = RetrievalCache::load(&cache_path, &index);
        ensure(matches!(got, Err(RetrievalError::StaleCache(_))), || {
            format!("corruption {i} gave {got:?} instead of a stale-cache error")
        })?;
    }
    Ok(format!(
        "{} samples valid, index and cache round-trip, {} corruptions rejected",
        dataset.samples.len(),
        corruptions.len()
    ))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("metric oracles", criterion_1),
        ("loss/metric duality", criterion_2),
        ("gradient integrity", criterion_3),
        ("retrieval exactness", criterion_4),
        ("schedule exactness", criterion_5),
        ("prompt ablation", criterion_6),
        ("determinism", criterion_7),
        ("prompt contract", criterion_8),
        ("data round-trips", criterion_9),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|panic| {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("criterion {} {name}: PASS ({detail})", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {} {name}: FAIL ({detail})", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE }
}
