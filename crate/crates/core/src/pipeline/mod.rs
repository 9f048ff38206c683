//! Config-driven pipeline stages (fixture, index, retrieve, prompt, train,
//! eval, gradcheck) shared by the command-line tool and the test suites.
//!
//! Every stage writes its artifact plus a fingerprint sidecar; downstream
//! stages refuse inputs whose fingerprints no longer match.

mod config;
mod meta;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;

pub use config::{
    FixtureSizes, GradcheckConfig, LlmConfig, LlmMode, PathsConfig, PipelineConfig, RetrievalConfig,
};
pub use meta::{content_hash, meta_path, read_meta, require_fresh, ArtifactMeta, InputRef};

use crate::corpus::{
    generate_fixture, load_depression_dataset, load_sentiment_corpus, write_sentiment_corpus, CorpusError, Dataset,
    SentimentRecord, Split, CORPUS_FILE, TRUTH_FILE,
};
use crate::fusion::{ccc_loss, forward_on_tape, init_params, Checkpoint, FusionError, ModelConfig, ModelInput};
use crate::numkit::{grad_check, GradCheckReport, NumError, ParamStore, Tape};
use crate::promptgen::{
    build_request, generate_batch, load_prompts, persist_prompts, verify_prompts, LiveClient, LlmClient, MockClient,
    PromptError, PromptRequest, PromptStoreEntry,
};
use crate::retrieval::{build_index, precompute_cache, EmbeddingIndex, RetrievalCache, RetrievalError};
use crate::trainer::{
    evaluate, evaluate_inputs, prepare_split, train_inputs, PromptMap, RunRecord, SplitMetrics, TrainError,
    SELECTION_RULE,
};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const RUN_FILE: &str = "run.json";
pub const ABLATION_FILE: &str = "ablation.json";

/// Failures, each mapped to a process exit code.
#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("{0}")]
    Validation(String),
    #[error("stale artifact: {0}")]
    Stale(String),
    #[error("{0}")]
    Endpoint(String),
    #[error("{0}")]
    Failed(String),
}

impl PipelineError {
    /// 2 input/validation, 3 stale artifact, 4 endpoint, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Validation(_) => 2,
            PipelineError::Stale(_) => 3,
            PipelineError::Endpoint(_) => 4,
            PipelineError::Failed(_) => 1,
        }
    }
}

impl From<CorpusError> for PipelineError {
    fn from(e: CorpusError) -> Self {
        PipelineError::Validation(e.to_string())
    }
}

impl From<RetrievalError> for PipelineError {
    fn from(e: RetrievalError) -> Self {
        match e {
            RetrievalError::StaleCache(_) => PipelineError::Stale(format!("{e}; rebuild upstream (`retrieve`)")),
            _ => PipelineError::Validation(e.to_string()),
        }
    }
}

impl From<PromptError> for PipelineError {
    fn from(e: PromptError) -> Self {
        match e {
            PromptError::Endpoint(_) | PromptError::Protocol(_) => PipelineError::Endpoint(e.to_string()),
            PromptError::Provenance(_) => PipelineError::Stale(e.to_string()),
            _ => PipelineError::Validation(e.to_string()),
        }
    }
}

impl From<TrainError> for PipelineError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Provenance(_) => PipelineError::Stale(format!("{e}; rebuild upstream (`prompt`)")),
            TrainError::Diverged { .. } => PipelineError::Failed(e.to_string()),
            _ => PipelineError::Validation(e.to_string()),
        }
    }
}

impl From<FusionError> for PipelineError {
    fn from(e: FusionError) -> Self {
        PipelineError::Validation(e.to_string())
    }
}

impl From<NumError> for PipelineError {
    fn from(e: NumError) -> Self {
        PipelineError::Failed(e.to_string())
    }
}

impl From<std::io::Error> for PipelineError {
    fn from(e: std::io::Error) -> Self {
        PipelineError::Failed(e.to_string())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Fixture,
    Index,
    Retrieve,
    Prompt,
    Train,
    Eval,
    Gradcheck,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct StageOptions {
    /// Rebuild even when up to date; for `fixture`, replace an existing tree.
    pub force: bool,
    /// `eval` trains and compares both prompt arms.
    pub ablation: bool,
}

pub fn run_stage(
    stage: Stage,
    cfg: &PipelineConfig,
    opts: StageOptions,
    out: &mut dyn Write,
) -> Result<(), PipelineError> {
    match stage {
        Stage::Fixture => stage_fixture(cfg, opts, out).map(|_| ()),
        Stage::Index => stage_index(cfg, opts, out),
        Stage::Retrieve => stage_retrieve(cfg, opts, out),
        Stage::Prompt => stage_prompt(cfg, opts, out),
        Stage::Train => stage_train(cfg, opts, out).map(|_| ()),
        Stage::Eval if opts.ablation => run_ablation(cfg, opts, out).map(|_| ()),
        Stage::Eval => stage_eval(cfg, out),
        Stage::Gradcheck => stage_gradcheck(cfg, out).map(|_| ()),
    }
}

fn ensure_parent(path: &Path) -> Result<(), PipelineError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| PipelineError::Failed(format!("{}: {e}", parent.display())))?;
    }
    Ok(())
}

fn is_empty_dir(dir: &Path) -> Result<bool, PipelineError> {
    Ok(!dir.exists() || fs::read_dir(dir).map_err(|e| PipelineError::Validation(format!("{}: {e}", dir.display())))?.next().is_none())
}

/// Writes the fixture tree and returns its content hash. An existing
/// non-empty target is replaced only with `force`, and only if it is a
/// generated fixture.
pub fn stage_fixture(cfg: &PipelineConfig, opts: StageOptions, out: &mut dyn Write) -> Result<String, PipelineError> {
    let dir = cfg.resolve(&cfg.paths.dataset);
    if !is_empty_dir(&dir)? {
        if !opts.force {
            return Err(PipelineError::Validation(format!(
                "{} is not empty; pass --force to regenerate",
                dir.display()
            )));
        }
        if !dir.join(TRUTH_FILE).exists() {
            return Err(PipelineError::Validation(format!(
                "{} is not a generated fixture; refusing to replace it",
                dir.display()
            )));
        }
        fs::remove_dir_all(&dir)?;
    }
    let spec = cfg.fixture_spec();
    let fx = generate_fixture(&dir, spec)?;
    let corpus = cfg.resolve(&cfg.paths.corpus);
    if corpus != dir.join(CORPUS_FILE) {
        ensure_parent(&corpus)?;
        write_sentiment_corpus(&corpus, &fx.corpus)?;
    }
    let hash = content_hash(&dir)?;
    meta::record(&dir, "fixture", BTreeMap::new(), json!({ "spec": spec }))?;
    let count = |s| fx.manifest.split_counts.get(&s).copied().unwrap_or(0);
    writeln!(
        out,
        "fixture: {} samples (train {}, validation {}, test {}), {} corpus records, feature dims {:?}",
        fx.samples.len(),
        count(Split::Train),
        count(Split::Validation),
        count(Split::Test),
        fx.corpus.len(),
        fx.manifest.feature_dims
    )?;
    writeln!(out, "tree sha256 {hash}")?;
    Ok(hash)
}

fn index_params(cfg: &PipelineConfig) -> serde_json::Value {
    json!({ "backend": cfg.retrieval.backend, "provider": cfg.retrieval.provider })
}

fn cache_params(cfg: &PipelineConfig) -> serde_json::Value {
    json!({ "k": cfg.retrieval.k })
}

fn prompt_params(cfg: &PipelineConfig) -> serde_json::Value {
    match cfg.llm.mode {
        LlmMode::Mock => json!({ "mode": "mock" }),
        LlmMode::Live => json!({ "mode": "live", "model": cfg.llm.model }),
    }
}

/// Fresh upstream artifact that was also built with the current settings.
fn require_current(
    path: &Path,
    stage: &str,
    params: &serde_json::Value,
) -> Result<ArtifactMeta, PipelineError> {
    let meta = require_fresh(path, stage)?;
    if meta.params != *params {
        return Err(PipelineError::Stale(format!(
            "{} was built with different settings ({} vs {}); rebuild upstream (`{stage}`)",
            path.display(),
            meta.params,
            params
        )));
    }
    Ok(meta)
}

pub fn stage_index(cfg: &PipelineConfig, opts: StageOptions, out: &mut dyn Write) -> Result<(), PipelineError> {
    let corpus_path = cfg.resolve(&cfg.paths.corpus);
    let inputs = BTreeMap::from([("corpus".to_owned(), meta::input_ref(&corpus_path)?)]);
    let params = index_params(cfg);
    let path = cfg.resolve(&cfg.paths.index);
    if !opts.force && meta::up_to_date(&path, &inputs, &params) {
        writeln!(out, "index: up to date ({})", path.display())?;
        return Ok(());
    }
    let records = load_sentiment_corpus(&corpus_path)?;
    let provider = cfg.retrieval.provider.build();
    let index = build_index(&records, provider.as_ref(), cfg.retrieval.backend)?;
    ensure_parent(&path)?;
    index.save(&path)?;
    meta::record(&path, "index", inputs, params)?;
    writeln!(
        out,
        "index: {} vectors, dim {}, backend {:?}, sha256 {}",
        index.len(),
        index.dim(),
        index.backend(),
        index.fingerprint()
    )?;
    Ok(())
}

pub fn stage_retrieve(cfg: &PipelineConfig, opts: StageOptions, out: &mut dyn Write) -> Result<(), PipelineError> {
    let index_path = cfg.resolve(&cfg.paths.index);
    require_current(&index_path, "index", &index_params(cfg))?;
    let dataset_dir = cfg.resolve(&cfg.paths.dataset);
    let inputs = BTreeMap::from([
        ("dataset".to_owned(), meta::input_ref(&dataset_dir)?),
        ("index".to_owned(), meta::input_ref(&index_path)?),
    ]);
    let params = cache_params(cfg);
    let path = cfg.resolve(&cfg.paths.cache);
    if !opts.force && meta::up_to_date(&path, &inputs, &params) {
        writeln!(out, "retrieve: up to date ({})", path.display())?;
        return Ok(());
    }
    let dataset = load_depression_dataset(&dataset_dir)?;
    let index = EmbeddingIndex::load(&index_path)?;
    let provider = cfg.retrieval.provider.build();
    let cache = precompute_cache(&dataset.samples, &index, provider.as_ref(), cfg.retrieval.k)?;
    ensure_parent(&path)?;
    cache.save(&path)?;
    meta::record(&path, "retrieve", inputs, params)?;
    writeln!(out, "retrieve: {} samples, top {} each", cache.entries.len(), cfg.retrieval.k)?;
    Ok(())
}

/// One request per sample, keyed by sample id.
pub fn build_requests(
    dataset: &Dataset,
    cache: &RetrievalCache,
    corpus: &[SentimentRecord],
) -> Result<BTreeMap<String, PromptRequest>, PipelineError> {
    dataset
        .samples
        .iter()
        .map(|s| {
            let hits = cache.hits(&s.id).ok_or_else(|| {
                PipelineError::Stale(format!("cache has no entry for sample `{}`; rebuild upstream (`retrieve`)", s.id))
            })?;
            Ok((s.id.clone(), build_request(&s.text, hits, corpus)?))
        })
        .collect()
}

/// Prompts for every request from `client`, in request order.
pub fn generate_prompts(
    requests: &BTreeMap<String, PromptRequest>,
    client: &dyn LlmClient,
) -> Result<Vec<PromptStoreEntry>, PipelineError> {
    let reqs: Vec<PromptRequest> = requests.values().cloned().collect();
    let prompts = generate_batch(&reqs, client)?;
    Ok(requests.keys().zip(prompts).map(|(id, p)| PromptStoreEntry::new(id.clone(), p)).collect())
}

struct Upstream {
    dataset: Dataset,
    corpus: Vec<SentimentRecord>,
    cache: RetrievalCache,
}

fn load_upstream(cfg: &PipelineConfig) -> Result<Upstream, PipelineError> {
    let cache_path = cfg.resolve(&cfg.paths.cache);
    require_current(&cache_path, "retrieve", &cache_params(cfg))?;
    let index = EmbeddingIndex::load(&cfg.resolve(&cfg.paths.index))?;
    Ok(Upstream {
        cache: RetrievalCache::load(&cache_path, &index)?,
        dataset: load_depression_dataset(&cfg.resolve(&cfg.paths.dataset))?,
        corpus: load_sentiment_corpus(&cfg.resolve(&cfg.paths.corpus))?,
    })
}

pub fn stage_prompt(cfg: &PipelineConfig, opts: StageOptions, out: &mut dyn Write) -> Result<(), PipelineError> {
    let up = load_upstream(cfg)?;
    let inputs = BTreeMap::from([
        ("cache".to_owned(), meta::input_ref(&cfg.resolve(&cfg.paths.cache))?),
        ("corpus".to_owned(), meta::input_ref(&cfg.resolve(&cfg.paths.corpus))?),
        ("dataset".to_owned(), meta::input_ref(&cfg.resolve(&cfg.paths.dataset))?),
    ]);
    let params = prompt_params(cfg);
    let path = cfg.resolve(&cfg.paths.prompts);
    if !opts.force && meta::up_to_date(&path, &inputs, &params) {
        writeln!(out, "prompt: up to date ({})", path.display())?;
        return Ok(());
    }
    let requests = build_requests(&up.dataset, &up.cache, &up.corpus)?;
    let client: Box<dyn LlmClient> = match cfg.llm.mode {
        LlmMode::Mock => Box::new(MockClient),
        LlmMode::Live => Box::new(LiveClient::new(cfg.llm.live_client_config())?),
    };
    let entries = generate_prompts(&requests, client.as_ref())?;
    ensure_parent(&path)?;
    persist_prompts(&entries, &path)?;
    meta::record(&path, "prompt", inputs, params)?;
    writeln!(out, "prompt: {} prompts ({})", entries.len(), client.source().as_string())?;
    Ok(())
}

/// Stored prompts, checked against requests rebuilt from the current cache
/// and corpus.
pub fn load_verified_prompts(cfg: &PipelineConfig) -> Result<PromptMap, PipelineError> {
    let path = cfg.resolve(&cfg.paths.prompts);
    require_fresh(&path, "prompt")?;
    let entries = load_prompts(&path)?;
    let up = load_upstream(cfg)?;
    let requests = build_requests(&up.dataset, &up.cache, &up.corpus)?;
    verify_prompts(&entries, &requests).map_err(|e| {
        PipelineError::Stale(format!("{}: {e}; rebuild upstream (`prompt`)", path.display()))
    })?;
    Ok(entries.into_iter().map(|e| (e.sample_id.clone(), e.prompt())).collect())
}

pub fn stage_train(cfg: &PipelineConfig, opts: StageOptions, out: &mut dyn Write) -> Result<RunRecord, PipelineError> {
    train_into(cfg, &cfg.model, &cfg.resolve(&cfg.paths.run_dir), opts.force, out)
}

/// Train one arm into `run_dir`: checkpoint, `run.json`, and train and
/// validation metrics.
fn train_into(
    cfg: &PipelineConfig,
    model: &ModelConfig,
    run_dir: &Path,
    force: bool,
    out: &mut dyn Write,
) -> Result<RunRecord, PipelineError> {
    let dataset_dir = cfg.resolve(&cfg.paths.dataset);
    let mut inputs = BTreeMap::from([("dataset".to_owned(), meta::input_ref(&dataset_dir)?)]);
    if model.use_emotion_prompt {
        let prompts = cfg.resolve(&cfg.paths.prompts);
        require_current(&prompts, "prompt", &prompt_params(cfg))?;
        inputs.insert("prompts".to_owned(), meta::input_ref(&prompts)?);
    }
    let params = json!({ "seed": cfg.seed, "train": cfg.train, "model": model });
    let ckpt_path = run_dir.join(CHECKPOINT_FILE);
    let run_path = run_dir.join(RUN_FILE);
    if !force && run_path.exists() && meta::up_to_date(&ckpt_path, &inputs, &params) {
        writeln!(out, "train: up to date ({})", run_dir.display())?;
        return Ok(RunRecord::load(&run_path)?);
    }
    let dataset = load_depression_dataset(&dataset_dir)?;
    let prompts = if model.use_emotion_prompt { load_verified_prompts(cfg)? } else { PromptMap::new() };
    let train = prepare_split(&dataset, Split::Train, &prompts, model)?;
    let val = prepare_split(&dataset, Split::Validation, &prompts, model)?;

    let start = Instant::now();
    let epochs = cfg.train.epochs;
    let outcome = train_inputs(&train, &val, init_params(model, cfg.seed)?, &cfg.train, model, |e| {
        if (e.epoch + 1) % 50 == 0 || e.epoch + 1 == epochs {
            let _ = writeln!(
                out,
                "  epoch {:>4}/{epochs} loss {:.4} validation CCC {:.4} MAE {:.3}",
                e.epoch + 1,
                e.train_loss,
                e.val_ccc,
                e.val_mae
            );
        }
    })?;
    let wall_clock_secs = start.elapsed().as_secs_f64();

    fs::create_dir_all(run_dir)?;
    let ckpt = Checkpoint {
        config: model.clone(),
        params: outcome.params,
    };
    ckpt.save(&ckpt_path)?;
    let mut metrics = BTreeMap::new();
    for (split, xs) in [(Split::Train, &train), (Split::Validation, &val)] {
        let report = evaluate_inputs(&ckpt.params, model, split, xs)?;
        report.write(run_dir)?;
        metrics.insert(split, SplitMetrics::from(&report));
    }
    let record = RunRecord {
        train_config: cfg.train.clone(),
        model_config: model.clone(),
        init_seed: cfg.seed,
        selection: SELECTION_RULE.to_owned(),
        best_epoch: outcome.best_epoch,
        optimizer_steps: outcome.optimizer_steps,
        history: outcome.history,
        metrics,
        checkpoint_fingerprint: ckpt.fingerprint(),
        inputs: inputs.iter().map(|(k, v)| (k.clone(), v.sha256.clone())).collect(),
        wall_clock_secs,
    };
    record.save(&run_path)?;
    meta::record(&ckpt_path, "train", inputs, params)?;
    let v = &record.metrics[&Split::Validation];
    writeln!(
        out,
        "train: best epoch index {} of {epochs}, validation CCC {:.4} MAE {:.4} ({:.1}s)",
        record.best_epoch,
        v.ccc,
        v.mae,
        wall_clock_secs
    )?;
    Ok(record)
}

fn load_checkpoint(cfg: &PipelineConfig, run_dir: &Path) -> Result<(Checkpoint, PromptMap), PipelineError> {
    let path = run_dir.join(CHECKPOINT_FILE);
    require_fresh(&path, "train")?;
    let ckpt = Checkpoint::load(&path)?;
    let prompts = if ckpt.config.use_emotion_prompt { load_verified_prompts(cfg)? } else { PromptMap::new() };
    Ok((ckpt, prompts))
}

/// Evaluate the trained checkpoint on the validation and test splits.
pub fn stage_eval(cfg: &PipelineConfig, out: &mut dyn Write) -> Result<(), PipelineError> {
    let run_dir = cfg.resolve(&cfg.paths.run_dir);
    let (ckpt, prompts) = load_checkpoint(cfg, &run_dir)?;
    let dataset = load_depression_dataset(&cfg.resolve(&cfg.paths.dataset))?;
    for split in [Split::Validation, Split::Test] {
        let report = evaluate(&ckpt.params, &ckpt.config, &dataset, split, &prompts)?;
        report.write(&run_dir)?;
        writeln!(out, "{}: n={} CCC {:.4} MAE {:.4}", split.as_str(), report.n, report.ccc, report.mae)?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub arm: String,
    pub use_emotion_prompt: bool,
    pub best_epoch: usize,
    pub validation: SplitMetrics,
    pub test: SplitMetrics,
}

/// Train and evaluate both prompt arms under `<run_dir>/ablation`, print
/// the two-row comparison and write it to `ablation.json`.
pub fn run_ablation(
    cfg: &PipelineConfig,
    opts: StageOptions,
    out: &mut dyn Write,
) -> Result<Vec<AblationRow>, PipelineError> {
    let base = cfg.resolve(&cfg.paths.run_dir).join("ablation");
    let dataset = load_depression_dataset(&cfg.resolve(&cfg.paths.dataset))?;
    let mut rows = Vec::new();
    for (arm, dir, use_emotion_prompt) in
        [("with prompt", "with_prompt", true), ("without prompt", "without_prompt", false)]
    {
        writeln!(out, "{arm}:")?;
        let model = ModelConfig {
            use_emotion_prompt,
            ..cfg.model.clone()
        };
        let run_dir = base.join(dir);
        let record = train_into(cfg, &model, &run_dir, opts.force, out)?;
        let (ckpt, prompts) = load_checkpoint(cfg, &run_dir)?;
        let test = evaluate(&ckpt.params, &ckpt.config, &dataset, Split::Test, &prompts)?;
        test.write(&run_dir)?;
        rows.push(AblationRow {
            arm: arm.to_owned(),
            use_emotion_prompt,
            best_epoch: record.best_epoch,
            validation: record.metrics[&Split::Validation].clone(),
            test: SplitMetrics::from(&test),
        });
    }
    writeln!(out)?;
    writeln!(out, "{:<16} {:>14} {:>9} {:>9}", "arm", "validation CCC", "test CCC", "test MAE")?;
    for r in &rows {
        writeln!(
            out,
            "{:<16} {:>14.4} {:>9.4} {:>9.4}",
            r.arm, r.validation.ccc, r.test.ccc, r.test.mae
        )?;
    }
    let path = base.join(ABLATION_FILE);
    fs::write(&path, serde_json::to_string_pretty(&rows).expect("rows serialize") + "\n")?;
    Ok(rows)
}

/// Full-model gradient check (ccc_loss over a forward pass of the first
/// `batch_size` training samples) in both prompt arms.
pub fn gradcheck_batch(
    dataset: &Dataset,
    prompts: &PromptMap,
    cfg: &PipelineConfig,
) -> Result<Vec<(String, GradCheckReport)>, PipelineError> {
    let gc = &cfg.gradcheck;
    let batch: Vec<_> = dataset.split(Split::Train).take(gc.batch_size).collect();
    if batch.len() < gc.batch_size {
        return Err(PipelineError::Validation(format!(
            "gradcheck needs {} training samples, found {}",
            gc.batch_size,
            batch.len()
        )));
    }
    let mut rows = Vec::new();
    for (arm, use_emotion_prompt) in [("with prompt", true), ("without prompt", false)] {
        let model = cfg.gradcheck_model(use_emotion_prompt);
        let inputs = batch
            .iter()
            .map(|s| {
                let prompt = prompts.get(&s.id);
                if use_emotion_prompt && prompt.is_none() {
                    return Err(PipelineError::Stale(format!("no prompt for sample `{}`", s.id)));
                }
                Ok(ModelInput::prepare(s, prompt, &model)?)
            })
            .collect::<Result<Vec<_>, PipelineError>>()?;
        let targets: Vec<f64> = inputs.iter().map(|x| x.target).collect();
        let mut store = init_params(&model, gc.init_seed)?;
        let report = grad_check(&mut store, gc.step, |tape: &mut Tape, params: &ParamStore| {
            let preds = inputs
                .iter()
                .map(|x| Ok(forward_on_tape(tape, params, &model, x)?.prediction))
                .collect::<Result<Vec<_>, FusionError>>()?;
            let stacked = tape.concat_rows(&preds)?;
            ccc_loss(tape, stacked, &targets)
        })?;
        rows.push((arm.to_owned(), report));
    }
    Ok(rows)
}

/// Prints both arms' reports; succeeds iff every arm is below threshold.
pub fn stage_gradcheck(
    cfg: &PipelineConfig,
    out: &mut dyn Write,
) -> Result<Vec<(String, GradCheckReport)>, PipelineError> {
    let dataset = load_depression_dataset(&cfg.resolve(&cfg.paths.dataset))?;
    let prompts = load_verified_prompts(cfg)?;
    let rows = gradcheck_batch(&dataset, &prompts, cfg)?;
    let mut worst: f64 = 0.0;
    for (arm, r) in &rows {
        let at = match (&r.worst, r.worst_values) {
            (Some((name, k)), Some((a, n))) => format!(" at {name}[{k}] (analytic {a:.6e}, numeric {n:.6e})"),
            _ => String::new(),
        };
        writeln!(
            out,
            "{arm}: max relative error {:.3e}{at}; max absolute error {:.3e}; loss {:.6}; {} parameters",
            r.max_relative_error, r.max_abs_error, r.loss, r.checked
        )?;
        worst = worst.max(r.max_relative_error);
    }
    writeln!(out, "max relative error {worst:.3e} (threshold {:e})", cfg.gradcheck.threshold)?;
    if worst < cfg.gradcheck.threshold {
        Ok(rows)
    } else {
        Err(PipelineError::Failed(format!(
            "max relative error {worst:.3e} is not below {:e}",
            cfg.gradcheck.threshold
        )))
    }
}
