//! Training loop, evaluation metrics and run records.

mod metrics;
mod schedule;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, Split};
use crate::fusion::{
    ccc_loss, forward_on_tape, predict, FusionError, ModelConfig, ModelInput, TEXT_ENCODER_PREFIX,
};
use crate::numkit::{adam_step_grouped, AdamState, NumError, ParamStore, Tape};
use crate::promptgen::EmotionPrompt;

pub use metrics::{ccc_metric, mae_metric};
pub use schedule::lr_at_epoch;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("provenance error: {0}")]
    Provenance(String),
    #[error("training diverged at epoch {epoch}, batch {batch}: {detail}")]
    Diverged { epoch: usize, batch: usize, detail: String },
    #[error(transparent)]
    Model(#[from] FusionError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl From<NumError> for TrainError {
    fn from(e: NumError) -> Self {
        TrainError::Model(e.into())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub base_lr: f64,
    pub lr_decay: f64,
    pub decay_every: usize,
    pub text_encoder_lr_multiplier: f64,
    pub seed: u64,
    pub k_retrieved: usize,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs: 400,
            base_lr: 6e-4,
            lr_decay: 0.1,
            decay_every: 100,
            text_encoder_lr_multiplier: 0.1,
            seed: 0,
            k_retrieved: 5,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size < 2 {
            return Err(TrainError::Precondition("batch_size must be at least 2".into()));
        }
        if self.epochs == 0 || self.decay_every == 0 || self.k_retrieved == 0 {
            return Err(TrainError::Precondition(
                "epochs, decay_every and k_retrieved must be positive".into(),
            ));
        }
        let rates = [self.base_lr, self.lr_decay, self.text_encoder_lr_multiplier];
        if rates.iter().any(|r| !r.is_finite() || *r <= 0.0) {
            return Err(TrainError::Precondition(format!(
                "learning-rate settings must be positive and finite: {rates:?}"
            )));
        }
        Ok(())
    }
}

/// One evaluated sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub id: String,
    pub prediction: f64,
    pub target: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub split: Split,
    pub n: usize,
    pub ccc: f64,
    pub mae: f64,
    pub per_sample: Vec<PredictionRow>,
}

impl MetricsReport {
    pub fn from_rows(split: Split, per_sample: Vec<PredictionRow>) -> Result<Self, TrainError> {
        let pred: Vec<f64> = per_sample.iter().map(|r| r.prediction).collect();
        let target: Vec<f64> = per_sample.iter().map(|r| r.target).collect();
        Ok(MetricsReport {
            split,
            n: per_sample.len(),
            ccc: ccc_metric(&pred, &target)?,
            mae: mae_metric(&pred, &target)?,
            per_sample,
        })
    }

    /// `predictions_<split>.csv` body: `id,prediction,target`.
    pub fn predictions_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["id", "prediction", "target"]).expect("in-memory write");
        for r in &self.per_sample {
            w.write_record([r.id.clone(), r.prediction.to_string(), r.target.to_string()])
                .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 csv")
    }

    /// Writes `metrics_<split>.json` and `predictions_<split>.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), TrainError> {
        let json = serde_json::to_string_pretty(self).expect("report serializes") + "\n";
        write_file(&dir.join(format!("metrics_{}.json", self.split)), json.as_bytes())?;
        write_file(&dir.join(format!("predictions_{}.csv", self.split)), self.predictions_csv().as_bytes())
    }
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<(), TrainError> {
    fs::write(path, bytes).map_err(|source| TrainError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Prompts keyed by sample id.
pub type PromptMap = BTreeMap<String, EmotionPrompt>;

/// Model inputs for every sample of `split`. With the prompt in use, a
/// sample without one is a provenance error naming it.
pub fn prepare_split(
    dataset: &Dataset,
    split: Split,
    prompts: &PromptMap,
    config: &ModelConfig,
) -> Result<Vec<ModelInput>, TrainError> {
    dataset
        .split(split)
        .map(|s| {
            let prompt = prompts.get(&s.id);
            if config.use_emotion_prompt && prompt.is_none() {
                return Err(TrainError::Provenance(format!("no Emotion Prompt for sample `{}`", s.id)));
            }
            Ok(ModelInput::prepare(s, prompt, config)?)
        })
        .collect()
}

/// Inference over prepared inputs (clamped if the config says so).
pub fn evaluate_inputs(
    params: &ParamStore,
    config: &ModelConfig,
    split: Split,
    inputs: &[ModelInput],
) -> Result<MetricsReport, TrainError> {
    let rows = inputs
        .iter()
        .map(|x| {
            Ok(PredictionRow {
                id: x.id.clone(),
                prediction: predict(params, config, x)?,
                target: x.target,
            })
        })
        .collect::<Result<Vec<_>, TrainError>>()?;
    MetricsReport::from_rows(split, rows)
}

pub fn evaluate(
    params: &ParamStore,
    config: &ModelConfig,
    dataset: &Dataset,
    split: Split,
    prompts: &PromptMap,
) -> Result<MetricsReport, TrainError> {
    let inputs = prepare_split(dataset, split, prompts, config)?;
    evaluate_inputs(params, config, split, &inputs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    /// Mean batch loss over the epoch.
    pub train_loss: f64,
    pub val_ccc: f64,
    pub val_mae: f64,
    pub lr: f64,
    pub lr_text_encoder: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation CCC.
    pub params: ParamStore,
    pub history: Vec<EpochSummary>,
    pub best_epoch: usize,
    pub optimizer_steps: usize,
}

/// Train on `train` with model selection on `val`.
pub fn train_inputs(
    train: &[ModelInput],
    val: &[ModelInput],
    params_init: ParamStore,
    tc: &TrainConfig,
    mc: &ModelConfig,
    mut on_epoch: impl FnMut(&EpochSummary),
) -> Result<TrainOutcome, TrainError> {
    tc.validate()?;
    mc.validate()?;
    if train.is_empty() || val.len() < 2 {
        return Err(TrainError::Precondition(format!(
            "need a non-empty train split and at least 2 validation samples, got {} and {}",
            train.len(),
            val.len()
        )));
    }
    if tc.batch_size > train.len() {
        return Err(TrainError::Precondition(format!(
            "batch_size {} exceeds the {} training samples",
            tc.batch_size,
            train.len()
        )));
    }
    let mut params = params_init;
    let mut adam = AdamState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(tc.epochs);
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut steps = 0;

    for epoch in 0..tc.epochs {
        if tc.shuffle {
            order.shuffle(&mut rng);
        }
        let (lr, lr_text) = lr_at_epoch(epoch, tc)?;
        let mut losses = Vec::new();
        // a final batch of one has no CCC and is skipped
        for (batch, chunk) in order.chunks(tc.batch_size).filter(|c| c.len() >= 2).enumerate() {
            let diverged = |detail: String| TrainError::Diverged { epoch, batch, detail };
            let mut tape = Tape::new();
            let mut preds = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let trace = forward_on_tape(&mut tape, &params, mc, &train[i]).map_err(|e| diverged(e.to_string()))?;
                preds.push(trace.prediction);
            }
            let stacked = tape.concat_rows(&preds)?;
            let targets: Vec<f64> = chunk.iter().map(|&i| train[i].target).collect();
            let loss = ccc_loss(&mut tape, stacked, &targets).map_err(|e| diverged(e.to_string()))?;
            let value = tape.item(loss)?;
            if !value.is_finite() {
                return Err(diverged(format!("loss is {value}")));
            }
            params.zero_grad();
            tape.backward(loss, &mut params).map_err(|e| diverged(e.to_string()))?;
            adam_step_grouped(&mut params, &mut adam, |p| {
                if p.name.starts_with(TEXT_ENCODER_PREFIX) { lr_text } else { lr }
            })
            .map_err(|e| diverged(e.to_string()))?;
            losses.push(value);
            steps += 1;
        }
        let report = evaluate_inputs(&params, mc, Split::Validation, val)?;
        let summary = EpochSummary {
            epoch,
            train_loss: losses.iter().sum::<f64>() / losses.len().max(1) as f64,
            val_ccc: report.ccc,
            val_mae: report.mae,
            lr,
            lr_text_encoder: lr_text,
        };
        on_epoch(&summary);
        // ties keep the earlier epoch
        if best.as_ref().is_none_or(|(ccc, _, _)| report.ccc > *ccc) {
            best = Some((report.ccc, epoch, params.clone()));
        }
        history.push(summary);
    }
    let (_, best_epoch, params) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        params,
        history,
        best_epoch,
        optimizer_steps: steps,
    })
}

/// Train on the dataset's train split, selecting on its validation split.
pub fn train(
    dataset: &Dataset,
    prompts: &PromptMap,
    params_init: ParamStore,
    tc: &TrainConfig,
    mc: &ModelConfig,
) -> Result<TrainOutcome, TrainError> {
    let tr = prepare_split(dataset, Split::Train, prompts, mc)?;
    let va = prepare_split(dataset, Split::Validation, prompts, mc)?;
    train_inputs(&tr, &va, params_init, tc, mc, |_| {})
}

/// Headline numbers of one split as stored in `run.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub n: usize,
    pub ccc: f64,
    pub mae: f64,
}

impl From<&MetricsReport> for SplitMetrics {
    fn from(r: &MetricsReport) -> Self {
        SplitMetrics {
            n: r.n,
            ccc: r.ccc,
            mae: r.mae,
        }
    }
}

/// `run.json`: everything needed to audit a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub train_config: TrainConfig,
    pub model_config: ModelConfig,
    pub init_seed: u64,
    pub selection: String,
    pub best_epoch: usize,
    pub optimizer_steps: usize,
    pub history: Vec<EpochSummary>,
    pub metrics: BTreeMap<Split, SplitMetrics>,
    pub checkpoint_fingerprint: String,
    /// Upstream artifact fingerprints this run consumed.
    pub inputs: BTreeMap<String, String>,
    pub wall_clock_secs: f64,
}

pub const SELECTION_RULE: &str = "best_validation_ccc";

impl RunRecord {
    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        write_file(path, (serde_json::to_string_pretty(self).expect("record serializes") + "\n").as_bytes())
    }

    /// Loads and checks internal consistency: the history covers every
    /// epoch and the best epoch is the validation-CCC argmax.
    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let text = fs::read_to_string(path).map_err(|source| TrainError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let rec: RunRecord = serde_json::from_str(&text)
            .map_err(|e| TrainError::Precondition(format!("{}: {e}", path.display())))?;
        let epochs_ok = rec.history.len() == rec.train_config.epochs
            && rec.history.iter().enumerate().all(|(i, h)| h.epoch == i);
        let best = rec
            .history
            .iter()
            .fold(None::<&EpochSummary>, |b, h| match b {
                Some(b) if b.val_ccc >= h.val_ccc => Some(b),
                _ => Some(h),
            })
            .map(|h| h.epoch);
        if !epochs_ok || best != Some(rec.best_epoch) {
            return Err(TrainError::Precondition(format!("{}: run record is inconsistent", path.display())));
        }
        Ok(rec)
    }
}
