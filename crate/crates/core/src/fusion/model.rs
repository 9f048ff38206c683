use crate::corpus::Sample;
use crate::numkit::{DiffTensor, ParamId, ParamStore, Tape, Tensor};
use crate::promptgen::EmotionPrompt;

use super::{AttentionMode, FusionError, ModelConfig, ModelInput, SEVERITY_RANGE};

fn pid(store: &ParamStore, name: &str) -> Result<ParamId, FusionError> {
    store
        .id_of(name)
        .ok_or_else(|| FusionError::Precondition(format!("parameter `{name}` is missing")))
}

fn param(tape: &mut Tape, store: &ParamStore, name: &str) -> Result<DiffTensor, FusionError> {
    Ok(tape.param(store, pid(store, name)?)?)
}

/// Shared text/prompt encoder: mean of the token bucket embeddings,
/// projected to `[1, d]`.
pub fn encode_text(tape: &mut Tape, store: &ParamStore, token_ids: &[usize]) -> Result<DiffTensor, FusionError> {
    let (rows, w, b) = text_inputs(tape, store, token_ids)?;
    let mean = tape.mean_rows(rows)?;
    let pooled = tape.matmul(mean, w)?;
    Ok(tape.add(pooled, b)?)
}

/// Per-token projections `[T, d]`; their mean equals [`encode_text`] by
/// linearity.
pub fn encode_text_tokens(tape: &mut Tape, store: &ParamStore, token_ids: &[usize]) -> Result<DiffTensor, FusionError> {
    let (rows, w, b) = text_inputs(tape, store, token_ids)?;
    let per_token = tape.matmul(rows, w)?;
    Ok(tape.add(per_token, b)?)
}

fn text_inputs(
    tape: &mut Tape,
    store: &ParamStore,
    token_ids: &[usize],
) -> Result<(DiffTensor, DiffTensor, DiffTensor), FusionError> {
    if token_ids.is_empty() {
        return Err(FusionError::Precondition("text has no tokens".into()));
    }
    let table = param(tape, store, "text_encoder.embedding")?;
    let w = param(tape, store, "text_encoder.proj_w")?;
    let b = param(tape, store, "text_encoder.proj_b")?;
    Ok((tape.gather_rows(table, token_ids)?, w, b))
}

/// Frame encoder for `prefix` (`audio_encoder` or `video_encoder`): affine
/// map per frame, tanh, then the temporal mean. Returns `(frames, pooled)`.
/// Frames beyond `max_frames` are dropped.
pub fn encode_sequence(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    frames: &Tensor,
    max_frames: usize,
) -> Result<(DiffTensor, DiffTensor), FusionError> {
    let (t, d_in) = frames.dims()?;
    if t == 0 || max_frames == 0 {
        return Err(FusionError::Precondition(format!("{prefix}: no frames to encode")));
    }
    let w = param(tape, store, &format!("{prefix}.w"))?;
    let expected = tape.value(w)?.dims()?.0;
    if d_in != expected {
        return Err(FusionError::Shape(format!("{prefix}: frames have {d_in} features, expected {expected}")));
    }
    let b = param(tape, store, &format!("{prefix}.b"))?;
    let keep = t.min(max_frames);
    let x = tape.constant(Tensor::matrix(keep, d_in, frames.data()[..keep * d_in].to_vec())?)?;
    let h = tape.matmul(x, w)?;
    let h = tape.add(h, b)?;
    let h = tape.tanh(h)?;
    let pooled = tape.mean_rows(h)?;
    Ok((h, pooled))
}

/// Multi-head scaled dot-product attention of one query row over `kv`
/// (`[T, d]`), using the `W_Q, W_K, W_V, W_O` of `block`.
pub fn cross_attention(
    tape: &mut Tape,
    store: &ParamStore,
    block: &str,
    query: DiffTensor,
    kv: DiffTensor,
    n_heads: usize,
) -> Result<DiffTensor, FusionError> {
    let wq = param(tape, store, &format!("{block}.w_q"))?;
    let wk = param(tape, store, &format!("{block}.w_k"))?;
    let wv = param(tape, store, &format!("{block}.w_v"))?;
    let wo = param(tape, store, &format!("{block}.w_o"))?;
    let d = tape.value(wq)?.dims()?.1;
    if n_heads == 0 || d % n_heads != 0 {
        return Err(FusionError::Precondition(format!("{d} columns cannot be split into {n_heads} heads")));
    }
    let dh = d / n_heads;
    let q = tape.matmul(query, wq)?;
    let k = tape.matmul(kv, wk)?;
    let v = tape.matmul(kv, wv)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = tape.slice_cols(q, lo, hi)?;
        let kh = tape.slice_cols(k, lo, hi)?;
        let vh = tape.slice_cols(v, lo, hi)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale)?;
        let weights = tape.softmax_rows(scores)?;
        heads.push(tape.matmul(weights, vh)?);
    }
    let joined = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
    Ok(tape.matmul(joined, wo)?)
}

/// Handles to every intermediate of one forward pass on a tape.
#[derive(Clone, Copy, Debug)]
pub struct TapeTrace {
    pub h_t: DiffTensor,
    pub h_a: DiffTensor,
    pub h_v: DiffTensor,
    pub h_p: DiffTensor,
    pub h_a_att: DiffTensor,
    pub h_v_att: DiffTensor,
    pub h_p_att: DiffTensor,
    pub h_final: DiffTensor,
    /// Unclamped predictor output, `[1, 1]`.
    pub prediction: DiffTensor,
}

/// Values of one forward pass. Vectors are rows of width `d_model`
/// (`4 * d_model` for `h_final`).
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    pub h_t: Vec<f64>,
    pub h_a: Vec<f64>,
    pub h_v: Vec<f64>,
    pub h_p: Vec<f64>,
    pub h_a_att: Vec<f64>,
    pub h_v_att: Vec<f64>,
    pub h_p_att: Vec<f64>,
    pub h_final: Vec<f64>,
    pub raw_prediction: f64,
    /// Clamped to the severity range when the config asks for it.
    pub prediction: f64,
}

pub fn forward_on_tape(
    tape: &mut Tape,
    store: &ParamStore,
    config: &ModelConfig,
    input: &ModelInput,
) -> Result<TapeTrace, FusionError> {
    let h_t = encode_text(tape, store, &input.text_ids)?;
    let (a_frames, h_a) = encode_sequence(tape, store, "audio_encoder", &input.audio, config.max_frames)?;
    let (v_frames, h_v) = encode_sequence(tape, store, "video_encoder", &input.video, config.max_frames)?;
    let sequence = config.attention == AttentionMode::Sequence;
    let (a_kv, v_kv) = if sequence { (a_frames, v_frames) } else { (h_a, h_v) };
    let h_a_att = cross_attention(tape, store, "attn_audio", h_t, a_kv, config.n_heads)?;
    let h_v_att = cross_attention(tape, store, "attn_video", h_t, v_kv, config.n_heads)?;
    let (h_p, h_p_att) = match (&input.prompt_ids, config.use_emotion_prompt) {
        (Some(ids), true) => {
            let h_p = encode_text(tape, store, ids)?;
            let kv = if sequence { encode_text_tokens(tape, store, ids)? } else { h_p };
            (h_p, cross_attention(tape, store, "attn_prompt", h_t, kv, config.n_heads)?)
        }
        (None, false) => {
            let zero = tape.constant(Tensor::zeros(1, config.d_model))?;
            (zero, zero)
        }
        (None, true) => {
            return Err(FusionError::Precondition(format!("sample `{}` has no Emotion Prompt", input.id)))
        }
        (Some(_), false) => {
            return Err(FusionError::Precondition(format!(
                "sample `{}` was prepared with a prompt for a prompt-free model",
                input.id
            )))
        }
    };
    let h_final = tape.concat_cols(&[h_t, h_a_att, h_v_att, h_p_att])?;
    let w1 = param(tape, store, "predictor.w1")?;
    let b1 = param(tape, store, "predictor.b1")?;
    let w2 = param(tape, store, "predictor.w2")?;
    let b2 = param(tape, store, "predictor.b2")?;
    let hidden = tape.matmul(h_final, w1)?;
    let hidden = tape.add(hidden, b1)?;
    let hidden = tape.tanh(hidden)?;
    let out = tape.matmul(hidden, w2)?;
    let prediction = tape.add(out, b2)?;
    Ok(TapeTrace {
        h_t,
        h_a,
        h_v,
        h_p,
        h_a_att,
        h_v_att,
        h_p_att,
        h_final,
        prediction,
    })
}

fn clamp_if(config: &ModelConfig, raw: f64) -> f64 {
    if config.prediction_clamp {
        raw.clamp(SEVERITY_RANGE.0, SEVERITY_RANGE.1)
    } else {
        raw
    }
}

/// Inference on a prepared input; the reported value honours the clamp.
pub fn predict(store: &ParamStore, config: &ModelConfig, input: &ModelInput) -> Result<f64, FusionError> {
    let mut tape = Tape::new();
    let trace = forward_on_tape(&mut tape, store, config, input)?;
    Ok(clamp_if(config, tape.item(trace.prediction)?))
}

/// Full inference trace for one sample. With the prompt ablated any
/// supplied prompt is ignored.
pub fn forward(
    sample: &Sample,
    prompt: Option<&EmotionPrompt>,
    store: &ParamStore,
    config: &ModelConfig,
) -> Result<ForwardTrace, FusionError> {
    let input = ModelInput::prepare(sample, prompt, config)?;
    let mut tape = Tape::new();
    let t = forward_on_tape(&mut tape, store, config, &input)?;
    let row = |h: DiffTensor| -> Result<Vec<f64>, FusionError> { Ok(tape.value(h)?.data().to_vec()) };
    let raw = tape.item(t.prediction)?;
    Ok(ForwardTrace {
        h_t: row(t.h_t)?,
        h_a: row(t.h_a)?,
        h_v: row(t.h_v)?,
        h_p: row(t.h_p)?,
        h_a_att: row(t.h_a_att)?,
        h_v_att: row(t.h_v_att)?,
        h_p_att: row(t.h_p_att)?,
        h_final: row(t.h_final)?,
        raw_prediction: raw,
        prediction: clamp_if(config, raw),
    })
}
