//! The toy latent reasoner: a single-layer gated recurrent core over
//! token embeddings with a vocabulary-sized output head. It encodes the
//! question, autoregressively emits soft tokens (probability mixtures of
//! vocabulary embeddings), decides termination by predicting `</think>`,
//! and then decodes the answer greedily.

use std::fs;
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::chain::{TokenId, ANSWER_SEP, BOS, PAD, THINK_END};
use crate::error::{Error, Result};
use crate::math::{argmax, sigmoid, softmax, Mat};

/// Model shape: vocabulary size, embedding width d, hidden width d_h.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
}

impl ModelDims {
    pub fn new(vocab_size: usize, embed_dim: usize, hidden_dim: usize) -> ModelDims {
        ModelDims {
            vocab_size,
            embed_dim,
            hidden_dim,
        }
    }
}

/// All trainable parameters. The same container is reused for gradients
/// and optimizer moments, which keeps flat indexing trivial.
#[derive(Debug, Clone, PartialEq)]
pub struct ReasonerParams {
    pub dims: ModelDims,
    /// Vocabulary embedding table, |V| x d.
    pub embedding: Mat,
    pub w_update: Mat,
    pub u_update: Mat,
    pub b_update: Vec<f64>,
    pub w_reset: Mat,
    pub u_reset: Mat,
    pub b_reset: Vec<f64>,
    pub w_cand: Mat,
    pub u_cand: Mat,
    pub b_cand: Vec<f64>,
    /// Output head, |V| x d_h.
    pub w_out: Mat,
    pub b_out: Vec<f64>,
}

impl ReasonerParams {
    pub fn zeros(dims: ModelDims) -> ReasonerParams {
        let (v, d, h) = (dims.vocab_size, dims.embed_dim, dims.hidden_dim);
        ReasonerParams {
            dims,
            embedding: Mat::zeros(v, d),
            w_update: Mat::zeros(h, d),
            u_update: Mat::zeros(h, h),
            b_update: vec![0.0; h],
            w_reset: Mat::zeros(h, d),
            u_reset: Mat::zeros(h, h),
            b_reset: vec![0.0; h],
            w_cand: Mat::zeros(h, d),
            u_cand: Mat::zeros(h, h),
            b_cand: vec![0.0; h],
            w_out: Mat::zeros(v, h),
            b_out: vec![0.0; v],
        }
    }

    /// Seeded uniform init in [-0.08, 0.08].
    pub fn init(dims: ModelDims, seed: u64) -> ReasonerParams {
        Self::init_uniform(dims, seed, 0.08)
    }

    /// Seeded uniform init in [-half_range, half_range].
    pub fn init_uniform(dims: ModelDims, seed: u64, half_range: f64) -> ReasonerParams {
        let mut p = ReasonerParams::zeros(dims);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        p.for_each_tensor_mut(|_, data| {
            for v in data {
                *v = rng.random_range(-half_range..half_range);
            }
        });
        p
    }

    /// Fixed tensor order used by flat indexing, checkpoints, and the
    /// optimizer: name, shape, row-major data.
    pub fn tensors(&self) -> Vec<(&'static str, Vec<usize>, &[f64])> {
        let ModelDims {
            vocab_size: v,
            embed_dim: d,
            hidden_dim: h,
        } = self.dims;
        vec![
            ("embedding", vec![v, d], &self.embedding.data[..]),
            ("w_update", vec![h, d], &self.w_update.data[..]),
            ("u_update", vec![h, h], &self.u_update.data[..]),
            ("b_update", vec![h], &self.b_update[..]),
            ("w_reset", vec![h, d], &self.w_reset.data[..]),
            ("u_reset", vec![h, h], &self.u_reset.data[..]),
            ("b_reset", vec![h], &self.b_reset[..]),
            ("w_cand", vec![h, d], &self.w_cand.data[..]),
            ("u_cand", vec![h, h], &self.u_cand.data[..]),
            ("b_cand", vec![h], &self.b_cand[..]),
            ("w_out", vec![v, h], &self.w_out.data[..]),
            ("b_out", vec![v], &self.b_out[..]),
        ]
    }

    pub fn for_each_tensor_mut(&mut self, mut f: impl FnMut(&'static str, &mut [f64])) {
        f("embedding", &mut self.embedding.data);
        f("w_update", &mut self.w_update.data);
        f("u_update", &mut self.u_update.data);
        f("b_update", &mut self.b_update);
        f("w_reset", &mut self.w_reset.data);
        f("u_reset", &mut self.u_reset.data);
        f("b_reset", &mut self.b_reset);
        f("w_cand", &mut self.w_cand.data);
        f("u_cand", &mut self.u_cand.data);
        f("b_cand", &mut self.b_cand);
        f("w_out", &mut self.w_out.data);
        f("b_out", &mut self.b_out);
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, _, d)| d.len()).sum()
    }

    pub fn get_flat(&self, mut i: usize) -> f64 {
        for (_, _, data) in self.tensors() {
            if i < data.len() {
                return data[i];
            }
            i -= data.len();
        }
        panic!("flat index out of range");
    }

    pub fn set_flat(&mut self, mut i: usize, value: f64) {
        let mut done = false;
        self.for_each_tensor_mut(|_, data| {
            if done {
                return;
            }
            if i < data.len() {
                data[i] = value;
                done = true;
            } else {
                i -= data.len();
            }
        });
        assert!(done, "flat index out of range");
    }

    /// Applies `f(self_i, other_i)` elementwise across all tensors.
    pub fn zip_apply(&mut self, other: &ReasonerParams, f: impl Fn(&mut f64, f64) + Copy) {
        let other_flat: Vec<f64> = other
            .tensors()
            .iter()
            .flat_map(|(_, _, d)| d.iter().copied())
            .collect();
        let mut offset = 0;
        self.for_each_tensor_mut(|_, data| {
            for (i, v) in data.iter_mut().enumerate() {
                f(v, other_flat[offset + i]);
            }
            offset += data.len();
        });
    }

    pub fn l2_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|(_, _, d)| d.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        self.for_each_tensor_mut(|_, data| {
            for v in data {
                *v *= s;
            }
        });
    }
}

/// A distribution over the vocabulary together with the embedding it
/// mixes: z = sum_i pi_i e_i.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftToken {
    /// Dense probability vector over the vocabulary.
    pub dist: Vec<f64>,
    pub embedding: Vec<f64>,
}

/// z = sum_i dist_i * e_i over the dense distribution.
pub fn mix_embedding(dist: &[f64], table: &Mat) -> Result<Vec<f64>> {
    if dist.len() != table.rows {
        return Err(Error::LengthMismatch {
            what: "mix_embedding distribution".into(),
            expected: table.rows,
            got: dist.len(),
        });
    }
    let mut z = vec![0.0; table.cols];
    for (i, &p) in dist.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        let row = table.row(i);
        for (zc, &e) in z.iter_mut().zip(row) {
            *zc += p * e;
        }
    }
    Ok(z)
}

/// Same mixture over a sparse (id, probability) support.
pub fn mix_embedding_sparse(entries: &[(TokenId, f64)], table: &Mat) -> Result<Vec<f64>> {
    let mut z = vec![0.0; table.cols];
    for &(t, p) in entries {
        let t = t as usize;
        if t >= table.rows {
            return Err(Error::LengthMismatch {
                what: "token id for embedding row".into(),
                expected: table.rows,
                got: t,
            });
        }
        let row = table.row(t);
        for (zc, &e) in z.iter_mut().zip(row) {
            *zc += p * e;
        }
    }
    Ok(z)
}

/// Intermediate values of one recurrent step, kept for backprop.
#[derive(Debug, Clone)]
pub(crate) struct GruCache {
    pub h_prev: Vec<f64>,
    pub update: Vec<f64>,
    pub reset: Vec<f64>,
    pub reset_h: Vec<f64>,
    pub cand: Vec<f64>,
    pub h: Vec<f64>,
}

/// h' = (1 - z) ⊙ h + z ⊙ tanh(Wc x + Uc (r ⊙ h) + bc), with update
/// gate z and reset gate r from sigmoid-linear maps of (x, h).
pub(crate) fn gru_step(p: &ReasonerParams, h: &[f64], x: &[f64]) -> GruCache {
    let dh = p.dims.hidden_dim;
    let mut a_update = p.w_update.matvec(x);
    let uh = p.u_update.matvec(h);
    let mut a_reset = p.w_reset.matvec(x);
    let rh_lin = p.u_reset.matvec(h);
    for i in 0..dh {
        a_update[i] += uh[i] + p.b_update[i];
        a_reset[i] += rh_lin[i] + p.b_reset[i];
    }
    let update: Vec<f64> = a_update.iter().map(|&a| sigmoid(a)).collect();
    let reset: Vec<f64> = a_reset.iter().map(|&a| sigmoid(a)).collect();
    let reset_h: Vec<f64> = reset.iter().zip(h).map(|(r, hv)| r * hv).collect();
    let mut a_cand = p.w_cand.matvec(x);
    let uc = p.u_cand.matvec(&reset_h);
    for i in 0..dh {
        a_cand[i] += uc[i] + p.b_cand[i];
    }
    let cand: Vec<f64> = a_cand.iter().map(|&a| a.tanh()).collect();
    let h_new: Vec<f64> = (0..dh)
        .map(|i| (1.0 - update[i]) * h[i] + update[i] * cand[i])
        .collect();
    GruCache {
        h_prev: h.to_vec(),
        update,
        reset,
        reset_h,
        cand,
        h: h_new,
    }
}

/// Logits of the output head at a hidden state.
pub(crate) fn head_logits(p: &ReasonerParams, h: &[f64]) -> Vec<f64> {
    let mut logits = p.w_out.matvec(h);
    for (l, b) in logits.iter_mut().zip(&p.b_out) {
        *l += b;
    }
    logits
}

/// Running state of the core: the current hidden vector plus the soft
/// embedding queued to be consumed by the next step.
#[derive(Debug, Clone)]
pub struct CoreState {
    pub h: Vec<f64>,
    pending: Option<Vec<f64>>,
}

impl CoreState {
    /// Queues an embedding as the next core input.
    pub fn feed(&mut self, embedding: Vec<f64>) {
        debug_assert!(self.pending.is_none(), "previous input not consumed");
        self.pending = Some(embedding);
    }
}

/// Runs the core over BOS followed by the question tokens. Returns the
/// hidden state at the final question position and the state to continue
/// from.
pub fn encode_question(
    question_ids: &[TokenId],
    p: &ReasonerParams,
) -> Result<(Vec<f64>, CoreState)> {
    if question_ids.is_empty() {
        return Err(Error::InvalidConfig("empty question".into()));
    }
    let mut h = vec![0.0; p.dims.hidden_dim];
    h = gru_step(p, &h, p.embedding.row(BOS as usize)).h;
    for &id in question_ids {
        if id as usize >= p.dims.vocab_size {
            return Err(Error::OutOfVocab(format!("id {id}")));
        }
        h = gru_step(p, &h, p.embedding.row(id as usize)).h;
    }
    Ok((h.clone(), CoreState { h, pending: None }))
}

/// One latent step: consumes the queued soft input (if any), then emits
/// the dense next-token distribution from the current hidden state.
/// Returns (q, hidden state at this position, state).
pub fn latent_step(mut state: CoreState, p: &ReasonerParams) -> (Vec<f64>, Vec<f64>, CoreState) {
    if let Some(x) = state.pending.take() {
        state.h = gru_step(p, &state.h, &x).h;
    }
    let q = softmax(&head_logits(p, &state.h));
    (q, state.h.clone(), state)
}

/// Inference-time sampling configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingConfig {
    pub temperature: f64,
    pub top_p: f64,
    pub max_latent_steps: usize,
    pub greedy: bool,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            temperature: 0.6,
            top_p: 0.95,
            max_latent_steps: 8,
            greedy: false,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::InvalidConfig("temperature must be > 0".into()));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::InvalidConfig("top_p must be in (0, 1]".into()));
        }
        if self.max_latent_steps == 0 {
            return Err(Error::InvalidConfig("max_latent_steps must be >= 1".into()));
        }
        Ok(())
    }
}

/// Temperature rescaling (p_i^{1/T}, renormalized) followed by top-p
/// nucleus truncation: keep the smallest descending-probability prefix
/// with cumulative mass >= top_p, renormalized. With `greedy`, returns a
/// point mass on the argmax (ties to the lowest id).
pub fn apply_sampling_filter(q: &[f64], cfg: &SamplingConfig) -> Vec<f64> {
    if cfg.greedy {
        let mut out = vec![0.0; q.len()];
        out[argmax(q)] = 1.0;
        return out;
    }
    if cfg.temperature == 1.0 && cfg.top_p == 1.0 {
        return q.to_vec();
    }
    let mut scaled: Vec<f64> = if cfg.temperature == 1.0 {
        q.to_vec()
    } else {
        // Power rescale in log space.
        let max_lp = q
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| p.ln() / cfg.temperature)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut w: Vec<f64> = q
            .iter()
            .map(|&p| {
                if p > 0.0 {
                    (p.ln() / cfg.temperature - max_lp).exp()
                } else {
                    0.0
                }
            })
            .collect();
        let sum: f64 = w.iter().sum();
        for v in &mut w {
            *v /= sum;
        }
        w
    };
    if cfg.top_p < 1.0 {
        let mut order: Vec<usize> = (0..scaled.len()).collect();
        order.sort_by(|&a, &b| scaled[b].partial_cmp(&scaled[a]).unwrap().then(a.cmp(&b)));
        let mut cum = 0.0;
        let mut keep = Vec::new();
        for &i in &order {
            keep.push(i);
            cum += scaled[i];
            if cum >= cfg.top_p {
                break;
            }
        }
        let mut filtered = vec![0.0; scaled.len()];
        for &i in &keep {
            filtered[i] = scaled[i] / cum;
        }
        scaled = filtered;
    }
    scaled
}

/// True iff `</think>` is the argmax of the filtered distribution.
pub fn should_terminate(filtered: &[f64]) -> bool {
    argmax(filtered) == THINK_END as usize
}

/// Everything produced by one inference run.
#[derive(Debug, Clone)]
pub struct LatentTrace {
    /// Dense model distribution at each latent position, including the
    /// final one whose argmax triggered termination (when it did).
    pub distributions: Vec<Vec<f64>>,
    /// Soft tokens actually fed forward, one per latent step.
    pub soft_tokens: Vec<SoftToken>,
    /// Hidden state at each fed soft token's position.
    pub hidden_states: Vec<Vec<f64>>,
    /// Hidden state at the question's final token.
    pub h_q: Vec<f64>,
    /// Number of soft tokens fed before termination or truncation.
    pub termination_step: usize,
    /// True when the latent loop hit `max_latent_steps` without the
    /// model predicting `</think>`.
    pub truncated: bool,
    /// Greedily decoded answer ids (stops on PAD or after
    /// [`MAX_ANSWER_TOKENS`] tokens).
    pub decoded_answer: Vec<TokenId>,
}

/// Maximum number of greedily decoded answer tokens.
pub const MAX_ANSWER_TOKENS: usize = 16;

/// Full latent-reasoning inference: encode the question, loop soft-token
/// generation until the model predicts `</think>` (or the step cap),
/// then feed the answer separator and decode greedily until PAD.
pub fn infer(
    question_ids: &[TokenId],
    p: &ReasonerParams,
    cfg: &SamplingConfig,
) -> Result<LatentTrace> {
    cfg.validate()?;
    let (h_q, mut state) = encode_question(question_ids, p)?;

    let mut distributions = Vec::new();
    let mut soft_tokens: Vec<SoftToken> = Vec::new();
    let mut hidden_states = Vec::new();
    let mut truncated = false;

    loop {
        let fed_before = soft_tokens.len();
        let (q, h_z, next_state) = latent_step(state, p);
        state = next_state;
        if fed_before > 0 {
            // This call consumed the soft token fed on the previous
            // iteration; h_z is that token's hidden representation.
            hidden_states.push(h_z);
        }
        distributions.push(q.clone());
        let filtered = apply_sampling_filter(&q, cfg);
        if should_terminate(&filtered) {
            break;
        }
        if fed_before == cfg.max_latent_steps {
            truncated = true;
            break;
        }
        let embedding = mix_embedding(&filtered, &p.embedding)?;
        state.feed(embedding.clone());
        soft_tokens.push(SoftToken {
            dist: filtered,
            embedding,
        });
    }

    // Answer decoding is always greedy and discrete.
    let mut h = gru_step(p, &state.h, p.embedding.row(ANSWER_SEP as usize)).h;
    let mut decoded_answer = Vec::new();
    for _ in 0..MAX_ANSWER_TOKENS {
        let next = argmax(&head_logits(p, &h)) as TokenId;
        if next == PAD {
            break;
        }
        decoded_answer.push(next);
        h = gru_step(p, &h, p.embedding.row(next as usize)).h;
    }

    Ok(LatentTrace {
        termination_step: soft_tokens.len(),
        distributions,
        soft_tokens,
        hidden_states,
        h_q,
        truncated,
        decoded_answer,
    })
}

// --- checkpoint format -------------------------------------------------
//
// A checkpoint is a single JSON object:
//   {"version": 1, "vocab_size": V, "embed_dim": d, "hidden_dim": d_h,
//    "tensors": [{"name": "...", "shape": [..], "data": [f64, ..]}, ..]}
// Tensors appear in the fixed order of `ReasonerParams::tensors`, data is
// row-major, and values round-trip losslessly at 64-bit precision.

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    vocab_size: usize,
    embed_dim: usize,
    hidden_dim: usize,
    tensors: Vec<TensorBlob>,
}

#[derive(Serialize, Deserialize)]
struct TensorBlob {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

pub fn save_checkpoint(p: &ReasonerParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = CheckpointFile {
        version: CHECKPOINT_VERSION,
        vocab_size: p.dims.vocab_size,
        embed_dim: p.dims.embed_dim,
        hidden_dim: p.dims.hidden_dim,
        tensors: p
            .tensors()
            .into_iter()
            .map(|(name, shape, data)| TensorBlob {
                name: name.to_string(),
                shape,
                data: data.to_vec(),
            })
            .collect(),
    };
    let mut bytes = serde_json::to_vec(&file).expect("checkpoint serializes");
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ReasonerParams> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let file: CheckpointFile =
        serde_json::from_slice(&bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if file.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {}",
            file.version
        )));
    }
    let dims = ModelDims::new(file.vocab_size, file.embed_dim, file.hidden_dim);
    let mut p = ReasonerParams::zeros(dims);
    {
        let expected = p.tensors();
        if file.tensors.len() != expected.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                expected.len(),
                file.tensors.len()
            )));
        }
        for ((name, shape, _), blob) in expected.iter().zip(&file.tensors) {
            if blob.name != *name || blob.shape != *shape {
                return Err(Error::Checkpoint(format!(
                    "tensor {:?} with shape {:?} does not match expected {:?} {:?}",
                    blob.name, blob.shape, name, shape
                )));
            }
            let len: usize = shape.iter().product();
            if blob.data.len() != len {
                return Err(Error::Checkpoint(format!(
                    "tensor {:?}: {} values for shape {:?}",
                    blob.name,
                    blob.data.len(),
                    shape
                )));
            }
        }
    }
    let data: Vec<Vec<f64>> = file.tensors.into_iter().map(|b| b.data).collect();
    let mut idx = 0;
    p.for_each_tensor_mut(|_, dst| {
        dst.copy_from_slice(&data[idx]);
        idx += 1;
    });
    Ok(p)
}
