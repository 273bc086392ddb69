//! The three-term joint loss and its gradients.
//!
//! One training rollout runs the core over BOS + question, exactly N
//! latent steps, the answer separator, and the teacher-forced answer.
//! Cross-entropy supervises the `</think>` emission after step N, every
//! answer token, and a trailing PAD that teaches answer decoding to stop.
//! The focused KL term aligns each latent distribution with its
//! rule-based prior on the selected focus tokens, and the semantic term
//! keeps each latent hidden state close to the question representation.
//! Backpropagation is hand-rolled and verified against central finite
//! differences in [`gradient_check`].

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::chain::{EncodedInstance, TokenId, ANSWER_SEP, BOS, PAD, THINK_END};
use crate::error::{Error, Result};
use crate::math::{kl_divergence, log_softmax, softmax};
use crate::prior::{FocusSet, InstancePriors, SparsePrior};
use crate::reasoner::{gru_step, head_logits, mix_embedding, GruCache, ReasonerParams};

/// Weights of the three loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub ce: f64,
    pub kl: f64,
    pub sem: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            ce: 1.0,
            kl: 1.0,
            sem: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.ce < 0.0 || self.kl < 0.0 || self.sem < 0.0 {
            return Err(Error::InvalidConfig("loss weights must be >= 0".into()));
        }
        if self.ce == 0.0 && self.kl == 0.0 && self.sem == 0.0 {
            return Err(Error::InvalidConfig(
                "at least one loss weight must be > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Which space the semantic constraint compares in: raw hidden
/// coordinates, or vocabulary logits through the output head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SemSpace {
    Hidden,
    Vocab,
}

/// Per-instance (or per-batch mean) loss values and diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub l_ce: f64,
    pub l_kl: f64,
    pub l_sem: f64,
    pub l_total: f64,
    pub per_step_kl: Vec<f64>,
    pub focused_token_counts: Vec<usize>,
}

impl LossReport {
    fn new(weights: &LossWeights, l_ce: f64, l_kl: f64, l_sem: f64) -> LossReport {
        LossReport {
            l_ce,
            l_kl,
            l_sem,
            l_total: loss_total(weights, l_ce, l_kl, l_sem),
            per_step_kl: Vec::new(),
            focused_token_counts: Vec::new(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.l_ce.is_finite() && self.l_kl.is_finite() && self.l_sem.is_finite()
    }
}

/// Mean negative log-probability of `targets` under `logits`, one logit
/// vector per supervised position.
pub fn loss_answer_ce(logits: &[Vec<f64>], targets: &[TokenId]) -> Result<f64> {
    if logits.len() != targets.len() {
        return Err(Error::LengthMismatch {
            what: "cross-entropy positions".into(),
            expected: targets.len(),
            got: logits.len(),
        });
    }
    if targets.is_empty() {
        return Err(Error::InvalidConfig("no supervised positions".into()));
    }
    let mut acc = 0.0;
    for (l, &t) in logits.iter().zip(targets) {
        acc -= log_softmax(l)[t as usize];
    }
    Ok(acc / targets.len() as f64)
}

/// Focused KL divergence: the prior-weighted log ratio summed over each
/// step's focus set, averaged over steps. Steps with an empty focus set
/// contribute zero.
pub fn loss_focused_kl(
    q_steps: &[Vec<f64>],
    priors: &[SparsePrior],
    focus: &[FocusSet],
) -> Result<f64> {
    let n = q_steps.len();
    if n == 0 {
        return Err(Error::InvalidConfig("no latent steps".into()));
    }
    if priors.len() != n || focus.len() != n {
        return Err(Error::LengthMismatch {
            what: "priors/focus per step".into(),
            expected: n,
            got: priors.len().min(focus.len()),
        });
    }
    let mut acc = 0.0;
    for ((q, prior), f) in q_steps.iter().zip(priors).zip(focus) {
        for &v in &f.selected_ids {
            let p = prior.prob(v);
            if p > 0.0 {
                acc += p * (p.ln() - q[v as usize].ln());
            }
        }
    }
    Ok(acc / n as f64)
}

/// Semantic coherence in hidden space: the mean over latent steps of
/// KL(softmax(h_q) || softmax(h_z)), softmax over hidden coordinates.
pub fn loss_semantic(h_q: &[f64], h_zs: &[Vec<f64>]) -> Result<f64> {
    if h_zs.is_empty() {
        return Err(Error::InvalidConfig("no latent hidden states".into()));
    }
    let p = softmax(h_q);
    let mut acc = 0.0;
    for h_z in h_zs {
        if h_z.len() != h_q.len() {
            return Err(Error::LengthMismatch {
                what: "hidden state width".into(),
                expected: h_q.len(),
                got: h_z.len(),
            });
        }
        acc += kl_divergence(&p, &softmax(h_z));
    }
    Ok(acc / h_zs.len() as f64)
}

/// Weighted sum of the three terms.
pub fn loss_total(w: &LossWeights, l_ce: f64, l_kl: f64, l_sem: f64) -> f64 {
    w.ce * l_ce + w.kl * l_kl + w.sem * l_sem
}

/// How latent inputs are produced during a training rollout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RolloutConfig {
    /// Feed prior-mixed embeddings instead of the model's own mixtures.
    pub teacher_forcing: bool,
    pub sem_space: SemSpace,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        RolloutConfig {
            teacher_forcing: false,
            sem_space: SemSpace::Hidden,
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum InputKind {
    Discrete(TokenId),
    /// 1-based latent step whose mixed distribution was fed.
    Soft(usize),
}

/// Forward caches of one training rollout.
struct Rollout {
    inputs: Vec<InputKind>,
    xs: Vec<Vec<f64>>,
    caches: Vec<GruCache>,
    /// Dense latent distribution per step (the KL-supervised q).
    latent_q: Vec<Vec<f64>>,
    latent_logq: Vec<Vec<f64>>,
    /// Distribution actually mixed into each latent input.
    mixed: Vec<Vec<f64>>,
    /// Softmax, log-softmax, and target of each cross-entropy position.
    ce_q: Vec<Vec<f64>>,
    ce_logq: Vec<Vec<f64>>,
    ce_targets: Vec<TokenId>,
    lq: usize,
    n: usize,
}

impl Rollout {
    /// Hidden state after t inputs (t >= 1).
    fn state(&self, t: usize) -> &[f64] {
        &self.caches[t - 1].h
    }

    fn h_q(&self) -> &[f64] {
        self.state(self.lq + 1)
    }

    fn h_z(&self, j: usize) -> &[f64] {
        self.state(self.lq + 1 + j)
    }
}

fn run_forward(
    params: &ReasonerParams,
    inst: &EncodedInstance,
    priors: &InstancePriors,
    rcfg: &RolloutConfig,
) -> Result<Rollout> {
    let n = inst.step_count();
    if n == 0 {
        return Err(Error::NoSteps);
    }
    if priors.steps.len() != n || priors.focus.len() != n {
        return Err(Error::LengthMismatch {
            what: format!("priors for instance {}", inst.index),
            expected: n,
            got: priors.steps.len(),
        });
    }
    if inst.question_ids.is_empty() {
        return Err(Error::InvalidConfig("empty question".into()));
    }
    let vocab = params.dims.vocab_size;
    let mut ro = Rollout {
        inputs: Vec::new(),
        xs: Vec::new(),
        caches: Vec::new(),
        latent_q: Vec::new(),
        latent_logq: Vec::new(),
        mixed: Vec::new(),
        ce_q: Vec::new(),
        ce_logq: Vec::new(),
        ce_targets: Vec::new(),
        lq: inst.question_ids.len(),
        n,
    };

    let mut h = vec![0.0; params.dims.hidden_dim];

    fn push_discrete(
        params: &ReasonerParams,
        ro: &mut Rollout,
        h: &mut Vec<f64>,
        id: TokenId,
    ) -> Result<()> {
        if id as usize >= params.dims.vocab_size {
            return Err(Error::OutOfVocab(format!("id {id}")));
        }
        let x = params.embedding.row(id as usize).to_vec();
        let cache = gru_step(params, h, &x);
        *h = cache.h.clone();
        ro.inputs.push(InputKind::Discrete(id));
        ro.xs.push(x);
        ro.caches.push(cache);
        Ok(())
    }

    fn push_ce(params: &ReasonerParams, ro: &mut Rollout, h: &[f64], target: TokenId) {
        let logits = head_logits(params, h);
        ro.ce_q.push(softmax(&logits));
        ro.ce_logq.push(log_softmax(&logits));
        ro.ce_targets.push(target);
    }

    push_discrete(params, &mut ro, &mut h, BOS)?;
    for &id in &inst.question_ids {
        push_discrete(params, &mut ro, &mut h, id)?;
    }

    for j in 1..=n {
        let logits = head_logits(params, &h);
        let q = softmax(&logits);
        let logq = log_softmax(&logits);
        let dist = if rcfg.teacher_forcing {
            priors.steps[j - 1].to_dense(vocab)
        } else {
            q.clone()
        };
        let x = mix_embedding(&dist, &params.embedding)?;
        let cache = gru_step(params, &h, &x);
        h = cache.h.clone();
        ro.latent_q.push(q);
        ro.latent_logq.push(logq);
        ro.mixed.push(dist);
        ro.inputs.push(InputKind::Soft(j));
        ro.xs.push(x);
        ro.caches.push(cache);
    }

    push_ce(params, &mut ro, &h, THINK_END);
    push_discrete(params, &mut ro, &mut h, ANSWER_SEP)?;
    for &id in &inst.answer_ids {
        push_ce(params, &mut ro, &h, id);
        push_discrete(params, &mut ro, &mut h, id)?;
    }
    push_ce(params, &mut ro, &h, PAD);

    Ok(ro)
}

fn losses_from_rollout(
    ro: &Rollout,
    priors: &InstancePriors,
    weights: &LossWeights,
    rcfg: &RolloutConfig,
) -> LossReport {
    let m = ro.ce_targets.len() as f64;
    let l_ce = ro
        .ce_logq
        .iter()
        .zip(&ro.ce_targets)
        .map(|(lq, &t)| -lq[t as usize])
        .sum::<f64>()
        / m;

    let mut per_step_kl = Vec::with_capacity(ro.n);
    let mut focused_counts = Vec::with_capacity(ro.n);
    for j in 0..ro.n {
        let mut acc = 0.0;
        for &v in &priors.focus[j].selected_ids {
            let p = priors.steps[j].prob(v);
            if p > 0.0 {
                acc += p * (p.ln() - ro.latent_logq[j][v as usize]);
            }
        }
        per_step_kl.push(acc);
        focused_counts.push(priors.focus[j].selected_ids.len());
    }
    let l_kl = per_step_kl.iter().sum::<f64>() / ro.n as f64;

    let l_sem = match rcfg.sem_space {
        SemSpace::Hidden => {
            let p = softmax(ro.h_q());
            (1..=ro.n)
                .map(|j| kl_divergence(&p, &softmax(ro.h_z(j))))
                .sum::<f64>()
                / ro.n as f64
        }
        SemSpace::Vocab => {
            // softmax(head(h_q)) is the first latent distribution, and
            // softmax(head(h_z_j)) is the next latent (or think-end)
            // head, so everything is already cached.
            let p = &ro.latent_q[0];
            (1..=ro.n)
                .map(|j| {
                    let s = if j < ro.n { &ro.latent_q[j] } else { &ro.ce_q[0] };
                    kl_divergence(p, s)
                })
                .sum::<f64>()
                / ro.n as f64
        }
    };

    let mut report = LossReport::new(weights, l_ce, l_kl, l_sem);
    report.per_step_kl = per_step_kl;
    report.focused_token_counts = focused_counts;
    report
}

/// Forward-only loss of one rollout.
pub fn rollout_loss(
    params: &ReasonerParams,
    inst: &EncodedInstance,
    priors: &InstancePriors,
    weights: &LossWeights,
    rcfg: &RolloutConfig,
) -> Result<LossReport> {
    weights.validate()?;
    let ro = run_forward(params, inst, priors, rcfg)?;
    Ok(losses_from_rollout(&ro, priors, weights, rcfg))
}

/// d(softmax)/d(logits) applied to an upstream dq: q ⊙ dq - q (q · dq).
fn softmax_backward(q: &[f64], dq: &[f64]) -> Vec<f64> {
    let inner: f64 = q.iter().zip(dq).map(|(a, b)| a * b).sum();
    q.iter()
        .zip(dq)
        .map(|(&qi, &di)| qi * (di - inner))
        .collect()
}

fn gru_backward(
    p: &ReasonerParams,
    cache: &GruCache,
    x: &[f64],
    dh_new: &[f64],
    grads: &mut ReasonerParams,
) -> (Vec<f64>, Vec<f64>) {
    let dh = p.dims.hidden_dim;
    let mut dh_prev = vec![0.0; dh];
    let mut dx = vec![0.0; p.dims.embed_dim];
    let mut da_cand = vec![0.0; dh];
    let mut da_update = vec![0.0; dh];
    for i in 0..dh {
        let g = dh_new[i];
        let dz = g * (cache.cand[i] - cache.h_prev[i]);
        let dc = g * cache.update[i];
        dh_prev[i] += g * (1.0 - cache.update[i]);
        da_cand[i] = dc * (1.0 - cache.cand[i] * cache.cand[i]);
        da_update[i] = dz * cache.update[i] * (1.0 - cache.update[i]);
    }
    grads.w_cand.outer_accum(&da_cand, x);
    grads.u_cand.outer_accum(&da_cand, &cache.reset_h);
    for i in 0..dh {
        grads.b_cand[i] += da_cand[i];
    }
    p.w_cand.matvec_t_accum(&da_cand, &mut dx);
    let mut d_reset_h = vec![0.0; dh];
    p.u_cand.matvec_t_accum(&da_cand, &mut d_reset_h);
    let mut da_reset = vec![0.0; dh];
    for i in 0..dh {
        let dr = d_reset_h[i] * cache.h_prev[i];
        dh_prev[i] += d_reset_h[i] * cache.reset[i];
        da_reset[i] = dr * cache.reset[i] * (1.0 - cache.reset[i]);
    }
    grads.w_update.outer_accum(&da_update, x);
    grads.u_update.outer_accum(&da_update, &cache.h_prev);
    grads.w_reset.outer_accum(&da_reset, x);
    grads.u_reset.outer_accum(&da_reset, &cache.h_prev);
    for i in 0..dh {
        grads.b_update[i] += da_update[i];
        grads.b_reset[i] += da_reset[i];
    }
    p.w_update.matvec_t_accum(&da_update, &mut dx);
    p.u_update.matvec_t_accum(&da_update, &mut dh_prev);
    p.w_reset.matvec_t_accum(&da_reset, &mut dx);
    p.u_reset.matvec_t_accum(&da_reset, &mut dh_prev);
    (dh_prev, dx)
}

/// Loss and parameter gradients of one rollout.
pub fn rollout_grad(
    params: &ReasonerParams,
    inst: &EncodedInstance,
    priors: &InstancePriors,
    weights: &LossWeights,
    rcfg: &RolloutConfig,
) -> Result<(LossReport, ReasonerParams)> {
    weights.validate()?;
    let ro = run_forward(params, inst, priors, rcfg)?;
    let report = losses_from_rollout(&ro, priors, weights, rcfg);

    let mut grads = ReasonerParams::zeros(params.dims);
    let t_total = ro.inputs.len();
    let mut d_state = vec![vec![0.0; params.dims.hidden_dim]; t_total + 1];
    // dL/d(mixed_j) accumulated from the soft-input route, 1-based.
    let mut dq_feedback: Vec<Option<Vec<f64>>> = vec![None; ro.n + 1];
    let nf = ro.n as f64;
    let m = ro.ce_targets.len() as f64;

    // Semantic term, hidden space: direct gradients on h_q and each h_z.
    if weights.sem > 0.0 && rcfg.sem_space == SemSpace::Hidden {
        let p = softmax(ro.h_q());
        let mut dhq = vec![0.0; p.len()];
        for j in 1..=ro.n {
            let s = softmax(ro.h_z(j));
            let kl = kl_divergence(&p, &s);
            let dz = &mut d_state[ro.lq + 1 + j];
            for i in 0..p.len() {
                dz[i] += weights.sem / nf * (s[i] - p[i]);
                dhq[i] += weights.sem / nf * p[i] * ((p[i].ln() - s[i].ln()) - kl);
            }
        }
        for (a, b) in d_state[ro.lq + 1].iter_mut().zip(&dhq) {
            *a += b;
        }
    }

    // Semantic term, vocab space: direct logit gradients on the heads
    // that realize p = softmax(head(h_q)) and s_j = softmax(head(h_z_j)).
    // Slot j holds the gradient for the head producing s_j (latent head
    // j+1 for j < n, the think-end CE head for j = n); slot 0 is p's own
    // head (latent head 1).
    let mut sem_vocab_dlogits: Vec<Option<Vec<f64>>> = vec![None; ro.n + 1];
    if weights.sem > 0.0 && rcfg.sem_space == SemSpace::Vocab {
        let p = &ro.latent_q[0];
        let mut dl_p = vec![0.0; p.len()];
        for j in 1..=ro.n {
            let s = if j < ro.n { &ro.latent_q[j] } else { &ro.ce_q[0] };
            let kl = kl_divergence(p, s);
            let mut dl_s = vec![0.0; p.len()];
            for i in 0..p.len() {
                dl_s[i] += weights.sem / nf * (s[i] - p[i]);
                dl_p[i] += weights.sem / nf * p[i] * ((p[i].ln() - s[i].ln()) - kl);
            }
            sem_vocab_dlogits[j] = Some(dl_s);
        }
        sem_vocab_dlogits[0] = Some(dl_p);
    }

    let ce_state_base = ro.lq + ro.n + 1;
    for t in (0..t_total).rev() {
        let sp = t + 1;

        // Latent head j reads state lq + j.
        if sp > ro.lq && sp <= ro.lq + ro.n {
            let j = sp - ro.lq;
            let q = &ro.latent_q[j - 1];
            let mut dq = vec![0.0; q.len()];
            let mut any = false;
            if weights.kl > 0.0 {
                for &v in &priors.focus[j - 1].selected_ids {
                    let p = priors.steps[j - 1].prob(v);
                    if p > 0.0 {
                        // -w_kl * p / (N q_v), with the ratio in log space.
                        dq[v as usize] -=
                            weights.kl / nf * (p.ln() - ro.latent_logq[j - 1][v as usize]).exp();
                        any = true;
                    }
                }
            }
            if let Some(fb) = dq_feedback[j].take() {
                for (a, b) in dq.iter_mut().zip(&fb) {
                    *a += b;
                }
                any = true;
            }
            let mut dlogits = if any {
                softmax_backward(q, &dq)
            } else {
                vec![0.0; q.len()]
            };
            if let Some(extra) = sem_vocab_dlogits[j - 1].take() {
                for (a, b) in dlogits.iter_mut().zip(&extra) {
                    *a += b;
                }
                any = true;
            }
            if any {
                grads.w_out.outer_accum(&dlogits, ro.state(sp));
                for (g, d) in grads.b_out.iter_mut().zip(&dlogits) {
                    *g += d;
                }
                params.w_out.matvec_t_accum(&dlogits, &mut d_state[sp]);
            }
        }

        // Cross-entropy heads read states ce_state_base..=t_total.
        if sp >= ce_state_base {
            let idx = sp - ce_state_base;
            let q = &ro.ce_q[idx];
            let target = ro.ce_targets[idx] as usize;
            let mut dlogits: Vec<f64> = q.iter().map(|&qi| weights.ce / m * qi).collect();
            dlogits[target] -= weights.ce / m;
            let mut any = weights.ce > 0.0;
            if idx == 0 {
                if let Some(extra) = sem_vocab_dlogits[ro.n].take() {
                    for (a, b) in dlogits.iter_mut().zip(&extra) {
                        *a += b;
                    }
                    any = true;
                }
            }
            if any {
                grads.w_out.outer_accum(&dlogits, ro.state(sp));
                for (g, d) in grads.b_out.iter_mut().zip(&dlogits) {
                    *g += d;
                }
                params.w_out.matvec_t_accum(&dlogits, &mut d_state[sp]);
            }
        }

        let (dh_prev, dx) =
            gru_backward(params, &ro.caches[t], &ro.xs[t], &d_state[sp], &mut grads);
        for (a, b) in d_state[t].iter_mut().zip(&dh_prev) {
            *a += b;
        }
        match ro.inputs[t] {
            InputKind::Discrete(id) => {
                let row = grads.embedding.row_mut(id as usize);
                for (g, d) in row.iter_mut().zip(&dx) {
                    *g += d;
                }
            }
            InputKind::Soft(j) => {
                let dist = &ro.mixed[j - 1];
                grads.embedding.outer_accum(dist, &dx);
                if !rcfg.teacher_forcing {
                    // The mixed distribution is the latent head's own q;
                    // route dL/dx back into dq for that head.
                    let fb = params.embedding.matvec(&dx);
                    dq_feedback[j] = Some(match dq_feedback[j].take() {
                        Some(mut acc) => {
                            for (a, b) in acc.iter_mut().zip(&fb) {
                                *a += b;
                            }
                            acc
                        }
                        None => fb,
                    });
                }
            }
        }
    }

    Ok((report, grads))
}

/// Options for [`gradient_check`].
#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Number of randomly selected parameters to probe.
    pub samples: usize,
    pub seed: u64,
    pub rollout: RolloutConfig,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            samples: 200,
            seed: 777,
            rollout: RolloutConfig {
                teacher_forcing: true,
                sem_space: SemSpace::Hidden,
            },
        }
    }
}

/// Compares analytic gradients against central finite differences of the
/// total loss on randomly selected parameters. Returns the maximum
/// relative error, with denominators floored at 1e-8.
pub fn gradient_check(
    params: &ReasonerParams,
    inst: &EncodedInstance,
    priors: &InstancePriors,
    weights: &LossWeights,
    eps: f64,
    opts: &GradCheckOptions,
) -> Result<f64> {
    if !(1e-6..=1e-4).contains(&eps) {
        return Err(Error::InvalidConfig(format!(
            "eps must be in [1e-6, 1e-4], got {eps}"
        )));
    }
    let (report, grads) = rollout_grad(params, inst, priors, weights, &opts.rollout)?;
    if !report.is_finite() {
        return Err(Error::NonFinite {
            what: "loss".into(),
            epoch: 0,
            batch: 0,
        });
    }
    let count = params.param_count();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let picks: Vec<usize> = if opts.samples >= count {
        (0..count).collect()
    } else {
        rand::seq::index::sample(&mut rng, count, opts.samples).into_vec()
    };
    let mut max_rel = 0.0;
    let mut probe = params.clone();
    for &i in &picks {
        let orig = probe.get_flat(i);
        probe.set_flat(i, orig + eps);
        let plus = rollout_loss(&probe, inst, priors, weights, &opts.rollout)?.l_total;
        probe.set_flat(i, orig - eps);
        let minus = rollout_loss(&probe, inst, priors, weights, &opts.rollout)?.l_total;
        probe.set_flat(i, orig);
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite {
                what: "perturbed loss".into(),
                epoch: 0,
                batch: 0,
            });
        }
        let numeric = (plus - minus) / (2.0 * eps);
        let analytic = grads.get_flat(i);
        let rel = (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}
