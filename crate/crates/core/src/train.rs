//! Single-stage training loop: batched gradient accumulation over
//! training rollouts, gradient clipping, SGD or Adam updates, and
//! per-epoch validation by exact-match answer accuracy.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::chain::EncodedInstance;
use crate::error::{Error, Result};
use crate::objective::{rollout_grad, LossWeights, RolloutConfig, SemSpace};
use crate::prior::{PriorConfig, PriorStore};
use crate::reasoner::{infer, ModelDims, ReasonerParams, SamplingConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam,
}

/// Everything the `train` entry point needs besides the data itself.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub seed: u64,
    pub weights: LossWeights,
    pub teacher_forcing: bool,
    pub gradient_clip: f64,
    pub sem_space: SemSpace,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    /// Sampling settings for validation inference.
    pub eval: SamplingConfig,
    /// Reference to the prior configuration the priors file was built
    /// with; when present, the store's method is checked against it.
    pub prior: Option<PriorConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 16,
            learning_rate: 3e-3,
            optimizer: Optimizer::Adam,
            seed: 777,
            weights: LossWeights::default(),
            teacher_forcing: false,
            gradient_clip: 1.0,
            sem_space: SemSpace::Hidden,
            embed_dim: 32,
            hidden_dim: 64,
            eval: SamplingConfig::default(),
            prior: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("learning_rate must be positive".into()));
        }
        if !(self.gradient_clip > 0.0) {
            return Err(Error::InvalidConfig("gradient_clip must be positive".into()));
        }
        if self.embed_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::InvalidConfig("model dims must be positive".into()));
        }
        self.weights.validate()?;
        self.eval.validate()
    }

    pub fn rollout(&self) -> RolloutConfig {
        RolloutConfig {
            teacher_forcing: self.teacher_forcing,
            sem_space: self.sem_space,
        }
    }
}

/// One row of the training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub l_ce: f64,
    pub l_kl: f64,
    pub l_sem: f64,
    pub l_total: f64,
    pub val_acc: f64,
}

struct AdamState {
    m: ReasonerParams,
    v: ReasonerParams,
    step: usize,
}

fn apply_update(
    params: &mut ReasonerParams,
    grads: &ReasonerParams,
    cfg: &TrainConfig,
    adam: &mut Option<AdamState>,
) {
    match cfg.optimizer {
        Optimizer::Sgd => {
            let lr = cfg.learning_rate;
            params.zip_apply(grads, move |p, g| *p -= lr * g);
        }
        Optimizer::Adam => {
            let state = adam.as_mut().expect("adam state initialized");
            state.step += 1;
            const BETA1: f64 = 0.9;
            const BETA2: f64 = 0.999;
            const EPS: f64 = 1e-8;
            state
                .m
                .zip_apply(grads, |m, g| *m = BETA1 * *m + (1.0 - BETA1) * g);
            state
                .v
                .zip_apply(grads, |v, g| *v = BETA2 * *v + (1.0 - BETA2) * g * g);
            let c1 = 1.0 - BETA1.powi(state.step as i32);
            let c2 = 1.0 - BETA2.powi(state.step as i32);
            let lr = cfg.learning_rate;
            let n = params.param_count();
            for i in 0..n {
                let m = state.m.get_flat(i) / c1;
                let v = state.v.get_flat(i) / c2;
                let p = params.get_flat(i);
                params.set_flat(i, p - lr * m / (v.sqrt() + EPS));
            }
        }
    }
}

/// Exact-match accuracy of greedy-decoded answers over a dataset slice.
/// Empty input evaluates to 0.
pub fn evaluate_exact_match(
    params: &ReasonerParams,
    instances: &[EncodedInstance],
    eval: &SamplingConfig,
) -> Result<f64> {
    if instances.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for inst in instances {
        let trace = infer(&inst.question_ids, params, eval)?;
        if trace.decoded_answer == inst.answer_ids {
            correct += 1;
        }
    }
    Ok(correct as f64 / instances.len() as f64)
}

/// Runs the single-stage training loop and returns the parameters of the
/// best-validation epoch (ties keep the earlier epoch) plus the history.
/// Fully deterministic given the config.
pub fn train_epochs(
    train: &[EncodedInstance],
    val: &[EncodedInstance],
    priors: &PriorStore,
    vocab_size: usize,
    cfg: &TrainConfig,
) -> Result<(ReasonerParams, Vec<EpochStats>)> {
    cfg.validate()?;
    if let Some(prior_cfg) = &cfg.prior {
        for ip in &priors.instances {
            if ip.method != prior_cfg.method {
                return Err(Error::InvalidConfig(format!(
                    "priors file was built with method {:?}, config references {:?}",
                    ip.method, prior_cfg.method
                )));
            }
        }
    }
    for inst in train {
        priors.get(inst.index)?;
    }

    let dims = ModelDims::new(vocab_size, cfg.embed_dim, cfg.hidden_dim);
    let mut params = ReasonerParams::init(dims, cfg.seed);
    let mut adam = match cfg.optimizer {
        Optimizer::Adam => Some(AdamState {
            m: ReasonerParams::zeros(dims),
            v: ReasonerParams::zeros(dims),
            step: 0,
        }),
        Optimizer::Sgd => None,
    };
    let rcfg = cfg.rollout();

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, ReasonerParams)> = None;

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64));
        order.shuffle(&mut rng);

        let (mut s_ce, mut s_kl, mut s_sem, mut s_total) = (0.0, 0.0, 0.0, 0.0);
        for (batch_no, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut grads = ReasonerParams::zeros(dims);
            for &i in batch {
                let inst = &train[i];
                let (report, g) =
                    rollout_grad(&params, inst, priors.get(inst.index)?, &cfg.weights, &rcfg)?;
                if !report.is_finite() {
                    return Err(Error::NonFinite {
                        what: "loss".into(),
                        epoch,
                        batch: batch_no,
                    });
                }
                s_ce += report.l_ce;
                s_kl += report.l_kl;
                s_sem += report.l_sem;
                s_total += report.l_total;
                grads.zip_apply(&g, |a, b| *a += b);
            }
            grads.scale(1.0 / batch.len() as f64);
            let norm = grads.l2_norm();
            if !norm.is_finite() {
                return Err(Error::NonFinite {
                    what: "gradient norm".into(),
                    epoch,
                    batch: batch_no,
                });
            }
            if norm > cfg.gradient_clip {
                grads.scale(cfg.gradient_clip / norm);
            }
            apply_update(&mut params, &grads, cfg, &mut adam);
        }

        let denom = train.len().max(1) as f64;
        let val_acc = evaluate_exact_match(&params, val, &cfg.eval)?;
        history.push(EpochStats {
            epoch,
            l_ce: s_ce / denom,
            l_kl: s_kl / denom,
            l_sem: s_sem / denom,
            l_total: s_total / denom,
            val_acc,
        });

        let improved = match &best {
            None => true,
            Some((acc, _)) => val_acc > *acc || val.is_empty(),
        };
        if improved {
            best = Some((val_acc, params.clone()));
        }
    }

    let final_params = match best {
        Some((_, p)) => p,
        None => params,
    };
    Ok((final_params, history))
}

/// Writes the history as CSV with fixed headers and 6-decimal floats.
pub fn write_history_csv(history: &[EpochStats], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "epoch,l_ce,l_kl,l_sem,l_total,val_acc").map_err(|e| Error::io(path, e))?;
    for row in history {
        writeln!(
            w,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            row.epoch, row.l_ce, row.l_kl, row.l_sem, row.l_total, row.val_acc
        )
        .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
