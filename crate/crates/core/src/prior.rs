//! Rule-based prior construction: per-step sparse distributions over the
//! vocabulary built from operational and result tokens, in temperature,
//! Gumbel-Softmax, and mixture variants, plus the selective focus sets
//! used by the focused KL loss.
//!
//! Uniform and random variants are ablation baselines, not part of the
//! rule-based family proper.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::chain::{encode_instance, ReasoningStep, TokenId, Vocabulary};
use crate::corpus::Instance;
use crate::error::{Error, Result};

/// Prior construction method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorMethod {
    Temp,
    Gumbel,
    Mix,
    /// Ablation: equal probability on every extracted token.
    Uniform,
    /// Ablation: random token importance on the extracted support.
    Random,
}

impl PriorMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            PriorMethod::Temp => "temp",
            PriorMethod::Gumbel => "gumbel",
            PriorMethod::Mix => "mix",
            PriorMethod::Uniform => "uniform",
            PriorMethod::Random => "random",
        }
    }

    pub fn parse(s: &str) -> Option<PriorMethod> {
        match s {
            "temp" => Some(PriorMethod::Temp),
            "gumbel" => Some(PriorMethod::Gumbel),
            "mix" => Some(PriorMethod::Mix),
            "uniform" => Some(PriorMethod::Uniform),
            "random" => Some(PriorMethod::Random),
            _ => None,
        }
    }
}

/// Hyperparameters for prior construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorConfig {
    pub method: PriorMethod,
    /// Softmax temperature, > 0.
    pub tau: f64,
    /// Logit assigned to operational tokens.
    pub beta_op: f64,
    /// Logit assigned to result tokens; must exceed `beta_op`.
    pub beta_res: f64,
    /// Mixture weight on the uniform-over-operational component, in [0, 1].
    pub lambda: f64,
    /// Gumbel only: emit a one-hot on the noisy argmax.
    pub hard: bool,
    pub seed: u64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            method: PriorMethod::Mix,
            tau: 0.5,
            beta_op: 2.0,
            beta_res: 2.8,
            lambda: 0.2,
            hard: false,
            seed: 777,
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::InvalidConfig(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(self.beta_res > self.beta_op) {
            return Err(Error::InvalidConfig(format!(
                "beta_res ({}) must exceed beta_op ({})",
                self.beta_res, self.beta_op
            )));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::InvalidConfig(format!(
                "lambda must be in [0, 1], got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// Focus selection parameters for the focused KL loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FocusConfig {
    /// Keep at most this many tokens.
    pub k: usize,
    /// Keep only tokens with prior probability strictly above this.
    pub delta: f64,
}

impl Default for FocusConfig {
    fn default() -> Self {
        FocusConfig { k: 5, delta: 1e-2 }
    }
}

impl FocusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidConfig("focus k must be >= 1".into()));
        }
        if self.delta < 0.0 {
            return Err(Error::InvalidConfig("focus delta must be >= 0".into()));
        }
        Ok(())
    }
}

/// Sparse probability vector over the vocabulary for one reasoning step.
/// Tokens absent from `entries` carry exactly zero probability (the
/// minus-infinity logit convention); stored entries are strictly positive
/// and sorted by token id.
#[derive(Debug, Clone, PartialEq)]
pub struct SparsePrior {
    pub step_index: usize,
    pub entries: Vec<(TokenId, f64)>,
}

impl SparsePrior {
    fn from_map(step_index: usize, map: BTreeMap<TokenId, f64>) -> SparsePrior {
        SparsePrior {
            step_index,
            entries: map.into_iter().filter(|&(_, p)| p > 0.0).collect(),
        }
    }

    pub fn prob(&self, id: TokenId) -> f64 {
        self.entries
            .binary_search_by_key(&id, |&(t, _)| t)
            .map(|i| self.entries[i].1)
            .unwrap_or(0.0)
    }

    pub fn support(&self) -> impl Iterator<Item = TokenId> + '_ {
        self.entries.iter().map(|&(t, _)| t)
    }

    pub fn total(&self) -> f64 {
        self.entries.iter().map(|&(_, p)| p).sum()
    }

    /// Expands to a dense length-`vocab_size` vector.
    pub fn to_dense(&self, vocab_size: usize) -> Vec<f64> {
        let mut out = vec![0.0; vocab_size];
        for &(t, p) in &self.entries {
            out[t as usize] = p;
        }
        out
    }
}

/// Ordered focus set for one step: at most `k` ids, descending prior
/// probability, ties broken by ascending token id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FocusSet {
    pub k: usize,
    pub delta: f64,
    pub selected_ids: Vec<TokenId>,
}

/// Sparse logit map for one step: `beta_op` on operational tokens,
/// `beta_res` on result tokens (the result write wins on overlap).
/// Absent tokens are implicitly at minus infinity.
pub fn init_step_logits(step: &ReasoningStep, cfg: &PriorConfig) -> Result<BTreeMap<TokenId, f64>> {
    cfg.validate()?;
    let mut logits = BTreeMap::new();
    for &v in &step.operational_ids {
        logits.insert(v, cfg.beta_op);
    }
    for &v in &step.result_ids {
        logits.insert(v, cfg.beta_res);
    }
    Ok(logits)
}

/// Softmax of `logits / tau` over the finite support.
pub fn prior_temperature(
    logits: &BTreeMap<TokenId, f64>,
    tau: f64,
    step_index: usize,
) -> Result<SparsePrior> {
    if logits.is_empty() {
        return Err(Error::EmptySupport);
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidConfig(format!("tau must be > 0, got {tau}")));
    }
    let max = logits.values().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut weights: Vec<(TokenId, f64)> = logits
        .iter()
        .map(|(&t, &l)| (t, ((l - max) / tau).exp()))
        .collect();
    let sum: f64 = weights.iter().map(|&(_, w)| w).sum();
    for (_, w) in &mut weights {
        *w /= sum;
    }
    Ok(SparsePrior {
        step_index,
        entries: weights,
    })
}

/// Gumbel-Softmax over the finite support with caller-provided noise,
/// one value per support token in ascending id order. With `hard`, the
/// output is a one-hot on the noisy argmax (ties to the lowest id).
pub fn prior_gumbel(
    logits: &BTreeMap<TokenId, f64>,
    tau: f64,
    noise: &[f64],
    hard: bool,
    step_index: usize,
) -> Result<SparsePrior> {
    if logits.is_empty() {
        return Err(Error::EmptySupport);
    }
    if noise.len() != logits.len() {
        return Err(Error::LengthMismatch {
            what: "gumbel noise".into(),
            expected: logits.len(),
            got: noise.len(),
        });
    }
    let perturbed: BTreeMap<TokenId, f64> = logits
        .iter()
        .zip(noise)
        .map(|((&t, &l), &g)| (t, l + g))
        .collect();
    if hard {
        let mut best: Option<(TokenId, f64)> = None;
        for (&t, &l) in &perturbed {
            match best {
                Some((_, bl)) if l <= bl => {}
                _ => best = Some((t, l)),
            }
        }
        let (t, _) = best.unwrap();
        return Ok(SparsePrior {
            step_index,
            entries: vec![(t, 1.0)],
        });
    }
    prior_temperature(&perturbed, tau, step_index)
}

/// Standard Gumbel(0,1) noise for one step, derived deterministically
/// from (seed, instance index, step index).
pub fn gumbel_noise(seed: u64, instance_index: usize, step_index: usize, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((instance_index as u64) << 16 | (step_index as u64 & 0xffff));
    (0..n)
        .map(|_| {
            let u: f64 = rng.sample(rand::distr::Open01);
            -(-u.ln()).ln()
        })
        .collect()
}

/// Convex combination of a uniform distribution over operational tokens
/// and a point (or uniform-over-pieces) distribution on result tokens.
pub fn prior_mixture(step: &ReasoningStep, lambda: f64) -> Result<SparsePrior> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidConfig(format!(
            "lambda must be in [0, 1], got {lambda}"
        )));
    }
    if step.operational_ids.is_empty() || step.result_ids.is_empty() {
        return Err(Error::EmptySupport);
    }
    let mut map: BTreeMap<TokenId, f64> = BTreeMap::new();
    let u = lambda / step.operational_ids.len() as f64;
    for &v in &step.operational_ids {
        *map.entry(v).or_insert(0.0) += u;
    }
    let r = (1.0 - lambda) / step.result_ids.len() as f64;
    for &v in &step.result_ids {
        *map.entry(v).or_insert(0.0) += r;
    }
    Ok(SparsePrior::from_map(step.index, map))
}

/// Ablation baseline: equal probability on every extracted token.
pub fn prior_uniform(step: &ReasoningStep) -> Result<SparsePrior> {
    let support: Vec<TokenId> = step
        .operational_ids
        .iter()
        .copied()
        .chain(step.result_ids.iter().copied())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    if support.is_empty() {
        return Err(Error::EmptySupport);
    }
    let p = 1.0 / support.len() as f64;
    Ok(SparsePrior {
        step_index: step.index,
        entries: support.into_iter().map(|t| (t, p)).collect(),
    })
}

/// Ablation baseline: random importance weights on the extracted support,
/// derived from the same counter scheme as the Gumbel noise.
pub fn prior_random(
    step: &ReasoningStep,
    seed: u64,
    instance_index: usize,
) -> Result<SparsePrior> {
    let uniform = prior_uniform(step)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((instance_index as u64) << 16 | (step.index as u64 & 0xffff));
    let mut entries: Vec<(TokenId, f64)> = uniform
        .support()
        .map(|t| (t, rng.sample::<f64, _>(rand::distr::Open01)))
        .collect();
    let sum: f64 = entries.iter().map(|&(_, w)| w).sum();
    for (_, w) in &mut entries {
        *w /= sum;
    }
    Ok(SparsePrior {
        step_index: step.index,
        entries,
    })
}

/// Top-k tokens with probability strictly above delta, descending
/// probability, ties by ascending token id.
pub fn select_focus(p: &SparsePrior, k: usize, delta: f64) -> FocusSet {
    let mut ranked: Vec<(TokenId, f64)> = p
        .entries
        .iter()
        .copied()
        .filter(|&(_, prob)| prob > delta)
        .collect();
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    ranked.truncate(k);
    FocusSet {
        k,
        delta,
        selected_ids: ranked.into_iter().map(|(t, _)| t).collect(),
    }
}

/// Runs the full construction pipeline for one instance: segmentation,
/// token extraction, logit initialization, prior construction. Errors
/// carry the 1-based step index.
pub fn build_priors(
    inst: &Instance,
    instance_index: usize,
    v: &Vocabulary,
    cfg: &PriorConfig,
) -> Result<Vec<SparsePrior>> {
    cfg.validate()?;
    let encoded = encode_instance(inst, instance_index, v)?;
    build_priors_encoded(&encoded, cfg)
}

/// Same as [`build_priors`] for an already-encoded instance.
pub fn build_priors_encoded(
    encoded: &crate::chain::EncodedInstance,
    cfg: &PriorConfig,
) -> Result<Vec<SparsePrior>> {
    cfg.validate()?;
    let mut priors = Vec::with_capacity(encoded.steps.len());
    for step in &encoded.steps {
        let prior = build_step_prior(step, encoded.index, cfg).map_err(|e| e.at_step(step.index))?;
        priors.push(prior);
    }
    Ok(priors)
}

fn build_step_prior(
    step: &ReasoningStep,
    instance_index: usize,
    cfg: &PriorConfig,
) -> Result<SparsePrior> {
    match cfg.method {
        PriorMethod::Temp => {
            let logits = init_step_logits(step, cfg)?;
            prior_temperature(&logits, cfg.tau, step.index)
        }
        PriorMethod::Gumbel => {
            let logits = init_step_logits(step, cfg)?;
            let noise = gumbel_noise(cfg.seed, instance_index, step.index, logits.len());
            prior_gumbel(&logits, cfg.tau, &noise, cfg.hard, step.index)
        }
        PriorMethod::Mix => prior_mixture(step, cfg.lambda),
        PriorMethod::Uniform => prior_uniform(step),
        PriorMethod::Random => prior_random(step, cfg.seed, instance_index),
    }
}

/// Priors and focus sets for one instance, as stored in `priors.jsonl`.
#[derive(Debug, Clone, PartialEq)]
pub struct InstancePriors {
    pub index: usize,
    pub method: PriorMethod,
    pub steps: Vec<SparsePrior>,
    pub focus: Vec<FocusSet>,
}

/// The priors for a whole dataset, indexed by instance position.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PriorStore {
    pub instances: Vec<InstancePriors>,
}

impl PriorStore {
    /// Builds priors and focus sets for every instance of a dataset.
    pub fn build(
        encoded: &[crate::chain::EncodedInstance],
        cfg: &PriorConfig,
        focus_cfg: &FocusConfig,
    ) -> Result<PriorStore> {
        focus_cfg.validate()?;
        let mut instances = Vec::with_capacity(encoded.len());
        for enc in encoded {
            let steps = build_priors_encoded(enc, cfg)?;
            let focus = steps
                .iter()
                .map(|p| select_focus(p, focus_cfg.k, focus_cfg.delta))
                .collect();
            instances.push(InstancePriors {
                index: enc.index,
                method: cfg.method,
                steps,
                focus,
            });
        }
        Ok(PriorStore { instances })
    }

    pub fn get(&self, index: usize) -> Result<&InstancePriors> {
        self.instances
            .binary_search_by_key(&index, |ip| ip.index)
            .map(|i| &self.instances[i])
            .map_err(|_| Error::MissingPriors { index })
    }

    /// Writes one JSON object per instance. Probabilities are serialized
    /// as decimal strings with 12 significant digits so goldens are
    /// byte-identical across platforms.
    pub fn save_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for ip in &self.instances {
            let row = PriorRow {
                index: ip.index,
                method: ip.method,
                steps: ip
                    .steps
                    .iter()
                    .map(|s| {
                        s.entries
                            .iter()
                            .map(|&(t, p)| (t, format!("{p:.11e}")))
                            .collect()
                    })
                    .collect(),
                focus: ip.focus.iter().map(|f| f.selected_ids.clone()).collect(),
            };
            serde_json::to_writer(&mut w, &row).map_err(|e| Error::MalformedLine {
                path: path.to_path_buf(),
                line: 0,
                msg: e.to_string(),
            })?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load_jsonl(path: impl AsRef<Path>) -> Result<PriorStore> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let reader = BufReader::new(file);
        let mut instances = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let row: PriorRow = serde_json::from_str(&line).map_err(|e| Error::MalformedLine {
                path: path.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })?;
            let steps = row
                .steps
                .iter()
                .enumerate()
                .map(|(j, entries)| {
                    let parsed: Result<Vec<(TokenId, f64)>> = entries
                        .iter()
                        .map(|(t, p)| {
                            p.parse::<f64>().map(|p| (*t, p)).map_err(|e| {
                                Error::MalformedLine {
                                    path: path.to_path_buf(),
                                    line: i + 1,
                                    msg: format!("bad probability {p:?}: {e}"),
                                }
                            })
                        })
                        .collect();
                    Ok(SparsePrior {
                        step_index: j + 1,
                        entries: parsed?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let focus = row
                .focus
                .into_iter()
                .map(|selected_ids| FocusSet {
                    k: selected_ids.len(),
                    delta: 0.0,
                    selected_ids,
                })
                .collect();
            instances.push(InstancePriors {
                index: row.index,
                method: row.method,
                steps,
                focus,
            });
        }
        Ok(PriorStore { instances })
    }
}

#[derive(Serialize, Deserialize)]
struct PriorRow {
    index: usize,
    method: PriorMethod,
    steps: Vec<Vec<(TokenId, String)>>,
    focus: Vec<Vec<TokenId>>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::build_vocab;
    use crate::corpus::{gen_synthetic, Dataset, SynthConfig};
    use crate::math::entropy;

    fn worked_step() -> (Vocabulary, ReasoningStep) {
        let d = Dataset {
            instances: vec![Instance::new(
                "q".into(),
                "<<20 * 1.20 = 24>>".into(),
                "24".into(),
            )
            .unwrap()],
            provenance: "test".into(),
        };
        let v = build_vocab(&d).unwrap();
        let step = crate::chain::extract_step_tokens("20 * 1.20 = 24", &v, 1).unwrap();
        (v, step)
    }

    fn assert_normalized(p: &SparsePrior) {
        assert!((p.total() - 1.0).abs() < 1e-9, "sum = {}", p.total());
        for &(_, prob) in &p.entries {
            assert!(prob > 0.0);
        }
        let mut ids: Vec<TokenId> = p.support().collect();
        let mut sorted = ids.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(ids.len(), sorted.len());
        ids.sort_unstable();
        assert_eq!(ids, sorted);
    }

    #[test]
    fn logits_assign_betas_with_result_winning_overlap() {
        let (v, step) = worked_step();
        let cfg = PriorConfig::default();
        let logits = init_step_logits(&step, &cfg).unwrap();
        assert_eq!(logits[&v.id("20").unwrap()], 2.0);
        assert_eq!(logits[&v.id("*").unwrap()], 2.0);
        assert_eq!(logits[&v.id("1.20").unwrap()], 2.0);
        assert_eq!(logits[&v.id("24").unwrap()], 2.8);

        let identity = crate::chain::extract_step_tokens("24 = 24", &v, 1).unwrap();
        let logits = init_step_logits(&identity, &cfg).unwrap();
        assert_eq!(logits.len(), 1);
        assert_eq!(logits[&v.id("24").unwrap()], 2.8);
    }

    #[test]
    fn equal_betas_are_rejected() {
        let (_, step) = worked_step();
        let cfg = PriorConfig {
            beta_op: 2.0,
            beta_res: 2.0,
            ..PriorConfig::default()
        };
        assert!(matches!(
            init_step_logits(&step, &cfg),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn temperature_prior_matches_worked_values() {
        let (v, step) = worked_step();
        let cfg = PriorConfig::default();
        let logits = init_step_logits(&step, &cfg).unwrap();
        let p = prior_temperature(&logits, cfg.tau, 1).unwrap();
        assert_normalized(&p);
        // softmax of (5.6, 4.0, 4.0, 4.0)
        let e = (4.0_f64 - 5.6).exp();
        let expect_res = 1.0 / (1.0 + 3.0 * e);
        let expect_op = e / (1.0 + 3.0 * e);
        assert!((p.prob(v.id("24").unwrap()) - expect_res).abs() < 1e-12);
        assert!((expect_res - 0.62278).abs() < 1e-5);
        for t in ["20", "*", "1.20"] {
            assert!((p.prob(v.id(t).unwrap()) - expect_op).abs() < 1e-12);
            assert!((expect_op - 0.12574).abs() < 1e-5);
        }
    }

    #[test]
    fn temperature_prior_point_mass_and_symmetry() {
        let mut single = BTreeMap::new();
        single.insert(7u32, 2.8);
        for tau in [0.1, 0.5, 3.0] {
            let p = prior_temperature(&single, tau, 1).unwrap();
            assert_eq!(p.entries, vec![(7, 1.0)]);
        }
        let mut equal = BTreeMap::new();
        for t in 0..5u32 {
            equal.insert(t, 1.3);
        }
        for tau in [0.1, 1.0, 10.0] {
            let p = prior_temperature(&equal, tau, 1).unwrap();
            for (_, prob) in p.entries {
                assert!((prob - 0.2).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn temperature_entropy_nondecreasing_in_tau() {
        let mut logits = BTreeMap::new();
        logits.insert(4u32, 2.0);
        logits.insert(5u32, 2.8);
        logits.insert(9u32, 1.1);
        let taus = [0.05, 0.1, 0.5, 1.0, 2.0, 8.0];
        let mut last = -1.0;
        for &tau in &taus {
            let p = prior_temperature(&logits, tau, 1).unwrap();
            let h = entropy(&p.entries.iter().map(|&(_, x)| x).collect::<Vec<_>>());
            assert!(h >= last - 1e-12, "entropy decreased at tau={tau}");
            last = h;
        }
    }

    #[test]
    fn temperature_sharpens_to_argmax_as_tau_vanishes() {
        let mut logits = BTreeMap::new();
        logits.insert(4u32, 2.0);
        logits.insert(5u32, 2.8);
        logits.insert(9u32, 2.0);
        let p = prior_temperature(&logits, 1e-3, 1).unwrap();
        assert!(p.prob(5) >= 0.999);
    }

    #[test]
    fn gumbel_zero_noise_reduces_to_temperature() {
        let (_, step) = worked_step();
        let cfg = PriorConfig::default();
        let logits = init_step_logits(&step, &cfg).unwrap();
        let zero = vec![0.0; logits.len()];
        let g = prior_gumbel(&logits, cfg.tau, &zero, false, 1).unwrap();
        let t = prior_temperature(&logits, cfg.tau, 1).unwrap();
        assert_eq!(g, t);
    }

    #[test]
    fn gumbel_hard_is_one_hot() {
        let (_, step) = worked_step();
        let cfg = PriorConfig::default();
        let logits = init_step_logits(&step, &cfg).unwrap();
        let noise = gumbel_noise(11, 0, 1, logits.len());
        let g = prior_gumbel(&logits, cfg.tau, &noise, true, 1).unwrap();
        assert_eq!(g.entries.len(), 1);
        assert_eq!(g.entries[0].1, 1.0);
    }

    #[test]
    fn gumbel_noise_is_counter_deterministic() {
        let a = gumbel_noise(777, 3, 2, 6);
        let b = gumbel_noise(777, 3, 2, 6);
        assert_eq!(a, b);
        assert_ne!(gumbel_noise(777, 3, 1, 6), a);
        assert_ne!(gumbel_noise(777, 4, 2, 6), a);
        assert_ne!(gumbel_noise(778, 3, 2, 6), a);
    }

    #[test]
    fn gumbel_argmax_frequencies_follow_softmax() {
        // Gumbel-max property: argmax(l + g) ~ Categorical(softmax(l)).
        let mut logits = BTreeMap::new();
        logits.insert(0u32, 0.5);
        logits.insert(1u32, 1.5);
        logits.insert(2u32, 0.0);
        logits.insert(3u32, 1.0);
        let probs = crate::math::softmax(&[0.5, 1.5, 0.0, 1.0]);
        let draws = 10_000;
        let mut counts = [0usize; 4];
        for i in 0..draws {
            let noise = gumbel_noise(42, i, 1, 4);
            let g = prior_gumbel(&logits, 0.5, &noise, true, 1).unwrap();
            counts[g.entries[0].0 as usize] += 1;
        }
        for (t, &c) in counts.iter().enumerate() {
            let freq = c as f64 / draws as f64;
            assert!(
                (freq - probs[t]).abs() < 0.02,
                "token {t}: freq {freq} vs softmax {}",
                probs[t]
            );
        }
    }

    #[test]
    fn mixture_matches_worked_values() {
        let (v, step) = worked_step();
        let p = prior_mixture(&step, 0.2).unwrap();
        assert_normalized(&p);
        assert!((p.prob(v.id("24").unwrap()) - 0.8).abs() < 1e-12);
        for t in ["20", "*", "1.20"] {
            assert!((p.prob(v.id(t).unwrap()) - 0.2 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mixture_endpoints() {
        let (v, step) = worked_step();
        let p0 = prior_mixture(&step, 0.0).unwrap();
        assert_eq!(p0.entries, vec![(v.id("24").unwrap(), 1.0)]);
        let p1 = prior_mixture(&step, 1.0).unwrap();
        let support: Vec<TokenId> = p1.support().collect();
        let mut expect: Vec<TokenId> = step.operational_ids.iter().copied().collect();
        expect.sort_unstable();
        assert_eq!(support, expect);
        for (_, prob) in p1.entries {
            assert!((prob - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mixture_sums_overlap_mass() {
        let d = Dataset {
            instances: vec![Instance::new("q".into(), "<<5 = 5>>".into(), "5".into()).unwrap()],
            provenance: "test".into(),
        };
        let v = build_vocab(&d).unwrap();
        let step = crate::chain::extract_step_tokens("5 = 5", &v, 1).unwrap();
        let p = prior_mixture(&step, 0.2).unwrap();
        assert_eq!(p.entries, vec![(v.id("5").unwrap(), 1.0)]);
    }

    #[test]
    fn focus_selects_top_k_above_delta() {
        let (v, step) = worked_step();
        let cfg = PriorConfig::default();
        let logits = init_step_logits(&step, &cfg).unwrap();
        let p = prior_temperature(&logits, cfg.tau, 1).unwrap();
        let f = select_focus(&p, 2, 1e-2);
        // Result token first, then the lowest-id operational token.
        let mut op_ids: Vec<TokenId> = step.operational_ids.iter().copied().collect();
        op_ids.sort_unstable();
        assert_eq!(f.selected_ids, vec![v.id("24").unwrap(), op_ids[0]]);

        let all = select_focus(&p, p.entries.len(), 0.0);
        assert_eq!(all.selected_ids.len(), p.entries.len());

        let none = select_focus(&p, 10, 0.99);
        assert!(none.selected_ids.is_empty());
    }

    #[test]
    fn build_priors_end_to_end() {
        let inst = Instance::new(
            "q".into(),
            "<<600 * 30 / 100 = 180>> <<600 * 10 / 100 = 60>> <<180 + 60 = 240>> <<600 - 240 = 360>>"
                .into(),
            "360".into(),
        )
        .unwrap();
        let d = Dataset {
            instances: vec![inst.clone()],
            provenance: "test".into(),
        };
        let v = build_vocab(&d).unwrap();
        let cfg = PriorConfig {
            method: PriorMethod::Temp,
            ..PriorConfig::default()
        };
        let priors = build_priors(&inst, 0, &v, &cfg).unwrap();
        assert_eq!(priors.len(), 4);
        let enc = encode_instance(&inst, 0, &v).unwrap();
        for (p, step) in priors.iter().zip(&enc.steps) {
            assert_normalized(p);
            for t in p.support() {
                assert!(
                    step.operational_ids.contains(&t) || step.result_ids.contains(&t),
                    "support leaked outside the step"
                );
            }
        }
    }

    #[test]
    fn build_priors_mix_lambda_zero_is_point_mass() {
        let inst = Instance::new("q".into(), "<<1 + 1 = 2>>".into(), "2".into()).unwrap();
        let d = Dataset {
            instances: vec![inst.clone()],
            provenance: "test".into(),
        };
        let v = build_vocab(&d).unwrap();
        let cfg = PriorConfig {
            method: PriorMethod::Mix,
            lambda: 0.0,
            ..PriorConfig::default()
        };
        let priors = build_priors(&inst, 0, &v, &cfg).unwrap();
        assert_eq!(priors.len(), 1);
        assert_eq!(priors[0].entries, vec![(v.id("2").unwrap(), 1.0)]);
    }

    #[test]
    fn prior_store_round_trips_and_is_deterministic() {
        let data = gen_synthetic(&SynthConfig {
            count: 30,
            max_steps: 3,
            ..SynthConfig::default()
        })
        .unwrap();
        let v = build_vocab(&data).unwrap();
        let encoded = crate::chain::encode_dataset(&data, &v).unwrap();
        for method in [
            PriorMethod::Temp,
            PriorMethod::Gumbel,
            PriorMethod::Mix,
            PriorMethod::Uniform,
            PriorMethod::Random,
        ] {
            let cfg = PriorConfig {
                method,
                ..PriorConfig::default()
            };
            let store = PriorStore::build(&encoded, &cfg, &FocusConfig::default()).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let p1 = dir.path().join("a.jsonl");
            let p2 = dir.path().join("b.jsonl");
            store.save_jsonl(&p1).unwrap();
            let again = PriorStore::build(&encoded, &cfg, &FocusConfig::default()).unwrap();
            again.save_jsonl(&p2).unwrap();
            assert_eq!(
                std::fs::read(&p1).unwrap(),
                std::fs::read(&p2).unwrap(),
                "byte determinism for {method:?}"
            );
            let loaded = PriorStore::load_jsonl(&p1).unwrap();
            assert_eq!(loaded.instances.len(), store.instances.len());
            for (a, b) in loaded.instances.iter().zip(&store.instances) {
                assert_eq!(a.index, b.index);
                for (sa, sb) in a.steps.iter().zip(&b.steps) {
                    for (&(ta, pa), &(tb, pb)) in sa.entries.iter().zip(&sb.entries) {
                        assert_eq!(ta, tb);
                        assert!((pa - pb).abs() < 1e-11);
                    }
                }
                for (fa, fb) in a.focus.iter().zip(&b.focus) {
                    assert_eq!(fa.selected_ids, fb.selected_ids);
                }
            }
        }
    }
}
