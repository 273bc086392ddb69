//! Property tests over the public API: split partitioning, serialization
//! round-trips, prior normalization and support containment, temperature
//! monotonicity, filter normalization, and analytics invariants.

use std::collections::BTreeSet;

use proptest::prelude::*;

use softchain::analytics::{cumulative_topk, step_entropy, step_top1};
use softchain::chain::{build_vocab, encode_dataset, ReasoningStep, TokenId};
use softchain::corpus::{gen_synthetic, load_jsonl, save_jsonl, split_indices, Op, SynthConfig};
use softchain::math::{kl_divergence, softmax};
use softchain::objective::{loss_focused_kl, loss_total, LossWeights};
use softchain::prior::{
    init_step_logits, prior_gumbel, prior_mixture, prior_temperature, select_focus, FocusSet,
    PriorConfig, PriorMethod, SparsePrior,
};
use softchain::reasoner::{apply_sampling_filter, SamplingConfig};

fn small_synth(seed: u64, count: usize, ops: Vec<Op>) -> SynthConfig {
    SynthConfig {
        count,
        max_steps: 3,
        operand_lo: 2,
        operand_hi: 9,
        operators: ops,
        seed,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn split_is_a_partition(n in 1usize..400, seed in any::<u64>(), a in 0.0f64..1.0, b in 0.0f64..1.0) {
        // Normalize (a, b, rest) into fractions summing to 1.
        let total = a + b + 1.0;
        let fractions = [a / total, b / total, 1.0 - a / total - b / total];
        let (tr, va, te) = split_indices(n, fractions, seed).unwrap();
        let mut all: Vec<usize> = tr.iter().chain(&va).chain(&te).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        let set: BTreeSet<usize> = tr.iter().chain(&va).chain(&te).copied().collect();
        prop_assert_eq!(set.len(), n, "parts must be disjoint");
    }

    #[test]
    fn synthetic_datasets_round_trip_and_replay(seed in any::<u64>()) {
        let cfg = small_synth(seed, 20, vec![Op::Add, Op::Sub, Op::Mul, Op::Div]);
        let data = gen_synthetic(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        save_jsonl(&data, &path).unwrap();
        let loaded = load_jsonl(&path).unwrap();
        prop_assert_eq!(&data.instances, &loaded.instances);

        // Every chain replays exactly and the parser accepts it.
        let vocab = build_vocab(&data).unwrap();
        let encoded = encode_dataset(&data, &vocab).unwrap();
        for (inst, enc) in data.instances.iter().zip(&encoded) {
            prop_assert!(enc.step_count() >= 1 && enc.step_count() <= 3);
            prop_assert_eq!(enc.step_count(), inst.step_count);
            let mut prev: Option<i64> = None;
            for step in softchain::chain::segment_chain(&inst.chain).unwrap() {
                let toks: Vec<&str> = step.split_whitespace().collect();
                let a: i64 = toks[0].parse().unwrap();
                let b: i64 = toks[2].parse().unwrap();
                let c: i64 = toks[4].parse().unwrap();
                let op = Op::from_symbol(toks[1]).unwrap();
                prop_assert_eq!(op.apply(a, b), Some(c));
                if let Some(p) = prev {
                    prop_assert_eq!(a, p);
                }
                prev = Some(c);
            }
            prop_assert_eq!(prev.unwrap().to_string(), inst.answer.clone());
        }
    }

    #[test]
    fn priors_are_normalized_with_contained_support(
        seed in any::<u64>(),
        method_pick in 0usize..5,
        tau in 0.05f64..3.0,
        lambda in 0.0f64..1.0,
    ) {
        let method = [
            PriorMethod::Temp,
            PriorMethod::Gumbel,
            PriorMethod::Mix,
            PriorMethod::Uniform,
            PriorMethod::Random,
        ][method_pick];
        let data = gen_synthetic(&small_synth(seed, 6, vec![Op::Add, Op::Mul])).unwrap();
        let vocab = build_vocab(&data).unwrap();
        let encoded = encode_dataset(&data, &vocab).unwrap();
        let cfg = PriorConfig { method, tau, lambda, ..PriorConfig::default() };
        for enc in &encoded {
            let priors = softchain::prior::build_priors_encoded(enc, &cfg).unwrap();
            prop_assert_eq!(priors.len(), enc.step_count());
            for (prior, step) in priors.iter().zip(&enc.steps) {
                prop_assert!((prior.total() - 1.0).abs() < 1e-9);
                let allowed: BTreeSet<TokenId> = step
                    .operational_ids
                    .iter()
                    .copied()
                    .chain(step.result_ids.iter().copied())
                    .collect();
                for t in prior.support() {
                    prop_assert!(allowed.contains(&t), "support leaked: {}", t);
                }
                for &(_, p) in &prior.entries {
                    prop_assert!(p > 0.0);
                }
            }
        }
    }

    #[test]
    fn temperature_entropy_is_nondecreasing_in_tau(
        logit_vals in prop::collection::vec(-3.0f64..3.0, 2..7),
    ) {
        let step = ReasoningStep {
            raw: String::new(),
            operational_ids: (0..logit_vals.len() as TokenId - 1).map(|t| t + 4).collect(),
            result_ids: vec![logit_vals.len() as TokenId + 3],
            index: 1,
        };
        let cfg = PriorConfig::default();
        let mut logits = init_step_logits(&step, &cfg).unwrap();
        // Overwrite the rule betas with arbitrary values, keeping the map shape.
        for ((_, l), v) in logits.iter_mut().zip(&logit_vals) {
            *l = *v;
        }
        let mut last = -1.0f64;
        for tau in [0.05, 0.2, 0.5, 1.0, 2.0, 5.0] {
            let p = prior_temperature(&logits, tau, 1).unwrap();
            let dense: Vec<f64> = p.entries.iter().map(|&(_, x)| x).collect();
            let h = step_entropy(&dense);
            prop_assert!(h >= last - 1e-9, "entropy decreased at tau={}", tau);
            last = h;
        }
    }

    #[test]
    fn gumbel_zero_noise_equals_temperature(seed in any::<u64>(), tau in 0.1f64..2.0) {
        let data = gen_synthetic(&small_synth(seed, 3, vec![Op::Add])).unwrap();
        let vocab = build_vocab(&data).unwrap();
        let encoded = encode_dataset(&data, &vocab).unwrap();
        let cfg = PriorConfig::default();
        for step in &encoded[0].steps {
            let logits = init_step_logits(step, &cfg).unwrap();
            let zeros = vec![0.0; logits.len()];
            prop_assert_eq!(
                prior_gumbel(&logits, tau, &zeros, false, step.index).unwrap(),
                prior_temperature(&logits, tau, step.index).unwrap()
            );
        }
    }

    #[test]
    fn focus_respects_k_delta_and_ordering(
        probs in prop::collection::vec(0.01f64..1.0, 1..8),
        k in 1usize..6,
        delta in 0.0f64..0.4,
    ) {
        let total: f64 = probs.iter().sum();
        let entries: Vec<(TokenId, f64)> = probs
            .iter()
            .enumerate()
            .map(|(i, &p)| (i as TokenId + 4, p / total))
            .collect();
        let prior = SparsePrior { step_index: 1, entries: entries.clone() };
        let f = select_focus(&prior, k, delta);
        prop_assert!(f.selected_ids.len() <= k);
        for ids in f.selected_ids.windows(2) {
            let pa = prior.prob(ids[0]);
            let pb = prior.prob(ids[1]);
            prop_assert!(pa > pb || (pa == pb && ids[0] < ids[1]));
        }
        for &t in &f.selected_ids {
            prop_assert!(prior.prob(t) > delta);
        }
        // Everything excluded is either below delta or dominated by k picks.
        if f.selected_ids.len() < k {
            for &(t, p) in &entries {
                if !f.selected_ids.contains(&t) {
                    prop_assert!(p <= delta);
                }
            }
        }
    }

    #[test]
    fn sampling_filter_keeps_normalization_and_argmax(
        raw in prop::collection::vec(0.001f64..1.0, 2..12),
        temperature in 0.2f64..2.0,
        top_p in 0.05f64..1.0,
    ) {
        let logits: Vec<f64> = raw.iter().map(|v| v.ln()).collect();
        let q = softmax(&logits);
        let cfg = SamplingConfig { temperature, top_p, max_latent_steps: 8, greedy: false };
        let f = apply_sampling_filter(&q, &cfg);
        prop_assert!((f.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(f.iter().all(|&p| p >= 0.0));
        // Power scaling and nucleus truncation both preserve the argmax.
        let (_, before) = step_top1(&q);
        let (_, after) = step_top1(&f);
        prop_assert_eq!(before, after);
    }

    #[test]
    fn focused_kl_is_nonnegative_and_detects_mismatch(
        p_raw in prop::collection::vec(0.01f64..1.0, 4),
        q_raw in prop::collection::vec(0.01f64..1.0, 4),
    ) {
        let norm = |v: &[f64]| {
            let s: f64 = v.iter().sum();
            v.iter().map(|x| x / s).collect::<Vec<f64>>()
        };
        let p = norm(&p_raw);
        let q = norm(&q_raw);
        let prior = SparsePrior {
            step_index: 1,
            entries: (0u32..4).map(|t| (t, p[t as usize])).collect(),
        };
        let focus = FocusSet { k: 4, delta: 0.0, selected_ids: (0u32..4).collect() };
        let full = loss_focused_kl(&[q.clone()], &[prior], &[focus]).unwrap();
        prop_assert!(full > -1e-12, "Gibbs inequality violated: {}", full);
        prop_assert!((full - kl_divergence(&p, &q)).abs() < 1e-10);
        let mismatch = p.iter().zip(&q).any(|(a, b)| (a - b).abs() > 1e-6);
        if mismatch {
            prop_assert!(full > 0.0);
        } else {
            prop_assert!(full.abs() < 1e-9);
        }
    }

    #[test]
    fn loss_total_identity(
        ce in 0.0f64..10.0, kl in 0.0f64..10.0, sem in 0.0f64..10.0,
        wc in 0.0f64..3.0, wk in 0.0f64..3.0, ws in 0.0f64..3.0,
    ) {
        let w = LossWeights { ce: wc, kl: wk, sem: ws };
        let total = loss_total(&w, ce, kl, sem);
        prop_assert!((total - (wc * ce + wk * kl + ws * sem)).abs() < 1e-12);
    }

    #[test]
    fn cumulative_mass_is_monotone_and_bounded(
        raw in prop::collection::vec(0.001f64..1.0, 1..15),
    ) {
        let total: f64 = raw.iter().sum();
        let q: Vec<f64> = raw.iter().map(|v| v / total).collect();
        let ks = [1usize, 3, 5, 10];
        let cum = cumulative_topk(&q, &ks);
        let mut last = 0.0;
        for k in ks {
            prop_assert!(cum[&k] + 1e-12 >= last);
            prop_assert!(cum[&k] <= 1.0 + 1e-9);
            last = cum[&k];
        }
        if q.len() <= 10 {
            prop_assert!((cum[&10] - 1.0).abs() < 1e-9);
        }
        prop_assert!(step_entropy(&q) <= (q.len() as f64).ln() + 1e-9);
    }

    #[test]
    fn mixture_endpoints_reduce_to_indicator_and_uniform(seed in any::<u64>()) {
        let data = gen_synthetic(&small_synth(seed, 3, vec![Op::Add, Op::Mul])).unwrap();
        let vocab = build_vocab(&data).unwrap();
        let encoded = encode_dataset(&data, &vocab).unwrap();
        for step in &encoded[0].steps {
            let p0 = prior_mixture(step, 0.0).unwrap();
            for &t in &step.result_ids {
                prop_assert!((p0.prob(t) - 1.0 / step.result_ids.len() as f64).abs() < 1e-12);
            }
            let p1 = prior_mixture(step, 1.0).unwrap();
            let support: BTreeSet<TokenId> = p1.support().collect();
            prop_assert_eq!(&support, &step.operational_ids);
            for t in support {
                prop_assert!((p1.prob(t) - 1.0 / step.operational_ids.len() as f64).abs() < 1e-12);
            }
        }
    }
}
