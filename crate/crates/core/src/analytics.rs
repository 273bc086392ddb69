//! Latent-dynamics statistics over inference traces: per-step top-1
//! probability, entropy, cumulative top-k mass, pooled batch summaries,
//! and argmax token frequencies, emitted as plot-ready CSV or JSON.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::chain::TokenId;
use crate::error::{Error, Result};
use crate::math::entropy;
use crate::reasoner::LatentTrace;

/// The cumulative-mass checkpoints reported per step.
pub const CUMULATIVE_KS: [usize; 4] = [1, 3, 5, 10];

/// Statistics of one latent step's distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: usize,
    pub top1_prob: f64,
    pub top1_token: TokenId,
    /// Shannon entropy in nats.
    pub entropy: f64,
    /// k -> cumulative probability mass of the k most likely tokens.
    pub cumulative: BTreeMap<usize, f64>,
}

/// Highest-probability entry; ties go to the lowest token id.
pub fn step_top1(q: &[f64]) -> (f64, TokenId) {
    let idx = crate::math::argmax(q);
    (q[idx], idx as TokenId)
}

/// Shannon entropy in nats with 0 ln 0 = 0.
pub fn step_entropy(q: &[f64]) -> f64 {
    entropy(q)
}

/// Total mass of the k most probable tokens for each requested k
/// (ks ascending). k beyond the support size saturates at the total mass.
pub fn cumulative_topk(q: &[f64], ks: &[usize]) -> BTreeMap<usize, f64> {
    let mut sorted: Vec<f64> = q.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut out = BTreeMap::new();
    let mut cum = 0.0;
    let mut taken = 0;
    for &k in ks {
        while taken < k && taken < sorted.len() {
            cum += sorted[taken];
            taken += 1;
        }
        out.insert(k, cum);
    }
    out
}

fn stats_for_step(step: usize, q: &[f64]) -> StepStats {
    let (top1_prob, top1_token) = step_top1(q);
    StepStats {
        step,
        top1_prob,
        top1_token,
        entropy: step_entropy(q),
        cumulative: cumulative_topk(q, &CUMULATIVE_KS),
    }
}

/// Counts of per-step argmax tokens over all trace distributions
/// (`</think>` emissions included), descending count, ties by id.
pub fn token_frequency(traces: &[LatentTrace]) -> Vec<(TokenId, u64)> {
    let mut counts: BTreeMap<TokenId, u64> = BTreeMap::new();
    for trace in traces {
        for q in &trace.distributions {
            let (_, t) = step_top1(q);
            *counts.entry(t).or_insert(0) += 1;
        }
    }
    let mut out: Vec<(TokenId, u64)> = counts.into_iter().collect();
    out.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    out
}

/// Pearson correlation by the two-pass formula; 0 when either side has
/// no variance.
pub fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        cov += (x - mx) * (y - my);
        vx += (x - mx) * (x - mx);
        vy += (y - my) * (y - my);
    }
    let denom = (vx * vy).sqrt();
    if denom < 1e-15 {
        return 0.0;
    }
    (cov / denom).clamp(-1.0, 1.0)
}

/// One per-step row of a batch report, tagged with its instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStepRow {
    pub instance: usize,
    pub stats: StepStats,
}

/// Statistics pooled over the latent steps of many traces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchStats {
    pub steps: Vec<TraceStepRow>,
    pub mean_top1: f64,
    pub mean_entropy: f64,
    /// Pearson correlation between per-step top-1 probability and entropy.
    pub pearson_r: f64,
    /// (token id, surface form if known, count), descending count.
    pub token_frequency: Vec<(TokenId, String, u64)>,
}

/// Pools per-step statistics over traces. `instance_ids` names each
/// trace; `token_of` supplies surface forms for the frequency table.
pub fn batch_stats(
    traces: &[LatentTrace],
    instance_ids: &[usize],
    token_of: impl Fn(TokenId) -> String,
) -> BatchStats {
    assert_eq!(traces.len(), instance_ids.len());
    let mut steps = Vec::new();
    for (trace, &instance) in traces.iter().zip(instance_ids) {
        for (s, q) in trace.distributions.iter().enumerate() {
            steps.push(TraceStepRow {
                instance,
                stats: stats_for_step(s + 1, q),
            });
        }
    }
    let n = steps.len().max(1) as f64;
    let top1: Vec<f64> = steps.iter().map(|r| r.stats.top1_prob).collect();
    let ent: Vec<f64> = steps.iter().map(|r| r.stats.entropy).collect();
    let mean_top1 = top1.iter().sum::<f64>() / n;
    let mean_entropy = ent.iter().sum::<f64>() / n;
    let pearson_r = pearson(&top1, &ent);
    let token_frequency = token_frequency(traces)
        .into_iter()
        .map(|(t, c)| (t, token_of(t), c))
        .collect();
    BatchStats {
        steps,
        mean_top1,
        mean_entropy,
        pearson_r,
        token_frequency,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

/// Writes a byte-deterministic report. CSV holds one row per
/// (instance, step) with fixed headers and 6-decimal floats; JSON holds
/// the full [`BatchStats`].
pub fn emit_report(stats: &BatchStats, path: impl AsRef<Path>, format: ReportFormat) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    match format {
        ReportFormat::Csv => {
            writeln!(
                w,
                "instance,step,top1_token,top1_prob,entropy,cum1,cum3,cum5,cum10"
            )
            .map_err(|e| Error::io(path, e))?;
            for row in &stats.steps {
                let s = &row.stats;
                writeln!(
                    w,
                    "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
                    row.instance,
                    s.step,
                    s.top1_token,
                    s.top1_prob,
                    s.entropy,
                    s.cumulative[&1],
                    s.cumulative[&3],
                    s.cumulative[&5],
                    s.cumulative[&10],
                )
                .map_err(|e| Error::io(path, e))?;
            }
        }
        ReportFormat::Json => {
            serde_json::to_writer(&mut w, stats).map_err(|e| Error::MalformedLine {
                path: path.to_path_buf(),
                line: 0,
                msg: e.to_string(),
            })?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top1_rules() {
        let mut point = vec![0.0; 5];
        point[3] = 1.0;
        assert_eq!(step_top1(&point), (1.0, 3));
        assert_eq!(step_top1(&[0.25; 4]), (0.25, 0));
        assert_eq!(step_top1(&[0.49, 0.51]), (0.51, 1));
    }

    #[test]
    fn entropy_values() {
        let mut point = vec![0.0; 4];
        point[1] = 1.0;
        assert_eq!(step_entropy(&point), 0.0);
        assert!((step_entropy(&[0.1; 10]) - 10.0_f64.ln()).abs() < 1e-12);
        assert!((step_entropy(&[0.5, 0.5]) - 2.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn entropy_zero_iff_top1_is_one() {
        let dists: Vec<Vec<f64>> = vec![
            vec![1.0, 0.0, 0.0],
            vec![1.0 - 1e-12, 1e-12, 0.0],
            vec![0.999999, 1e-6, 0.0],
            vec![0.5, 0.25, 0.25],
            vec![0.0, 0.0, 1.0],
        ];
        for q in dists {
            let h = step_entropy(&q);
            let (p1, _) = step_top1(&q);
            assert_eq!(h < 1e-9, (p1 - 1.0).abs() < 1e-9, "q = {q:?}");
        }
    }

    #[test]
    fn cumulative_examples() {
        let mut point = vec![0.0; 12];
        point[7] = 1.0;
        let c = cumulative_topk(&point, &CUMULATIVE_KS);
        for k in CUMULATIVE_KS {
            assert!((c[&k] - 1.0).abs() < 1e-12);
        }

        let uniform = vec![0.1; 10];
        let c = cumulative_topk(&uniform, &[3]);
        assert!((c[&3] - 0.3).abs() < 1e-12);

        let c = cumulative_topk(&[0.5, 0.3, 0.2], &[1, 2]);
        assert!((c[&1] - 0.5).abs() < 1e-12);
        assert!((c[&2] - 0.8).abs() < 1e-12);

        // k at or beyond the support covers all the mass.
        let c = cumulative_topk(&[0.6, 0.4], &[2, 10]);
        assert!((c[&2] - 1.0).abs() < 1e-9);
        assert!((c[&10] - 1.0).abs() < 1e-9);
        // Nondecreasing in k.
        assert!(c[&2] <= c[&10] + 1e-12);
    }

    fn trace_with(dists: Vec<Vec<f64>>) -> LatentTrace {
        LatentTrace {
            distributions: dists,
            soft_tokens: vec![],
            hidden_states: vec![],
            h_q: vec![],
            termination_step: 0,
            truncated: false,
            decoded_answer: vec![],
        }
    }

    #[test]
    fn token_frequency_counts_argmaxes() {
        let eq = vec![0.1, 0.1, 0.1, 0.1, 0.6];
        let trace = trace_with(vec![eq.clone(), eq.clone(), eq.clone()]);
        assert_eq!(token_frequency(&[trace]), vec![(4, 3)]);

        // Many traces ending in a think-end argmax count it once each.
        let mut end = vec![0.0; 5];
        end[crate::chain::THINK_END as usize] = 0.9;
        end[4] = 0.1;
        let traces: Vec<LatentTrace> = (0..50)
            .map(|_| trace_with(vec![eq.clone(), end.clone()]))
            .collect();
        let freq = token_frequency(&traces);
        assert_eq!(freq[0], (crate::chain::THINK_END, 50));
        assert_eq!(freq[1], (4, 50));

        assert!(token_frequency(&[trace_with(vec![])]).is_empty());
    }

    #[test]
    fn pearson_matches_naive_formula_and_handles_degenerate() {
        let xs = [0.2, 0.5, 0.9, 0.4, 0.7];
        let ys = [1.5, 1.1, 0.2, 1.2, 0.6];
        // Naive expanded formula: (sum xy - n mx my) / sqrt(...).
        let n = xs.len() as f64;
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| x * y).sum();
        let sxx: f64 = xs.iter().map(|x| x * x).sum();
        let syy: f64 = ys.iter().map(|y| y * y).sum();
        let naive = (sxy - n * mx * my) / ((sxx - n * mx * mx) * (syy - n * my * my)).sqrt();
        assert!((pearson(&xs, &ys) - naive).abs() < 1e-9);
        assert!(pearson(&xs, &ys) < 0.0);
        assert!((-1.0..=1.0).contains(&pearson(&xs, &ys)));

        assert_eq!(pearson(&[1.0, 1.0, 1.0], &[0.1, 0.5, 0.9]), 0.0);
        assert_eq!(pearson(&[1.0], &[2.0]), 0.0);
    }

    #[test]
    fn reports_are_deterministic_and_round_trip() {
        let eq = vec![0.1, 0.2, 0.3, 0.15, 0.25];
        let traces = vec![trace_with(vec![eq.clone(), eq.clone()]), trace_with(vec![eq])];
        let stats = batch_stats(&traces, &[0, 1], |t| format!("tok{t}"));

        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.csv");
        let b = dir.path().join("b.csv");
        emit_report(&stats, &a, ReportFormat::Csv).unwrap();
        emit_report(&stats, &b, ReportFormat::Csv).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        let text = std::fs::read_to_string(&a).unwrap();
        assert!(text.starts_with("instance,step,top1_token,top1_prob,entropy,cum1,cum3,cum5,cum10\n"));
        assert_eq!(text.lines().count(), 4);

        let j = dir.path().join("a.json");
        emit_report(&stats, &j, ReportFormat::Json).unwrap();
        let loaded: BatchStats =
            serde_json::from_str(&std::fs::read_to_string(&j).unwrap()).unwrap();
        assert_eq!(loaded, stats);
    }

    #[test]
    fn empty_batch_emits_header_only_csv() {
        let stats = batch_stats(&[], &[], |_| String::new());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.csv");
        emit_report(&stats, &p, ReportFormat::Csv).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(
            text,
            "instance,step,top1_token,top1_prob,entropy,cum1,cum3,cum5,cum10\n"
        );
    }
}
