//! Dataset ingestion, synthetic arithmetic-problem generation, and
//! deterministic splitting.
//!
//! The on-disk format is JSONL with one `{"question", "chain", "answer"}`
//! object per line. Chains hold one `<<a OP b = c>>` segment per
//! reasoning step.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::chain;
use crate::error::{Error, Result};

/// One (question, reasoning chain, answer) triple.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instance {
    pub question: String,
    pub chain: String,
    pub answer: String,
    /// Number of `<<...>>` segments in `chain`; computed at load/generation.
    #[serde(skip)]
    pub step_count: usize,
}

impl Instance {
    /// Builds an instance, validating the chain and the answer.
    pub fn new(question: String, chain_text: String, answer: String) -> Result<Instance> {
        if answer.split_whitespace().next().is_none() {
            return Err(Error::InvalidConfig("answer must be nonempty".into()));
        }
        let steps = chain::segment_chain(&chain_text)?;
        Ok(Instance {
            question,
            chain: chain_text,
            answer,
            step_count: steps.len(),
        })
    }
}

/// Ordered collection of instances with a provenance note.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub instances: Vec<Instance>,
    /// Source file path or a canonical rendering of the generator config.
    pub provenance: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }
}

/// Reads a JSONL dataset. Each nonblank line must be an object with
/// string fields `question`, `chain`, and `answer`; errors name the
/// offending 1-based line.
pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut instances = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawInstance =
            serde_json::from_str(&line).map_err(|e| Error::MalformedLine {
                path: path.to_path_buf(),
                line: line_no,
                msg: e.to_string(),
            })?;
        let inst = Instance::new(raw.question, raw.chain, raw.answer).map_err(|e| {
            Error::MalformedLine {
                path: path.to_path_buf(),
                line: line_no,
                msg: e.to_string(),
            }
        })?;
        instances.push(inst);
    }
    Ok(Dataset {
        instances,
        provenance: path.display().to_string(),
    })
}

#[derive(Deserialize)]
struct RawInstance {
    question: String,
    chain: String,
    answer: String,
}

/// Writes a dataset as JSONL (UTF-8, one object per line).
pub fn save_jsonl(d: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for inst in &d.instances {
        serde_json::to_writer(&mut w, inst).map_err(|e| Error::MalformedLine {
            path: path.to_path_buf(),
            line: 0,
            msg: e.to_string(),
        })?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Arithmetic operators available to the synthetic generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Op {
    #[serde(rename = "+")]
    Add,
    #[serde(rename = "-")]
    Sub,
    #[serde(rename = "*")]
    Mul,
    #[serde(rename = "/")]
    Div,
}

impl Op {
    pub fn symbol(self) -> &'static str {
        match self {
            Op::Add => "+",
            Op::Sub => "-",
            Op::Mul => "*",
            Op::Div => "/",
        }
    }

    pub fn from_symbol(s: &str) -> Option<Op> {
        match s {
            "+" => Some(Op::Add),
            "-" => Some(Op::Sub),
            "*" => Some(Op::Mul),
            "/" => Some(Op::Div),
            _ => None,
        }
    }

    pub fn apply(self, a: i64, b: i64) -> Option<i64> {
        match self {
            Op::Add => Some(a + b),
            Op::Sub => Some(a - b),
            Op::Mul => Some(a * b),
            Op::Div => {
                if b != 0 && a % b == 0 {
                    Some(a / b)
                } else {
                    None
                }
            }
        }
    }
}

impl fmt::Display for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

/// All generated values (operands and results) stay within [0, MAX_VALUE]
/// so every numeral is a single whitespace token of at most 3 digits.
pub const MAX_VALUE: i64 = 999;

/// Configuration for [`gen_synthetic`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub count: usize,
    pub max_steps: usize,
    pub operand_lo: i64,
    pub operand_hi: i64,
    pub operators: Vec<Op>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            count: 100,
            max_steps: 2,
            operand_lo: 2,
            operand_hi: 9,
            operators: vec![Op::Add, Op::Sub, Op::Mul, Op::Div],
            seed: 777,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::InvalidConfig("count must be positive".into()));
        }
        if !(1..=5).contains(&self.max_steps) {
            return Err(Error::InvalidConfig("max_steps must be in [1, 5]".into()));
        }
        if self.operand_lo < 0 || self.operand_lo > self.operand_hi || self.operand_hi > MAX_VALUE {
            return Err(Error::InvalidConfig(format!(
                "operand range [{}, {}] must satisfy 0 <= lo <= hi <= {}",
                self.operand_lo, self.operand_hi, MAX_VALUE
            )));
        }
        if self.operators.is_empty() {
            return Err(Error::InvalidConfig("at least one operator required".into()));
        }
        // At least one operator must be able to open a chain.
        let lo = self.operand_lo;
        let feasible = self.operators.iter().any(|op| match op {
            Op::Add => 2 * lo <= MAX_VALUE,
            Op::Sub => true,
            Op::Mul => lo * lo <= MAX_VALUE,
            Op::Div => lo * lo.max(1) <= MAX_VALUE,
        });
        if !feasible {
            return Err(Error::InfeasibleConfig(format!(
                "no operator can produce a first step with operands in [{}, {}] and results <= {}",
                self.operand_lo, self.operand_hi, MAX_VALUE
            )));
        }
        Ok(())
    }

    /// Canonical JSON rendering, recorded as dataset provenance.
    pub fn digest(&self) -> String {
        format!("synthetic:{}", serde_json::to_string(self).unwrap())
    }
}

/// Generates `cfg.count` instances. Each chain is a left-to-right
/// sequence of exact-arithmetic steps where every step after the first
/// consumes the previous result, and the answer equals the last result.
/// Byte-identical output for identical configs.
pub fn gen_synthetic(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut instances = Vec::with_capacity(cfg.count);
    for _ in 0..cfg.count {
        instances.push(gen_instance(cfg, &mut rng)?);
    }
    Ok(Dataset {
        instances,
        provenance: cfg.digest(),
    })
}

fn gen_instance(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<Instance> {
    let target_steps = rng.random_range(1..=cfg.max_steps);
    let (lo, hi) = (cfg.operand_lo, cfg.operand_hi);

    let mut steps: Vec<String> = Vec::new();

    // First step: both operands drawn from the configured range. Division
    // is generated backward (quotient and divisor first) so it is exact.
    let mut ops = cfg.operators.clone();
    let (mut question, mut value) = loop {
        if ops.is_empty() {
            return Err(Error::InfeasibleConfig(
                "no operator admits a valid first step".into(),
            ));
        }
        let op = ops[rng.random_range(0..ops.len())];
        if let Some((a, b, c)) = first_step_operands(op, lo, hi, rng) {
            steps.push(format!("{a} {op} {b} = {c}"));
            break (format!("{a} {op} {b}"), c);
        }
        ops.retain(|&o| o != op);
    };

    // Later steps consume the running value as the left operand. If no
    // operator can extend within bounds, the chain simply ends early.
    for _ in 1..target_steps {
        let mut ops = cfg.operators.clone();
        let mut extended = false;
        while !ops.is_empty() {
            let op = ops[rng.random_range(0..ops.len())];
            if let Some((b, c)) = extend_operand(op, value, lo, hi, rng) {
                steps.push(format!("{value} {op} {b} = {c}"));
                question = format!("{question} {op} {b}");
                value = c;
                extended = true;
                break;
            }
            ops.retain(|&o| o != op);
        }
        if !extended {
            break;
        }
    }

    let chain_text = steps
        .iter()
        .map(|s| format!("<<{s}>>"))
        .collect::<Vec<_>>()
        .join(" ");
    Instance::new(question, chain_text, value.to_string())
}

fn first_step_operands(
    op: Op,
    lo: i64,
    hi: i64,
    rng: &mut ChaCha8Rng,
) -> Option<(i64, i64, i64)> {
    match op {
        Op::Add => {
            let a = rng.random_range(lo..=hi);
            let b_hi = hi.min(MAX_VALUE - a);
            if b_hi < lo {
                return None;
            }
            let b = rng.random_range(lo..=b_hi);
            Some((a, b, a + b))
        }
        Op::Sub => {
            let a = rng.random_range(lo..=hi);
            let b = rng.random_range(lo..=hi);
            let (a, b) = (a.max(b), a.min(b));
            Some((a, b, a - b))
        }
        Op::Mul => {
            let a = rng.random_range(lo..=hi);
            let b_hi = hi.min(MAX_VALUE / a.max(1));
            if b_hi < lo {
                return None;
            }
            let b = rng.random_range(lo..=b_hi);
            Some((a, b, a * b))
        }
        Op::Div => {
            // Choose quotient and divisor, derive the dividend.
            let div_lo = lo.max(1);
            if div_lo > hi {
                return None;
            }
            let q = rng.random_range(lo..=hi);
            let b_hi = hi.min(if q == 0 { hi } else { MAX_VALUE / q });
            if b_hi < div_lo {
                return None;
            }
            let b = rng.random_range(div_lo..=b_hi);
            Some((q * b, b, q))
        }
    }
}

fn extend_operand(op: Op, value: i64, lo: i64, hi: i64, rng: &mut ChaCha8Rng) -> Option<(i64, i64)> {
    match op {
        Op::Add => {
            let b_hi = hi.min(MAX_VALUE - value);
            if b_hi < lo {
                return None;
            }
            let b = rng.random_range(lo..=b_hi);
            Some((b, value + b))
        }
        Op::Sub => {
            let b_hi = hi.min(value);
            if b_hi < lo {
                return None;
            }
            let b = rng.random_range(lo..=b_hi);
            Some((b, value - b))
        }
        Op::Mul => {
            if value == 0 {
                let b = rng.random_range(lo..=hi);
                return Some((b, 0));
            }
            let b_hi = hi.min(MAX_VALUE / value);
            if b_hi < lo {
                return None;
            }
            let b = rng.random_range(lo..=b_hi);
            Some((b, value * b))
        }
        Op::Div => {
            let div_lo = lo.max(1);
            let divisors: Vec<i64> = (div_lo..=hi)
                .filter(|&b| value % b == 0)
                .collect();
            if divisors.is_empty() {
                return None;
            }
            let b = divisors[rng.random_range(0..divisors.len())];
            Some((b, value / b))
        }
    }
}

/// Partitions `0..n` into (train, val, test) index sets. Sizes are
/// floor-based with the remainder assigned to train; membership is a
/// seeded shuffle and each part comes back sorted ascending.
pub fn split_indices(
    n: usize,
    fractions: [f64; 3],
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    if fractions.iter().any(|&f| f < 0.0) {
        return Err(Error::InvalidConfig("fractions must be nonnegative".into()));
    }
    let sum: f64 = fractions.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidConfig(format!(
            "fractions must sum to 1, got {sum}"
        )));
    }

    let mut n_train = (fractions[0] * n as f64).floor() as usize;
    let n_val = (fractions[1] * n as f64).floor() as usize;
    let n_test = (fractions[2] * n as f64).floor() as usize;
    n_train += n - (n_train + n_val + n_test);

    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);

    let sorted = |slice: &[usize]| {
        let mut v = slice.to_vec();
        v.sort_unstable();
        v
    };
    Ok((
        sorted(&indices[..n_train]),
        sorted(&indices[n_train..n_train + n_val]),
        sorted(&indices[n_train + n_val..]),
    ))
}

/// Splits a dataset into (train, val, test) via [`split_indices`]; each
/// split preserves original dataset order.
pub fn split_dataset(
    d: &Dataset,
    fractions: [f64; 3],
    seed: u64,
) -> Result<(Dataset, Dataset, Dataset)> {
    let (tr, va, te) = split_indices(d.len(), fractions, seed)?;
    let pick = |idx: &[usize], part: &str| Dataset {
        instances: idx.iter().map(|&i| d.instances[i].clone()).collect(),
        provenance: format!("{}#{}", d.provenance, part),
    };
    Ok((pick(&tr, "train"), pick(&va, "val"), pick(&te, "test")))
}
