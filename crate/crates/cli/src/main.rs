//! Command-line surface: data generation, chain parsing, prior
//! construction, training, inference, trace analytics, and gradient
//! verification.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use softchain::analytics::{batch_stats, emit_report, ReportFormat};
use softchain::chain::{build_vocab, encode_dataset, Vocabulary};
use softchain::corpus::{gen_synthetic, load_jsonl, save_jsonl, split_indices, Op, SynthConfig};
use softchain::objective::{gradient_check, GradCheckOptions, LossWeights, RolloutConfig, SemSpace};
use softchain::prior::{FocusConfig, PriorConfig, PriorMethod, PriorStore};
use softchain::reasoner::{infer, load_checkpoint, save_checkpoint, ModelDims, ReasonerParams, SamplingConfig};
use softchain::train::{train_epochs, write_history_csv, TrainConfig};

#[derive(Parser)]
#[command(name = "softchain", about = "Latent chain-of-thought laboratory", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic arithmetic dataset (JSONL).
    GenData(GenDataArgs),
    /// Build the vocabulary from a dataset and report corpus statistics.
    Parse(ParseArgs),
    /// Construct rule-based priors and focus sets for every instance.
    Priors(PriorsArgs),
    /// Train the latent reasoner.
    Train(TrainArgs),
    /// Run latent inference and dump per-instance traces.
    Infer(InferArgs),
    /// Compute latent-dynamics statistics over traces.
    Analyze(AnalyzeArgs),
    /// Verify analytic gradients against finite differences.
    GradCheck(GradCheckArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// JSON file holding a generator config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    min_operand: Option<i64>,
    #[arg(long)]
    max_operand: Option<i64>,
    /// Operator set, e.g. "+-*/".
    #[arg(long)]
    ops: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ParseArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    vocab_out: PathBuf,
    /// Accepted for pipeline uniformity; parsing is deterministic.
    #[arg(long)]
    #[allow(dead_code)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Temp,
    Gumbel,
    Mix,
    Uniform,
    Random,
}

impl From<MethodArg> for PriorMethod {
    fn from(m: MethodArg) -> PriorMethod {
        match m {
            MethodArg::Temp => PriorMethod::Temp,
            MethodArg::Gumbel => PriorMethod::Gumbel,
            MethodArg::Mix => PriorMethod::Mix,
            MethodArg::Uniform => PriorMethod::Uniform,
            MethodArg::Random => PriorMethod::Random,
        }
    }
}

#[derive(Args)]
struct PriorsArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long, value_enum)]
    method: MethodArg,
    #[arg(long, default_value_t = 0.5)]
    tau: f64,
    #[arg(long, default_value_t = 2.0)]
    beta_op: f64,
    #[arg(long, default_value_t = 2.8)]
    beta_res: f64,
    #[arg(long, default_value_t = 0.2)]
    lambda: f64,
    #[arg(long, default_value_t = false)]
    hard: bool,
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, default_value_t = 1e-2)]
    delta: f64,
    #[arg(long, default_value_t = 777)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON file deserializing into the training config; missing fields
    /// take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    priors: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    out_ckpt: PathBuf,
    #[arg(long)]
    history_csv: PathBuf,
    /// Train/val/test fractions.
    #[arg(long, default_value = "0.9,0.1,0.0")]
    split: String,
    /// Seed for split membership (defaults to the training seed).
    #[arg(long)]
    split_seed: Option<u64>,
    /// Overrides the config's training seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct SamplingArgs {
    #[arg(long, default_value_t = 0.6)]
    temperature: f64,
    #[arg(long, default_value_t = 0.95)]
    top_p: f64,
    #[arg(long, default_value_t = 8)]
    max_latent_steps: usize,
    #[arg(long, default_value_t = false)]
    greedy: bool,
}

impl SamplingArgs {
    fn to_config(&self) -> SamplingConfig {
        SamplingConfig {
            temperature: self.temperature,
            top_p: self.top_p,
            max_latent_steps: self.max_latent_steps,
            greedy: self.greedy,
        }
    }
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Only process the first N instances.
    #[arg(long)]
    limit: Option<usize>,
    /// Accepted for pipeline uniformity; inference mixes filtered
    /// distributions deterministically and draws no samples.
    #[arg(long)]
    #[allow(dead_code)]
    seed: Option<u64>,
    #[command(flatten)]
    sampling: SamplingArgs,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Emit JSON instead of CSV.
    #[arg(long, default_value_t = false)]
    json: bool,
    #[arg(long)]
    limit: Option<usize>,
    /// Accepted for pipeline uniformity; analysis is deterministic.
    #[arg(long)]
    #[allow(dead_code)]
    seed: Option<u64>,
    #[command(flatten)]
    sampling: SamplingArgs,
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    #[arg(long, default_value_t = 200)]
    samples: usize,
    #[arg(long, default_value_t = 777)]
    seed: u64,
    /// Check the autoregressive rollout instead of teacher forcing.
    #[arg(long, default_value_t = false)]
    autoregressive: bool,
    #[arg(long, value_enum, default_value_t = SemSpaceArg::Hidden)]
    sem_space: SemSpaceArg,
    #[arg(long, default_value_t = 16)]
    embed_dim: usize,
    #[arg(long, default_value_t = 32)]
    hidden_dim: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum SemSpaceArg {
    Hidden,
    Vocab,
}

impl From<SemSpaceArg> for SemSpace {
    fn from(s: SemSpaceArg) -> SemSpace {
        match s {
            SemSpaceArg::Hidden => SemSpace::Hidden,
            SemSpaceArg::Vocab => SemSpace::Vocab,
        }
    }
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenData(args) => gen_data(args),
        Command::Parse(args) => parse(args),
        Command::Priors(args) => priors(args),
        Command::Train(args) => train(args),
        Command::Infer(args) => run_infer(args),
        Command::Analyze(args) => analyze(args),
        Command::GradCheck(args) => grad_check_cmd(args),
    }
}

fn parse_ops(s: &str) -> Result<Vec<Op>> {
    let mut ops = Vec::new();
    for c in s.chars() {
        if c.is_whitespace() || c == ',' {
            continue;
        }
        let op = Op::from_symbol(&c.to_string())
            .with_context(|| format!("unknown operator {c:?} (expected + - * /)"))?;
        if !ops.contains(&op) {
            ops.push(op);
        }
    }
    if ops.is_empty() {
        bail!("operator set is empty");
    }
    Ok(ops)
}

fn gen_data(args: GenDataArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(path) => serde_json::from_str::<SynthConfig>(
            &std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?,
        )
        .with_context(|| format!("parsing {}", path.display()))?,
        None => SynthConfig::default(),
    };
    if let Some(count) = args.count {
        cfg.count = count;
    }
    if let Some(max_steps) = args.max_steps {
        cfg.max_steps = max_steps;
    }
    if let Some(lo) = args.min_operand {
        cfg.operand_lo = lo;
    }
    if let Some(hi) = args.max_operand {
        cfg.operand_hi = hi;
    }
    if let Some(ops) = &args.ops {
        cfg.operators = parse_ops(ops)?;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let data = gen_synthetic(&cfg)?;
    save_jsonl(&data, &args.out)?;
    println!(
        "wrote {} instances to {} (seed {})",
        data.len(),
        args.out.display(),
        cfg.seed
    );
    Ok(())
}

fn parse(args: ParseArgs) -> Result<()> {
    let data = load_jsonl(&args.input)?;
    let vocab = build_vocab(&data)?;
    let encoded = encode_dataset(&data, &vocab)?;
    vocab.save_json(&args.vocab_out)?;

    let mut step_hist = std::collections::BTreeMap::new();
    for enc in &encoded {
        *step_hist.entry(enc.step_count()).or_insert(0usize) += 1;
    }
    println!(
        "{} instances, vocabulary size {}",
        data.len(),
        vocab.size()
    );
    for (steps, count) in step_hist {
        println!("  {steps}-step chains: {count}");
    }
    println!("vocabulary written to {}", args.vocab_out.display());
    Ok(())
}

fn priors(args: PriorsArgs) -> Result<()> {
    let data = load_jsonl(&args.input)?;
    let vocab = Vocabulary::load_json(&args.vocab)?;
    let encoded = encode_dataset(&data, &vocab)?;
    let cfg = PriorConfig {
        method: args.method.into(),
        tau: args.tau,
        beta_op: args.beta_op,
        beta_res: args.beta_res,
        lambda: args.lambda,
        hard: args.hard,
        seed: args.seed,
    };
    let focus = FocusConfig {
        k: args.k,
        delta: args.delta,
    };
    let store = PriorStore::build(&encoded, &cfg, &focus)?;
    store.save_jsonl(&args.out)?;
    let steps: usize = store.instances.iter().map(|ip| ip.steps.len()).sum();
    println!(
        "wrote priors for {} instances ({} steps, method {}) to {}",
        store.instances.len(),
        steps,
        cfg.method.as_str(),
        args.out.display()
    );
    Ok(())
}

fn parse_split(s: &str) -> Result<[f64; 3]> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().with_context(|| format!("bad fraction {p:?}")))
        .collect::<Result<_>>()?;
    if parts.len() != 3 {
        bail!("--split needs three comma-separated fractions");
    }
    Ok([parts[0], parts[1], parts[2]])
}

fn train(args: TrainArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(path) => serde_json::from_str::<TrainConfig>(
            &std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?,
        )
        .with_context(|| format!("parsing {}", path.display()))?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(epochs) = args.epochs {
        cfg.epochs = epochs;
    }

    let data = load_jsonl(&args.data)?;
    let vocab = Vocabulary::load_json(&args.vocab)?;
    let encoded = encode_dataset(&data, &vocab)?;
    let store = PriorStore::load_jsonl(&args.priors)?;

    let fractions = parse_split(&args.split)?;
    let split_seed = args.split_seed.unwrap_or(cfg.seed);
    let (tr, va, _te) = split_indices(encoded.len(), fractions, split_seed)?;
    let train_set: Vec<_> = tr.iter().map(|&i| encoded[i].clone()).collect();
    let val_set: Vec<_> = va.iter().map(|&i| encoded[i].clone()).collect();
    println!(
        "training on {} instances, validating on {} ({} epochs, seed {})",
        train_set.len(),
        val_set.len(),
        cfg.epochs,
        cfg.seed
    );

    let (params, history) = train_epochs(&train_set, &val_set, &store, vocab.size(), &cfg)?;
    for row in &history {
        println!(
            "epoch {:>3}  ce {:.4}  kl {:.4}  sem {:.4}  total {:.4}  val {:.3}",
            row.epoch, row.l_ce, row.l_kl, row.l_sem, row.l_total, row.val_acc
        );
    }
    save_checkpoint(&params, &args.out_ckpt)?;
    write_history_csv(&history, &args.history_csv)?;
    let best = history
        .iter()
        .map(|r| r.val_acc)
        .fold(f64::NEG_INFINITY, f64::max);
    println!(
        "checkpoint -> {}  history -> {}  best val {:.3}",
        args.out_ckpt.display(),
        args.history_csv.display(),
        best.max(0.0)
    );
    Ok(())
}

/// One trace row of the dump: top-10 (token, text, probability) per step.
fn trace_row(
    index: usize,
    question: &str,
    expected: &str,
    vocab: &Vocabulary,
    trace: &softchain::reasoner::LatentTrace,
) -> serde_json::Value {
    let steps: Vec<serde_json::Value> = trace
        .distributions
        .iter()
        .map(|q| {
            let mut order: Vec<usize> = (0..q.len()).collect();
            order.sort_by(|&a, &b| q[b].partial_cmp(&q[a]).unwrap().then(a.cmp(&b)));
            let top: Vec<serde_json::Value> = order
                .iter()
                .take(10)
                .map(|&i| {
                    serde_json::json!([
                        i,
                        vocab.token(i as u32).unwrap_or("?"),
                        q[i]
                    ])
                })
                .collect();
            serde_json::json!({ "top": top })
        })
        .collect();
    let decoded: Vec<&str> = trace
        .decoded_answer
        .iter()
        .map(|&t| vocab.token(t).unwrap_or("?"))
        .collect();
    serde_json::json!({
        "index": index,
        "question": question,
        "expected_answer": expected,
        "decoded_answer": decoded.join(" "),
        "correct": decoded.join(" ") == expected,
        "termination_step": trace.termination_step,
        "truncated": trace.truncated,
        "steps": steps,
    })
}

fn run_infer(args: InferArgs) -> Result<()> {
    let data = load_jsonl(&args.data)?;
    let vocab = Vocabulary::load_json(&args.vocab)?;
    let params = load_checkpoint(&args.ckpt)?;
    let encoded = encode_dataset(&data, &vocab)?;
    let cfg = args.sampling.to_config();

    let limit = args.limit.unwrap_or(encoded.len());
    let file = File::create(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    let mut w = BufWriter::new(file);
    let mut correct = 0usize;
    let mut total = 0usize;
    for enc in encoded.iter().take(limit) {
        let trace = infer(&enc.question_ids, &params, &cfg)?;
        let inst = &data.instances[enc.index];
        let row = trace_row(enc.index, &inst.question, &inst.answer, &vocab, &trace);
        serde_json::to_writer(&mut w, &row)?;
        w.write_all(b"\n")?;
        total += 1;
        if trace.decoded_answer == enc.answer_ids {
            correct += 1;
        }
    }
    w.flush()?;
    println!(
        "traced {total} instances -> {} (exact match {:.3})",
        args.out.display(),
        if total > 0 {
            correct as f64 / total as f64
        } else {
            0.0
        }
    );
    Ok(())
}

fn analyze(args: AnalyzeArgs) -> Result<()> {
    let data = load_jsonl(&args.data)?;
    let vocab = Vocabulary::load_json(&args.vocab)?;
    let params = load_checkpoint(&args.ckpt)?;
    let encoded = encode_dataset(&data, &vocab)?;
    let cfg = args.sampling.to_config();

    let limit = args.limit.unwrap_or(encoded.len());
    let mut traces = Vec::new();
    let mut ids = Vec::new();
    for enc in encoded.iter().take(limit) {
        traces.push(infer(&enc.question_ids, &params, &cfg)?);
        ids.push(enc.index);
    }
    let stats = batch_stats(&traces, &ids, |t| {
        vocab.token(t).unwrap_or("?").to_string()
    });
    let format = if args.json {
        ReportFormat::Json
    } else {
        ReportFormat::Csv
    };
    emit_report(&stats, &args.out, format)?;
    println!(
        "{} latent steps over {} traces: mean top-1 {:.4}, mean entropy {:.4}, pearson(top1, entropy) {:.4}",
        stats.steps.len(),
        traces.len(),
        stats.mean_top1,
        stats.mean_entropy,
        stats.pearson_r
    );
    println!("report -> {}", args.out.display());
    Ok(())
}

fn grad_check_cmd(args: GradCheckArgs) -> Result<()> {
    // Self-contained fixture: a small synthetic corpus whose vocabulary
    // lands near 30 tokens, mix priors, and a wide random init so the
    // probed gradients sit well above finite-difference noise.
    let data = gen_synthetic(&SynthConfig {
        count: 20,
        max_steps: 2,
        operand_lo: 2,
        operand_hi: 12,
        operators: vec![Op::Add],
        seed: args.seed,
    })?;
    let vocab = build_vocab(&data)?;
    let encoded = encode_dataset(&data, &vocab)?;
    let store = PriorStore::build(&encoded, &PriorConfig::default(), &FocusConfig::default())?;
    let enc = encoded
        .iter()
        .find(|e| e.step_count() == 2)
        .unwrap_or(&encoded[0]);
    let dims = ModelDims::new(vocab.size(), args.embed_dim, args.hidden_dim);
    let params = ReasonerParams::init_uniform(dims, args.seed, 0.5);
    let opts = GradCheckOptions {
        samples: args.samples,
        seed: args.seed,
        rollout: RolloutConfig {
            teacher_forcing: !args.autoregressive,
            sem_space: args.sem_space.into(),
        },
    };
    println!(
        "|V| = {}, d = {}, d_h = {}, eps = {}, {} sampled parameters, {}",
        vocab.size(),
        args.embed_dim,
        args.hidden_dim,
        args.eps,
        args.samples,
        if args.autoregressive {
            "autoregressive rollout"
        } else {
            "teacher-forced rollout"
        }
    );
    let configs = [
        ("ce only ", LossWeights { ce: 1.0, kl: 0.0, sem: 0.0 }),
        ("kl only ", LossWeights { ce: 0.0, kl: 1.0, sem: 0.0 }),
        ("sem only", LossWeights { ce: 0.0, kl: 0.0, sem: 1.0 }),
        ("combined", LossWeights { ce: 1.0, kl: 1.0, sem: 1.0 }),
    ];
    let mut worst: f64 = 0.0;
    for (name, weights) in configs {
        let err = gradient_check(&params, enc, store.get(enc.index)?, &weights, args.eps, &opts)?;
        let verdict = if err < 1e-4 { "ok" } else { "FAIL" };
        println!("  {name}  max relative error {err:.3e}  {verdict}");
        worst = worst.max(err);
    }
    if worst >= 1e-4 {
        bail!("gradient check failed: max relative error {worst:.3e} >= 1e-4");
    }
    println!("all gradient checks passed");
    Ok(())
}
