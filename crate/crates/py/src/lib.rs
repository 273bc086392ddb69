//! Python bindings: datasets, vocabularies, rule-based priors, training,
//! inference, analytics, and gradient verification.
//!
//! Build the cdylib with `cargo build --release -p softchain-py`; the
//! smoke test under `python/` locates and loads it directly.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use softchain::analytics::batch_stats;
use softchain::chain::{
    build_vocab, detokenize, encode_dataset, encode_instance, extract_step_tokens, segment_chain,
    tokenize, EncodedInstance, Vocabulary,
};
use softchain::corpus::{
    gen_synthetic, load_jsonl, save_jsonl, split_indices, Dataset, Op, SynthConfig,
};
use softchain::objective::{
    gradient_check, GradCheckOptions, LossWeights, RolloutConfig, SemSpace,
};
use softchain::prior::{FocusConfig, PriorConfig, PriorMethod, PriorStore};
use softchain::reasoner::{
    infer, load_checkpoint, save_checkpoint, ReasonerParams, SamplingConfig,
};
use softchain::train::{train_epochs, Optimizer, TrainConfig};

fn err(e: softchain::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse_method(s: &str) -> PyResult<PriorMethod> {
    PriorMethod::parse(s)
        .ok_or_else(|| PyValueError::new_err(format!("unknown prior method {s:?}")))
}

fn parse_ops(s: &str) -> PyResult<Vec<Op>> {
    let mut ops = Vec::new();
    for c in s.chars().filter(|c| !c.is_whitespace() && *c != ',') {
        let op = Op::from_symbol(&c.to_string())
            .ok_or_else(|| PyValueError::new_err(format!("unknown operator {c:?}")))?;
        if !ops.contains(&op) {
            ops.push(op);
        }
    }
    Ok(ops)
}

fn parse_sem_space(s: &str) -> PyResult<SemSpace> {
    match s {
        "hidden" => Ok(SemSpace::Hidden),
        "vocab" => Ok(SemSpace::Vocab),
        other => Err(PyValueError::new_err(format!(
            "sem_space must be 'hidden' or 'vocab', got {other:?}"
        ))),
    }
}

/// An ordered corpus of (question, chain, answer) instances.
#[pyclass(name = "Dataset", skip_from_py_object)]
#[derive(Clone)]
struct PyDataset {
    inner: Dataset,
}

#[pymethods]
impl PyDataset {
    /// Generate a synthetic arithmetic corpus.
    #[staticmethod]
    #[pyo3(signature = (count, max_steps=2, min_operand=2, max_operand=9, ops="+-*/", seed=777))]
    fn generate(
        count: usize,
        max_steps: usize,
        min_operand: i64,
        max_operand: i64,
        ops: &str,
        seed: u64,
    ) -> PyResult<Self> {
        let cfg = SynthConfig {
            count,
            max_steps,
            operand_lo: min_operand,
            operand_hi: max_operand,
            operators: parse_ops(ops)?,
            seed,
        };
        Ok(PyDataset {
            inner: gen_synthetic(&cfg).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyDataset {
            inner: load_jsonl(path).map_err(err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_jsonl(&self.inner, path).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// (question, chain, answer, step_count) of one instance.
    fn instance(&self, index: usize) -> PyResult<(String, String, String, usize)> {
        let inst = self
            .inner
            .instances
            .get(index)
            .ok_or_else(|| PyValueError::new_err(format!("index {index} out of range")))?;
        Ok((
            inst.question.clone(),
            inst.chain.clone(),
            inst.answer.clone(),
            inst.step_count,
        ))
    }

    #[getter]
    fn provenance(&self) -> String {
        self.inner.provenance.clone()
    }

    /// Deterministic (train, val, test) split; sizes are floor-based
    /// with the remainder in train.
    fn split(&self, fractions: (f64, f64, f64), seed: u64) -> PyResult<(Self, Self, Self)> {
        let parts = softchain::corpus::split_dataset(
            &self.inner,
            [fractions.0, fractions.1, fractions.2],
            seed,
        )
        .map_err(err)?;
        Ok((
            PyDataset { inner: parts.0 },
            PyDataset { inner: parts.1 },
            PyDataset { inner: parts.2 },
        ))
    }
}

/// Token <-> id bijection with reserved specials at ids 0..=3.
#[pyclass(name = "Vocabulary", skip_from_py_object)]
#[derive(Clone)]
struct PyVocabulary {
    inner: Vocabulary,
}

#[pymethods]
impl PyVocabulary {
    #[staticmethod]
    fn build(dataset: &PyDataset) -> PyResult<Self> {
        Ok(PyVocabulary {
            inner: build_vocab(&dataset.inner).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyVocabulary {
            inner: Vocabulary::load_json(path).map_err(err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save_json(path).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.inner.size()
    }

    fn id(&self, token: &str) -> Option<u32> {
        self.inner.id(token)
    }

    fn token(&self, id: u32) -> Option<String> {
        self.inner.token(id).map(str::to_string)
    }

    fn tokenize(&self, text: &str) -> PyResult<Vec<u32>> {
        tokenize(text, &self.inner).map_err(err)
    }

    fn detokenize(&self, ids: Vec<u32>) -> PyResult<String> {
        detokenize(&ids, &self.inner).map_err(err)
    }
}

/// Interiors of the `<<...>>` segments of a reasoning chain, in order.
#[pyfunction(name = "segment_chain")]
fn segment_chain_py(chain: &str) -> PyResult<Vec<String>> {
    segment_chain(chain).map_err(err)
}

/// (operational ids, result ids) of one step interior.
#[pyfunction(name = "extract_step_tokens")]
#[pyo3(signature = (step_text, vocab, index=1))]
fn extract_step_tokens_py(
    step_text: &str,
    vocab: &PyVocabulary,
    index: usize,
) -> PyResult<(Vec<u32>, Vec<u32>)> {
    let step = extract_step_tokens(step_text, &vocab.inner, index).map_err(err)?;
    Ok((
        step.operational_ids.iter().copied().collect(),
        step.result_ids,
    ))
}

/// Rule-based priors plus focus sets for every instance of a dataset.
#[pyclass(name = "Priors", skip_from_py_object)]
#[derive(Clone)]
struct PyPriors {
    inner: PriorStore,
}

#[pymethods]
impl PyPriors {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyPriors {
            inner: PriorStore::load_jsonl(path).map_err(err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save_jsonl(path).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.inner.instances.len()
    }

    /// Sparse (token id, probability) entries per step for one instance.
    fn steps(&self, index: usize) -> PyResult<Vec<Vec<(u32, f64)>>> {
        let ip = self.inner.get(index).map_err(err)?;
        Ok(ip.steps.iter().map(|s| s.entries.clone()).collect())
    }

    /// Focus token ids per step for one instance.
    fn focus(&self, index: usize) -> PyResult<Vec<Vec<u32>>> {
        let ip = self.inner.get(index).map_err(err)?;
        Ok(ip.focus.iter().map(|f| f.selected_ids.clone()).collect())
    }
}

/// Build priors and focus sets for a whole dataset.
#[pyfunction(name = "build_priors")]
#[pyo3(signature = (dataset, vocab, method="mix", tau=0.5, beta_op=2.0, beta_res=2.8,
                    lam=0.2, hard=false, seed=777, k=5, delta=1e-2))]
#[allow(clippy::too_many_arguments)]
fn build_priors_py(
    dataset: &PyDataset,
    vocab: &PyVocabulary,
    method: &str,
    tau: f64,
    beta_op: f64,
    beta_res: f64,
    lam: f64,
    hard: bool,
    seed: u64,
    k: usize,
    delta: f64,
) -> PyResult<PyPriors> {
    let encoded = encode_dataset(&dataset.inner, &vocab.inner).map_err(err)?;
    let cfg = PriorConfig {
        method: parse_method(method)?,
        tau,
        beta_op,
        beta_res,
        lambda: lam,
        hard,
        seed,
    };
    let focus = FocusConfig { k, delta };
    Ok(PyPriors {
        inner: PriorStore::build(&encoded, &cfg, &focus).map_err(err)?,
    })
}

/// A trained latent reasoner.
#[pyclass(name = "Model")]
struct PyModel {
    params: ReasonerParams,
}

fn sampling(temperature: f64, top_p: f64, max_latent_steps: usize, greedy: bool) -> SamplingConfig {
    SamplingConfig {
        temperature,
        top_p,
        max_latent_steps,
        greedy,
    }
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyModel {
            params: load_checkpoint(path).map_err(err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_checkpoint(&self.params, path).map_err(err)
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.params.dims.vocab_size
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.params.param_count()
    }

    /// Latent inference over one question. Returns a dict with the
    /// decoded answer, termination info, and per-step top-10
    /// (token, probability) pairs.
    #[pyo3(signature = (question, vocab, temperature=0.6, top_p=0.95, max_latent_steps=8, greedy=false))]
    fn infer<'py>(
        &self,
        py: Python<'py>,
        question: &str,
        vocab: &PyVocabulary,
        temperature: f64,
        top_p: f64,
        max_latent_steps: usize,
        greedy: bool,
    ) -> PyResult<Bound<'py, PyDict>> {
        let ids = tokenize(question, &vocab.inner).map_err(err)?;
        let cfg = sampling(temperature, top_p, max_latent_steps, greedy);
        let trace = infer(&ids, &self.params, &cfg).map_err(err)?;
        let out = PyDict::new(py);
        out.set_item(
            "answer",
            detokenize(&trace.decoded_answer, &vocab.inner).map_err(err)?,
        )?;
        out.set_item("termination_step", trace.termination_step)?;
        out.set_item("truncated", trace.truncated)?;
        let steps: Vec<Vec<(String, f64)>> = trace
            .distributions
            .iter()
            .map(|q| {
                let mut order: Vec<usize> = (0..q.len()).collect();
                order.sort_by(|&a, &b| q[b].partial_cmp(&q[a]).unwrap().then(a.cmp(&b)));
                order
                    .into_iter()
                    .take(10)
                    .map(|i| {
                        (
                            vocab.inner.token(i as u32).unwrap_or("?").to_string(),
                            q[i],
                        )
                    })
                    .collect()
            })
            .collect();
        out.set_item("steps", steps)?;
        Ok(out)
    }

    /// Exact-match accuracy of decoded answers over a dataset.
    #[pyo3(signature = (dataset, vocab, temperature=0.6, top_p=0.95, max_latent_steps=8, greedy=false))]
    fn exact_match(
        &self,
        dataset: &PyDataset,
        vocab: &PyVocabulary,
        temperature: f64,
        top_p: f64,
        max_latent_steps: usize,
        greedy: bool,
    ) -> PyResult<f64> {
        let encoded = encode_dataset(&dataset.inner, &vocab.inner).map_err(err)?;
        let cfg = sampling(temperature, top_p, max_latent_steps, greedy);
        softchain::train::evaluate_exact_match(&self.params, &encoded, &cfg).map_err(err)
    }

    /// Pooled latent-dynamics statistics over a dataset: mean top-1,
    /// mean entropy, pearson(top1, entropy), and token frequencies.
    #[pyo3(signature = (dataset, vocab, temperature=0.6, top_p=0.95, max_latent_steps=8, greedy=false))]
    fn analyze<'py>(
        &self,
        py: Python<'py>,
        dataset: &PyDataset,
        vocab: &PyVocabulary,
        temperature: f64,
        top_p: f64,
        max_latent_steps: usize,
        greedy: bool,
    ) -> PyResult<Bound<'py, PyDict>> {
        let encoded = encode_dataset(&dataset.inner, &vocab.inner).map_err(err)?;
        let cfg = sampling(temperature, top_p, max_latent_steps, greedy);
        let mut traces = Vec::new();
        let mut ids = Vec::new();
        for enc in &encoded {
            traces.push(infer(&enc.question_ids, &self.params, &cfg).map_err(err)?);
            ids.push(enc.index);
        }
        let stats = batch_stats(&traces, &ids, |t| {
            vocab.inner.token(t).unwrap_or("?").to_string()
        });
        let out = PyDict::new(py);
        out.set_item("latent_steps", stats.steps.len())?;
        out.set_item("mean_top1", stats.mean_top1)?;
        out.set_item("mean_entropy", stats.mean_entropy)?;
        out.set_item("pearson_r", stats.pearson_r)?;
        let freq: Vec<(String, u64)> = stats
            .token_frequency
            .iter()
            .map(|(_, text, count)| (text.clone(), *count))
            .collect();
        out.set_item("token_frequency", freq)?;
        Ok(out)
    }
}

/// Train the latent reasoner; returns the best-validation model and the
/// per-epoch history as (epoch, l_ce, l_kl, l_sem, l_total, val_acc).
#[pyfunction(name = "train")]
#[pyo3(signature = (dataset, priors, vocab, epochs=30, batch_size=16, learning_rate=3e-3,
                    optimizer="adam", seed=777, ce=1.0, kl=1.0, sem=1.0, teacher_forcing=false,
                    gradient_clip=1.0, sem_space="hidden", embed_dim=32, hidden_dim=64,
                    train_frac=0.9, val_frac=0.1, split_seed=None))]
#[allow(clippy::too_many_arguments)]
fn train_py(
    dataset: &PyDataset,
    priors: &PyPriors,
    vocab: &PyVocabulary,
    epochs: usize,
    batch_size: usize,
    learning_rate: f64,
    optimizer: &str,
    seed: u64,
    ce: f64,
    kl: f64,
    sem: f64,
    teacher_forcing: bool,
    gradient_clip: f64,
    sem_space: &str,
    embed_dim: usize,
    hidden_dim: usize,
    train_frac: f64,
    val_frac: f64,
    split_seed: Option<u64>,
) -> PyResult<(PyModel, Vec<(usize, f64, f64, f64, f64, f64)>)> {
    let optimizer = match optimizer {
        "adam" => Optimizer::Adam,
        "sgd" => Optimizer::Sgd,
        other => {
            return Err(PyValueError::new_err(format!(
                "optimizer must be 'adam' or 'sgd', got {other:?}"
            )))
        }
    };
    let cfg = TrainConfig {
        epochs,
        batch_size,
        learning_rate,
        optimizer,
        seed,
        weights: LossWeights { ce, kl, sem },
        teacher_forcing,
        gradient_clip,
        sem_space: parse_sem_space(sem_space)?,
        embed_dim,
        hidden_dim,
        ..TrainConfig::default()
    };
    let encoded = encode_dataset(&dataset.inner, &vocab.inner).map_err(err)?;
    let test_frac = (1.0 - train_frac - val_frac).max(0.0);
    let (tr, va, _) = split_indices(
        encoded.len(),
        [train_frac, val_frac, test_frac],
        split_seed.unwrap_or(seed),
    )
    .map_err(err)?;
    let train_set: Vec<EncodedInstance> = tr.iter().map(|&i| encoded[i].clone()).collect();
    let val_set: Vec<EncodedInstance> = va.iter().map(|&i| encoded[i].clone()).collect();
    let (params, history) =
        train_epochs(&train_set, &val_set, &priors.inner, vocab.inner.size(), &cfg)
            .map_err(err)?;
    let rows = history
        .into_iter()
        .map(|r| (r.epoch, r.l_ce, r.l_kl, r.l_sem, r.l_total, r.val_acc))
        .collect();
    Ok((PyModel { params }, rows))
}

/// Max relative error between analytic gradients and central finite
/// differences on a self-contained fixture, one entry per weight config.
#[pyfunction(name = "gradient_check")]
#[pyo3(signature = (eps=1e-5, samples=200, seed=777, teacher_forcing=true))]
fn gradient_check_py<'py>(
    py: Python<'py>,
    eps: f64,
    samples: usize,
    seed: u64,
    teacher_forcing: bool,
) -> PyResult<Bound<'py, PyDict>> {
    let data = gen_synthetic(&SynthConfig {
        count: 20,
        max_steps: 2,
        operand_lo: 2,
        operand_hi: 12,
        operators: vec![Op::Add],
        seed,
    })
    .map_err(err)?;
    let vocab = build_vocab(&data).map_err(err)?;
    let encoded: Vec<EncodedInstance> = data
        .instances
        .iter()
        .enumerate()
        .map(|(i, inst)| encode_instance(inst, i, &vocab))
        .collect::<softchain::Result<_>>()
        .map_err(err)?;
    let store = PriorStore::build(&encoded, &PriorConfig::default(), &FocusConfig::default())
        .map_err(err)?;
    let enc = encoded
        .iter()
        .find(|e| e.step_count() == 2)
        .unwrap_or(&encoded[0]);
    let dims = softchain::reasoner::ModelDims::new(vocab.size(), 16, 32);
    let params = ReasonerParams::init_uniform(dims, seed, 0.5);
    let opts = GradCheckOptions {
        samples,
        seed,
        rollout: RolloutConfig {
            teacher_forcing,
            sem_space: SemSpace::Hidden,
        },
    };
    let out = PyDict::new(py);
    for (name, weights) in [
        ("ce", LossWeights { ce: 1.0, kl: 0.0, sem: 0.0 }),
        ("kl", LossWeights { ce: 0.0, kl: 1.0, sem: 0.0 }),
        ("sem", LossWeights { ce: 0.0, kl: 0.0, sem: 1.0 }),
        ("combined", LossWeights { ce: 1.0, kl: 1.0, sem: 1.0 }),
    ] {
        let e = gradient_check(
            &params,
            enc,
            store.get(enc.index).map_err(err)?,
            &weights,
            eps,
            &opts,
        )
        .map_err(err)?;
        out.set_item(name, e)?;
    }
    Ok(out)
}

#[pymodule]
fn softchain_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyVocabulary>()?;
    m.add_class::<PyPriors>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(segment_chain_py, m)?)?;
    m.add_function(wrap_pyfunction!(extract_step_tokens_py, m)?)?;
    m.add_function(wrap_pyfunction!(build_priors_py, m)?)?;
    m.add_function(wrap_pyfunction!(train_py, m)?)?;
    m.add_function(wrap_pyfunction!(gradient_check_py, m)?)?;
    Ok(())
}
