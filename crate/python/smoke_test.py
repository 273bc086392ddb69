#!/usr/bin/env python3
"""Smoke test for the softchain_py extension module.

Builds a tiny synthetic corpus, constructs rule-based priors, verifies
the worked prior values, trains a small model for a few epochs, runs
inference, and checks gradient fidelity. Exits 0 when everything holds.

Usage:
    cargo build --release -p softchain-py
    python3 python/smoke_test.py
"""

import math
import shutil
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def load_module():
    candidates = [
        ROOT / "target" / "release" / "libsoftchain_py.so",
        ROOT / "target" / "debug" / "libsoftchain_py.so",
    ]
    lib = next((p for p in candidates if p.exists()), None)
    if lib is None:
        sys.exit(
            "libsoftchain_py.so not found; run `cargo build --release -p softchain-py` first"
        )
    stage = Path(tempfile.mkdtemp(prefix="softchain_py_"))
    shutil.copy(lib, stage / "softchain_py.so")
    sys.path.insert(0, str(stage))
    import softchain_py

    return softchain_py


def approx(a, b, tol=1e-9):
    assert abs(a - b) < tol, f"{a} !~ {b} (tol {tol})"


def main():
    sc = load_module()

    # Corpus generation is deterministic and chains parse.
    data = sc.Dataset.generate(count=400, max_steps=2, min_operand=2,
                               max_operand=9, ops="+-", seed=777)
    again = sc.Dataset.generate(count=400, max_steps=2, min_operand=2,
                                max_operand=9, ops="+-", seed=777)
    assert len(data) == 400
    assert data.instance(0) == again.instance(0)
    question, chain, answer, steps = data.instance(0)
    assert len(sc.segment_chain(chain)) == steps
    print(f"corpus: {len(data)} instances, e.g. {question!r} -> {answer!r}")

    vocab = sc.Vocabulary.build(data)
    ids = vocab.tokenize(question)
    assert vocab.detokenize(ids) == question
    print(f"vocabulary: {len(vocab)} tokens")

    # Worked mixture prior: result mass 0.8 at lambda = 0.2.
    priors = sc.build_priors(data, vocab, method="mix", lam=0.2)
    step_entries = priors.steps(0)[0]
    segment = sc.segment_chain(chain)[0]
    result_token = segment.split("=")[1].strip()
    result_id = vocab.id(result_token)
    by_id = dict(step_entries)
    approx(by_id[result_id], 0.8, 1e-9)
    approx(sum(p for _, p in step_entries), 1.0, 1e-9)
    ops_ids, result_ids = sc.extract_step_tokens(segment, vocab)
    assert result_ids == [result_id]
    n_ops = len(ops_ids)
    for t in ops_ids:
        if t != result_id:
            approx(by_id[t], 0.2 / n_ops, 1e-9)
    print(f"priors: step {segment!r} puts 0.8 on {result_token!r}")

    # Gradient fidelity on the built-in fixture.
    errors = sc.gradient_check(eps=1e-5, samples=120, seed=777)
    for name, e in errors.items():
        assert e < 1e-4, f"gradient check {name}: {e}"
    print("gradient check:", {k: f"{v:.2e}" for k, v in errors.items()})

    # A short training run learns something and is deterministic.
    model, history = sc.train(data, priors, vocab, epochs=20, seed=777,
                              embed_dim=16, hidden_dim=32)
    assert len(history) == 20
    first, last = history[0], history[-1]
    assert last[4] < first[4], f"total loss should drop: {first[4]} -> {last[4]}"
    _, history2 = sc.train(data, priors, vocab, epochs=20, seed=777,
                           embed_dim=16, hidden_dim=32)
    assert history == history2, "training must be deterministic"
    print(f"training: total loss {first[4]:.3f} -> {last[4]:.3f}, "
          f"val acc {last[5]:.3f}")

    # Inference produces a trace with normalized step distributions.
    trace = model.infer(question, vocab)
    assert isinstance(trace["answer"], str)
    assert trace["termination_step"] <= 8
    for top in trace["steps"]:
        assert len(top) <= 10
        assert all(p >= 0 for _, p in top)
    print(f"inference: {question!r} -> {trace['answer']!r} "
          f"(expected {answer!r}, {trace['termination_step']} latent steps)")

    # Analytics: entropy/top-1 statistics over a slice.
    small, _, _ = data.split((0.2, 0.4, 0.4), seed=1)
    stats = model.analyze(small, vocab)
    assert stats["latent_steps"] > 0
    assert -1.0 <= stats["pearson_r"] <= 1.0
    assert stats["mean_entropy"] >= 0.0
    assert stats["mean_entropy"] <= math.log(len(vocab)) + 1e-9
    print(f"analytics: {stats['latent_steps']} steps, "
          f"mean top-1 {stats['mean_top1']:.3f}, "
          f"mean entropy {stats['mean_entropy']:.3f}, "
          f"pearson {stats['pearson_r']:.3f}")

    # Checkpoints round-trip through Python.
    with tempfile.TemporaryDirectory() as tmp:
        ckpt = Path(tmp) / "model.json"
        model.save(str(ckpt))
        reloaded = sc.Model.load(str(ckpt))
        assert reloaded.param_count == model.param_count
        assert reloaded.infer(question, vocab)["answer"] == trace["answer"]

    print("smoke test passed")


if __name__ == "__main__":
    main()
