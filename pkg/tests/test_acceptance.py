"""Acceptance gate. Each test prints one PASS/FAIL line for its criterion.

The ablation runs (3 seeds x 4 variants on the default synthetic spec)
are shared by the ablation, probe, conformity and training-health checks.
Expect roughly 15 minutes on one core.
"""
import json
import math
import time

import numpy as np
import pytest

from fundmatch import numerics as nx
from fundmatch.cli import run
from fundmatch.datagen import SyntheticSpec, generate
from fundmatch.evaluator import evaluate, ndcg_at_k, probe_disentanglement, rank_funds, recall_at_k
from fundmatch.model import ModelInputs
from fundmatch.numerics import Tensor
from fundmatch.objectives import popularity, predict, risk_contrastive_loss
from fundmatch.trainer import TrainConfig, Trainer, fit, run_ablation

pytestmark = pytest.mark.acceptance

SEEDS = (0, 1, 2)
MICRO = dict(users=12, funds=24, managers=4, organizations=2, stocks=8, indices=4, archetypes=4, days=4,
             profile_dim=3, types=3)
SMALL = dict(users=200, funds=100, managers=20, organizations=5, stocks=40, indices=8, days=6)


@pytest.fixture(scope="module")
def ablations():
    out = {}
    for seed in SEEDS:
        data = generate(SyntheticSpec(seed=seed))
        inputs = ModelInputs.from_dataset(data)
        start = time.perf_counter()
        runs = run_ablation(data, TrainConfig(seed=seed), inputs=inputs)
        out[seed] = {"data": data, "inputs": inputs, "runs": runs, "seconds": time.perf_counter() - start}
    return out


def test_1_gradient_suite(verdict):
    # the floor absorbs central-difference rounding (about 1e-10 here) on
    # gradients that are structurally near zero; see grad_check
    data = generate(SyntheticSpec(seed=0, **MICRO))
    start, worst, checked = time.perf_counter(), 0.0, 0
    for batch_id in range(10):
        tr = Trainer(data, TrainConfig(dim=2, layers=2, negatives=2, n_max=6, seed=batch_id))
        rng = np.random.default_rng(100 + batch_id)
        for t in tr.tensors.values():
            t.data += rng.normal(scale=0.3, size=t.shape)
        users, targets = tr.epoch_instances()[0]
        batch = tr.make_batch(users[:3], targets[:3])
        for term in ("interest", "conformity", "risk", "total"):
            def f(_, term=term):
                return getattr(tr.batch_loss(batch), term)
            nx.zero_grad(tr.tensors.values())
            nx.backward(f(None))
            for t in [t for t in tr.tensors.values() if t.grad is not None]:
                worst = max(worst, nx.grad_check(f, t, floor=1e-6))
                checked += t.data.size
    seconds = time.perf_counter() - start
    verdict(1, worst < 1e-4 and seconds < 60,
            f"max relative error {worst:.2e} over {checked} coordinates, 10 micro-batches, {seconds:.1f} s")


def test_2_closed_forms(verdict):
    uniform = max(abs(risk_contrastive_loss(Tensor(np.tile([0.5, -1.0, 2.0], (b, 1))),
                                            Tensor(np.tile([0.5, -1.0, 2.0], (b, 1))), 0.2).item()
                      - 2 * b * math.log(b)) for b in (2, 4, 8))
    ortho = risk_contrastive_loss(Tensor(np.eye(2)), Tensor(np.eye(2)), 1.0).item()
    g = popularity([3, 7, 40, 3]).gamma
    flat = popularity([4, 4, 4]).gamma
    pop_ok = g[0] == 0.0 and g[2] == 1.0 and flat.tolist() == [0.5, 0.5, 0.5]
    blend_ok = predict(0.9, 0.2, 0.0) == 0.2 and predict(0.9, 0.2, 1.0) == 0.9
    ok = uniform < 1e-6 and abs(ortho - 1.25775) < 1e-5 and pop_ok and blend_ok
    verdict(2, ok, f"uniform 2B ln B err {uniform:.1e}; orthogonal B=2 {ortho:.10f} vs stated 1.25775 "
                   f"(formula 4 ln(1+1/e) = {4 * math.log1p(1 / math.e):.10f}); "
                   f"popularity endpoints/degenerate {pop_ok}; blend endpoints {blend_ok}")


def _naive(scores, excluded, relevant, k):
    order = sorted((f for f in range(len(scores)) if f not in excluded), key=lambda f: (-scores[f], f))
    hits = [f in relevant for f in order[:k]]
    dcg = sum(1 / math.log2(i + 2) for i, h in enumerate(hits) if h)
    idcg = sum(1 / math.log2(i + 2) for i in range(min(k, len(relevant))))
    return sum(hits) / len(relevant), dcg / idcg


def test_3_metric_oracles(verdict):
    rng = np.random.default_rng(2024)
    mismatches = 0
    for _ in range(200):
        n = int(rng.integers(2, 40))
        scores = rng.integers(0, 6, size=n).astype(float)
        excl = rng.choice(n, size=int(rng.integers(0, n // 2 + 1)), replace=False)
        mask = np.zeros(n, bool)
        mask[excl] = True
        pool = np.flatnonzero(~mask)
        relevant = set(rng.choice(pool, size=int(rng.integers(1, pool.size + 1)), replace=False).tolist())
        ranked = rank_funds(0, scores, mask)
        for k in range(1, n + 2):
            r, g = _naive(scores.tolist(), set(excl.tolist()), relevant, k)
            mismatches += recall_at_k(ranked, relevant, k) != r or abs(ndcg_at_k(ranked, relevant, k) - g) > 1e-15
    a = ndcg_at_k([0, 5, 1, 2, 3], {5}, 5)
    b = ndcg_at_k([5, 0, 6], {5, 6}, 3)
    ok = mismatches == 0 and abs(a - 0.63093) < 1e-5 and abs(b - 0.91972) < 1e-5
    verdict(3, ok, f"{mismatches} mismatches on 200 random instances; hand examples {a:.5f}, {b:.5f}")


def test_4_random_baseline(verdict):
    data = generate(SyntheticSpec(seed=0))
    report = evaluate(fit(data, TrainConfig(epochs=0, seed=0)), data)
    zs = {k: (report.metrics[f"recall@{k}"] - k / data.num_funds) / report.stderr[f"recall@{k}"]
          for k in (5, 10, 15, 20)}
    verdict(4, all(abs(z) <= 3 for z in zs.values()),
            "z-scores vs K/|catalog|: " + ", ".join(f"K={k} {z:+.2f}" for k, z in zs.items()))


def test_5_ablation(ablations, verdict):
    mean = {}
    for variant in ("full", "wo_con", "wo_rp", "wo_graph"):
        mean[variant] = {m: float(np.mean([ablations[s]["runs"][variant][1].metrics[f"{m}@10"] for s in SEEDS]))
                         for m in ("recall", "ndcg")}
    gains = {v: {m: mean["full"][m] / mean[v][m] - 1 for m in mean[v]} for v in ("wo_con", "wo_rp", "wo_graph")}
    slowest = max(ablations[s]["seconds"] for s in SEEDS)
    ok = all(g >= 0.05 for gv in gains.values() for g in gv.values()) and slowest < 900
    detail = "; ".join(f"full vs {v}: recall {g['recall']:+.1%}, ndcg {g['ndcg']:+.1%}" for v, g in gains.items())
    verdict(5, ok, f"{detail}; full R@10 {mean['full']['recall']:.4f} N@10 {mean['full']['ndcg']:.4f}; "
                   f"slowest ablate {slowest:.0f} s")


@pytest.fixture(scope="module")
def probes(ablations):
    return {s: probe_disentanglement(ablations[s]["runs"]["full"][0], ablations[s]["data"], seed=s,
                                     inputs=ablations[s]["inputs"]) for s in SEEDS}


def test_6_probe(probes, verdict):
    ok = all(p.accuracy["R"] >= 0.80 and abs(p.shuffled_accuracy["R"] - 0.33) <= 0.05
             and p.accuracy["R"] > p.accuracy["I"] for p in probes.values())
    detail = "; ".join(f"seed {s}: R {p.accuracy['R']:.3f}, I {p.accuracy['I']:.3f}, "
                       f"shuffled R {p.shuffled_accuracy['R']:.3f}" for s, p in probes.items())
    verdict(6, ok, detail)


def test_7_conformity_separation(probes, verdict):
    ok = all(p.top10_gamma["C"] > p.top10_gamma["I"] for p in probes.values())
    verdict(7, ok, "; ".join(f"seed {s}: top-10 gamma C {p.top10_gamma['C']:.4f} vs I {p.top10_gamma['I']:.4f}"
                             for s, p in probes.items()))


def test_8_determinism(tmp_path, verdict):
    config = tmp_path / "config.json"
    config.write_text(json.dumps({"epochs": 2}))
    reports = []
    for rep in ("a", "b"):
        base = tmp_path / rep
        assert run(["gen-data", "--out", str(base / "data"), "--seed", "7"]) == 0
        assert run(["train", "--data", str(base / "data"), "--config", str(config), "--out", str(base / "m"),
                    "--seed", "7"]) == 0
        assert run(["eval", "--data", str(base / "data"), "--checkpoint", str(base / "m" / "model.ckpt"),
                    "--out", str(base / "e"), "--seed", "7"]) == 0
        reports.append((base / "e" / "metrics.json").read_bytes())
    verdict(8, reports[0] == reports[1], f"metric reports identical: {reports[0] == reports[1]} "
                                         f"({len(reports[0])} bytes)")


def test_9_training_health(ablations, verdict):
    history = ablations[0]["runs"]["full"][0].metrics["history"]
    totals = np.array([h["total"] for h in history[:20]])
    smooth = np.convolve(totals, np.ones(5) / 5, mode="valid")
    rises = int((np.diff(smooth) > 0).sum())
    tr = Trainer(generate(SyntheticSpec(seed=0, **SMALL)), TrainConfig(seed=0))
    users, targets = tr.epoch_instances()[0]
    batch = tr.make_batch(users[:32], targets[:32])
    first = tr.step(batch).total.item()
    for _ in range(199):
        last = tr.step(batch).total.item()
    ratio = last / first
    verdict(9, rises == 0 and ratio < 0.1,
            f"5-epoch smoothed loss rises {rises} times over {len(totals)} epochs "
            f"({smooth[0]:.4f} -> {smooth[-1]:.4f}); one-batch overfit reaches {ratio:.1%} of initial loss")
