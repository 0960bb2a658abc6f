"""Top-K ranking metrics, checkpoint evaluation, disentanglement probes and
embedding export."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .datagen import DatasetBundle, Interactions
from .disentangle import ASPECTS
from .errors import DomainError, SchemaError, UnsupportedDatasetError
from .model import Checkpoint, ModelInputs, ScoreMatrices, score_users
from .numerics import Tensor

DEFAULT_KS = (5, 10, 15, 20)


@dataclass
class RankedList:
    user: int
    funds: np.ndarray
    scores: np.ndarray


def rank_funds(user: int, scores: np.ndarray, exclude: np.ndarray | None = None) -> RankedList:
    """Candidates by descending score, ties broken by ascending fund id."""
    scores = np.asarray(scores, dtype=np.float64)
    candidates = np.arange(len(scores)) if exclude is None else np.flatnonzero(~np.asarray(exclude))
    order = np.lexsort((candidates, -scores[candidates]))
    return RankedList(user, candidates[order], scores[candidates][order])


def _check_k(k: int) -> None:
    if k <= 0:
        raise DomainError(f"cutoff K must be positive, got {k}")


def recall_at_k(ranked, relevant, k: int) -> float:
    _check_k(k)
    relevant = set(relevant)
    if not relevant:
        raise DomainError("relevant set is empty")
    funds = ranked.funds if isinstance(ranked, RankedList) else ranked
    return len(relevant.intersection(np.asarray(funds[:k]).tolist())) / len(relevant)


def ndcg_at_k(ranked, relevant, k: int) -> float:
    _check_k(k)
    relevant = set(relevant)
    if not relevant:
        raise DomainError("relevant set is empty")
    funds = ranked.funds if isinstance(ranked, RankedList) else ranked
    dcg = sum(1.0 / math.log2(i + 2) for i, f in enumerate(np.asarray(funds[:k]).tolist()) if f in relevant)
    idcg = sum(1.0 / math.log2(i + 2) for i in range(min(k, len(relevant))))
    return dcg / idcg


@dataclass
class MetricReport:
    variant: str
    users_evaluated: int
    users_skipped: int
    metrics: dict[str, float]
    stderr: dict[str, float] = field(default_factory=dict)
    skipped: dict[str, int] = field(default_factory=dict)
    per_user: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def to_json(self) -> str:
        body = {"variant": self.variant, "users_evaluated": self.users_evaluated,
                "users_skipped": self.users_skipped, "metrics": self.metrics, "stderr": self.stderr,
                "skipped": self.skipped, "averaging": "per-user"}
        return json.dumps(body, indent=2, sort_keys=True) + "\n"

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json(), encoding="utf-8")
        return path


def relevant_sets(part: Interactions, history: np.ndarray) -> tuple[dict[int, set], int]:
    """Per-user held-out funds outside training history; returns the sets and
    how many users were left with nothing."""
    out: dict[int, set] = {}
    for u, f in zip(part.user.tolist(), part.fund.tolist()):
        out.setdefault(u, set())
        if u < history.shape[0] and not history[u, f]:
            out[u].add(f)
    empty = sum(1 for v in out.values() if not v)
    return {u: v for u, v in out.items() if v}, empty


def metrics_from_scores(scores: ScoreMatrices, history: np.ndarray, part: Interactions,
                        ks=DEFAULT_KS, variant: str = "full") -> MetricReport:
    ks = sorted(int(k) for k in ks)
    for k in ks:
        _check_k(k)
    relevant, no_relevant = relevant_sets(part, history)
    row = {int(u): i for i, u in enumerate(scores.users)}
    no_history = sum(1 for u in relevant if u not in row)
    users = sorted(u for u in relevant if u in row)
    per_user = {f"{m}@{k}": np.empty(len(users)) for k in ks for m in ("recall", "ndcg")}
    for j, u in enumerate(users):
        ranked = rank_funds(u, scores.blended[row[u]], history[u])
        for k in ks:
            per_user[f"recall@{k}"][j] = recall_at_k(ranked, relevant[u], k)
            per_user[f"ndcg@{k}"][j] = ndcg_at_k(ranked, relevant[u], k)
    metrics, stderr = {}, {}
    for name, vals in per_user.items():
        metrics[name] = float(vals.mean()) if len(vals) else 0.0
        stderr[name] = float(vals.std(ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else 0.0
    skipped = {"no_training_history": no_history, "no_unseen_relevant": no_relevant}
    return MetricReport(variant, len(users), no_history + no_relevant, metrics, stderr, skipped, per_user)


def variant_of(config: dict) -> str:
    flags = [name for name, key in (("wo_con", "disable_conformity"), ("wo_rp", "disable_risk"),
                                    ("wo_graph", "disable_graph")) if config.get(key)]
    return "+".join(flags) if flags else "full"


def check_catalog(ckpt: Checkpoint, inputs: ModelInputs) -> None:
    have = inputs.catalog()
    for key in ("num_funds", "num_types", "num_entities", "profile_dim"):
        if ckpt.catalog.get(key) != have[key]:
            raise SchemaError(f"checkpoint {key}={ckpt.catalog.get(key)} but dataset has {have[key]}")


def checkpoint_scores(ckpt: Checkpoint, inputs: ModelInputs, users=None) -> ScoreMatrices:
    check_catalog(ckpt, inputs)
    return score_users(ckpt.params, inputs.graph, inputs.sequences, inputs.profiles, ckpt.popularity, users,
                       use_graph=not ckpt.config.get("disable_graph", False),
                       use_conformity=not ckpt.config.get("disable_conformity", False))


def evaluate(ckpt: Checkpoint, data: DatasetBundle, partition: str = "test", ks=DEFAULT_KS,
             inputs: ModelInputs | None = None) -> MetricReport:
    if partition not in ("test", "validation"):
        raise ValueError(f"unknown partition {partition!r}")
    inputs = inputs or ModelInputs.from_dataset(data, ckpt.config.get("n_max", 50))
    part = getattr(data, partition)
    users = sorted(set(part.user.tolist()))
    scores = checkpoint_scores(ckpt, inputs, users)
    return metrics_from_scores(scores, inputs.history, part, ks, variant_of(ckpt.config))


# probes

@dataclass
class ProbeReport:
    accuracy: dict[str, float]             # per aspect, true labels
    shuffled_accuracy: dict[str, float]    # per aspect, permuted labels
    top10_gamma: dict[str, float]          # mean popularity of top-10 lists per head
    users: int
    classes: int

    def to_json(self) -> str:
        return json.dumps({"accuracy": self.accuracy, "shuffled_accuracy": self.shuffled_accuracy,
                           "top10_gamma": self.top10_gamma, "users": self.users, "classes": self.classes,
                           "label": "planted risk level"}, indent=2, sort_keys=True) + "\n"


def fit_linear_probe(x_train: np.ndarray, y_train: np.ndarray, classes: int, steps: int = 300,
                     lr: float = 0.1, l2: float = 1e-3) -> tuple[np.ndarray, np.ndarray]:
    """Multinomial logistic regression by full-batch gradient descent."""
    w = Tensor(np.zeros((x_train.shape[1], classes)), requires_grad=True)
    b = Tensor(np.zeros(classes), requires_grad=True)
    onehot = np.eye(classes)[y_train]
    x = Tensor(x_train)
    for _ in range(steps):
        logp = nx.log_softmax(x @ w + b, axis=1)
        loss = -(logp * onehot).sum() * (1.0 / len(y_train)) + (w * w).sum() * l2
        nx.zero_grad([w, b])
        nx.backward(loss)
        w.data -= lr * w.grad
        b.data -= lr * b.grad
    return w.data, b.data


def probe_accuracy(features: np.ndarray, labels: np.ndarray, classes: int, rng: np.random.Generator,
                   train_frac: float = 0.7) -> float:
    n = len(labels)
    perm = rng.permutation(n)
    cut = int(round(train_frac * n))
    tr, te = perm[:cut], perm[cut:]
    mu, sd = features[tr].mean(axis=0), features[tr].std(axis=0) + 1e-12
    z = (features - mu) / sd
    w, b = fit_linear_probe(z[tr], labels[tr], classes)
    pred = np.argmax(z[te] @ w + b, axis=1)
    return float((pred == labels[te]).mean())


def top_gamma(scores: np.ndarray, history: np.ndarray, gamma: np.ndarray, k: int = 10) -> float:
    vals = []
    for s, h in zip(scores, history):
        vals.append(gamma[rank_funds(0, s, h).funds[:k]].mean())
    return float(np.mean(vals))


def probe_disentanglement(ckpt: Checkpoint, data: DatasetBundle, seed: int = 0,
                          inputs: ModelInputs | None = None) -> ProbeReport:
    if data.latents is None:
        raise UnsupportedDatasetError("probing needs planted latents (latents file missing)")
    inputs = inputs or ModelInputs.from_dataset(data, ckpt.config.get("n_max", 50))
    scores = checkpoint_scores(ckpt, inputs)
    labels = data.latents.risk_level[scores.users]
    classes = int(data.latents.risk_level.max()) + 1
    acc, shuf = {}, {}
    for a in ASPECTS:
        acc[a] = probe_accuracy(scores.aspects[a], labels, classes, np.random.default_rng(seed))
        permuted = np.random.default_rng(seed + 1).permutation(labels)
        shuf[a] = probe_accuracy(scores.aspects[a], permuted, classes, np.random.default_rng(seed))
    hist = inputs.history[scores.users]
    gamma = ckpt.popularity.gamma
    tg = {"C": top_gamma(scores.conformity, hist, gamma), "I": top_gamma(scores.interest, hist, gamma)}
    return ProbeReport(acc, shuf, tg, len(scores.users), classes)


def export_embeddings(ckpt: Checkpoint, data: DatasetBundle, path: str | Path, users=None,
                      inputs: ModelInputs | None = None) -> Path:
    """One line per (user, aspect): ``user<TAB>aspect<TAB>v1,...,vd<TAB>label``.

    The label is the planted risk level when latents exist, else the user's
    holding-size quartile bucket.
    """
    inputs = inputs or ModelInputs.from_dataset(data, ckpt.config.get("n_max", 50))
    chosen = sorted(inputs.sequences) if users is None else sorted(users)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["# user_id\taspect\tvector\tlabel"]
    if chosen:
        scores = checkpoint_scores(ckpt, inputs, chosen)
        if data.latents is not None:
            labels = data.latents.risk_level
        else:
            held = inputs.history.sum(axis=1)
            labels = np.searchsorted(np.quantile(held, [0.25, 0.5, 0.75]), held, side="right")
        for i, u in enumerate(scores.users.tolist()):
            for a in ASPECTS:
                vec = ",".join(repr(float(v)) for v in scores.aspects[a][i])
                lines.append(f"{u}\t{a}\t{vec}\t{int(labels[u])}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path
