"""Mini-batch training of the combined objective with sampled negatives,
Adam updates, best-on-validation checkpointing and ablation switches."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import numerics as nx
from .datagen import DatasetBundle
from .disentangle import N_MAX
from .errors import ConfigError, NumericError
from .evaluator import metrics_from_scores, variant_of
from .model import Checkpoint, ModelInputs, ModelParams, fund_table, score_users, user_aspects
from .numerics import Tensor
from .objectives import (
    EPSILON,
    TAU,
    conformity_score,
    interest_score,
    risk_contrastive_loss,
    total_loss,
    type_repr,
    weighted_losses,
)

log = logging.getLogger(__name__)

VARIANTS = {
    "full": {},
    "wo_con": {"disable_conformity": True},
    "wo_rp": {"disable_risk": True},
    "wo_graph": {"disable_graph": True},
}


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 256
    lr: float = 3e-3
    negatives: int = 4
    epsilon: float = EPSILON
    tau: float = TAU
    dim: int = 64
    layers: int = 2
    n_max: int = N_MAX
    seed: int = 0
    disable_conformity: bool = False
    disable_risk: bool = False
    disable_graph: bool = False
    positives_per_user: int = 4        # training instances drawn per user each epoch
    risk_reduction: str = "mean"       # "mean" divides the contrastive sum by the batch size
    risk_negatives: int | None = None  # sampled in-batch negatives instead of the full batch
    eval_every: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("epochs",):
            if getattr(self, name) < 0:
                raise ConfigError(name, "must be non-negative")
        for name in ("batch_size", "negatives", "dim", "layers", "n_max", "positives_per_user", "eval_every"):
            if getattr(self, name) < 1:
                raise ConfigError(name, "must be at least 1")
        for name in ("lr", "tau"):
            if not getattr(self, name) > 0:
                raise ConfigError(name, "must be positive")
        if not self.epsilon >= 0 or not math.isfinite(self.epsilon):
            raise ConfigError("epsilon", f"must be a non-negative number, got {self.epsilon}")
        if self.risk_reduction not in ("mean", "sum"):
            raise ConfigError("risk_reduction", "must be 'mean' or 'sum'")
        if self.risk_negatives is not None and self.risk_negatives < 1:
            raise ConfigError("risk_negatives", "must be at least 1 when set")

    @property
    def effective_epsilon(self) -> float:
        return 0.0 if self.disable_risk else self.epsilon

    @property
    def variant(self) -> str:
        return variant_of(asdict(self))

    def with_variant(self, name: str) -> "TrainConfig":
        if name not in VARIANTS:
            raise ConfigError("variant", f"unknown variant {name!r}; choose from {sorted(VARIANTS)}")
        base = {**asdict(self), "disable_conformity": False, "disable_risk": False, "disable_graph": False}
        return TrainConfig(**{**base, **VARIANTS[name]})

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(unknown[0], "unknown configuration field")
        types = {f.name: f.type for f in fields(cls)}
        for key, val in raw.items():
            if "bool" in str(types[key]) and not isinstance(val, bool):
                raise ConfigError(key, "must be true or false")
            if str(types[key]) in ("int", "float") and (isinstance(val, bool) or not isinstance(val, (int, float))):
                raise ConfigError(key, "must be a number")
            if str(types[key]) == "int" and isinstance(val, float):
                raise ConfigError(key, "must be an integer")
        return cls(**raw)

    @classmethod
    def from_json(cls, path: str | Path) -> "TrainConfig":
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError("config", f"not valid JSON ({exc})") from None
        if not isinstance(raw, dict):
            raise ConfigError("config", "top level must be an object")
        return cls.from_dict(raw)


class Adam:
    """Standard Adam with bias correction; parameters without a gradient are left untouched."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * p.grad ** 2
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        nx.zero_grad(self.params.values())


def sample_negatives(history_row: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Up to ``k`` distinct funds drawn uniformly from those outside the user's history."""
    pool = np.flatnonzero(~np.asarray(history_row, dtype=bool))
    if pool.size == 0:
        return pool
    return np.sort(rng.choice(pool, size=min(k, pool.size), replace=False))


@dataclass
class Batch:
    users: np.ndarray
    targets: np.ndarray
    candidates: np.ndarray      # (B, 1 + k), column 0 is the positive
    labels: np.ndarray
    weights: np.ndarray         # 0 for padding candidates


class Trainer:
    def __init__(self, data: DatasetBundle, config: TrainConfig, inputs: ModelInputs | None = None):
        self.data, self.config = data, config
        self.inputs = inputs or ModelInputs.from_dataset(data, config.n_max)
        self.rng = np.random.default_rng(config.seed)
        self.params = ModelParams.init(self.inputs.graph.num_entities, self.inputs.num_types,
                                       self.inputs.profiles.shape[1], config.dim, config.layers,
                                       self.rng, config.tau)
        self.tensors = self.params.tensors()
        self.optimizer = Adam(self.tensors, lr=config.lr)
        self.positives = {u: np.unique(s.fund_ids) for u, s in self.inputs.sequences.items()}
        self.skipped = 0
        self.history: list[dict] = []

    # batch assembly

    def epoch_instances(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """(users, targets) rounds; each round holds at most one instance per user."""
        per_user = {}
        for u in sorted(self.positives):
            pos = self.positives[u]
            if pos.size == 1:
                # masking the only fund would leave an empty history
                self.skipped += 1
                continue
            per_user[u] = self.rng.choice(pos, size=min(self.config.positives_per_user, pos.size), replace=False)
        rounds = []
        for j in range(self.config.positives_per_user):
            users = np.array([u for u, t in per_user.items() if len(t) > j], dtype=np.int64)
            if users.size == 0:
                break
            targets = np.array([per_user[int(u)][j] for u in users], dtype=np.int64)
            perm = self.rng.permutation(users.size)
            rounds.append((users[perm], targets[perm]))
        return rounds

    def make_batch(self, users: np.ndarray, targets: np.ndarray) -> Batch:
        k = self.config.negatives
        cands = np.zeros((len(users), 1 + k), dtype=np.int64)
        weights = np.zeros((len(users), 1 + k))
        cands[:, 0] = targets
        weights[:, 0] = 1.0
        for i, u in enumerate(users):
            neg = sample_negatives(self.inputs.history[u], k, self.rng)
            cands[i, 1:1 + neg.size] = neg
            weights[i, 1:1 + neg.size] = 1.0
        labels = np.zeros(cands.shape)
        labels[:, 0] = 1.0
        return Batch(users, targets, cands, labels, weights)

    # objective

    def batch_loss(self, batch: Batch):
        cfg, p = self.config, self.params
        table = fund_table(p, self.inputs.graph, use_graph=not cfg.disable_graph)
        seqs = [self.inputs.sequences[int(u)] for u in batch.users]
        aspects, types, mask = user_aspects(p, table, seqs, exclude=batch.targets)
        x_f = nx.embedding(table, batch.candidates)
        prof = Tensor(self.inputs.profiles[batch.users])
        y_i = interest_score(prof, aspects.x_I, x_f, p.heads)
        gamma = self.inputs.popularity.gamma[batch.candidates]
        # sum over each instance's candidates, mean over instances: the same
        # per-user scale as the contrastive term's batch mean
        denom = 1.0 / len(batch.users)
        if cfg.disable_conformity:
            _, li = weighted_losses(y_i, y_i, batch.labels, gamma)
            l_c = Tensor(0.0)
        else:
            y_c = conformity_score(prof, aspects.x_C, x_f, p.heads)
            lc, li = weighted_losses(y_c, y_i, batch.labels, gamma)
            l_c = (lc * batch.weights).sum() * denom
        l_i = (li * batch.weights).sum() * denom
        if cfg.disable_risk:
            l_r = Tensor(0.0)
        else:
            x_t = type_repr(types, p.risk, mask)
            l_r = risk_contrastive_loss(aspects.x_R, x_t, p.risk.tau, cfg.risk_reduction,
                                        cfg.risk_negatives, self.rng)
        return total_loss(l_i, l_c, l_r, cfg.effective_epsilon)

    def train_epoch(self) -> dict[str, float]:
        cfg = self.config
        sums = {"interest": 0.0, "conformity": 0.0, "risk": 0.0, "total": 0.0}
        n_batches = 0
        for users, targets in self.epoch_instances():
            for start in range(0, users.size, cfg.batch_size):
                batch = self.make_batch(users[start:start + cfg.batch_size], targets[start:start + cfg.batch_size])
                self.step(batch, n_batches)
                for key, val in self.last.values().items():
                    sums[key] += val
                n_batches += 1
        return {k: v / max(n_batches, 1) for k, v in sums.items()}

    def step(self, batch: Batch, batch_id: int = 0):
        try:
            parts = self.batch_loss(batch)
        except NumericError as exc:
            raise NumericError(f"non-finite value in batch {batch_id}: {exc}") from None
        vals = parts.values()
        if not all(math.isfinite(v) for v in vals.values()):
            raise NumericError(f"non-finite loss in batch {batch_id}: {vals}")
        self.optimizer.zero_grad()
        nx.backward(parts.total)
        self.optimizer.step()
        self.last = parts
        return parts

    # selection

    def validation_recall(self) -> float:
        part = self.data.validation
        users = sorted(set(part.user.tolist()))
        scores = score_users(self.params, self.inputs.graph, self.inputs.sequences, self.inputs.profiles,
                             self.inputs.popularity, users, use_graph=not self.config.disable_graph,
                             use_conformity=not self.config.disable_conformity)
        return metrics_from_scores(scores, self.inputs.history, part, ks=(10,)).metrics["recall@10"]

    def checkpoint(self, epoch: int, metrics: dict, arrays: dict | None = None) -> Checkpoint:
        params = self.params
        if arrays is not None:
            params = ModelParams.from_arrays(self.params.shape_info(), arrays)
        return Checkpoint(params, self.inputs.popularity, asdict(self.config), epoch, metrics,
                          self.inputs.catalog())

    def fit(self, progress=None) -> Checkpoint:
        best_recall = self.validation_recall()
        best_epoch, best_arrays = 0, self.params.arrays()
        for epoch in range(1, self.config.epochs + 1):
            losses = self.train_epoch()
            record = {"epoch": epoch, **losses}
            if epoch % self.config.eval_every == 0 or epoch == self.config.epochs:
                record["val_recall@10"] = self.validation_recall()
                if record["val_recall@10"] > best_recall:
                    best_recall, best_epoch, best_arrays = record["val_recall@10"], epoch, self.params.arrays()
            self.history.append(record)
            if progress is not None:
                progress(record)
        metrics = {"val_recall@10": best_recall, "skipped_instances": self.skipped, "history": self.history}
        return self.checkpoint(best_epoch, metrics, best_arrays)


def fit(data: DatasetBundle, config: TrainConfig, progress=None, inputs: ModelInputs | None = None) -> Checkpoint:
    return Trainer(data, config, inputs).fit(progress)


def run_ablation(data: DatasetBundle, config: TrainConfig, variants=tuple(VARIANTS), ks=(5, 10, 15, 20),
                 progress=None, inputs: ModelInputs | None = None) -> dict:
    """Train and test every variant on one dataset with one seed."""
    from .evaluator import evaluate

    inputs = inputs or ModelInputs.from_dataset(data, config.n_max)
    out = {}
    for name in variants:
        ckpt = fit(data, config.with_variant(name), inputs=inputs)
        report = evaluate(ckpt, data, "test", ks, inputs=inputs)
        report.variant = name
        out[name] = (ckpt, report)
        if progress is not None:
            progress(name, report)
    return out
