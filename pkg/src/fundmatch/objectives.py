"""Supervision signals: type-contrastive risk loss, popularity weights,
conformity and interest heads, the combined objective and the blended score."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import DimensionError, DomainError
from .fundgraph import glorot
from .numerics import Tensor

TAU = 0.2
EPSILON = 0.1


@dataclass
class FFN:
    """One hidden ReLU layer followed by a linear output."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def init(cls, d_in: int, d_hidden: int, d_out: int, rng: np.random.Generator) -> "FFN":
        return cls(glorot(rng, d_in, d_hidden), Tensor(np.zeros(d_hidden), requires_grad=True),
                   glorot(rng, d_hidden, d_out), Tensor(np.zeros(d_out), requires_grad=True))

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.w1.shape[0]:
            raise DimensionError(f"FFN expects width {self.w1.shape[0]}, got {x.shape}")
        return nx.relu(x @ self.w1 + self.b1) @ self.w2 + self.b2

    def tensors(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.w1": self.w1, f"{prefix}.b1": self.b1,
                f"{prefix}.w2": self.w2, f"{prefix}.b2": self.b2}


@dataclass
class RiskSignalParams:
    type_table: Tensor      # one row per fund type
    ffn: FFN
    tau: float = TAU

    def __post_init__(self):
        if self.tau <= 0:
            raise DomainError(f"temperature must be positive, got {self.tau}")

    @classmethod
    def init(cls, num_types: int, dim: int, rng: np.random.Generator, tau: float = TAU):
        bound = 1.0 / np.sqrt(dim)
        table = Tensor(rng.uniform(-bound, bound, size=(num_types, dim)), requires_grad=True)
        return cls(table, FFN.init(dim, dim, dim, rng), tau)

    def tensors(self) -> dict[str, Tensor]:
        return {"risk.types": self.type_table, **self.ffn.tensors("risk.ffn")}


@dataclass
class HeadParams:
    conformity_user: FFN
    conformity_item: FFN
    interest_user: FFN
    interest_item: FFN

    @classmethod
    def init(cls, profile_dim: int, dim: int, score_dim: int, rng: np.random.Generator):
        return cls(FFN.init(profile_dim + dim, dim, score_dim, rng), FFN.init(dim, dim, score_dim, rng),
                   FFN.init(profile_dim + dim, dim, score_dim, rng), FFN.init(dim, dim, score_dim, rng))

    def tensors(self) -> dict[str, Tensor]:
        out = {}
        for name in ("conformity_user", "conformity_item", "interest_user", "interest_item"):
            out.update(getattr(self, name).tensors(f"heads.{name}"))
        return out


def type_repr(type_ids, params: RiskSignalParams, mask: np.ndarray | None = None) -> Tensor:
    """Mean-pooled type embeddings passed through the risk FFN.

    ``type_ids`` is one sequence, or a padded ``(B, S)`` batch with ``mask``.
    """
    ids = np.asarray(type_ids, dtype=np.int64)
    if ids.size == 0:
        raise DomainError("type sequence is empty")
    emb = nx.embedding(params.type_table, ids)
    if ids.ndim == 1:
        return params.ffn(emb.mean(axis=0))
    mask = np.ones(ids.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    counts = mask.sum(axis=1, keepdims=True)
    if (counts == 0).any():
        raise DomainError("type sequence is empty")
    weights = (mask / counts)[:, :, None]
    return params.ffn((emb * weights).sum(axis=1))


def risk_contrastive_loss(x_risk: Tensor, x_type: Tensor, tau: float, reduction: str = "sum",
                          negatives: int | None = None, rng: np.random.Generator | None = None) -> Tensor:
    """Symmetric InfoNCE between each user's risk vector and type vector.

    Rows of ``x_risk`` and ``x_type`` are paired by user. Similarity is
    cosine; each anchor is contrasted with every pair in the batch, its own
    positive included. With ``negatives=m`` each anchor instead sees its
    positive plus ``m`` in-batch partners drawn uniformly.
    """
    if tau <= 0:
        raise DomainError(f"temperature must be positive, got {tau}")
    if x_risk.ndim != 2 or x_risk.shape != x_type.shape:
        raise DimensionError(f"risk/type batches differ: {x_risk.shape} vs {x_type.shape}")
    b = x_risk.shape[0]
    if b < 1:
        raise DomainError("contrastive batch is empty")
    sim = (nx.l2_normalize(x_risk) @ nx.l2_normalize(x_type).T) * (1.0 / tau)
    diag = (np.arange(b), np.arange(b))
    if negatives is not None and negatives < b - 1:
        rng = rng or np.random.default_rng(0)
        keep = np.eye(b, dtype=bool)
        for i in range(b):
            others = np.delete(np.arange(b), i)
            keep[i, rng.choice(others, size=negatives, replace=False)] = True
        # dropped logits underflow to exactly zero probability
        row_sim = sim + np.where(keep, 0.0, -1e4)
        col_sim = sim + np.where(keep.T, 0.0, -1e4)
    else:
        row_sim = col_sim = sim
    anchored_risk = nx.log_softmax(row_sim, axis=1)[diag]
    anchored_type = nx.log_softmax(col_sim, axis=0)[diag]
    loss = -(anchored_risk.sum() + anchored_type.sum())
    if reduction == "mean":
        return loss * (1.0 / b)
    if reduction != "sum":
        raise ValueError(f"unknown reduction {reduction!r}")
    return loss


@dataclass
class PopularityTable:
    gamma: np.ndarray
    counts: np.ndarray
    c_min: int
    c_max: int

    def __getitem__(self, fund_ids):
        return self.gamma[fund_ids]

    def __len__(self) -> int:
        return len(self.gamma)


def popularity(counts) -> PopularityTable:
    """Log-min-max normalized interaction counts with add-one smoothing.

    A flat catalog (all counts equal) maps every fund to 0.5.
    """
    c = np.asarray(counts, dtype=np.int64)
    if c.size == 0:
        raise DomainError("popularity needs a non-empty catalog")
    if (c < 0).any():
        raise DomainError("interaction counts must be non-negative")
    c_min, c_max = int(c.min()), int(c.max())
    if c_min == c_max:
        gamma = np.full(c.shape, 0.5)
    else:
        lo, hi = np.log(c_min + 1.0), np.log(c_max + 1.0)
        gamma = (np.log(c + 1.0) - lo) / (hi - lo)
        gamma = np.clip(gamma, 0.0, 1.0)
    return PopularityTable(gamma, c, c_min, c_max)


def _head_score(profile: Tensor, aspect: Tensor, fund: Tensor, user_ffn: FFN, item_ffn: FFN) -> Tensor:
    u = user_ffn(nx.concat([profile, aspect], axis=-1))
    v = item_ffn(fund)
    if u.ndim < v.ndim:
        # one user against a candidate set: (B, ds) -> (B, 1, ds)
        u = u.reshape(u.shape[:-1] + (1, u.shape[-1]))
    return nx.sigmoid((u * v).sum(axis=-1))


def conformity_score(x_profile, x_conformity, x_fund, heads: HeadParams) -> Tensor:
    """``sigmoid(user_head([profile, x_C]) . item_head(x_f))``."""
    return _head_score(nx.as_tensor(x_profile), x_conformity, x_fund,
                       heads.conformity_user, heads.conformity_item)


def interest_score(x_profile, x_interest, x_fund, heads: HeadParams) -> Tensor:
    return _head_score(nx.as_tensor(x_profile), x_interest, x_fund,
                       heads.interest_user, heads.interest_item)


def weighted_losses(y_conformity: Tensor, y_interest: Tensor, labels, gamma) -> tuple[Tensor, Tensor]:
    """Per-instance losses: popular funds weight the conformity head, the rest the interest head."""
    g = np.asarray(gamma, dtype=np.float64)
    if ((g < 0) | (g > 1)).any():
        raise DomainError("popularity weights must lie in [0, 1]")
    lc = nx.binary_cross_entropy(y_conformity, labels) * g
    li = nx.binary_cross_entropy(y_interest, labels) * (1.0 - g)
    return lc, li


@dataclass
class LossBreakdown:
    interest: Tensor
    conformity: Tensor
    risk: Tensor
    total: Tensor
    epsilon: float

    def values(self) -> dict[str, float]:
        return {"interest": self.interest.item(), "conformity": self.conformity.item(),
                "risk": self.risk.item(), "total": self.total.item()}


def total_loss(l_interest, l_conformity, l_risk, epsilon: float = EPSILON) -> LossBreakdown:
    if epsilon < 0:
        raise DomainError(f"epsilon must be non-negative, got {epsilon}")
    li, lc, lr = nx.as_tensor(l_interest), nx.as_tensor(l_conformity), nx.as_tensor(l_risk)
    total = li + lc
    if epsilon != 0:
        total = total + lr * epsilon
    return LossBreakdown(li, lc, lr, total, epsilon)


def predict(y_conformity, y_interest, gamma):
    """Popularity-weighted blend of the two head scores."""
    g = np.asarray(gamma, dtype=np.float64)
    if ((g < 0) | (g > 1)).any():
        raise DomainError("popularity weights must lie in [0, 1]")
    return g * np.asarray(y_conformity) + (1.0 - g) * np.asarray(y_interest)
