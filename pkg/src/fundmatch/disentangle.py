"""Three-head attention pooling of a behavior sequence into interest, risk
and conformity vectors."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .errors import DimensionError, DomainError
from .fundgraph import glorot
from .numerics import Tensor

ASPECTS = ("I", "R", "C")
N_MAX = 50


@dataclass
class BehaviorSequence:
    user: int
    fund_ids: list[int]
    type_ids: list[int]

    def __post_init__(self):
        if not self.fund_ids:
            raise DomainError(f"user {self.user}: behavior sequence is empty")
        if len(self.fund_ids) != len(self.type_ids):
            raise DomainError(f"user {self.user}: fund and type sequences differ in length")

    def __len__(self) -> int:
        return len(self.fund_ids)

    def truncated(self, n_max: int) -> "BehaviorSequence":
        return BehaviorSequence(self.user, self.fund_ids[-n_max:], self.type_ids[-n_max:])


@dataclass
class DisentangleParams:
    base_weight: Tensor          # W^D, d x d
    aspect_vectors: dict[str, Tensor]

    @classmethod
    def init(cls, dim: int, rng: np.random.Generator, std: float = 0.1) -> "DisentangleParams":
        w = glorot(rng, dim, dim)
        vecs = {a: Tensor(rng.normal(0.0, std, size=dim), requires_grad=True) for a in ASPECTS}
        return cls(w, vecs)

    def tensors(self) -> dict[str, Tensor]:
        out = {"disentangle.base": self.base_weight}
        out.update({f"disentangle.w_{a}": v for a, v in self.aspect_vectors.items()})
        return out


@dataclass
class AspectBundle:
    vectors: dict[str, Tensor]
    attention: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def x_I(self) -> Tensor:
        return self.vectors["I"]

    @property
    def x_R(self) -> Tensor:
        return self.vectors["R"]

    @property
    def x_C(self) -> Tensor:
        return self.vectors["C"]


def gather_behavior(seq: BehaviorSequence, fund_table: Tensor) -> Tensor:
    """Rows of the fund table for each behavior, in sequence order."""
    return nx.embedding(fund_table, np.asarray(seq.fund_ids))


def disentangle(x: Tensor, params: DisentangleParams, mask: np.ndarray | None = None) -> AspectBundle:
    """Attention-pool behavior rows ``x`` once per aspect.

    ``x`` is ``(S, d)`` for one user or ``(B, S, d)`` for a padded batch,
    in which case ``mask`` (``(B, S)``, True for real rows) hides padding.
    Scores are ``tanh(x W) w_a``; each aspect vector is the softmax-weighted
    sum of the rows.
    """
    if x.ndim not in (2, 3):
        raise DimensionError(f"disentangle expects (S, d) or (B, S, d), got {x.shape}")
    if x.shape[-2] < 1:
        raise DomainError("disentangle needs at least one behavior")
    d = x.shape[-1]
    if params.base_weight.shape != (d, d):
        raise DimensionError(f"base weight {params.base_weight.shape} does not match d={d}")
    batched = x.ndim == 3
    heads = nx.concat([params.aspect_vectors[a].reshape(d, 1) for a in ASPECTS], axis=-1)
    scores = nx.tanh(x @ params.base_weight) @ heads            # (..., S, 3)
    scores = nx.swapaxes(scores, -1, -2)                         # (..., 3, S)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        mask = mask[:, None, :] if batched else mask[None, :]
    weights = nx.softmax(scores, axis=-1, mask=mask)
    pooled = weights @ x                                         # (..., 3, d)
    vectors, attention = {}, {}
    for i, a in enumerate(ASPECTS):
        vectors[a] = pooled[:, i, :] if batched else pooled[i, :]
        attention[a] = weights.data[:, i, :] if batched else weights.data[i, :]
    return AspectBundle(vectors, attention)


def pad_sequences(seqs: list[BehaviorSequence], exclude: list[int] | None = None):
    """Pack sequences into ``(fund_ids, type_ids, mask)`` arrays of shape (B, S_max).

    ``exclude[i]``, when given, hides every occurrence of that fund in
    sequence ``i``; sequences left empty get an all-False mask row.
    """
    width = max(len(s) for s in seqs)
    funds = np.zeros((len(seqs), width), dtype=np.int64)
    types = np.zeros((len(seqs), width), dtype=np.int64)
    mask = np.zeros((len(seqs), width), dtype=bool)
    for i, s in enumerate(seqs):
        n = len(s)
        funds[i, :n] = s.fund_ids
        types[i, :n] = s.type_ids
        mask[i, :n] = True
    if exclude is not None:
        mask &= funds != np.asarray(exclude)[:, None]
    return funds, types, mask
