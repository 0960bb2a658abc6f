"""Five-relation fund knowledge graph and relation-typed mean convolution."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np
import scipy.sparse as sp

from . import numerics as nx
from .errors import DimensionError, SchemaError
from .numerics import Tensor

ENTITY_KINDS = ("fund", "manager", "organization", "stock", "stock_index", "type")


class Relation(str, enum.Enum):
    MANAGE = "manage"
    BELONG_TO_ORG = "belong_to_org"
    HEAVYWEIGHT = "heavyweight"
    TRACK = "track"
    BELONG_TO_TYPE = "belong_to_type"


# every relation links a fund to one other entity kind
SCHEMA = {
    Relation.MANAGE: "manager",
    Relation.BELONG_TO_ORG: "organization",
    Relation.HEAVYWEIGHT: "stock",
    Relation.TRACK: "stock_index",
    Relation.BELONG_TO_TYPE: "type",
}
RELATIONS = tuple(Relation)


class EntityId(NamedTuple):
    kind: str
    index: int

    def __str__(self) -> str:
        return f"{self.kind}:{self.index}"

    @classmethod
    def parse(cls, token: str) -> "EntityId":
        kind, sep, idx = token.strip().partition(":")
        if not sep or kind not in ENTITY_KINDS:
            raise SchemaError(f"bad entity token {token!r}")
        try:
            index = int(idx)
        except ValueError:
            raise SchemaError(f"bad entity index in {token!r}") from None
        if index < 0:
            raise SchemaError(f"negative entity index in {token!r}")
        return cls(kind, index)


def parse_relation(token: str) -> Relation:
    try:
        return Relation(token.strip())
    except ValueError:
        raise SchemaError(f"unknown relation {token!r}") from None


@dataclass
class FundGraph:
    counts: dict[str, int]
    edges: list[tuple[EntityId, Relation, EntityId]]
    _operators: dict[Relation, sp.csr_matrix] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.offsets = {}
        total = 0
        for kind in ENTITY_KINDS:
            self.offsets[kind] = total
            total += self.counts[kind]
        self.num_entities = total
        adj: dict[Relation, dict[EntityId, list[EntityId]]] = {r: {} for r in RELATIONS}
        for head, rel, tail in self.edges:
            adj[rel].setdefault(head, []).append(tail)
            adj[rel].setdefault(tail, []).append(head)
        for per_rel in adj.values():
            for lst in per_rel.values():
                lst.sort()
        self.adjacency = adj

    @property
    def num_funds(self) -> int:
        return self.counts["fund"]

    def global_index(self, ent: EntityId) -> int:
        return self.offsets[ent.kind] + ent.index

    def neighbors(self, ent: EntityId, rel: Relation) -> list[EntityId]:
        return list(self.adjacency[rel].get(ent, []))

    def mean_operator(self, rel: Relation) -> sp.csr_matrix:
        """Row-normalized adjacency: ``(A @ H)[v]`` is the mean of ``H`` over N_rel(v)."""
        if rel not in self._operators:
            rows, cols = [], []
            for head, r, tail in self.edges:
                if r is rel:
                    h, t = self.global_index(head), self.global_index(tail)
                    rows += [h, t]
                    cols += [t, h]
            n = self.num_entities
            a = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
            deg = np.asarray(a.sum(axis=1)).ravel()
            inv = np.divide(1.0, deg, out=np.zeros_like(deg), where=deg > 0)
            self._operators[rel] = (sp.diags(inv) @ a).tocsr()
        return self._operators[rel]

    def summary(self) -> dict:
        per_rel = {r.value: 0 for r in RELATIONS}
        for _, rel, _ in self.edges:
            per_rel[rel.value] += 1
        return {"entities": dict(self.counts), "num_entities": self.num_entities,
                "num_edges": len(self.edges), "edges_per_relation": per_rel}


def build_graph(triples: Iterable, counts: dict[str, int] | None = None) -> FundGraph:
    """Validate and deduplicate ``(head, relation, tail)`` triples.

    Heads and tails may be ``EntityId`` or ``"kind:index"`` strings and
    either orientation is accepted. ``counts`` declares entity counts per
    kind; undeclared kinds are sized from the largest index seen.
    """
    declared = dict(counts or {})
    unknown = set(declared) - set(ENTITY_KINDS)
    if unknown:
        raise SchemaError(f"unknown entity kinds {sorted(unknown)}")
    seen_max = {k: -1 for k in ENTITY_KINDS}
    edges = set()
    for triple in triples:
        head, rel, tail = triple
        head = head if isinstance(head, EntityId) else EntityId.parse(str(head))
        tail = tail if isinstance(tail, EntityId) else EntityId.parse(str(tail))
        rel = rel if isinstance(rel, Relation) else parse_relation(str(rel))
        other = SCHEMA[rel]
        if head.kind == other and tail.kind == "fund":
            head, tail = tail, head
        if head.kind != "fund" or tail.kind != other:
            raise SchemaError(f"triple violates schema: ({head}, {rel.value}, {tail})")
        for ent in (head, tail):
            limit = declared.get(ent.kind)
            if limit is not None and ent.index >= limit:
                raise SchemaError(f"{ent} exceeds declared count {limit} in ({head}, {rel.value}, {tail})")
            seen_max[ent.kind] = max(seen_max[ent.kind], ent.index)
        edges.add((head, rel, tail))
    final = {k: declared.get(k, seen_max[k] + 1) for k in ENTITY_KINDS}
    order = {r: i for i, r in enumerate(RELATIONS)}
    ordered = sorted(edges, key=lambda e: (e[0], order[e[1]], e[2]))
    return FundGraph(final, ordered)


def read_triples(path: str | Path) -> list[tuple[EntityId, Relation, EntityId]]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise SchemaError(f"{path}:{lineno}: expected 3 tab-separated fields")
            try:
                out.append((EntityId.parse(parts[0]), parse_relation(parts[1]), EntityId.parse(parts[2])))
            except SchemaError as exc:
                raise SchemaError(f"{path}:{lineno}: {exc}") from None
    return out


def write_triples(path: str | Path, triples: Iterable) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("# head\trelation\ttail\n")
        for head, rel, tail in triples:
            fh.write(f"{head}\t{Relation(rel).value}\t{tail}\n")


@dataclass
class GraphConvParams:
    base: Tensor                                   # H^(0), |E| x d
    self_weights: list[Tensor]                     # one d x d per layer
    relation_weights: list[dict[Relation, Tensor]]

    @property
    def num_layers(self) -> int:
        return len(self.self_weights)

    @property
    def dim(self) -> int:
        return self.base.shape[1]

    def tensors(self) -> dict[str, Tensor]:
        out = {"graph.base": self.base}
        for i, (ws, wr) in enumerate(zip(self.self_weights, self.relation_weights)):
            out[f"graph.{i}.self"] = ws
            for rel in RELATIONS:
                out[f"graph.{i}.{rel.value}"] = wr[rel]
        return out


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> Tensor:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=(fan_in, fan_out)), requires_grad=True)


def init_graph_params(num_entities: int, dim: int, layers: int,
                      rng: np.random.Generator) -> GraphConvParams:
    if layers < 1:
        raise ValueError("at least one convolution layer is required")
    bound = 1.0 / np.sqrt(dim)
    base = Tensor(rng.uniform(-bound, bound, size=(num_entities, dim)), requires_grad=True)
    self_w, rel_w = [], []
    for _ in range(layers):
        self_w.append(glorot(rng, dim, dim))
        rel_w.append({rel: glorot(rng, dim, dim) for rel in RELATIONS})
    return GraphConvParams(base, self_w, rel_w)


def conv_layer(h: Tensor, graph: FundGraph, self_weight: Tensor,
               relation_weights: dict[Relation, Tensor]) -> Tensor:
    """One layer: ``relu(h_v W_self + sum_r mean_{u in N_r(v)} h_u W_r)``.

    Relations with no neighbours contribute zero. Weights act on row vectors.
    """
    if h.ndim != 2 or h.shape[0] != graph.num_entities:
        raise DimensionError(f"conv_layer: features {h.shape} do not match {graph.num_entities} entities")
    if self_weight.shape != (h.shape[1], h.shape[1]):
        raise DimensionError(f"conv_layer: weight {self_weight.shape} does not match features {h.shape}")
    total = h @ self_weight
    for rel in RELATIONS:
        op = graph.mean_operator(rel)
        if op.nnz == 0:
            continue
        total = total + nx.sparse_matmul(op, h) @ relation_weights[rel]
    return nx.relu(total)


def encode_funds(graph: FundGraph, params: GraphConvParams) -> Tensor:
    """Full ``H^(L)`` table; rows ``0..num_funds-1`` are the fund representations."""
    if params.base.shape[0] != graph.num_entities:
        raise DimensionError(f"base table has {params.base.shape[0]} rows, graph has {graph.num_entities} entities")
    h = params.base
    for ws, wr in zip(params.self_weights, params.relation_weights):
        h = conv_layer(h, graph, ws, wr)
    return h
