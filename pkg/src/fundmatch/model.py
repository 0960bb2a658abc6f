"""The assembled model: parameter container, forward passes shared by training
and evaluation, and the checkpoint file format."""
from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .disentangle import ASPECTS, AspectBundle, BehaviorSequence, DisentangleParams, disentangle, pad_sequences
from .datagen import DatasetBundle, build_sequences, interaction_counts
from .disentangle import N_MAX
from .errors import SchemaError
from .fundgraph import RELATIONS, FundGraph, GraphConvParams, build_graph, encode_funds, init_graph_params
from .numerics import Tensor
from .objectives import FFN, HeadParams, PopularityTable, RiskSignalParams, popularity

SCHEMA_VERSION = 1
SCORE_CHUNK = 512


@dataclass
class ModelParams:
    graph: GraphConvParams
    disentangle: DisentangleParams
    risk: RiskSignalParams
    heads: HeadParams

    @classmethod
    def init(cls, num_entities: int, num_types: int, profile_dim: int, dim: int, layers: int,
             rng: np.random.Generator, tau: float) -> "ModelParams":
        return cls(init_graph_params(num_entities, dim, layers, rng),
                   DisentangleParams.init(dim, rng),
                   RiskSignalParams.init(num_types, dim, rng, tau),
                   HeadParams.init(profile_dim, dim, dim, rng))

    def tensors(self) -> dict[str, Tensor]:
        return {**self.graph.tensors(), **self.disentangle.tensors(), **self.risk.tensors(),
                **self.heads.tensors()}

    @property
    def dim(self) -> int:
        return self.graph.dim

    def shape_info(self) -> dict:
        return {"num_entities": self.graph.base.shape[0], "dim": self.dim,
                "layers": self.graph.num_layers, "num_types": self.risk.type_table.shape[0],
                "profile_dim": self.heads.interest_user.w1.shape[0] - self.dim, "tau": self.risk.tau}

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.tensors().items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, t in self.tensors().items():
            if arrays[k].shape != t.shape:
                raise SchemaError(f"parameter {k} has shape {arrays[k].shape}, expected {t.shape}")
            t.data = np.array(arrays[k], dtype=np.float64)

    @classmethod
    def from_arrays(cls, info: dict, arrays: dict[str, np.ndarray]) -> "ModelParams":
        def t(name):
            return Tensor(np.array(arrays[name], dtype=np.float64), requires_grad=True)

        def ffn(prefix):
            return FFN(t(f"{prefix}.w1"), t(f"{prefix}.b1"), t(f"{prefix}.w2"), t(f"{prefix}.b2"))

        layers = info["layers"]
        graph = GraphConvParams(t("graph.base"), [t(f"graph.{i}.self") for i in range(layers)],
                                [{r: t(f"graph.{i}.{r.value}") for r in RELATIONS} for i in range(layers)])
        dis = DisentangleParams(t("disentangle.base"), {a: t(f"disentangle.w_{a}") for a in ASPECTS})
        risk = RiskSignalParams(t("risk.types"), ffn("risk.ffn"), info["tau"])
        heads = HeadParams(*(ffn(f"heads.{n}") for n in
                             ("conformity_user", "conformity_item", "interest_user", "interest_item")))
        return cls(graph, dis, risk, heads)


@dataclass
class ModelInputs:
    """Everything the model reads from a dataset: the graph, training
    sequences, the training-history mask and profiles."""

    graph: FundGraph
    sequences: dict[int, BehaviorSequence]
    history: np.ndarray            # users x funds, True where the fund is in training history
    profiles: np.ndarray
    fund_type: np.ndarray
    popularity: PopularityTable

    @classmethod
    def from_dataset(cls, data: DatasetBundle, n_max: int = N_MAX) -> "ModelInputs":
        graph = build_graph(data.triples, data.entity_counts())
        if graph.num_funds != data.num_funds:
            raise SchemaError(f"graph has {graph.num_funds} funds, catalog has {data.num_funds}")
        history = np.zeros((data.num_users, data.num_funds), dtype=bool)
        history[data.train.user, data.train.fund] = True
        return cls(graph, build_sequences(data.train, data.fund_type, n_max), history, data.profiles,
                   data.fund_type, popularity(interaction_counts(data.train, data.num_funds)))

    @property
    def num_funds(self) -> int:
        return self.graph.num_funds

    @property
    def num_types(self) -> int:
        return self.graph.counts["type"]

    def catalog(self) -> dict:
        return {"num_funds": self.num_funds, "num_types": self.num_types,
                "num_entities": self.graph.num_entities, "profile_dim": int(self.profiles.shape[1]),
                "num_users": int(self.profiles.shape[0])}


def fund_table(params: ModelParams, graph: FundGraph, use_graph: bool = True) -> Tensor:
    """Fund representations: graph-encoded rows, or the raw base rows when the graph is bypassed."""
    table = encode_funds(graph, params.graph) if use_graph else params.graph.base
    return table[: graph.num_funds]


def user_aspects(params: ModelParams, table: Tensor, seqs: list[BehaviorSequence],
                 exclude=None) -> tuple[AspectBundle, np.ndarray, np.ndarray]:
    funds, types, mask = pad_sequences(seqs, exclude)
    return disentangle(nx.embedding(table, funds), params.disentangle, mask), types, mask


@dataclass
class ScoreMatrices:
    """Per-user scores over the whole catalog, rows aligned with ``users``."""

    users: np.ndarray
    conformity: np.ndarray
    interest: np.ndarray
    blended: np.ndarray
    aspects: dict[str, np.ndarray] = field(default_factory=dict)


def score_users(params: ModelParams, graph: FundGraph, sequences: dict[int, BehaviorSequence],
                profiles: np.ndarray, pop: PopularityTable, users=None, use_graph: bool = True,
                use_conformity: bool = True) -> ScoreMatrices:
    """Score every catalog fund for each user that has a behavior sequence."""
    if users is None:
        users = sorted(sequences)
    users = np.asarray([u for u in users if u in sequences], dtype=np.int64)
    n_f = graph.num_funds
    with nx.no_grad():
        table = fund_table(params, graph, use_graph)
        item_c = params.heads.conformity_item(table).data
        item_i = params.heads.interest_item(table).data
        yc = np.empty((len(users), n_f))
        yi = np.empty((len(users), n_f))
        aspects = {a: np.empty((len(users), params.dim)) for a in ASPECTS}
        for start in range(0, len(users), SCORE_CHUNK):
            chunk = users[start:start + SCORE_CHUNK]
            bundle, _, _ = user_aspects(params, table, [sequences[int(u)] for u in chunk])
            prof = Tensor(profiles[chunk])
            uc = params.heads.conformity_user(nx.concat([prof, bundle.x_C], axis=-1)).data
            ui = params.heads.interest_user(nx.concat([prof, bundle.x_I], axis=-1)).data
            yc[start:start + len(chunk)] = _sigmoid(uc @ item_c.T)
            yi[start:start + len(chunk)] = _sigmoid(ui @ item_i.T)
            for a in ASPECTS:
                aspects[a][start:start + len(chunk)] = bundle.vectors[a].data
    if use_conformity:
        blended = pop.gamma[None, :] * yc + (1.0 - pop.gamma[None, :]) * yi
    else:
        blended = yi.copy()
    return ScoreMatrices(users, yc, yi, blended, aspects)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return nx.sigmoid(Tensor(z)).data


@dataclass
class Checkpoint:
    params: ModelParams
    popularity: PopularityTable
    config: dict
    epoch: int
    metrics: dict
    catalog: dict          # num_funds, num_types, num_entities, profile_dim

    def save(self, path: str | Path) -> Path:
        """Write a single zip of ``.npy`` members with fixed timestamps, so equal
        checkpoints produce equal bytes."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        meta = {"schema_version": SCHEMA_VERSION, "shape": self.params.shape_info(), "config": self.config,
                "epoch": self.epoch, "metrics": self.metrics, "catalog": self.catalog,
                "popularity": {"c_min": self.popularity.c_min, "c_max": self.popularity.c_max}}
        members = {f"param/{k}": v for k, v in sorted(self.params.arrays().items())}
        members["popularity/gamma"] = self.popularity.gamma
        members["popularity/counts"] = self.popularity.counts
        with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
            _write_member(zf, "meta.json", json.dumps(meta, sort_keys=True, indent=1).encode("utf-8"))
            for name, arr in members.items():
                buf = io.BytesIO()
                np.lib.format.write_array(buf, np.ascontiguousarray(arr), allow_pickle=False)
                _write_member(zf, name + ".npy", buf.getvalue())
        return path

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        try:
            with zipfile.ZipFile(path) as zf:
                meta = json.loads(zf.read("meta.json").decode("utf-8"))
                arrays = {}
                for name in zf.namelist():
                    if name.endswith(".npy"):
                        arrays[name[:-4]] = np.lib.format.read_array(io.BytesIO(zf.read(name)),
                                                                     allow_pickle=False)
        except (zipfile.BadZipFile, KeyError, ValueError) as exc:
            raise SchemaError(f"{path}: not a readable checkpoint ({exc})") from None
        if meta.get("schema_version") != SCHEMA_VERSION:
            raise SchemaError(f"{path}: checkpoint schema {meta.get('schema_version')} != {SCHEMA_VERSION}")
        params = ModelParams.from_arrays(meta["shape"], {k[6:]: v for k, v in arrays.items()
                                                         if k.startswith("param/")})
        counts = arrays["popularity/counts"]
        pop = PopularityTable(arrays["popularity/gamma"], counts, meta["popularity"]["c_min"],
                              meta["popularity"]["c_max"])
        return cls(params, pop, meta["config"], meta["epoch"], meta["metrics"], meta["catalog"])

    def same_as(self, other: "Checkpoint") -> bool:
        a, b = self.params.arrays(), other.params.arrays()
        return (a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)
                and np.array_equal(self.popularity.gamma, other.popularity.gamma)
                and np.array_equal(self.popularity.counts, other.popularity.counts)
                and self.config == other.config and self.epoch == other.epoch
                and self.metrics == other.metrics and self.catalog == other.catalog)


def _write_member(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)

