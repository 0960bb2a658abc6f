"""Synthetic fund-interaction data with planted interest, risk and conformity
structure, plus readers/writers for the on-disk formats.

Each user carries a latent triple: an interest archetype, a risk level and a
conformity weight ``lam``. Every interaction stays inside the user's risk
level; with probability ``lam`` the fund is drawn by Zipf popularity over the
whole level, otherwise from the user's archetype funds with the popularity
weights flattened by ``interest_skew`` (0 gives a uniform archetype choice). The fund graph links funds of one
archetype through shared managers, heavyweight stocks and tracked indices.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np

from .disentangle import N_MAX, BehaviorSequence
from .errors import DomainError, GenerationError, SchemaError
from .fundgraph import EntityId, Relation, read_triples, write_triples

FILES = {
    "interactions": "interactions.tsv",
    "profiles": "profiles.tsv",
    "graph": "graph.tsv",
    "catalog": "catalog.tsv",
    "latents": "latents.tsv",
}


@dataclass
class SyntheticSpec:
    users: int = 2000
    funds: int = 500
    managers: int = 100
    organizations: int = 20
    stocks: int = 200
    indices: int = 16
    types: int = 5
    risk_levels: int = 3
    type_risk: list[int] | None = None   # risk level per type; contiguous split when None
    archetypes: int = 8
    zipf_s: float = 1.0
    interest_skew: float = 0.75           # archetype choice weights are Zipf weights ** interest_skew
    lambda_alpha: float = 2.0             # conformity weight ~ Beta(alpha, beta)
    lambda_beta: float = 2.0
    fixed_lambda: float | None = None     # overrides the Beta draw when set
    days: int = 14
    interactions_per_day: int = 2
    profile_dim: int = 8
    stocks_per_fund: int = 3
    track_prob: float = 0.5
    seed: int = 0

    def validate(self) -> None:
        for name in ("users", "funds", "managers", "organizations", "stocks", "indices", "types",
                     "risk_levels", "archetypes", "days", "interactions_per_day", "profile_dim",
                     "stocks_per_fund"):
            if getattr(self, name) < 1:
                raise GenerationError(f"{name} must be at least 1")
        if self.zipf_s < 0 or self.interest_skew < 0:
            raise GenerationError("zipf_s and interest_skew must be non-negative")
        if self.fixed_lambda is not None and not 0.0 <= self.fixed_lambda <= 1.0:
            raise GenerationError("fixed_lambda must lie in [0, 1]")
        tr = self.resolved_type_risk()
        if len(tr) != self.types:
            raise GenerationError(f"type_risk has {len(tr)} entries for {self.types} types")
        if sorted(set(tr)) != list(range(self.risk_levels)):
            raise GenerationError("every risk level needs at least one fund type")
        if self.funds < self.archetypes * self.risk_levels:
            raise GenerationError(
                f"{self.funds} funds cannot cover {self.archetypes} archetypes x {self.risk_levels} risk levels")

    def resolved_type_risk(self) -> list[int]:
        if self.type_risk is not None:
            return list(self.type_risk)
        parts = np.array_split(np.arange(self.types), self.risk_levels)
        out = [0] * self.types
        for level, ts in enumerate(parts):
            for t in ts:
                out[int(t)] = level
        return out

    @classmethod
    def from_json(cls, path: str | Path) -> "SyntheticSpec":
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        unknown = set(raw) - set(cls.__dataclass_fields__)
        if unknown:
            raise SchemaError(f"unknown spec fields: {sorted(unknown)}")
        return cls(**raw)


class Interaction(NamedTuple):
    user_id: int
    fund_id: int
    day: int
    tick: int
    label: int = 1


@dataclass
class Interactions:
    """Column store of positive interactions."""

    user: np.ndarray
    fund: np.ndarray
    day: np.ndarray
    tick: np.ndarray

    def __post_init__(self):
        for name in ("user", "fund", "day", "tick"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.int64))
        n = len(self.user)
        if not all(len(getattr(self, c)) == n for c in ("fund", "day", "tick")):
            raise SchemaError("interaction columns differ in length")

    def __len__(self) -> int:
        return len(self.user)

    def __iter__(self) -> Iterator[Interaction]:
        for row in zip(self.user.tolist(), self.fund.tolist(), self.day.tolist(), self.tick.tolist()):
            yield Interaction(*row)

    def subset(self, mask) -> "Interactions":
        return Interactions(self.user[mask], self.fund[mask], self.day[mask], self.tick[mask])

    def sorted(self) -> "Interactions":
        return self.subset(np.lexsort((self.fund, self.tick, self.day, self.user)))

    def __eq__(self, other) -> bool:
        return isinstance(other, Interactions) and all(
            np.array_equal(getattr(self, c), getattr(other, c)) for c in ("user", "fund", "day", "tick"))

    @classmethod
    def empty(cls) -> "Interactions":
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z, z, z)


@dataclass
class Latents:
    archetype: np.ndarray
    risk_level: np.ndarray
    conformity: np.ndarray

    def __eq__(self, other) -> bool:
        return isinstance(other, Latents) and all(
            np.array_equal(getattr(self, c), getattr(other, c)) for c in ("archetype", "risk_level", "conformity"))


@dataclass
class DatasetBundle:
    interactions: Interactions
    profiles: np.ndarray                   # users x profile_dim
    triples: list
    fund_type: np.ndarray                  # fund -> type id
    type_risk: np.ndarray                  # type -> risk level
    latents: Latents | None = None
    fund_archetype: np.ndarray | None = None   # planted, probe-only
    fund_pop_rank: np.ndarray | None = None    # planted Zipf rank (1 = most popular), probe-only
    train: Interactions = field(init=False)
    validation: Interactions = field(init=False)
    test: Interactions = field(init=False)

    def __post_init__(self):
        self.train, self.validation, self.test = temporal_split(self.interactions)

    @property
    def num_users(self) -> int:
        return self.profiles.shape[0]

    @property
    def num_funds(self) -> int:
        return len(self.fund_type)

    @property
    def num_types(self) -> int:
        return len(self.type_risk)

    @property
    def fund_risk(self) -> np.ndarray:
        return self.type_risk[self.fund_type]

    def entity_counts(self) -> dict[str, int]:
        counts = {"fund": self.num_funds, "type": self.num_types}
        for head, _, tail in self.triples:
            for ent in (head, tail):
                if ent.kind not in ("fund", "type"):
                    counts[ent.kind] = max(counts.get(ent.kind, 0), ent.index + 1)
        for kind in ("manager", "organization", "stock", "stock_index"):
            counts.setdefault(kind, 0)
        return counts


def generate(spec: SyntheticSpec) -> DatasetBundle:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n_f, n_a, n_r = spec.funds, spec.archetypes, spec.risk_levels
    type_risk = np.array(spec.resolved_type_risk(), dtype=np.int64)
    types_by_level = [np.flatnonzero(type_risk == r) for r in range(n_r)]

    pop_rank = rng.permutation(n_f) + 1          # 1 = most popular
    weight = pop_rank.astype(float) ** -spec.zipf_s
    risk = _balance_levels(weight, n_r)
    archetype = np.empty(n_f, dtype=np.int64)
    fund_type = np.empty(n_f, dtype=np.int64)
    for r in range(n_r):
        members = rng.permutation(np.flatnonzero(risk == r))
        archetype[members] = np.arange(members.size) % n_a
        fund_type[members] = rng.choice(types_by_level[r], size=members.size)

    triples = _wire_graph(spec, rng, archetype, fund_type)

    # levels carry equal popularity mass, so users spread uniformly over
    # levels; within a level they join an archetype in proportion to its
    # tempered mass, which keeps expected fund counts monotone in the weights
    cell_mass = np.array([[(weight[(risk == r) & (archetype == a)] ** spec.interest_skew).sum()
                           for a in range(n_a)] for r in range(n_r)])
    user_risk = rng.integers(0, n_r, size=spec.users)
    user_arch = np.empty(spec.users, dtype=np.int64)
    for r in range(n_r):
        sel = np.flatnonzero(user_risk == r)
        user_arch[sel] = rng.choice(n_a, size=sel.size, p=cell_mass[r] / cell_mass[r].sum())
    if spec.fixed_lambda is not None:
        lam = np.full(spec.users, float(spec.fixed_lambda))
    else:
        lam = rng.beta(spec.lambda_alpha, spec.lambda_beta, size=spec.users)
    profiles = _profiles(spec, rng, lam, user_risk)

    level_funds = [np.flatnonzero(risk == r) for r in range(n_r)]
    level_cdf = []
    for funds in level_funds:
        c = np.cumsum(weight[funds])
        level_cdf.append(c / c[-1])
    cell_funds, cell_cdf = {}, {}
    for a in range(n_a):
        for r in range(n_r):
            funds = np.flatnonzero((archetype == a) & (risk == r))
            c = np.cumsum(weight[funds] ** spec.interest_skew)
            cell_funds[a, r], cell_cdf[a, r] = funds, c / c[-1]

    n_per = spec.interactions_per_day
    total = spec.users * spec.days * n_per
    users = np.repeat(np.arange(spec.users), spec.days * n_per)
    days = np.tile(np.repeat(np.arange(spec.days), n_per), spec.users)
    ticks = np.tile(np.arange(n_per), spec.users * spec.days)
    follow_crowd = rng.random(total) < lam[users]
    u01 = rng.random(total)
    chosen = np.empty(total, dtype=np.int64)
    for r in range(n_r):
        sel = follow_crowd & (user_risk[users] == r)
        idx = np.searchsorted(level_cdf[r], u01[sel], side="right")
        chosen[sel] = level_funds[r][np.minimum(idx, len(level_funds[r]) - 1)]
    for (a, r), funds in cell_funds.items():
        sel = ~follow_crowd & (user_arch[users] == a) & (user_risk[users] == r)
        idx = np.searchsorted(cell_cdf[a, r], u01[sel], side="right")
        chosen[sel] = funds[np.minimum(idx, len(funds) - 1)]

    inter = Interactions(users, chosen, days, ticks)
    return DatasetBundle(inter, profiles, triples, fund_type, type_risk,
                         Latents(user_arch, user_risk, lam), archetype, pop_rank)


def _balance_levels(weight: np.ndarray, n_levels: int) -> np.ndarray:
    """Greedy partition of funds into levels of near-equal total weight.

    Heaviest funds go first, each to the lightest level that still has room;
    the room cap keeps level sizes within one of each other.
    """
    cap = -(-len(weight) // n_levels)
    mass = np.zeros(n_levels)
    size = np.zeros(n_levels, dtype=np.int64)
    out = np.empty(len(weight), dtype=np.int64)
    for f in np.argsort(-weight, kind="stable"):
        open_levels = np.flatnonzero(size < cap)
        r = open_levels[np.argmin(mass[open_levels])]
        out[f] = r
        mass[r] += weight[f]
        size[r] += 1
    return out


def _wire_graph(spec: SyntheticSpec, rng, archetype, fund_type) -> list:
    def pool(n_items, a):
        own = np.flatnonzero(np.arange(n_items) % spec.archetypes == a)
        return own if own.size else np.arange(n_items)

    triples = []
    for f in range(spec.funds):
        a = int(archetype[f])
        fund = EntityId("fund", f)
        triples.append((fund, Relation.MANAGE, EntityId("manager", int(rng.choice(pool(spec.managers, a))))))
        triples.append((fund, Relation.BELONG_TO_ORG,
                        EntityId("organization", int(rng.integers(spec.organizations)))))
        stocks = pool(spec.stocks, a)
        for s in rng.choice(stocks, size=min(spec.stocks_per_fund, stocks.size), replace=False):
            triples.append((fund, Relation.HEAVYWEIGHT, EntityId("stock", int(s))))
        if rng.random() < spec.track_prob:
            triples.append((fund, Relation.TRACK, EntityId("stock_index", int(rng.choice(pool(spec.indices, a))))))
        triples.append((fund, Relation.BELONG_TO_TYPE, EntityId("type", int(fund_type[f]))))
    return triples


def _profiles(spec: SyntheticSpec, rng, lam, user_risk) -> np.ndarray:
    # noisy views of conformity and risk level, the rest pure noise
    p = rng.normal(size=(spec.users, spec.profile_dim))
    p[:, 0] = lam + 0.25 * p[:, 0]
    if spec.profile_dim > 1:
        p[:, 1] = user_risk / max(spec.risk_levels - 1, 1) + 0.25 * p[:, 1]
    return p


def temporal_split(inter: Interactions) -> tuple[Interactions, Interactions, Interactions]:
    """Last day is test, the day before is validation, the rest is training."""
    days = np.unique(inter.day)
    if len(days) < 3:
        raise DomainError(f"temporal split needs at least 3 distinct days, got {len(days)}")
    last, penultimate = days[-1], days[-2]
    return (inter.subset(inter.day < penultimate).sorted(),
            inter.subset(inter.day == penultimate).sorted(),
            inter.subset(inter.day == last).sorted())


def build_sequences(train: Interactions, fund_type, n_max: int = N_MAX) -> dict[int, BehaviorSequence]:
    """Per-user behaviors ordered by (day, tick, fund id), keeping the last ``n_max``."""
    if len(train) == 0:
        raise DomainError("cannot build sequences from an empty training partition")
    fund_type = np.asarray(fund_type)
    order = np.lexsort((train.fund, train.tick, train.day, train.user))
    users, funds = train.user[order], train.fund[order]
    out = {}
    bounds = np.flatnonzero(np.diff(users)) + 1
    for chunk_u, chunk_f in zip(np.split(users, bounds), np.split(funds, bounds)):
        f = chunk_f[-n_max:].tolist()
        out[int(chunk_u[0])] = BehaviorSequence(int(chunk_u[0]), f, fund_type[f].tolist())
    return out


def interaction_counts(part: Interactions, num_funds: int) -> np.ndarray:
    return np.bincount(part.fund, minlength=num_funds)


# file formats

def _data_lines(path: Path):
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if line.strip() and not line.startswith("#"):
                yield lineno, line.split("\t")


def _ints(path, lineno, parts, n):
    if len(parts) != n:
        raise SchemaError(f"{path}:{lineno}: expected {n} tab-separated fields, got {len(parts)}")
    try:
        return [int(p) for p in parts]
    except ValueError:
        raise SchemaError(f"{path}:{lineno}: non-integer field") from None


def write_interactions(path, inter: Interactions) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("# user_id\tfund_id\tday\ttick\n")
        for r in inter:
            fh.write(f"{r.user_id}\t{r.fund_id}\t{r.day}\t{r.tick}\n")


def read_interactions(path) -> Interactions:
    rows = [_ints(path, n, parts, 4) for n, parts in _data_lines(Path(path))]
    if not rows:
        return Interactions.empty()
    a = np.array(rows, dtype=np.int64)
    return Interactions(a[:, 0], a[:, 1], a[:, 2], a[:, 3])


def write_profiles(path, profiles: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("# user_id\tfeatures\n")
        for u, row in enumerate(profiles):
            fh.write(f"{u}\t{','.join(repr(float(x)) for x in row)}\n")


def read_profiles(path) -> np.ndarray:
    rows = {}
    for lineno, parts in _data_lines(Path(path)):
        if len(parts) != 2:
            raise SchemaError(f"{path}:{lineno}: expected user_id and features")
        try:
            rows[int(parts[0])] = [float(x) for x in parts[1].split(",")]
        except ValueError:
            raise SchemaError(f"{path}:{lineno}: malformed profile") from None
    if sorted(rows) != list(range(len(rows))):
        raise SchemaError(f"{path}: user ids must be dense from 0")
    widths = {len(v) for v in rows.values()}
    if len(widths) > 1:
        raise SchemaError(f"{path}: profile widths differ {sorted(widths)}")
    return np.array([rows[u] for u in range(len(rows))], dtype=np.float64)


def write_catalog(path, fund_type, type_risk) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("# fund_id\ttype_id\trisk_level\n")
        for f, t in enumerate(fund_type):
            fh.write(f"{f}\t{int(t)}\t{int(type_risk[t])}\n")


def read_catalog(path) -> tuple[np.ndarray, np.ndarray]:
    rows = [_ints(path, n, parts, 3) for n, parts in _data_lines(Path(path))]
    if not rows:
        raise SchemaError(f"{path}: empty catalog")
    a = np.array(rows, dtype=np.int64)
    if not np.array_equal(np.sort(a[:, 0]), np.arange(len(a))):
        raise SchemaError(f"{path}: fund ids must be dense from 0")
    a = a[np.argsort(a[:, 0])]
    n_types = int(a[:, 1].max()) + 1
    type_risk = np.full(n_types, -1, dtype=np.int64)
    for _, t, r in a:
        if type_risk[t] not in (-1, r):
            raise SchemaError(f"{path}: type {t} mapped to two risk levels")
        type_risk[t] = r
    if (type_risk < 0).any():
        raise SchemaError(f"{path}: type ids must be dense from 0")
    return a[:, 1].copy(), type_risk


def write_latents(path, latents: Latents) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("# user_id\tarchetype\trisk_level\tlambda\n")
        for u in range(len(latents.archetype)):
            fh.write(f"{u}\t{latents.archetype[u]}\t{latents.risk_level[u]}\t{float(latents.conformity[u])!r}\n")


def read_latents(path) -> Latents:
    rows = []
    for lineno, parts in _data_lines(Path(path)):
        if len(parts) != 4:
            raise SchemaError(f"{path}:{lineno}: expected 4 fields")
        rows.append((int(parts[0]), int(parts[1]), int(parts[2]), float(parts[3])))
    rows.sort()
    return Latents(np.array([r[1] for r in rows], dtype=np.int64), np.array([r[2] for r in rows], dtype=np.int64),
                   np.array([r[3] for r in rows], dtype=np.float64))


def write_dataset(bundle: DatasetBundle, out_dir, spec: SyntheticSpec | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_interactions(out / FILES["interactions"], bundle.interactions)
    write_profiles(out / FILES["profiles"], bundle.profiles)
    write_triples(out / FILES["graph"], bundle.triples)
    write_catalog(out / FILES["catalog"], bundle.fund_type, bundle.type_risk)
    if bundle.latents is not None:
        write_latents(out / FILES["latents"], bundle.latents)
    if spec is not None:
        (out / "spec.json").write_text(json.dumps(asdict(spec), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return out


def read_dataset(data_dir) -> DatasetBundle:
    d = Path(data_dir)
    for key in ("interactions", "profiles", "graph", "catalog"):
        if not (d / FILES[key]).exists():
            raise SchemaError(f"dataset directory {d} lacks {FILES[key]}")
    inter = read_interactions(d / FILES["interactions"])
    profiles = read_profiles(d / FILES["profiles"])
    fund_type, type_risk = read_catalog(d / FILES["catalog"])
    triples = read_triples(d / FILES["graph"])
    latents = read_latents(d / FILES["latents"]) if (d / FILES["latents"]).exists() else None
    if len(inter) and (inter.fund.max() >= len(fund_type) or inter.fund.min() < 0):
        raise SchemaError("interaction references a fund outside the catalog")
    if len(inter) and (inter.user.max() >= len(profiles) or inter.user.min() < 0):
        raise SchemaError("interaction references a user without a profile")
    return DatasetBundle(inter, profiles, triples, fund_type, type_risk, latents)
