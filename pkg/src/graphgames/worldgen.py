"""World generation for the two graph referential games.

Game-1 objects are vectors of property values drawn from perceptual
dimensions ``[p1, ..., pn]``; each object has a tree, a token sequence and a
bag-of-words form. Game-2 objects are Erdos-Renyi graphs with self-loops and
one-hot degree features; their sequence and bag-of-words forms are the degree
list and the degree histogram.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SPLITS = ("train", "valid", "test", "ood")


class CoverageError(ValueError):
    """An OOD holdout would remove a feature value from the in-domain pool."""


@dataclass(frozen=True)
class PerceptualSpec:
    dims: tuple[int, ...]

    def __post_init__(self):
        dims = tuple(int(p) for p in self.dims)
        if not dims or any(p < 2 for p in dims):
            raise ValueError(f"perceptual dims must be non-empty with every entry >= 2, got {list(dims)}")
        object.__setattr__(self, "dims", dims)

    @property
    def n(self) -> int:
        return len(self.dims)

    @property
    def universe_size(self) -> int:
        return int(np.prod(self.dims))

    @property
    def offsets(self) -> tuple[int, ...]:
        return tuple(int(x) for x in np.concatenate([[0], np.cumsum(self.dims)[:-1]]))

    @property
    def vocab_size(self) -> int:
        return sum(self.dims)

    def objects(self) -> list[tuple[int, ...]]:
        return list(itertools.product(*(range(p) for p in self.dims)))


@dataclass
class GraphSample:
    num_nodes: int
    edges: frozenset[tuple[int, int]]
    node_features: np.ndarray

    def __post_init__(self):
        canon = set()
        for i, j in self.edges:
            if not (0 <= i < self.num_nodes and 0 <= j < self.num_nodes):
                raise ValueError(f"edge ({i}, {j}) outside [0, {self.num_nodes})")
            canon.add((min(i, j), max(i, j)))
        self.edges = frozenset(canon)

    def adjacency(self) -> np.ndarray:
        """Dense symmetric 0/1 matrix; self-loops sit on the diagonal."""
        a = np.zeros((self.num_nodes, self.num_nodes))
        for i, j in self.edges:
            a[i, j] = a[j, i] = 1.0
        return a

    def degrees(self) -> np.ndarray:
        """Degree of every node, self-loops excluded."""
        deg = np.zeros(self.num_nodes, dtype=int)
        for i, j in self.edges:
            if i != j:
                deg[i] += 1
                deg[j] += 1
        return deg

    def sorted_edges(self) -> list[list[int]]:
        return [list(e) for e in sorted(self.edges)]


# -- Game-1 --------------------------------------------------------------------


def generate_game1_object(spec: PerceptualSpec, rng: np.random.Generator) -> tuple[int, ...]:
    return tuple(int(rng.integers(p)) for p in spec.dims)


def _check_object(obj, spec: PerceptualSpec) -> None:
    if len(obj) != spec.n or any(not 0 <= v < p for v, p in zip(obj, spec.dims)):
        raise ValueError(f"object {list(obj)} does not conform to dims {list(spec.dims)}")


def game1_features(obj, spec: PerceptualSpec) -> np.ndarray:
    """Rows ``[property one-hot (n+1) | type one-hot (max p)]``; the last row is the central node."""
    n, width = spec.n, max(spec.dims)
    feats = np.zeros((n + 1, n + 1 + width))
    for i, v in enumerate(obj):
        feats[i, i] = 1.0
        feats[i, n + 1 + v] = 1.0
    feats[n, n] = 1.0
    return feats


def object_to_tree(obj, spec: PerceptualSpec) -> GraphSample:
    _check_object(obj, spec)
    n = spec.n
    return GraphSample(n + 1, frozenset((i, n) for i in range(n)), game1_features(obj, spec))


def object_to_sequence(obj, spec: PerceptualSpec) -> list[int]:
    _check_object(obj, spec)
    return [off + v for off, v in zip(spec.offsets, obj)]


def object_to_bow(obj, spec: PerceptualSpec) -> np.ndarray:
    vec = np.zeros(spec.vocab_size)
    vec[object_to_sequence(obj, spec)] = 1.0
    return vec


# -- Game-2 --------------------------------------------------------------------


def degree_features(num_nodes: int, edges) -> np.ndarray:
    g = GraphSample(num_nodes, frozenset(edges), np.zeros((num_nodes, 0)))
    return np.eye(num_nodes)[g.degrees()]


def make_game2_sample(num_nodes: int, edges) -> GraphSample:
    """Build a Game-2 sample from non-loop edges, adding every self-loop."""
    full = {(min(i, j), max(i, j)) for i, j in edges} | {(i, i) for i in range(num_nodes)}
    return GraphSample(num_nodes, frozenset(full), degree_features(num_nodes, full))


def generate_game2_graph(num_nodes: int, edge_probability: float, rng: np.random.Generator) -> GraphSample:
    if num_nodes < 2:
        raise ValueError("num_nodes must be >= 2")
    iu, ju = np.triu_indices(num_nodes, k=1)
    keep = rng.random(iu.size) < edge_probability
    return make_game2_sample(num_nodes, zip(iu[keep].tolist(), ju[keep].tolist()))


def graph_to_sequence(g: GraphSample) -> list[int]:
    return g.degrees().tolist()


def graph_to_bow(g: GraphSample) -> np.ndarray:
    return np.bincount(g.degrees(), minlength=g.num_nodes).astype(np.float64)


# -- splits --------------------------------------------------------------------


def split_counts(total: int, fractions) -> list[int]:
    """Largest-remainder rounding of ``fractions * total``."""
    fractions = np.asarray(fractions, dtype=float)
    if np.any(fractions < 0) or not np.isclose(fractions.sum(), 1.0):
        raise ValueError(f"split fractions must be non-negative and sum to 1, got {fractions.tolist()}")
    raw = fractions * total
    counts = np.floor(raw + 1e-9).astype(int)
    order = np.argsort(-(raw - counts), kind="stable")
    for k in order[: total - counts.sum()]:
        counts[k] += 1
    return counts.tolist()


def make_splits(items, fractions, rng: np.random.Generator, names=SPLITS[:3]) -> dict[str, list]:
    """Deduplicate ``items`` (first occurrence wins) and randomly partition them."""
    unique = list(dict.fromkeys(items))
    if len(fractions) != len(names):
        raise ValueError("one fraction per split name is required")
    counts = split_counts(len(unique), fractions)
    if any(f > 0 and c == 0 for f, c in zip(fractions, counts)):
        raise ValueError(f"universe of {len(unique)} items cannot fill splits {dict(zip(names, fractions))}")
    perm = rng.permutation(len(unique))
    out, start = {}, 0
    for name, c in zip(names, counts):
        out[name] = [unique[k] for k in perm[start : start + c]]
        start += c
    return out


def value_coverage(objects, spec: PerceptualSpec) -> bool:
    """True when every value of every property appears in ``objects``."""
    seen = [set() for _ in spec.dims]
    for obj in objects:
        for i, v in enumerate(obj):
            seen[i].add(v)
    return all(len(s) == p for s, p in zip(seen, spec.dims))


def make_ood_split(spec: PerceptualSpec, rng: np.random.Generator, holdout_fraction: float = 0.2,
                   holdout=None, max_tries: int = 100):
    """Hold out whole Game-1 objects whose values all stay visible in-domain.

    Returns ``(in_domain, ood)`` lists of objects.
    """
    universe = spec.objects()
    if holdout is not None:
        held = {tuple(h) for h in holdout}
        rest = [o for o in universe if o not in held]
        if not value_coverage(rest, spec):
            raise CoverageError(f"holdout {sorted(held)} removes a feature value from the in-domain pool")
        return rest, [o for o in universe if o in held]
    k = max(1, int(round(holdout_fraction * len(universe))))
    for _ in range(max_tries):
        idx = set(rng.choice(len(universe), size=k, replace=False).tolist())
        rest = [o for i, o in enumerate(universe) if i not in idx]
        if value_coverage(rest, spec):
            return rest, [universe[i] for i in sorted(idx)]
    raise CoverageError(f"no holdout of {k}/{len(universe)} objects keeps every value in-domain after {max_tries} tries")


def make_game2_ood_split(graphs, rng: np.random.Generator, holdout_fraction: float = 0.2, max_tries: int = 100):
    """Hold out exact edge sets; every degree value present in the OOD graphs must occur in-domain."""
    unique = list({g.edges: g for g in graphs}.values())
    k = max(1, int(round(holdout_fraction * len(unique))))
    if k >= len(unique):
        raise CoverageError("holdout would leave no in-domain graphs")
    for _ in range(max_tries):
        idx = set(rng.choice(len(unique), size=k, replace=False).tolist())
        rest = [g for i, g in enumerate(unique) if i not in idx]
        held = [unique[i] for i in sorted(idx)]
        seen = set().union(*(set(g.degrees().tolist()) for g in rest))
        needed = set().union(*(set(g.degrees().tolist()) for g in held))
        if needed <= seen:
            return rest, held
    raise CoverageError(f"no holdout of {k} graphs keeps every degree value in-domain after {max_tries} tries")


# -- datasets ------------------------------------------------------------------


@dataclass
class Item:
    id: int
    split: str
    sample: GraphSample
    obj: tuple[int, ...] | None = None

    @property
    def key(self):
        return self.obj if self.obj is not None else self.sample.edges


@dataclass
class Dataset:
    game: str
    params: dict
    items: list[Item] = field(default_factory=list)

    @property
    def spec(self) -> PerceptualSpec:
        return PerceptualSpec(tuple(self.params["dims"]))

    def split(self, name: str) -> list[Item]:
        return [it for it in self.items if it.split == name]

    def pool(self, name: str) -> list[Item]:
        """Distinct items of one split (first occurrence of each object)."""
        seen, out = set(), []
        for it in self.split(name):
            if it.key not in seen:
                seen.add(it.key)
                out.append(it)
        return out

    def counts(self) -> dict[str, int]:
        return {s: len(self.split(s)) for s in SPLITS}

    def save(self, path) -> None:
        path = Path(path)
        with open(path, "w") as f:
            for it in self.items:
                row = {
                    "id": it.id,
                    "game": self.game,
                    "split": it.split,
                    "object": list(it.obj) if it.obj is not None else None,
                    "num_nodes": it.sample.num_nodes,
                    "edges": it.sample.sorted_edges(),
                    "features_kind": "g1-concat" if self.game == "g1" else "degree-onehot",
                }
                f.write(json.dumps(row, separators=(",", ":")) + "\n")

    @classmethod
    def load(cls, path, params: dict) -> Dataset:
        items, game = [], params.get("game")
        with open(path) as f:
            for line in f:
                row = json.loads(line)
                game = row["game"]
                if row["features_kind"] == "g1-concat":
                    obj = tuple(row["object"])
                    sample = object_to_tree(obj, PerceptualSpec(tuple(params["dims"])))
                else:
                    obj = None
                    edges = {(i, j) for i, j in row["edges"] if i != j}
                    sample = make_game2_sample(row["num_nodes"], edges)
                items.append(Item(row["id"], row["split"], sample, obj))
        return cls(game, params, items)


def _fill(pool, size, rng):
    """``pool`` in order, topped up by sampling with replacement to ``size``."""
    if size == 0:
        return []
    if not pool:
        raise ValueError("cannot fill a non-empty split from an empty pool")
    out = list(pool[:size])
    if len(out) < size:
        out += [pool[k] for k in rng.integers(len(pool), size=size - len(out))]
    return out


def build_game1_dataset(dims, sizes, rng: np.random.Generator, ood_fraction: float = 0.0, ood_size: int = 0,
                        cover_train: bool = True, max_tries: int = 100) -> Dataset:
    """Split distinct objects across train/valid/test (and OOD), then sample each split to its size.

    ``sizes`` are line counts for train/valid/test; splits smaller than the
    universe stay duplicate-free, larger ones repeat objects within the split.
    With ``cover_train`` the split is redrawn until every property value
    occurs in the train split.
    """
    spec = PerceptualSpec(tuple(dims))
    total = sum(sizes)
    if ood_fraction > 0:
        pool, ood = make_ood_split(spec, rng, ood_fraction)
        ood = [ood[k] for k in rng.permutation(len(ood))]
        if len(pool) > total:
            pool = [pool[k] for k in rng.choice(len(pool), size=total, replace=False)]
    else:
        ood = []
        if spec.universe_size <= max(total, 1) * 4:
            pool = spec.objects()
        else:
            pool = [generate_game1_object(spec, rng) for _ in range(total)]
    fractions = np.asarray(sizes, dtype=float) / max(total, 1)
    for _ in range(max_tries):
        parts = make_splits(pool, fractions, rng)
        if not cover_train or value_coverage(parts["train"], spec):
            break
    else:
        raise CoverageError(f"no split of {len(pool)} objects gives the train split every value in {max_tries} tries")
    items = []
    for name, size in zip(SPLITS[:3], sizes):
        for obj in _fill(parts[name], size, rng):
            items.append(Item(len(items), name, object_to_tree(obj, spec), obj))
    for obj in _fill(ood, ood_size or len(ood), rng):
        items.append(Item(len(items), "ood", object_to_tree(obj, spec), obj))
    return Dataset("g1", {"game": "g1", "dims": list(spec.dims)}, items)


def build_game2_dataset(num_nodes: int, sizes, rng: np.random.Generator, ood_fraction: float = 0.0,
                        p_range=(0.1, 0.9)) -> Dataset:
    """Erdos-Renyi graphs with a per-sample edge probability drawn from ``p_range``."""
    total = sum(sizes)
    n_draw = int(np.ceil(total / (1.0 - ood_fraction))) if ood_fraction > 0 else total
    graphs = [generate_game2_graph(num_nodes, rng.uniform(*p_range), rng) for _ in range(n_draw)]
    if ood_fraction > 0:
        pool, ood = make_game2_ood_split(graphs, rng, ood_fraction)
    else:
        pool, ood = list({g.edges: g for g in graphs}.values()), []
    keyed = {g.edges: g for g in pool}
    parts = make_splits(list(keyed), np.asarray(sizes, dtype=float) / max(total, 1), rng)
    items = []
    for name, size in zip(SPLITS[:3], sizes):
        for key in _fill(parts[name], size, rng):
            items.append(Item(len(items), name, keyed[key]))
    for g in ood:
        items.append(Item(len(items), "ood", g))
    return Dataset("g2", {"game": "g2", "num_nodes": num_nodes}, items)


# -- batched representations ---------------------------------------------------

REPRESENTATIONS = ("bow", "seq", "graph")


def input_size(dataset: Dataset, kind: str) -> int:
    """Feature width (graph), token universe (seq) or vector width (bow)."""
    if dataset.game == "g1":
        spec = dataset.spec
        return {"graph": spec.n + 1 + max(spec.dims), "seq": spec.vocab_size, "bow": spec.vocab_size}[kind]
    return dataset.params["num_nodes"]


def represent(item: Item, dataset: Dataset, kind: str, self_loops: bool = True):
    """One item's input in representation ``kind``.

    Graph adjacency gets a self-loop on every node unless ``self_loops`` is
    off: without it a Game-1 property node never sees its own features and
    the shared type one-hot loses which property it belongs to.
    """
    if kind == "graph":
        adj = item.sample.adjacency()
        if self_loops:
            np.fill_diagonal(adj, 1.0)
        return item.sample.node_features, adj
    if dataset.game == "g1":
        spec = dataset.spec
        return np.asarray(object_to_sequence(item.obj, spec)) if kind == "seq" else object_to_bow(item.obj, spec)
    return np.asarray(graph_to_sequence(item.sample)) if kind == "seq" else graph_to_bow(item.sample)


def stack_inputs(items, dataset: Dataset, kind: str, self_loops: bool = True) -> dict[str, np.ndarray]:
    """Stack items into dense batch arrays (all samples of a game share a size)."""
    if kind not in REPRESENTATIONS:
        raise ValueError(f"unknown representation {kind!r}")
    reps = [represent(it, dataset, kind, self_loops) for it in items]
    if kind == "graph":
        return {"x": np.stack([r[0] for r in reps]), "adj": np.stack([r[1] for r in reps])}
    if kind == "seq":
        return {"tokens": np.stack(reps).astype(np.int64)}
    return {"bow": np.stack(reps)}


def flat_input(item: Item, dataset: Dataset, kind: str) -> np.ndarray:
    """Vector form used for input-space cosine similarity.

    Graphs concatenate node feature rows in node order (central node last);
    sequences concatenate per-position one-hots.
    """
    rep = represent(item, dataset, kind)
    if kind == "graph":
        return rep[0].ravel()
    if kind == "seq":
        return np.eye(input_size(dataset, "seq"))[rep].ravel()
    return rep
