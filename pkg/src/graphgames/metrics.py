"""Language metrics: topographic similarity and channel robustness."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from itertools import combinations

import numpy as np

from graphgames import channel


class UndefinedCorrelation(ValueError):
    """Correlation requested for a list with zero variance."""


def levenshtein(a, b) -> int:
    """Unit-cost edit distance, two-row dynamic programme."""
    a, b = list(a), list(b)
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i]
        for j, y in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def cosine_similarity(u, v) -> float:
    u, v = np.asarray(u, dtype=float), np.asarray(v, dtype=float)
    if u.shape != v.shape:
        raise ValueError(f"length mismatch: {u.shape} vs {v.shape}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        return 0.0
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def average_ranks(xs) -> np.ndarray:
    """1-based ranks; tied values share the mean of their positions."""
    xs = np.asarray(xs, dtype=float)
    order = np.argsort(xs, kind="mergesort")
    sorted_x = xs[order]
    ranks = np.empty(len(xs))
    start = 0
    while start < len(xs):
        stop = start + 1
        while stop < len(xs) and sorted_x[stop] == sorted_x[start]:
            stop += 1
        ranks[order[start:stop]] = (start + stop + 1) / 2.0
        start = stop
    return ranks


def spearman(xs, ys) -> float:
    """Pearson correlation of average ranks."""
    if len(xs) != len(ys):
        raise ValueError("spearman needs equal-length lists")
    if len(xs) < 2:
        raise UndefinedCorrelation("spearman needs at least two observations")
    rx, ry = average_ranks(xs), average_ranks(ys)
    rx -= rx.mean()
    ry -= ry.mean()
    den = np.sqrt((rx @ rx) * (ry @ ry))
    if den == 0:
        raise UndefinedCorrelation("zero variance in one of the lists")
    return float(np.clip(rx @ ry / den, -1.0, 1.0))


@dataclass
class TopoReport:
    toposim: float
    num_pairs: int
    input_metric: str = "cosine"
    message_metric: str = "levenshtein"

    def to_json(self) -> dict:
        return asdict(self)


def topographic_similarity(inputs, messages, pair_budget: int | None = 500,
                           rng: np.random.Generator | None = None) -> TopoReport:
    """Negated Spearman correlation of input cosine similarity against message edit distance.

    ``inputs`` are flat vectors; ``messages`` symbol sequences. When more than
    ``pair_budget`` items are given, that many are subsampled and all of their
    pairs used; ``None`` enumerates every pair.
    """
    if len(inputs) != len(messages):
        raise ValueError("inputs and messages differ in length")
    idx = np.arange(len(inputs))
    if pair_budget is not None and len(idx) > pair_budget:
        rng = rng if rng is not None else np.random.default_rng(0)
        idx = np.sort(rng.choice(len(idx), size=pair_budget, replace=False))
    vecs = np.stack([np.asarray(inputs[i], dtype=float) for i in idx])
    norms = np.linalg.norm(vecs, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    unit = vecs / safe[:, None]
    gram = np.clip(unit @ unit.T, -1.0, 1.0)
    msgs = [tuple(messages[i]) for i in idx]
    sims, dists = [], []
    for a, b in combinations(range(len(idx)), 2):
        sims.append(gram[a, b] if norms[a] > 0 and norms[b] > 0 else 0.0)
        dists.append(levenshtein(msgs[a], msgs[b]))
    # mathematically equal cosines must tie in the ranking
    return TopoReport(-spearman(np.round(sims, 12), dists), len(sims))


def permutation_null(inputs, messages, n_shuffles: int, rng: np.random.Generator, pair_budget=None) -> np.ndarray:
    """TS values after randomly re-pairing messages with inputs."""
    out = []
    for _ in range(n_shuffles):
        perm = rng.permutation(len(messages))
        out.append(topographic_similarity(inputs, [messages[p] for p in perm], pair_budget).toposim)
    return np.asarray(out)


# -- robustness ------------------------------------------------------------------


@dataclass
class RobustnessGroup:
    symbol: int
    n: int
    original_accuracy: float
    accuracy: list[float] = field(default_factory=list)  # one per replacement symbol


@dataclass
class RobustnessReport:
    position: int
    vocab_size: int
    groups: list[RobustnessGroup]

    def to_json(self) -> dict:
        return asdict(self)

    def fraction_original_best(self) -> float:
        """Share of groups where the undistorted message attains the group maximum."""
        if not self.groups:
            return float("nan")
        hits = [g.original_accuracy >= max(g.accuracy) - 1e-12 for g in self.groups]
        return float(np.mean(hits))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["original_symbol", "replacement_symbol", "accuracy", "n"])
            for g in self.groups:
                for r, acc in enumerate(g.accuracy):
                    w.writerow([g.symbol, r, repr(acc), g.n])

    def write_json(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_json(), f, indent=2)


def robustness_sweep(agents, view, evaluation, position: int = 0) -> RobustnessReport:
    """Replace the symbol at ``position`` with every vocabulary entry and re-score.

    ``evaluation`` is an ``engine.EvalResult`` holding the episodes and the
    speaker's argmax messages; episodes are grouped by their original symbol.
    """
    from graphgames.engine import listener_accuracy

    vocab = agents.listener.cfg.vocab_size
    symbols = evaluation.symbols
    if not 0 <= position < symbols.shape[1]:
        raise IndexError(f"position {position} outside message length {symbols.shape[1]}")
    batch = evaluation.batch
    correct = {r: listener_accuracy(agents, view, batch, channel.distort_batch(symbols, position, r))
               for r in range(vocab)}
    original = evaluation.chosen == batch.target_index
    groups = []
    for s in np.unique(symbols[:, position]):
        mask = symbols[:, position] == s
        groups.append(RobustnessGroup(int(s), int(mask.sum()), float(original[mask].mean()),
                                      [float(correct[r][mask].mean()) for r in range(vocab)]))
    return RobustnessReport(position, vocab, groups)
