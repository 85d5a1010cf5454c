"""Independent reference implementations used as test oracles."""
import numpy as np


def central_diff(f, x: np.ndarray, step: float = 1e-3) -> np.ndarray:
    """Central finite-difference gradient of scalar ``f`` at ``x``."""
    x = np.array(x, dtype=float)
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + step
        fp = f(x)
        x[i] = orig - step
        fm = f(x)
        x[i] = orig
        grad[i] = (fp - fm) / (2 * step)
    return grad


def rel_err(a, b) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-8))


def edit_distance_bfs(a, b) -> int:
    """Breadth-first search over single insert/delete/substitute edits."""
    from collections import deque

    a, b = tuple(a), tuple(b)
    alphabet = set(a) | set(b)
    limit = len(a) + len(b)
    seen = {a}
    frontier = deque([(a, 0)])
    while frontier:
        s, d = frontier.popleft()
        if s == b:
            return d
        nxt = set()
        for i in range(len(s) + 1):
            for c in alphabet:
                nxt.add(s[:i] + (c,) + s[i:])
        for i in range(len(s)):
            nxt.add(s[:i] + s[i + 1:])
            for c in alphabet:
                nxt.add(s[:i] + (c,) + s[i + 1:])
        for t in nxt:
            if t not in seen and len(t) <= limit:
                seen.add(t)
                frontier.append((t, d + 1))
    raise AssertionError("unreachable")


def spearman_scipy(xs, ys) -> float:
    from scipy.stats import spearmanr

    return float(spearmanr(xs, ys).statistic)


def toposim_bruteforce(inputs, messages) -> float:
    """Every pair, numpy cosine, BFS edit distance, scipy Spearman."""
    sims, dists = [], []
    n = len(inputs)
    for i in range(n):
        for j in range(i + 1, n):
            u, v = np.asarray(inputs[i], float), np.asarray(inputs[j], float)
            sims.append(float(np.dot(u, v) / (np.linalg.norm(u) * np.linalg.norm(v))))
            dists.append(edit_distance_bfs(messages[i], messages[j]))
    return -spearman_scipy(np.round(sims, 12), dists)
