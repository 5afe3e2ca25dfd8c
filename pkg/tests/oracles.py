"""Independent reference implementations used as test oracles.

Each one is written the slow, obvious way and shares no code with the
package under test.
"""

from __future__ import annotations

import itertools

import numpy as np


# ----------------------------------------------------------------------------
# DBSCAN by neighbourhood expansion
# ----------------------------------------------------------------------------

def dbscan_bruteforce(points, eps: float, min_pts: int) -> list[int]:
    """Textbook DBSCAN: O(n^2) neighbourhoods, breadth-first expansion from
    core points.  Border points go to the nearest core point (ties: the lower
    coordinate), the convention documented by the package."""
    x = [float(p) for p in points]
    n = len(x)
    nbrs = [[j for j in range(n) if abs(x[i] - x[j]) <= eps] for i in range(n)]
    core = [len(nbrs[i]) >= min_pts for i in range(n)]
    label = [None] * n
    cluster = 0
    for i in sorted(range(n), key=lambda k: x[k]):
        if not core[i] or label[i] is not None:
            continue
        label[i] = cluster
        queue = [i]
        while queue:
            p = queue.pop()
            for q in nbrs[p]:
                if core[q] and label[q] is None:
                    label[q] = cluster
                    queue.append(q)
        cluster += 1
    out = []
    for i in range(n):
        if core[i]:
            out.append(label[i])
            continue
        cands = [(abs(x[i] - x[j]), x[j], label[j]) for j in nbrs[i] if core[j]]
        out.append(min(cands)[2] if cands else -1)
    return out


def same_partition(a, b) -> bool:
    """Labels describe the same partition, with noise (-1) matched exactly."""
    a = list(a)
    b = list(b)
    if len(a) != len(b):
        return False
    fwd: dict = {}
    back: dict = {}
    for u, v in zip(a, b):
        if (u == -1) != (v == -1):
            return False
        if u == -1:
            continue
        if fwd.setdefault(u, v) != v or back.setdefault(v, u) != u:
            return False
    return True


# ----------------------------------------------------------------------------
# decision trees
# ----------------------------------------------------------------------------

def enumerate_paths(root) -> float:
    """Sum over root-to-leaf paths of path probability times path cost
    (recursive, undiscounted)."""
    total = 0.0

    def walk(node, prob, cost):
        nonlocal total
        if not node.children:
            total += prob * cost
            return
        for ch in node.children:
            walk(ch, prob * ch.branch_prob, cost + ch.branch_cost)

    walk(root, 1.0, root.branch_cost)
    return total


def random_tree(node_cls, rng: np.random.Generator, max_depth: int):
    """Random binary/unary tree with probabilities summing to one per node."""

    def grow(stage, state, depth, prob, cost):
        node = node_cls(stage=stage, state=state, branch_prob=prob, branch_cost=cost)
        if depth >= max_depth or rng.random() < 0.15:
            return node
        if rng.random() < 0.3:
            node.children = [grow(stage + 1, state, depth + 1, 1.0, 0.0)]
        else:
            p = float(rng.random())
            node.children = [grow(stage + 1, state + 1, depth + 1, p, 0.0),
                             grow(stage + 1, state, depth + 1, 1.0 - p, float(rng.uniform(0, 5)))]
        return node

    return grow(0, -max_depth, 0, 1.0, 0.0)


# ----------------------------------------------------------------------------
# numerics
# ----------------------------------------------------------------------------

def integrate_time(s, v, a: float, b: float, n: int = 20001) -> float:
    """Traversal time of [a, b] for a piecewise-linear speed profile, by a
    fine midpoint rule on 1/v."""
    edges = np.linspace(a, b, n)
    mid = 0.5 * (edges[1:] + edges[:-1])
    return float(np.sum(np.diff(edges) / np.interp(mid, s, v)))


def grid_search(fn, axes):
    """Minimum of ``fn`` over the Cartesian product of ``axes``."""
    best = (np.inf, None)
    for point in itertools.product(*axes):
        val = fn(point)
        if val < best[0]:
            best = (val, point)
    return best


def integrate_time_held(s, v, a: float, b: float, n: int = 200001) -> float:
    """Traversal time of [a, b] when each sample's speed holds until the next
    sample, by a fine midpoint rule on 1/v."""
    edges = np.linspace(a, b, n)
    mid = 0.5 * (edges[1:] + edges[:-1])
    k = np.searchsorted(s, mid, side="right") - 1
    return float(np.sum(np.diff(edges) / v[k]))
