"""Shared fixtures and independent test oracles.

The oracles here deliberately avoid the library's computational paths:
tree probabilities by brute-force enumeration over internal node states,
the Dirichlet-multinomial by Monte-Carlo gamma integration, digamma by an
asymptotic series.
"""

from __future__ import annotations

import math

import numpy as np
import pytest

from mmf.tree import RankTree, parse_newick


def enum_log_prob(tree: RankTree, obs: dict[int, int], p_k: float) -> float:
    """Brute-force log P(observed leaves) over all internal configurations.

    obs maps canonical leaf positions to observed values; unlisted leaves
    are marginalized (enumerated like internal nodes).
    """
    P = tree.P
    q = 1.0 - (1.0 - p_k) ** (1.0 / tree.L)
    pinned = {0: 0}
    for pos, val in obs.items():
        pinned[int(tree.leaf_ids[pos])] = val
    free = [v for v in range(P) if v not in pinned]
    total = 0.0
    for mask in range(2 ** len(free)):
        vals = dict(pinned)
        for idx, v in enumerate(free):
            vals[v] = (mask >> idx) & 1
        pr = 1.0
        for v in range(1, P):
            pv, cv = vals[tree.parent[v]], vals[v]
            if pv == 1:
                pr *= 1.0 if cv == 1 else 0.0
            else:
                pr *= q if cv == 1 else 1.0 - q
            if pr == 0.0:
                break
        total += pr
    return math.log(total) if total > 0.0 else -math.inf


def random_rank_tree(
    rng: np.random.Generator, n_leaves: int, L: int, max_free_nodes: int = 16
) -> RankTree:
    """Random uniform-depth tree built by randomly grouping levels."""
    while True:
        level: list = [f"t{i + 1}" for i in range(n_leaves)]
        for _ in range(L - 1):
            k = int(rng.integers(1, len(level) + 1))
            if k == 1:
                level = [level]
                continue
            cuts = np.sort(rng.choice(np.arange(1, len(level)), size=k - 1, replace=False))
            groups, start = [], 0
            for cut in list(cuts) + [len(level)]:
                groups.append(level[start:cut])
                start = cut
            level = groups
        tree = parse_newick(_render(level) + ";")
        if tree.P - tree.n_leaves - 1 <= max_free_nodes:
            return tree


def _render(node) -> str:
    if isinstance(node, str):
        return node
    return "(" + ",".join(_render(ch) for ch in node) + ")"


def mc_dm_log_prob(
    x: np.ndarray, eta: np.ndarray, n_draws: int, rng: np.random.Generator
) -> tuple[float, float]:
    """Monte-Carlo gamma-integration estimate of the DM pmf (value, MC se).

    Draws gamma weights, normalizes, and averages the multinomial pmf; the
    returned standard error is for the pmf on the probability scale.
    """
    from scipy.special import gammaln

    x = np.asarray(x, dtype=np.float64)
    p = x.shape[0]
    g = rng.gamma(np.broadcast_to(eta, (n_draws, p)), 1.0)
    pi = g / g.sum(axis=1, keepdims=True)
    coef = gammaln(x.sum() + 1.0) - gammaln(x + 1.0).sum()
    with np.errstate(divide="ignore", invalid="ignore"):
        logterms = np.where(x[None, :] > 0, x[None, :] * np.log(pi), 0.0).sum(axis=1)
    vals = np.exp(coef + logterms)
    return float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(n_draws))


def digamma_series(x: float) -> float:
    """Independent digamma: recurrence to x >= 12 plus Bernoulli series."""
    val = 0.0
    while x < 12.0:
        val -= 1.0 / x
        x += 1.0
    inv2 = 1.0 / (x * x)
    tail = inv2 * (
        1.0 / 12.0
        - inv2 * (1.0 / 120.0 - inv2 * (1.0 / 252.0 - inv2 * (1.0 / 240.0 - inv2 / 132.0)))
    )
    return val + math.log(x) - 0.5 / x - tail


@pytest.fixture(scope="session")
def cherry_tree() -> RankTree:
    return parse_newick("((A,B),(C,D));")


@pytest.fixture(scope="session")
def star5() -> RankTree:
    return parse_newick("(a,b,c,d,e);")
