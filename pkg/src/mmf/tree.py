"""Taxonomic rank tree and the phylogenetic IBP column prior.

The column prior is a two-state absorbing Markov process run from the root
(state 0) toward the leaves: each edge independently switches 0 -> 1 with
probability 1 - (1 - p_k)^(1/L), and state 1 is inherited by the whole
subtree below the switch.  All exact computations (column probability, leaf
conditionals) are one- or two-pass sum-product recursions over the tree,
done in log space.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy.special import digamma

logger = logging.getLogger("mmf")

UNOBSERVED = -1


class NewickError(ValueError):
    """Malformed Newick input or invalid tree structure."""


@dataclass
class RankTree:
    """Rooted tree with uniform leaf depth L.

    Nodes are numbered 0..P-1 in breadth-first order, so ``parent[v] < v``
    for every non-root node and ``parent[0] == -1``.  ``leaf_ids`` lists the
    leaf node ids in canonical (input) order; taxon index j of the public
    column operations refers to ``leaf_ids[j]``.
    """

    parent: np.ndarray
    leaf_ids: np.ndarray
    leaf_names: list[str]
    L: int
    node_names: list[str | None] = field(repr=False, default_factory=list)
    inserted_unary_nodes: int = 0

    def __post_init__(self):
        self.parent = np.asarray(self.parent, dtype=np.int64)
        self.leaf_ids = np.asarray(self.leaf_ids, dtype=np.int64)
        self.validate()

    @property
    def P(self) -> int:
        return int(self.parent.shape[0])

    @property
    def n_leaves(self) -> int:
        return int(self.leaf_ids.shape[0])

    def depths(self) -> np.ndarray:
        d = np.zeros(self.P, dtype=np.int64)
        for v in range(1, self.P):
            d[v] = d[self.parent[v]] + 1
        return d

    def leaf_id_of(self, name: str) -> int:
        try:
            return int(self.leaf_ids[self.leaf_names.index(name)])
        except ValueError:
            raise KeyError(f"no leaf named {name!r}") from None

    def leaf_nodes_for(self, taxon_names: list[str]) -> np.ndarray:
        """Leaf node ids aligned with an external taxon ordering."""
        return np.array([self.leaf_id_of(nm) for nm in taxon_names], dtype=np.int64)

    def leaf_positions_for(self, taxon_names: list[str]) -> np.ndarray:
        """Canonical leaf-order positions of the named taxa."""
        index = {nm: i for i, nm in enumerate(self.leaf_names)}
        try:
            return np.array([index[nm] for nm in taxon_names], dtype=np.int64)
        except KeyError as exc:
            raise KeyError(f"no leaf named {exc.args[0]!r}") from None

    def validate(self) -> None:
        P = self.P
        if P < 2:
            raise NewickError("tree must have a root and at least one leaf")
        if self.parent[0] != -1 or np.any(self.parent[1:] < 0):
            raise NewickError("nodes must be in BFS order with parent[0] == -1")
        if np.any(self.parent[1:] >= np.arange(1, P)):
            raise NewickError("parent ids must precede children")
        is_leaf = np.ones(P, dtype=bool)
        is_leaf[self.parent[1:]] = False
        if not np.all(is_leaf[self.leaf_ids]) or is_leaf.sum() != self.n_leaves:
            raise NewickError("leaf_ids must enumerate exactly the childless nodes")
        if len(self.leaf_names) != self.n_leaves:
            raise NewickError("one name per leaf required")
        if len(set(self.leaf_names)) != self.n_leaves:
            dup = sorted({n for n in self.leaf_names if self.leaf_names.count(n) > 1})
            raise NewickError(f"duplicate leaf names: {dup}")
        d = self.depths()
        leaf_depths = d[self.leaf_ids]
        if np.any(leaf_depths != self.L):
            raise NewickError(
                f"leaf depths {sorted(set(leaf_depths.tolist()))} != uniform L={self.L}"
            )


# ---------------------------------------------------------------------------
# Newick parsing
# ---------------------------------------------------------------------------

def parse_newick(text: str) -> RankTree:
    """Parse a Newick string into a validated RankTree.

    Branch lengths are ignored (the model fixes every edge at length 1/L).
    If leaf depths are ragged, each shallow leaf's incoming edge is
    subdivided by unary nodes until all leaves sit at the maximum depth;
    the normalization is logged and recorded on the tree.
    """
    s = text.strip()
    if not s.endswith(";"):
        raise NewickError("Newick string must end with ';'")
    s = s[:-1].strip()
    if not s:
        raise NewickError("empty tree")

    # children[i]/names[i] indexed by preliminary node id, 0 = root.
    children: list[list[int]] = []
    names: list[str | None] = []

    def new_node() -> int:
        children.append([])
        names.append(None)
        return len(children) - 1

    pos = 0

    def skip_ws() -> None:
        nonlocal pos
        while pos < len(s) and s[pos].isspace():
            pos += 1

    def parse_name() -> str:
        nonlocal pos
        start = pos
        while pos < len(s) and s[pos] not in "(),:;":
            pos += 1
        return s[start:pos].strip()

    def skip_length() -> None:
        nonlocal pos
        skip_ws()
        if pos < len(s) and s[pos] == ":":
            pos += 1
            start = pos
            while pos < len(s) and s[pos] not in "(),;":
                pos += 1
            try:
                float(s[start:pos].strip())
            except ValueError:
                raise NewickError(f"bad branch length {s[start:pos]!r}") from None

    def parse_subtree() -> int:
        nonlocal pos
        node = new_node()
        skip_ws()
        if pos < len(s) and s[pos] == "(":
            pos += 1
            while True:
                child = parse_subtree()
                children[node].append(child)
                skip_ws()
                if pos >= len(s):
                    raise NewickError("unbalanced parentheses")
                if s[pos] == ",":
                    pos += 1
                    continue
                if s[pos] == ")":
                    pos += 1
                    break
                raise NewickError(f"unexpected character {s[pos]!r} at {pos}")
            name = parse_name()
            names[node] = name or None
        else:
            name = parse_name()
            if not name:
                raise NewickError(f"empty label at position {pos}")
            names[node] = name
        skip_length()
        return node

    root = parse_subtree()
    skip_ws()
    if pos != len(s):
        raise NewickError(f"trailing characters after tree: {s[pos:]!r}")
    if not children[root]:
        raise NewickError("tree has no leaves below the root")
    return _build_tree(children, names, root)


def _build_tree(children: list[list[int]], names: list[str | None], root: int) -> RankTree:
    depth = {root: 0}
    order = [root]
    for v in order:
        for ch in children[v]:
            depth[ch] = depth[v] + 1
            order.append(ch)
    leaves = [v for v in order if not children[v]]
    L = max(depth[v] for v in leaves)

    inserted = 0
    for v in leaves:
        gap = L - depth[v]
        if gap == 0:
            continue
        # subdivide the incoming edge in place: parent -> u_1 -> ... -> u_gap -> v
        par = next(u for u in range(len(children)) if v in children[u])
        slot = children[par].index(v)
        chain = -1
        for step in range(gap):
            u = len(children)
            children.append([])
            names.append(None)
            if step == 0:
                children[par][slot] = u
            else:
                children[chain].append(u)
            chain = u
        children[chain].append(v)
        inserted += gap
    if inserted:
        logger.info("normalized ragged Newick input: inserted %d unary node(s)", inserted)

    # renumber breadth-first; canonical leaf order = input (preorder) order
    bfs = [root]
    for v in bfs:
        bfs.extend(children[v])
    new_id = {old: i for i, old in enumerate(bfs)}
    P = len(bfs)
    parent = np.full(P, -1, dtype=np.int64)
    for v in bfs:
        for ch in children[v]:
            parent[new_id[ch]] = new_id[v]
    leaf_old = [v for v in _preorder(children, root) if not children[v]]
    leaf_ids = [new_id[v] for v in leaf_old]
    leaf_names = [names[v] for v in leaf_old]
    if any(nm is None for nm in leaf_names):
        raise NewickError("every leaf must be named")
    node_names = [None] * P
    for old, nid in new_id.items():
        node_names[nid] = names[old]
    return RankTree(
        parent=np.array(parent),
        leaf_ids=np.array(leaf_ids, dtype=np.int64),
        leaf_names=list(leaf_names),
        L=int(max(_node_depths(parent))),
        node_names=node_names,
        inserted_unary_nodes=inserted,
    )


def _preorder(children: list[list[int]], root: int) -> list[int]:
    out, stack = [], [root]
    while stack:
        v = stack.pop()
        out.append(v)
        stack.extend(reversed(children[v]))
    return out


def _node_depths(parent: np.ndarray) -> np.ndarray:
    d = np.zeros(parent.shape[0], dtype=np.int64)
    for v in range(1, parent.shape[0]):
        d[v] = d[parent[v]] + 1
    return d


def to_newick(tree: RankTree) -> str:
    """Serialize a RankTree back to Newick (topology and leaf names only)."""
    children: list[list[int]] = [[] for _ in range(tree.P)]
    for v in range(1, tree.P):
        children[tree.parent[v]].append(v)
    name = {int(lid): nm for lid, nm in zip(tree.leaf_ids, tree.leaf_names)}

    def render(v: int) -> str:
        if not children[v]:
            return name[v]
        return "(" + ",".join(render(c) for c in children[v]) + ")"

    return render(0) + ";"


# ---------------------------------------------------------------------------
# Column prior computations
# ---------------------------------------------------------------------------

@njit(cache=True)
def _upward_log_prob(parent, obs, log_q, log_1mq):  # pragma: no cover - jitted
    """log P(observed leaves | root = 0) for the absorbing 0->1 edge process.

    obs[v] in {-1, 0, 1}: observed leaf value or -1 for unobserved/internal.
    One upward sum-product pass; messages kept in log space.
    """
    P = parent.shape[0]
    lb0 = np.zeros(P)
    lb1 = np.zeros(P)
    for v in range(P):
        if obs[v] == 0:
            lb1[v] = -np.inf
        elif obs[v] == 1:
            lb0[v] = -np.inf
    for v in range(P - 1, 0, -1):
        u = parent[v]
        a = log_1mq + lb0[v]
        b = log_q + lb1[v]
        if a == -np.inf:
            c0 = b
        elif b == -np.inf:
            c0 = a
        elif a >= b:
            c0 = a + np.log1p(np.exp(b - a))
        else:
            c0 = b + np.log1p(np.exp(a - b))
        lb0[u] += c0
        lb1[u] += lb1[v]
    return lb0[0]


def edge_flip_prob(p_k: float, L: int) -> float:
    """Per-edge 0->1 switch probability giving leaf marginal p_k at depth L."""
    if not 0.0 <= p_k < 1.0:
        raise ValueError(f"p_k must be in [0, 1), got {p_k}")
    if L < 1:
        raise ValueError("L must be >= 1")
    return -np.expm1(np.log1p(-p_k) / L)


def _log_edge_probs(p_k: float, L: int) -> tuple[float, float]:
    log_1mq = np.log1p(-p_k) / L
    log_q = np.log(-np.expm1(log_1mq))
    return log_q, log_1mq


def _obs_from_column(tree: RankTree, b_col: np.ndarray, skip: int | None = None) -> np.ndarray:
    obs = np.full(tree.P, UNOBSERVED, dtype=np.int8)
    obs[tree.leaf_ids] = np.asarray(b_col, dtype=np.int8)
    if skip is not None:
        obs[tree.leaf_ids[skip]] = UNOBSERVED
    return obs


def observed_log_prob(tree: RankTree, obs: np.ndarray, p_k: float) -> float:
    """log probability of a partial leaf observation (obs indexed by node id)."""
    log_q, log_1mq = _log_edge_probs(p_k, L=tree.L)
    return float(_upward_log_prob(tree.parent, obs, log_q, log_1mq))


def column_log_prior(tree: RankTree, b_col: np.ndarray, p_k: float) -> float:
    """Exact log P(leaves = b_col | p_k) of the column process."""
    b_col = np.asarray(b_col)
    if b_col.shape[0] != tree.n_leaves:
        raise ValueError("column length must equal the number of leaves")
    return observed_log_prob(tree, _obs_from_column(tree, b_col), p_k)


def leaf_conditional(tree: RankTree, b_minus_j: np.ndarray, j: int, p_k: float) -> float:
    """P(b_j = 1 | other leaves, p_k), computed exactly by sum-product.

    ``b_minus_j`` is a full-length leaf vector whose j-th entry is ignored.
    """
    obs = _obs_from_column(tree, b_minus_j, skip=j)
    lid = tree.leaf_ids[j]
    obs[lid] = 1
    lp1 = observed_log_prob(tree, obs, p_k)
    obs[lid] = 0
    lp0 = observed_log_prob(tree, obs, p_k)
    return float(np.exp(lp1 - np.logaddexp(lp0, lp1)))


def partial_column_log_prob(
    tree: RankTree, b_minus_j: np.ndarray, j: int, b_j: int, p_k: float
) -> float:
    """log P(b^{-j} | p_k, b_j), via the chain-rule identity joint/marginal."""
    obs = _obs_from_column(tree, b_minus_j, skip=j)
    obs[tree.leaf_ids[j]] = b_j
    joint = observed_log_prob(tree, obs, p_k)
    marginal = np.log(p_k) if b_j else np.log1p(-p_k)
    return float(joint - marginal)


def sample_column(tree: RankTree, p_k: float, rng: np.random.Generator) -> np.ndarray:
    """Draw one column of B from the absorbing tree process (leaf order)."""
    if not 0.0 < p_k < 1.0:
        raise ValueError("p_k must be in (0, 1)")
    q = edge_flip_prob(p_k, tree.L)
    state = np.zeros(tree.P, dtype=np.int8)
    flips = rng.random(tree.P - 1) < q
    for v in range(1, tree.P):
        state[v] = state[tree.parent[v]] | flips[v - 1]
    return state[tree.leaf_ids].copy()


def new_pk_log_density(p_k: float, P: int, L: int) -> float:
    """Unnormalized log density of p_k for a freshly-born singleton column."""
    if not 0.0 < p_k < 1.0:
        return -np.inf
    log_1mq = np.log1p(-p_k) / L
    return float(
        np.log(-np.expm1(log_1mq)) + (P - 2) / L * np.log1p(-p_k) - np.log(p_k)
    )


def new_column_rate(m: float, P: int, L: int) -> float:
    """Poisson rate of proposed new columns per taxon step."""
    return float(m * (digamma((P - 1) / L + 1.0) - digamma((P - 2) / L + 1.0)))


def nonempty_column_mass(P: int, L: int) -> float:
    """C with K | m ~ Poisson(m*C): total intensity of non-empty columns."""
    return float(digamma((P - 1) / L + 1.0) - digamma(1.0))


def sample_new_pk(P: int, L: int, rng: np.random.Generator) -> float:
    """Exact draw from the new-column p_k density.

    Rejection from a Beta(1, (P-2)/L + 1) envelope with acceptance
    probability {1-(1-p)^(1/L)}/p in [1/L, 1].
    """
    b = (P - 2) / L + 1.0
    while True:
        p = rng.beta(1.0, b)
        if p <= 0.0 or p >= 1.0:
            continue
        accept = -np.expm1(np.log1p(-p) / L) / p
        if rng.random() < accept:
            return float(p)


def matrix_tree_log_prob(B: np.ndarray, tree: RankTree, p_cols: np.ndarray) -> float:
    """Sum of exact column log probabilities, log P(B | tree, {p_k})."""
    B = np.asarray(B)
    p_cols = np.atleast_1d(np.asarray(p_cols, dtype=float))
    if B.ndim != 2 or B.shape[1] != p_cols.shape[0]:
        raise ValueError("B must be p x K with one p_k per column")
    if B.shape[1] and not np.all(B.sum(axis=0) > 0):
        raise ValueError("columns of B must be non-empty")
    return float(sum(column_log_prior(tree, B[:, k], p_cols[k]) for k in range(B.shape[1])))


def balanced_tree(p: int, L: int, arity: int) -> RankTree:
    """Complete arity-ary tree of depth L pruned to the p leftmost leaves."""
    if p < 1 or L < 1 or arity < 1:
        raise ValueError("p, L, arity must be positive")
    if arity**L < p:
        raise ValueError(f"arity^L = {arity**L} < p = {p}")
    # leaf slots 0..p-1 at depth L; keep every ancestor of a kept leaf
    keep: set[tuple[int, int]] = {(0, 0)}
    for leaf in range(p):
        idx = leaf
        for d in range(L, 0, -1):
            keep.add((d, idx))
            idx //= arity
    nodes = sorted(keep)  # sorted by (depth, index) = BFS order
    ids = {node: i for i, node in enumerate(nodes)}
    parent = np.full(len(nodes), -1, dtype=np.int64)
    for d, idx in nodes:
        if d > 0:
            parent[ids[(d, idx)]] = ids[(d - 1, idx // arity)]
    leaf_ids = np.array([ids[(L, i)] for i in range(p)], dtype=np.int64)
    names = [f"t{i + 1}" for i in range(p)]
    return RankTree(parent=parent, leaf_ids=leaf_ids, leaf_names=names, L=L)


def star_tree(taxon_names: list[str]) -> RankTree:
    """Depth-1 tree: the pIBP degenerates to the ordinary IBP."""
    p = len(taxon_names)
    parent = np.concatenate([[-1], np.zeros(p, dtype=np.int64)])
    return RankTree(
        parent=parent,
        leaf_ids=np.arange(1, p + 1),
        leaf_names=list(taxon_names),
        L=1,
    )
