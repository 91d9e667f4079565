"""Domain types and the collapsed likelihood of the biclustering model.

Counts x_i are Dirichlet-multinomial given the latent high/low-abundance
flags z_ij: the Dirichlet shape of taxon j is s_j when z_ij = 1 and t_j
otherwise (s_j > t_j).  The unnormalized gamma abundances are integrated
out analytically, so only the collapsed form appears anywhere in the
sampler.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, gammaln

from .tree import RankTree, column_log_prior, nonempty_column_mass


class ValidationError(ValueError):
    """Invalid input data or configuration."""


# ---------------------------------------------------------------------------
# Data container
# ---------------------------------------------------------------------------

@dataclass
class CountMatrix:
    """n x p matrix of non-negative integer counts (hosts x taxa)."""

    x: np.ndarray
    taxon_names: list[str]
    host_labels: list[str] | None = None

    def __post_init__(self):
        x = np.asarray(self.x)
        if x.ndim != 2:
            raise ValidationError("count matrix must be two-dimensional")
        if x.size and not np.issubdtype(x.dtype, np.integer):
            if not np.all(np.equal(np.mod(x, 1), 0)):
                raise ValidationError("counts must be integers")
        self.x = x.astype(np.int64)
        if np.any(self.x < 0):
            raise ValidationError("counts must be non-negative")
        if len(self.taxon_names) != self.p:
            raise ValidationError(
                f"{len(self.taxon_names)} taxon names for {self.p} columns"
            )
        if len(set(self.taxon_names)) != self.p:
            dup = sorted({t for t in self.taxon_names if self.taxon_names.count(t) > 1})
            raise ValidationError(f"duplicate taxon names: {dup}")
        if self.host_labels is not None and len(self.host_labels) != self.n:
            raise ValidationError("one host label per row required")
        empty = np.flatnonzero(self.row_totals == 0)
        if empty.size:
            ids = (
                [self.host_labels[i] for i in empty[:10]]
                if self.host_labels
                else empty[:10].tolist()
            )
            raise ValidationError(
                f"{empty.size} host(s) with zero total count (undefined model): {ids}"
            )

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]

    @property
    def row_totals(self) -> np.ndarray:
        return self.x.sum(axis=1)


def as_count_matrix(X, taxon_names: list[str] | None = None) -> CountMatrix:
    """Validate array-like input into a CountMatrix (names default to t1..tp)."""
    if isinstance(X, CountMatrix):
        return X
    X = np.asarray(X)
    if X.ndim != 2:
        raise ValidationError("expected a 2-d count matrix")
    if taxon_names is None:
        taxon_names = [f"t{j + 1}" for j in range(X.shape[1])]
    return CountMatrix(x=X, taxon_names=list(taxon_names))


# ---------------------------------------------------------------------------
# Hyperparameters and state
# ---------------------------------------------------------------------------

@dataclass
class Hyperparameters:
    alpha_s: float = 1.0
    beta_s: float = 0.1
    alpha_t: float = 1.0
    beta_t: float = 0.1
    mu_c: float = 0.0
    sigma2_c: float = 100.0
    alpha_w: float = 1.0
    beta_w: float = 0.1
    alpha_rho: float = 1.0
    beta_rho: float = 1.0
    m_shape: float = 1.0
    m_rate: float = 1.0

    def __post_init__(self):
        for name in (
            "alpha_s", "beta_s", "alpha_t", "beta_t", "sigma2_c",
            "alpha_w", "beta_w", "alpha_rho", "beta_rho", "m_shape", "m_rate",
        ):
            if getattr(self, name) <= 0:
                raise ValidationError(f"hyperparameter {name} must be > 0")


@dataclass
class ModelState:
    """All latent variables and parameters at one MCMC iteration.

    Column dimensions of A, B, W, p_col agree and equal the current number
    K of non-empty clusters.  W is carried as a full p x K matrix; entries
    with b_jk = 0 are inert (prior-distributed placeholder values).
    """

    Z: np.ndarray       # n x p binary
    A: np.ndarray       # n x K binary
    B: np.ndarray       # p x K binary
    W: np.ndarray       # p x K positive
    c: np.ndarray       # p
    s: np.ndarray       # p
    t: np.ndarray       # p
    p_col: np.ndarray   # K in (0,1)
    m: float
    rho: float

    @property
    def K(self) -> int:
        return self.B.shape[1]

    def copy(self) -> "ModelState":
        return ModelState(
            Z=self.Z.copy(), A=self.A.copy(), B=self.B.copy(), W=self.W.copy(),
            c=self.c.copy(), s=self.s.copy(), t=self.t.copy(),
            p_col=self.p_col.copy(), m=float(self.m), rho=float(self.rho),
        )

    def validate(self) -> None:
        n, p, K = self.Z.shape[0], self.Z.shape[1], self.K
        if self.A.shape != (n, K) or self.W.shape != (p, K) or self.B.shape != (p, K):
            raise ValidationError("A/B/W dimensions inconsistent with Z and K")
        if self.p_col.shape != (K,):
            raise ValidationError("p_col length must equal K")
        for M in (self.Z, self.A, self.B):
            if M.size and not np.isin(M, (0, 1)).all():
                raise ValidationError("Z, A, B must be binary")
        if K and np.any(self.B.sum(axis=0) == 0):
            raise ValidationError("B has an all-zero column")
        if np.any(self.s <= self.t) or np.any(self.t <= 0):
            raise ValidationError("need s_j > t_j > 0 for every taxon")
        if K and (np.any(self.W <= 0) or np.any((self.p_col <= 0) | (self.p_col >= 1))):
            raise ValidationError("need w_jk > 0 and 0 < p_k < 1")
        if not (0 < self.rho < 1) or self.m <= 0:
            raise ValidationError("need 0 < rho < 1 and m > 0")

    def in_support(self) -> bool:
        try:
            self.validate()
        except ValidationError:
            return False
        return True


@dataclass
class Trace:
    """Per-iteration scalars plus thinned post-burn-in state snapshots."""

    iterations: int
    burn_in: int
    thin: int
    seed: int
    chain_id: int
    K: np.ndarray
    log_joint: np.ndarray
    m: np.ndarray
    rho: np.ndarray
    mean_c: np.ndarray
    mean_s: np.ndarray
    mean_t: np.ndarray
    acceptance: dict[str, np.ndarray] = field(default_factory=dict)
    snapshots: list[ModelState] = field(default_factory=list)
    snapshot_iterations: list[int] = field(default_factory=list)

    @property
    def n_snapshots(self) -> int:
        return len(self.snapshots)

    def validate(self) -> None:
        expect = (self.iterations - self.burn_in) // self.thin
        if self.n_snapshots != expect:
            raise ValidationError(
                f"{self.n_snapshots} snapshots != floor((iters - burnin)/thin) = {expect}"
            )
        for snap in self.snapshots:
            snap.validate()


# ---------------------------------------------------------------------------
# Collapsed likelihood and logit prior
# ---------------------------------------------------------------------------

def log_dm_rows(x: np.ndarray, Z: np.ndarray, s: np.ndarray, t: np.ndarray) -> float:
    """Sum over hosts of the collapsed row log likelihood (no coefficients)."""
    x = np.asarray(x, dtype=np.float64)
    eta = np.where(Z == 1, s[None, :], t[None, :])
    total = eta.sum(axis=1)
    n_i = x.sum(axis=1)
    return float(
        np.sum(gammaln(total) - gammaln(n_i + total))
        + np.sum(gammaln(x + eta) - gammaln(eta))
    )


def log_dm_row(
    x_i: np.ndarray,
    z_i: np.ndarray,
    s: np.ndarray,
    t: np.ndarray,
    with_coefficient: bool = False,
    validate: bool = True,
) -> float:
    """Collapsed Dirichlet-multinomial log probability of one count row.

    The Dirichlet shape is eta_j = s_j if z_ij = 1 else t_j.  The
    multinomial coefficient is added only on request; it cancels in every
    MCMC ratio.  ``validate=False`` bypasses the s_j > t_j > 0 guard (test
    hook for degenerate shape configurations).
    """
    x_i = np.asarray(x_i, dtype=np.float64)
    z_i = np.asarray(z_i)
    s = np.asarray(s, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    p = x_i.shape[0]
    if p == 0:
        raise ValidationError("empty model: p = 0")
    if not (z_i.shape[0] == s.shape[0] == t.shape[0] == p):
        raise ValidationError("x_i, z_i, s, t must share length p")
    if validate and (np.any(s <= t) or np.any(t <= 0)):
        raise ValidationError("need s_j > t_j > 0")
    eta = np.where(z_i == 1, s, t)
    total = eta.sum()
    n_i = x_i.sum()
    out = (
        gammaln(total)
        - gammaln(n_i + total)
        + np.sum(gammaln(x_i + eta) - gammaln(eta))
    )
    if with_coefficient:
        out += gammaln(n_i + 1.0) - np.sum(gammaln(x_i + 1.0))
    return float(out)


def logit_abundance(A: np.ndarray, B: np.ndarray, W: np.ndarray, c: np.ndarray) -> np.ndarray:
    """n x p matrix of logits c_j + sum_k a_ik w_jk b_jk."""
    return c[None, :] + A.astype(np.float64) @ (W * B).T


def prob_z_one(i: int, j: int, A: np.ndarray, B: np.ndarray, W: np.ndarray, c: np.ndarray) -> float:
    """P(z_ij = 1) under the latent logit prior."""
    logit = c[j] + float(np.dot(A[i].astype(np.float64), W[j] * B[j]))
    return float(expit(logit))


def _log_bernoulli_logit(Z: np.ndarray, Q: np.ndarray) -> float:
    # sum_ij [z*q - log(1+e^q)] with a stable softplus
    return float(np.sum(Z * Q) - np.sum(np.logaddexp(0.0, Q)))


def _gamma_logpdf(x, shape: float, rate: float) -> float:
    x = np.asarray(x, dtype=np.float64)
    return float(
        np.sum(shape * np.log(rate) - gammaln(shape) + (shape - 1.0) * np.log(x) - rate * x)
    )


def log_joint(
    state: ModelState, data: CountMatrix, tree: RankTree, hp: Hyperparameters
) -> float:
    """Log joint density of (state, data) up to fixed dropped constants.

    Dropped (constant in all sampled quantities, documented so tests compare
    differences only): the multinomial coefficients of the count rows and
    the column-ordering (K!-type) constant of the pIBP.  Included m-/K-
    dependent pIBP factors: K log m - m*C + sum_k [log P(b_k | p_k) - log p_k]
    with C = psi((P-1)/L + 1) - psi(1).  Returns -inf outside the support.
    """
    if not state.in_support():
        return -np.inf
    n, p, K = data.n, data.p, state.K

    out = log_dm_rows(data.x, state.Z, state.s, state.t)

    Q = logit_abundance(state.A, state.B, state.W, state.c)
    out += _log_bernoulli_logit(state.Z, Q)

    C = nonempty_column_mass(tree.P, tree.L)
    out += K * np.log(state.m) - state.m * C
    positions = tree.leaf_positions_for(data.taxon_names)
    for k in range(K):
        b_tree = np.zeros(p, dtype=np.int8)
        b_tree[positions] = state.B[:, k]
        out += column_log_prior(tree, b_tree, float(state.p_col[k]))
        out -= np.log(state.p_col[k])

    a_sum = float(state.A.sum())
    out += a_sum * np.log(state.rho) + (n * K - a_sum) * np.log1p(-state.rho)
    if K:
        out += _gamma_logpdf(state.W, hp.alpha_w, hp.beta_w)
    out += float(
        -0.5 * np.sum((state.c - hp.mu_c) ** 2) / hp.sigma2_c
        - 0.5 * p * np.log(2.0 * np.pi * hp.sigma2_c)
    )
    out += _gamma_logpdf(state.s, hp.alpha_s, hp.beta_s)
    out += _gamma_logpdf(state.t, hp.alpha_t, hp.beta_t)
    out += _gamma_logpdf(state.m, hp.m_shape, hp.m_rate)
    out += float(
        (hp.alpha_rho - 1.0) * np.log(state.rho)
        + (hp.beta_rho - 1.0) * np.log1p(-state.rho)
        + gammaln(hp.alpha_rho + hp.beta_rho)
        - gammaln(hp.alpha_rho)
        - gammaln(hp.beta_rho)
    )
    return float(out)
