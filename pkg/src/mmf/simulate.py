"""Synthetic-data generators for the simulation study, plus the
hard-threshold dichotomizer used by the two-step baseline.

The well-specified generator draws counts through the gamma-normalization
route (gamma weights -> normalized composition -> multinomial), sharing no
code with the collapsed likelihood it is tested against.  The misspecified
generator produces negative-binomial counts with Var(y) = 2 E(y) and
down-samples them to a multinomial row.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.special import expit

from .model import CountMatrix, ValidationError
from .tree import RankTree, sample_column

_REDRAW_CAP = 100


class SimMode(Enum):
    WELL_SPECIFIED = "well_specified"
    NEGBIN_MISSPECIFIED = "negbin_misspecified"


@dataclass
class SimScenario:
    """Ground-truth configuration of one synthetic dataset."""

    n: int = 300
    p: int = 46
    K: int = 6
    block_size: int = 50
    flip_frac: float = 0.10
    p_k_true: float = 0.3
    w_true: tuple[float, ...] = (2.0, 2.5, 3.0, 3.5, 4.0, 4.5)
    c_true: float = math.log(0.5)
    s: float = 5.0
    t: float = 0.5
    N_range: tuple[int, int] = (50, 500)
    mode: SimMode = SimMode.WELL_SPECIFIED
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.mode, str):
            self.mode = SimMode(self.mode)
        if self.n < 1 or self.p < 1 or self.K < 1:
            raise ValidationError("n, p, K must be positive")
        if self.block_size * self.K > self.n:
            raise ValidationError("block_size * K must not exceed n")
        if not 0.0 <= self.flip_frac < 1.0:
            raise ValidationError("flip_frac must be in [0, 1)")
        if not 0.0 < self.p_k_true < 1.0:
            raise ValidationError("p_k_true must be in (0, 1)")
        if len(self.w_true) != self.K or any(w <= 0 for w in self.w_true):
            raise ValidationError("w_true needs K positive entries")
        lo, hi = self.N_range
        if lo < 1 or hi < lo:
            raise ValidationError("N_range must satisfy 1 <= lo <= hi")
        if self.mode is SimMode.WELL_SPECIFIED and not self.s > self.t > 0:
            raise ValidationError("well-specified mode needs s > t > 0")


def generate_A(scenario: SimScenario, rng: np.random.Generator) -> np.ndarray:
    """Block-diagonal host assignment with a fixed fraction of zeros flipped."""
    n, K, bs = scenario.n, scenario.K, scenario.block_size
    A = np.zeros((n, K), dtype=np.int8)
    for k in range(K):
        A[bs * k : bs * (k + 1), k] = 1
    zeros = np.flatnonzero(A == 0)
    n_flips = int(round(scenario.flip_frac * zeros.size))
    if n_flips:
        picked = rng.choice(zeros.size, size=n_flips, replace=False)
        A.flat[zeros[picked]] = 1
    return A


def generate_B(
    tree: RankTree, K: int, p_k_true: float, rng: np.random.Generator
) -> np.ndarray:
    """K independent pIBP column draws (canonical leaf order); empty columns redrawn."""
    cols = []
    for _ in range(K):
        for _ in range(_REDRAW_CAP):
            col = sample_column(tree, p_k_true, rng)
            if col.any():
                break
        else:
            raise ValidationError(
                f"could not draw a non-empty column in {_REDRAW_CAP} tries (p_k={p_k_true})"
            )
        cols.append(col)
    return np.stack(cols, axis=1).astype(np.int8)


def _true_logits(A: np.ndarray, B: np.ndarray, scenario: SimScenario) -> np.ndarray:
    w = np.asarray(scenario.w_true, dtype=np.float64)
    return scenario.c_true + A.astype(np.float64) @ (B * w[None, :]).T


def _multinomial_rows(
    weights: np.ndarray, lo: int, hi: int, rng: np.random.Generator
) -> np.ndarray:
    n, p = weights.shape
    x = np.empty((n, p), dtype=np.int64)
    totals = rng.integers(lo, hi, size=n, endpoint=True)
    for i in range(n):
        pvals = weights[i] / weights[i].sum()
        x[i] = rng.multinomial(int(totals[i]), pvals)
    return x


def generate_counts_dm(
    A: np.ndarray,
    B: np.ndarray,
    scenario: SimScenario,
    rng: np.random.Generator,
    taxon_names: list[str] | None = None,
) -> tuple[CountMatrix, np.ndarray]:
    """Well-specified counts plus the true abundance flags Z."""
    logits = _true_logits(A, B, scenario)
    n, p = logits.shape
    Z = (rng.random((n, p)) < expit(logits)).astype(np.int8)
    eta = np.where(Z == 1, scenario.s, scenario.t)
    gamma = rng.gamma(eta, 1.0)
    for i in range(n):
        for _ in range(_REDRAW_CAP):
            if gamma[i].sum() > 0:
                break
            gamma[i] = rng.gamma(eta[i], 1.0)
        else:
            raise ValidationError("degenerate all-zero gamma row")
    x = _multinomial_rows(gamma, *scenario.N_range, rng)
    if taxon_names is None:
        taxon_names = [f"t{j + 1}" for j in range(p)]
    return CountMatrix(x=x, taxon_names=list(taxon_names)), Z


def generate_counts_negbin(
    A: np.ndarray,
    B: np.ndarray,
    scenario: SimScenario,
    rng: np.random.Generator,
    taxon_names: list[str] | None = None,
) -> CountMatrix:
    """Misspecified counts: NB(mu, kappa=mu) true loads down-sampled to rows."""
    mu = np.exp(_true_logits(A, B, scenario))
    n, p = mu.shape
    y = rng.negative_binomial(mu, 0.5).astype(np.float64)
    for i in range(n):
        for _ in range(_REDRAW_CAP):
            if y[i].sum() > 0:
                break
            y[i] = rng.negative_binomial(mu[i], 0.5)
        else:
            raise ValidationError("degenerate all-zero negative-binomial row")
    x = _multinomial_rows(y, *scenario.N_range, rng)
    if taxon_names is None:
        taxon_names = [f"t{j + 1}" for j in range(p)]
    return CountMatrix(x=x, taxon_names=list(taxon_names))


def tsmf_dichotomize(
    data: CountMatrix, floor: float = 1e-5, q: float = 0.25
) -> np.ndarray:
    """Hard-threshold dichotomization used by the two-step baseline.

    Relative abundances below ``floor`` count as absent; each taxon's cutoff
    is the q-quantile (linear, type-7 interpolation) of its above-floor
    relative abundances.  Taxa with nothing above the floor give all-zero
    columns.
    """
    if not 0.0 <= floor < 1.0:
        raise ValidationError("floor must be in [0, 1)")
    if not 0.0 < q < 1.0:
        raise ValidationError("q must be in (0, 1)")
    r = data.x / data.row_totals[:, None]
    r = np.where(r < floor, 0.0, r)
    z = np.zeros(r.shape, dtype=np.int8)
    for j in range(data.p):
        above = r[:, j][r[:, j] >= floor]
        if above.size == 0:
            continue
        cutoff = np.quantile(above, q)
        z[:, j] = r[:, j] >= cutoff
    return z
