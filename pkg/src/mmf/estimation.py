"""Posterior summarization, recovery metrics, and convergence diagnostics.

Point estimation follows the label-switching-aware recipe: K from the
posterior mode, B as the posterior sample minimizing the mean
permutation-minimized Hamming distance to all samples at that K, then a
conditional refit with B frozen for the remaining parameters.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.optimize import linear_sum_assignment

from .model import (
    CountMatrix,
    Hyperparameters,
    ModelState,
    Trace,
    ValidationError,
    logit_abundance,
)
from .sampler import SamplerConfig, run_chain
from .tree import RankTree

_REFIT_CHAIN_ID = 1 << 16


class Verdict(Enum):
    SUFFICIENT = "sufficient"
    UNKNOWN = "unknown"


@dataclass
class PointEstimates:
    K_hat: int
    B_hat: np.ndarray
    A_hat: np.ndarray
    W_hat: np.ndarray
    c_hat: np.ndarray
    s_hat: np.ndarray
    t_hat: np.ndarray
    Z_hat: np.ndarray

    def validate(self) -> None:
        if self.B_hat.shape[1] != self.K_hat or self.A_hat.shape[1] != self.K_hat:
            raise ValidationError("A_hat/B_hat column count must equal K_hat")
        if self.K_hat and np.any(self.B_hat.sum(axis=0) == 0):
            raise ValidationError("B_hat has an all-zero column")
        if self.A_hat.size and not np.isin(self.A_hat, (0, 1)).all():
            raise ValidationError("A_hat must be binary")
        if np.any((self.Z_hat < 0) | (self.Z_hat > 1)):
            raise ValidationError("Z_hat entries must lie in [0, 1]")


@dataclass
class RecoveryReport:
    error_A: float
    error_B: float
    K_true: int
    K_hat: int
    permutation: np.ndarray


def _all_snapshots(traces: Trace | list[Trace]) -> list[ModelState]:
    if isinstance(traces, Trace):
        traces = [traces]
    snaps: list[ModelState] = []
    for tr in traces:
        snaps.extend(tr.snapshots)
    return snaps


def map_K(traces: Trace | list[Trace]) -> int:
    """Posterior-mode K over all retained samples; ties go to the smaller K."""
    snaps = _all_snapshots(traces)
    if not snaps:
        raise ValidationError("no retained samples")
    ks = np.array([s.K for s in snaps])
    counts = np.bincount(ks)
    return int(np.argmax(counts))  # argmax takes the first (smallest) maximizer


def min_perm_hamming(B1: np.ndarray, B2: np.ndarray) -> tuple[int, np.ndarray]:
    """Minimum Hamming distance over column permutations of B2.

    Solved exactly as a linear assignment problem on the K x K matrix of
    column-pair Hamming distances.  Returns (distance, perm) with
    H(B1, B2[:, perm]) equal to the distance.
    """
    B1 = np.asarray(B1)
    B2 = np.asarray(B2)
    if B1.shape != B2.shape:
        raise ValidationError(f"shape mismatch: {B1.shape} vs {B2.shape}")
    K = B1.shape[1]
    if K == 0:
        return 0, np.empty(0, dtype=np.int64)
    cost = (B1[:, :, None] != B2[:, None, :]).sum(axis=0)
    rows, cols = linear_sum_assignment(cost)
    return int(cost[rows, cols].sum()), cols.astype(np.int64)


def posterior_mode_B(samples: list[np.ndarray]) -> np.ndarray:
    """Sample minimizing the average permutation-minimized Hamming distance.

    Ties are broken by first occurrence in chain order.  Identical samples
    are deduplicated, which leaves the minimizer unchanged.
    """
    if not samples:
        raise ValidationError("empty sample set")
    shape = samples[0].shape
    if any(s.shape != shape for s in samples):
        raise ValidationError("all samples must share the same shape")
    uniq: dict[bytes, int] = {}
    reps: list[np.ndarray] = []
    counts: list[int] = []
    for s in samples:
        key = np.ascontiguousarray(s, dtype=np.int8).tobytes()
        if key in uniq:
            counts[uniq[key]] += 1
        else:
            uniq[key] = len(reps)
            reps.append(np.asarray(s))
            counts.append(1)
    U = len(reps)
    dist = np.zeros((U, U))
    for a in range(U):
        for b in range(a + 1, U):
            d, _ = min_perm_hamming(reps[a], reps[b])
            dist[a, b] = dist[b, a] = d
    avg = dist @ np.asarray(counts, dtype=np.float64) / float(len(samples))
    best = int(np.argmin(avg))  # reps are in first-occurrence order
    return reps[best].copy()


def _pad_columns(M: np.ndarray, width: int) -> np.ndarray:
    if M.shape[1] == width:
        return M
    pad = np.zeros((M.shape[0], width - M.shape[1]), dtype=M.dtype)
    return np.concatenate([M, pad], axis=1)


def recovery_error(est: np.ndarray, truth: np.ndarray) -> float:
    """Normalized permutation-minimized Hamming error with zero padding."""
    est = np.asarray(est)
    truth = np.asarray(truth)
    if est.shape[0] != truth.shape[0]:
        raise ValidationError("row counts differ")
    width = max(est.shape[1], truth.shape[1])
    if width == 0:
        return 0.0
    dist, _ = min_perm_hamming(_pad_columns(est, width), _pad_columns(truth, width))
    return dist / float(est.shape[0] * width)


def recovery_report(
    A_est: np.ndarray, B_est: np.ndarray, A_true: np.ndarray, B_true: np.ndarray
) -> RecoveryReport:
    """Joint recovery errors under one correspondence.

    The permutation minimizing the B distance is reused for A, so both
    errors are reported under the same cluster matching.
    """
    if A_est.shape[0] != A_true.shape[0] or B_est.shape[0] != B_true.shape[0]:
        raise ValidationError("row counts differ")
    if A_est.shape[1] != B_est.shape[1] or A_true.shape[1] != B_true.shape[1]:
        raise ValidationError("A and B must have matching column counts")
    K_est, K_true = B_est.shape[1], B_true.shape[1]
    width = max(K_est, K_true)
    B_e, B_t = _pad_columns(B_est, width), _pad_columns(B_true, width)
    A_e, A_t = _pad_columns(A_est, width), _pad_columns(A_true, width)
    dist_b, perm = min_perm_hamming(B_e, B_t)
    error_b = dist_b / float(B_e.size) if B_e.size else 0.0
    error_a = (
        float((A_e != A_t[:, perm]).sum()) / float(A_e.size) if A_e.size else 0.0
    )
    return RecoveryReport(
        error_A=error_a, error_B=error_b, K_true=K_true, K_hat=K_est, permutation=perm
    )


def conditional_refit(
    data: CountMatrix,
    tree: RankTree,
    hp: Hyperparameters,
    config: SamplerConfig,
    B_hat: np.ndarray,
) -> PointEstimates:
    """Continue the chain with B frozen at B_hat; posterior means elsewhere."""
    B_hat = np.asarray(B_hat, dtype=np.int8)
    n_keep = (config.refit_iterations - config.refit_burn_in) // config.thin
    if n_keep < 1:
        raise ValidationError("refit schedule retains no samples")
    trace = run_chain(
        data, tree, hp, config,
        chain_id=_REFIT_CHAIN_ID,
        fixed_B=B_hat,
        iterations=config.refit_iterations,
        burn_in=config.refit_burn_in,
    )
    snaps = trace.snapshots
    a_mean = np.mean([s.A for s in snaps], axis=0)
    est = PointEstimates(
        K_hat=B_hat.shape[1],
        B_hat=B_hat.copy(),
        A_hat=(a_mean > 0.5).astype(np.int8),
        W_hat=np.mean([s.W for s in snaps], axis=0) * B_hat,
        c_hat=np.mean([s.c for s in snaps], axis=0),
        s_hat=np.mean([s.s for s in snaps], axis=0),
        t_hat=np.mean([s.t for s in snaps], axis=0),
        Z_hat=np.mean([s.Z for s in snaps], axis=0),
    )
    est.validate()
    return est


def point_estimates(
    data: CountMatrix,
    tree: RankTree,
    hp: Hyperparameters,
    config: SamplerConfig,
    traces: Trace | list[Trace],
) -> PointEstimates:
    """Full summarization pipeline: K mode, posterior-mode B, conditional refit."""
    k_hat = map_K(traces)
    samples = [s.B for s in _all_snapshots(traces) if s.K == k_hat]
    if not samples:
        raise ValidationError(f"no snapshots at the modal K = {k_hat}")
    b_hat = posterior_mode_B(samples)
    return conditional_refit(data, tree, hp, config, b_hat)


def psrf(chain_values: np.ndarray) -> float:
    """Gelman-Rubin potential scale reduction factor (classical two-chain form).

    R-hat = sqrt((n-1)/n + B/(n W)) with B the between-chain and W the mean
    within-chain variance.  All-identical input returns 1 by convention;
    zero within-variance with spread-out means returns +inf.
    """
    values = np.asarray(chain_values, dtype=np.float64)
    if values.ndim != 2 or values.shape[0] < 2:
        raise ValidationError("need >= 2 chains of equal length")
    m, n = values.shape
    if n < 10:
        raise ValidationError("chains must have length >= 10")
    means = values.mean(axis=1)
    w = values.var(axis=1, ddof=1).mean()
    b = n * means.var(ddof=1)
    if w == 0.0:
        return 1.0 if b == 0.0 else float("inf")
    return float(np.sqrt((n - 1) / n + b / (n * w)))


def psrf_matrix(per_chain: np.ndarray) -> np.ndarray:
    """Vectorized PSRF over leading axes: input (M, n, ...) -> R-hat (...)."""
    v = np.asarray(per_chain, dtype=np.float64)
    m, n = v.shape[0], v.shape[1]
    means = v.mean(axis=1)
    w = v.var(axis=1, ddof=1).mean(axis=0)
    b = n * means.var(axis=0, ddof=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.sqrt((n - 1) / n + b / (n * w))
    r = np.where((w == 0.0) & (b == 0.0), 1.0, r)
    return np.where((w == 0.0) & (b > 0.0), np.inf, r)


def posterior_predictive(
    data: CountMatrix, traces: Trace | list[Trace]
) -> tuple[np.ndarray, float]:
    """Posterior predictive mean composition and its correlation with x/N.

    Per snapshot the predictive composition is the Dirichlet mean
    eta_ij / sum_j eta_ij with eta from (Z, s, t); snapshots are averaged
    and the Pearson correlation with the observed composition returned.
    """
    snaps = _all_snapshots(traces)
    if not snaps:
        raise ValidationError("no retained samples")
    pred = np.zeros((data.n, data.p))
    for st in snaps:
        eta = np.where(st.Z == 1, st.s[None, :], st.t[None, :])
        pred += eta / eta.sum(axis=1, keepdims=True)
    pred /= len(snaps)
    observed = data.x / data.row_totals[:, None]
    corr = float(np.corrcoef(pred.ravel(), observed.ravel())[0, 1])
    return pred, corr


def predictive_logits(state: ModelState) -> np.ndarray:
    """Monitored quantity c_j + sum_k a_ik w_jk b_jk for one snapshot."""
    return logit_abundance(state.A, state.B, state.W, state.c)


def check_identifiability(A: np.ndarray) -> Verdict:
    """Check the sufficient condition: every cluster has an exclusive member.

    SUFFICIENT means some row of A equals each unit vector e_k, which makes
    the factorization identifiable up to column permutation.  UNKNOWN means
    the sufficient condition fails; the general integer-left-inverse
    condition is not decided.
    """
    A = np.asarray(A)
    if A.size and not np.isin(A, (0, 1)).all():
        raise ValidationError("A must be binary")
    K = A.shape[1]
    if K == 0:
        return Verdict.SUFFICIENT
    row_sums = A.sum(axis=1)
    for k in range(K):
        if not np.any((A[:, k] == 1) & (row_sums == 1)):
            return Verdict.UNKNOWN
    return Verdict.SUFFICIENT
