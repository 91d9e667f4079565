"""Posterior sampler: Gibbs and Metropolis-Hastings kernels plus the
trans-dimensional taxon sweep over the cluster matrix B.

Kernel cycle per iteration: Z -> A -> rho -> W -> c -> (s,t) -> B-sweep -> m.
A chain is driven by a single numpy Generator seeded from (seed, chain_id),
so traces are bit-for-bit reproducible regardless of worker count.

Singleton columns (columns whose only member is the taxon currently visited
by the sweep) are handled by a joint replacement move: the current singleton
set is swapped for K* ~ Poisson(m * dpsi) fresh columns whose parameters come
from their exact conditionals, accepted as a block with the likelihood ratio
of the visited taxon's abundance flags.  The per-column Gibbs pass skips
those columns.  This combination leaves the pIBP prior exactly invariant;
a plain add-only birth with Gibbs deletion does not (it inflates the
singleton population by the inverse death probability).

Moves that change only one taxon's logits (w_jk, c_j, b_jk flips, column
birth/death) collapse that taxon's abundance flags: the affected z_ij live
in distinct hosts, so they are summed out exactly against per-entry DM
ratios, and the column is redrawn from its exact conditional afterwards.
Without the collapse the chain is metastable: a weight that wanders high
saturates the logits, freezes the flags it conditioned on, and locks entire
columns in place.
"""

from __future__ import annotations

import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, gammaln

from .model import (
    CountMatrix,
    Hyperparameters,
    ModelState,
    Trace,
    ValidationError,
    log_joint,
    logit_abundance,
)
from .tree import (
    RankTree,
    new_column_rate,
    nonempty_column_mass,
    observed_log_prob,
    sample_column,
    sample_new_pk,
)

KERNELS = ("w", "c", "st", "pk", "birth")


@dataclass
class SamplerConfig:
    iterations: int = 10000
    burn_in: int = 5000
    thin: int = 5
    seed: int = 0
    n_chains: int = 2
    init_columns: int = 10
    sigma_w: float = 0.3
    sigma_c: float = 0.3
    sigma_st: float = 0.3
    sigma_m: float = 0.3
    indep_prob: float = 0.2
    pk_c: float = 0.06
    pk_delta: float = 0.08
    m_update: str = "gibbs"
    refit_iterations: int = 2000
    refit_burn_in: int = 500

    def __post_init__(self):
        if self.burn_in >= self.iterations or self.burn_in < 0:
            raise ValidationError("need 0 <= burn_in < iterations")
        if self.thin < 1:
            raise ValidationError("thin must be >= 1")
        if self.n_chains < 1 or self.init_columns < 0:
            raise ValidationError("n_chains >= 1 and init_columns >= 0 required")
        for name in ("sigma_w", "sigma_c", "sigma_st", "sigma_m", "pk_c", "pk_delta"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"proposal scale {name} must be > 0")
        if not 0.0 <= self.indep_prob <= 1.0:
            raise ValidationError("indep_prob must be in [0, 1]")
        if self.m_update not in ("gibbs", "mh"):
            raise ValidationError("m_update must be 'gibbs' or 'mh'")
        if not 0 <= self.refit_burn_in < self.refit_iterations:
            raise ValidationError("need 0 <= refit_burn_in < refit_iterations")


@dataclass
class KernelDiagnostics:
    """Cumulative per-kernel acceptance counts plus sweep bookkeeping."""

    proposals: dict[str, int]
    accepts: dict[str, int]
    births: int = 0
    deaths: int = 0
    sweep_seconds: float = 0.0

    @classmethod
    def empty(cls) -> "KernelDiagnostics":
        return cls(proposals={k: 0 for k in KERNELS}, accepts={k: 0 for k in KERNELS})

    def record(self, kernel: str, accepted: bool) -> None:
        self.proposals[kernel] += 1
        self.accepts[kernel] += int(accepted)

    def rate(self, kernel: str) -> float:
        n = self.proposals[kernel]
        return self.accepts[kernel] / n if n else float("nan")

    def acceptance_rates(self) -> dict[str, float]:
        return {k: self.rate(k) for k in KERNELS}


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


class _Chain:
    """Mutable chain state with incremental caches.

    Q is the n x p logit matrix c_j + sum_k a_ik w_jk b_jk; S the n-vector
    of Dirichlet shape row totals.  Both are updated in place by kernels.
    """

    def __init__(
        self,
        data: CountMatrix,
        tree: RankTree,
        hp: Hyperparameters,
        config: SamplerConfig,
        rng: np.random.Generator,
        fixed_B: np.ndarray | None = None,
        fixed_Z: np.ndarray | None = None,
    ):
        self.xf = data.x.astype(np.float64)
        self.N = data.row_totals.astype(np.float64)
        self.n, self.p = data.x.shape
        self.tree = tree
        self.hp = hp
        self.cfg = config
        self.rng = rng
        self.leaf_nodes = tree.leaf_nodes_for(data.taxon_names)
        self.leaf_pos = tree.leaf_positions_for(data.taxon_names)
        self.P, self.L = tree.P, tree.L
        self.mass_C = nonempty_column_mass(self.P, self.L)
        self.dpsi = new_column_rate(1.0, self.P, self.L)
        self.b_frozen = fixed_B is not None
        self.z_frozen = fixed_Z is not None
        self.refresh_dead_weights = True
        self.diag = KernelDiagnostics.empty()
        self._init_state(fixed_B, fixed_Z)

    # -- initialization ----------------------------------------------------

    def _init_state(self, fixed_B, fixed_Z) -> None:
        hp, rng, p = self.hp, self.rng, self.p
        self.rho = float(rng.beta(hp.alpha_rho, hp.beta_rho))
        self.m = float(rng.gamma(hp.m_shape, 1.0 / hp.m_rate))
        self.s = np.empty(p)
        self.t = np.empty(p)
        for j in range(p):
            for _ in range(10000):
                sj = rng.gamma(hp.alpha_s, 1.0 / hp.beta_s)
                tj = rng.gamma(hp.alpha_t, 1.0 / hp.beta_t)
                if sj > tj:
                    break
            else:
                raise RuntimeError("could not initialize s_j > t_j")
            self.s[j], self.t[j] = sj, tj
        self.c = hp.mu_c + np.sqrt(hp.sigma2_c) * rng.standard_normal(p)

        if fixed_B is not None:
            self.B = np.asarray(fixed_B, dtype=np.int8).copy()
            K = self.B.shape[1]
            if K and np.any(self.B.sum(axis=0) == 0):
                raise ValidationError("fixed B has an all-zero column")
            means = self.B.mean(axis=0) if K else np.empty(0)
            self.p_col = np.clip(means, 1.0 / (p + 1), p / (p + 1.0))
        else:
            K = self.cfg.init_columns
            cols, pks = [], []
            for _ in range(K):
                for _ in range(1000):
                    pk = rng.uniform()
                    col = sample_column(self.tree, pk, rng)[self.leaf_pos]
                    if col.any():
                        break
                else:
                    raise RuntimeError("could not draw a non-empty initial column")
                cols.append(col)
                pks.append(pk)
            self.B = (
                np.stack(cols, axis=1).astype(np.int8) if K else np.zeros((p, 0), np.int8)
            )
            self.p_col = np.array(pks, dtype=np.float64)
        K = self.B.shape[1]
        self.A = (rng.random((self.n, K)) < 0.5).astype(np.int8)
        self.W = rng.gamma(hp.alpha_w, 1.0 / hp.beta_w, size=(p, K))
        self.Q = logit_abundance(self.A, self.B, self.W, self.c)
        if fixed_Z is not None:
            self.Z = np.asarray(fixed_Z, dtype=np.int8).copy()
            if self.Z.shape != (self.n, p):
                raise ValidationError("fixed Z shape mismatch")
        else:
            self.Z = (rng.random((self.n, p)) < expit(self.Q)).astype(np.int8)
        self.S = np.sum(np.where(self.Z == 1, self.s[None, :], self.t[None, :]), axis=1)

    @property
    def K(self) -> int:
        return self.B.shape[1]

    def state(self) -> ModelState:
        return ModelState(
            Z=self.Z.copy(), A=self.A.copy(), B=self.B.copy(), W=self.W.copy(),
            c=self.c.copy(), s=self.s.copy(), t=self.t.copy(),
            p_col=self.p_col.copy(), m=self.m, rho=self.rho,
        )

    # -- Gibbs kernels -------------------------------------------------------

    def _dm_logit_delta(self, j: int) -> tuple[np.ndarray, np.ndarray]:
        """Per-host DM log-likelihood ratio of z_ij = 1 vs 0, plus S - eta_ij.

        Entries of column j live in distinct hosts, so these ratios are the
        exact per-entry collapse of z_ij for any move that only changes the
        logits of taxon j.
        """
        sj, tj = self.s[j], self.t[j]
        xj = self.xf[:, j]
        eta_cur = np.where(self.Z[:, j] == 1, sj, tj)
        base = self.S - eta_cur
        s1, s0 = base + sj, base + tj
        delta = (
            gammaln(s1) - gammaln(self.N + s1) + gammaln(xj + sj) - gammaln(sj)
            - gammaln(s0) + gammaln(self.N + s0) - gammaln(xj + tj) + gammaln(tj)
        )
        return delta, base

    def _refresh_z_column(self, j: int, delta: np.ndarray, base: np.ndarray) -> None:
        """Draw z_.j from its exact conditional given the current logits."""
        znew = self.rng.random(self.n) < expit(self.Q[:, j] + delta)
        self.Z[:, j] = znew
        self.S = base + np.where(znew, self.s[j], self.t[j])

    def update_Z(self) -> None:
        for j in range(self.p):
            delta, base = self._dm_logit_delta(j)
            self._refresh_z_column(j, delta, base)

    def update_A(self) -> None:
        rng, Z, Q = self.rng, self.Z, self.Q
        logit_rho = np.log(self.rho) - np.log1p(-self.rho)
        for k in range(self.K):
            supp = np.flatnonzero(self.B[:, k])
            w_s = self.W[supp, k]
            a_cur = self.A[:, k].astype(np.float64)
            q0 = Q[:, supp] - np.outer(a_cur, w_s)
            q1 = q0 + w_s[None, :]
            delta = (
                Z[:, supp].astype(np.float64) @ w_s
                - _softplus(q1).sum(axis=1)
                + _softplus(q0).sum(axis=1)
            )
            anew = rng.random(self.n) < expit(logit_rho + delta)
            Q[:, supp] = q0 + np.outer(anew, w_s)
            self.A[:, k] = anew

    def update_rho(self) -> None:
        a_sum = float(self.A.sum())
        self.rho = float(
            self.rng.beta(
                self.hp.alpha_rho + a_sum,
                self.hp.beta_rho + self.n * self.K - a_sum,
            )
        )

    def update_m(self) -> None:
        if self.cfg.m_update == "gibbs":
            self.m = float(
                self.rng.gamma(self.hp.m_shape + self.K, 1.0 / (self.hp.m_rate + self.mass_C))
            )
            return
        mstar = self.m * np.exp(self.cfg.sigma_m * self.rng.standard_normal())
        log_acc = (self.hp.m_shape + self.K) * (np.log(mstar) - np.log(self.m)) - (
            self.hp.m_rate + self.mass_C
        ) * (mstar - self.m)
        if np.log(self.rng.random()) < log_acc:
            self.m = float(mstar)

    # -- Metropolis-Hastings kernels ------------------------------------------

    def _col_loglik_change(
        self, j: int, q0: np.ndarray, q1: np.ndarray, r: np.ndarray | None
    ) -> float:
        """Log-likelihood change of taxon j when its logits move q0 -> q1.

        With r given, z_.j is collapsed (summed out entry-wise against the DM
        ratio r); the caller must refresh z_.j before the next taxon.  With
        r None the current z_.j is conditioned on (frozen-Z mode).
        """
        if r is None:
            zj = self.Z[:, j].astype(np.float64)
            return float(zj @ (q1 - q0) - _softplus(q1).sum() + _softplus(q0).sum())
        return float(
            _softplus(q1 + r).sum() - _softplus(q1).sum()
            - _softplus(q0 + r).sum() + _softplus(q0).sum()
        )

    def update_W(self) -> None:
        """Weight updates: log-scale random walks mixed with independence
        draws from the prior.  The independence draws cross the saturated
        high-weight plateau in one move once z is collapsed."""
        rng, hp = self.rng, self.hp
        for j in range(self.p):
            if self.z_frozen:
                r, base = None, None
            else:
                r, base = self._dm_logit_delta(j)
            for k in range(self.K):
                if self.B[j, k] == 0:
                    continue
                w = self.W[j, k]
                indep = rng.random() < self.cfg.indep_prob
                if indep:
                    wstar = rng.gamma(hp.alpha_w, 1.0 / hp.beta_w)
                    d_prior = 0.0  # prior and proposal cancel exactly
                else:
                    wstar = w * np.exp(self.cfg.sigma_w * rng.standard_normal())
                    d_prior = hp.alpha_w * (np.log(wstar) - np.log(w)) - hp.beta_w * (
                        wstar - w
                    )
                u = rng.random()
                ak = self.A[:, k].astype(np.float64)
                q0 = self.Q[:, j]
                q1 = q0 + ak * (wstar - w)
                d_lik = self._col_loglik_change(j, q0, q1, r)
                accepted = np.log(u) < d_lik + d_prior
                self.diag.record("w", accepted)
                if accepted:
                    self.W[j, k] = wstar
                    self.Q[:, j] = q1
            if not self.z_frozen:
                self._refresh_z_column(j, r, base)

    def update_c(self) -> None:
        rng, hp = self.rng, self.hp
        for j in range(self.p):
            if self.z_frozen:
                r, base = None, None
            else:
                r, base = self._dm_logit_delta(j)
            cj = self.c[j]
            indep = rng.random() < self.cfg.indep_prob
            if indep:
                cstar = hp.mu_c + np.sqrt(hp.sigma2_c) * rng.standard_normal()
                d_prior = 0.0
            else:
                cstar = cj + self.cfg.sigma_c * rng.standard_normal()
                d_prior = -((cstar - hp.mu_c) ** 2 - (cj - hp.mu_c) ** 2) / (
                    2.0 * hp.sigma2_c
                )
            u = rng.random()
            q0 = self.Q[:, j]
            q1 = q0 + (cstar - cj)
            d_lik = self._col_loglik_change(j, q0, q1, r)
            accepted = np.log(u) < d_lik + d_prior
            self.diag.record("c", accepted)
            if accepted:
                self.c[j] = cstar
                self.Q[:, j] = q1
            if not self.z_frozen:
                self._refresh_z_column(j, r, base)

    def _dm_pair_logprobs(self, j: int, sj: float, tj: float, base: np.ndarray):
        """Per-host DM log contributions of entry (i, j) for z_ij = 1 and 0."""
        xj = self.xf[:, j]
        s1, s0 = base + sj, base + tj
        dm1 = gammaln(s1) - gammaln(self.N + s1) + gammaln(xj + sj) - gammaln(sj)
        dm0 = gammaln(s0) - gammaln(self.N + s0) + gammaln(xj + tj) - gammaln(tj)
        return dm1, dm0

    def update_st(self) -> None:
        """Joint (s_j, t_j) update with z_.j collapsed.

        Proposals violating s > t are rejected outright; random walks mix
        with independence draws from the truncated prior.
        """
        rng, hp = self.rng, self.hp
        for j in range(self.p):
            sj, tj = self.s[j], self.t[j]
            indep = rng.random() < self.cfg.indep_prob and not self.z_frozen
            if indep:
                sstar = rng.gamma(hp.alpha_s, 1.0 / hp.beta_s)
                tstar = rng.gamma(hp.alpha_t, 1.0 / hp.beta_t)
                d_prior = 0.0  # truncated prior is the proposal; ratio is 1
            else:
                eps = rng.standard_normal(2)
                sstar = sj * np.exp(self.cfg.sigma_st * eps[0])
                tstar = tj * np.exp(self.cfg.sigma_st * eps[1])
                d_prior = (
                    hp.alpha_s * (np.log(sstar) - np.log(sj)) - hp.beta_s * (sstar - sj)
                    + hp.alpha_t * (np.log(tstar) - np.log(tj)) - hp.beta_t * (tstar - tj)
                )
            u = rng.random()
            if sstar <= tstar:
                self.diag.record("st", False)
                if not self.z_frozen:
                    delta, base = self._dm_logit_delta(j)
                    self._refresh_z_column(j, delta, base)
                continue
            eta_cur = np.where(self.Z[:, j] == 1, sj, tj)
            base = self.S - eta_cur  # row totals without taxon j: move-invariant
            dm1_o, dm0_o = self._dm_pair_logprobs(j, sj, tj, base)
            dm1_n, dm0_n = self._dm_pair_logprobs(j, sstar, tstar, base)
            if self.z_frozen:
                zj = self.Z[:, j] == 1
                d_lik = float(np.sum(np.where(zj, dm1_n - dm1_o, dm0_n - dm0_o)))
            else:
                q = self.Q[:, j]
                log_sig = -_softplus(-q)
                log_1msig = -_softplus(q)
                d_lik = float(
                    np.sum(
                        np.logaddexp(log_sig + dm1_n, log_1msig + dm0_n)
                        - np.logaddexp(log_sig + dm1_o, log_1msig + dm0_o)
                    )
                )
            accepted = np.log(u) < d_lik + d_prior
            self.diag.record("st", accepted)
            if accepted:
                self.s[j], self.t[j] = sstar, tstar
            delta = (dm1_n - dm0_n) if accepted else (dm1_o - dm0_o)
            if self.z_frozen:
                if accepted:
                    zj = self.Z[:, j] == 1
                    self.S = base + np.where(zj, sstar, tstar)
            else:
                self._refresh_z_column(j, delta, base)

    # -- taxon sweep over B ---------------------------------------------------

    def _column_obs(self, k: int) -> np.ndarray:
        obs = np.full(self.P, -1, dtype=np.int8)
        obs[self.leaf_nodes] = self.B[:, k]
        return obs

    def _sweep_step_i(self, j: int, r: np.ndarray | None) -> None:
        rng = self.rng
        for k in range(self.K):
            col = self.B[:, k]
            if col.sum() - col[j] == 0:
                continue  # singleton at j: resampled by the replacement move
            if col[j] == 0 and self.refresh_dead_weights:
                # w_jk is inert while b_jk = 0; its conditional is the prior,
                # so refresh it so the flip proposal sees a live weight
                self.W[j, k] = rng.gamma(self.hp.alpha_w, 1.0 / self.hp.beta_w)
            obs = self._column_obs(k)
            lid = self.leaf_nodes[j]
            obs[lid] = 1
            lp1 = observed_log_prob(self.tree, obs, float(self.p_col[k]))
            obs[lid] = 0
            lp0 = observed_log_prob(self.tree, obs, float(self.p_col[k]))
            wjk = self.W[j, k]
            ak = self.A[:, k].astype(np.float64)
            q_off = self.Q[:, j] - (wjk * ak if col[j] else 0.0)
            q_on = q_off + wjk * ak
            d_lik = self._col_loglik_change(j, q_off, q_on, r)
            new = int(rng.random() < expit(lp1 - lp0 + d_lik))
            if new != col[j]:
                self.B[j, k] = new
                self.Q[:, j] = q_on if new else q_off

    def _pk_target(self, k: int, pk: float) -> float:
        """log p(b_k^{-j0} | p_k, pivot) with the lowest-index non-zero pivot."""
        joint = observed_log_prob(self.tree, self._column_obs(k), pk)
        return joint - np.log(pk)

    def _sweep_step_ii(self) -> None:
        rng, cfg = self.rng, self.cfg
        for k in range(self.K):
            pk = float(self.p_col[k])
            var = cfg.pk_c * pk * (1.0 - pk) + cfg.pk_delta
            prop = pk + np.sqrt(var) * rng.standard_normal()
            u = rng.random()
            if not 0.0 < prop < 1.0:
                self.diag.record("pk", False)
                continue
            var_rev = cfg.pk_c * prop * (1.0 - prop) + cfg.pk_delta
            log_q_fwd = -0.5 * np.log(var) - (prop - pk) ** 2 / (2.0 * var)
            log_q_rev = -0.5 * np.log(var_rev) - (pk - prop) ** 2 / (2.0 * var_rev)
            log_acc = self._pk_target(k, prop) - self._pk_target(k, pk) + log_q_rev - log_q_fwd
            accepted = np.log(u) < log_acc
            self.diag.record("pk", accepted)
            if accepted:
                self.p_col[k] = prop

    def _sweep_step_iii(self, j: int) -> None:
        rng, hp = self.rng, self.hp
        kstar = int(rng.poisson(self.m * self.dpsi))
        singles = [
            k for k in range(self.K)
            if self.B[j, k] == 1 and self.B[:, k].sum() == 1
        ]
        if kstar == 0 and not singles:
            return
        new_pk = np.array([sample_new_pk(self.P, self.L, rng) for _ in range(kstar)])
        new_a = (rng.random((self.n, kstar)) < self.rho).astype(np.int8)
        new_w = rng.gamma(hp.alpha_w, 1.0 / hp.beta_w, size=(self.p, kstar))
        u = rng.random()
        q0 = self.Q[:, j]
        q1 = q0.copy()
        for k in singles:
            q1 -= self.W[j, k] * self.A[:, k]
        if kstar:
            q1 += new_a.astype(np.float64) @ new_w[j]
        # birth/death is deliberately conditioned on the current flags (the
        # literal Step-iii ratio): under the collapsed ratio a random host
        # column is forgiving enough that one-taxon memorization columns get
        # discovered and then held by the likelihood
        accepted = np.log(u) < self._col_loglik_change(j, q0, q1, None)
        self.diag.record("birth", accepted)
        if not accepted:
            return
        keep = [k for k in range(self.K) if k not in singles]
        new_b = np.zeros((self.p, kstar), dtype=np.int8)
        new_b[j, :] = 1
        self.B = np.concatenate([self.B[:, keep], new_b], axis=1)
        self.A = np.concatenate([self.A[:, keep], new_a], axis=1)
        self.W = np.concatenate([self.W[:, keep], new_w], axis=1)
        self.p_col = np.concatenate([self.p_col[keep], new_pk])
        self.Q[:, j] = q1
        self.diag.births += kstar
        self.diag.deaths += len(singles)

    def sweep_B(self) -> None:
        t0 = time.perf_counter()
        for j in range(self.p):
            if self.z_frozen:
                r, base = None, None
            else:
                r, base = self._dm_logit_delta(j)
            self._sweep_step_i(j, r)
            self._sweep_step_ii()
            self._sweep_step_iii(j)
            if not self.z_frozen:
                self._refresh_z_column(j, r, base)
        self.diag.sweep_seconds += time.perf_counter() - t0

    # -- one full cycle ---------------------------------------------------------

    def iterate(self) -> None:
        if not self.z_frozen:
            self.update_Z()
        self.update_A()
        self.update_rho()
        self.update_W()
        self.update_c()
        if not self.z_frozen:
            self.update_st()
        if not self.b_frozen:
            self.sweep_B()
        self.update_m()


def run_chain(
    data: CountMatrix,
    tree: RankTree,
    hp: Hyperparameters,
    config: SamplerConfig,
    chain_id: int = 0,
    fixed_B: np.ndarray | None = None,
    fixed_Z: np.ndarray | None = None,
    iterations: int | None = None,
    burn_in: int | None = None,
    progress: bool = False,
) -> Trace:
    """Run one chain and return its Trace (deterministic given seed/chain_id)."""
    iters = config.iterations if iterations is None else iterations
    burn = config.burn_in if burn_in is None else burn_in
    if not 0 <= burn < iters:
        raise ValidationError("need 0 <= burn_in < iterations")
    rng = np.random.default_rng([config.seed, chain_id])
    chain = _Chain(data, tree, hp, config, rng, fixed_B=fixed_B, fixed_Z=fixed_Z)

    ks = np.empty(iters, dtype=np.int64)
    ljs = np.empty(iters)
    ms = np.empty(iters)
    rhos = np.empty(iters)
    mean_c = np.empty(iters)
    mean_s = np.empty(iters)
    mean_t = np.empty(iters)
    acc = {k: np.empty(iters) for k in KERNELS}
    snapshots: list[ModelState] = []
    snap_iters: list[int] = []

    prev = KernelDiagnostics.empty()
    report_every = max(1, iters // 20)
    for it in range(1, iters + 1):
        chain.iterate()
        state = chain.state()
        lj = log_joint(state, data, chain.tree, hp)
        if not np.isfinite(lj):
            raise RuntimeError(
                f"non-finite log joint at iteration {it}: K={chain.K} "
                f"m={chain.m:.4g} rho={chain.rho:.4g} "
                f"s_range=({chain.s.min():.4g},{chain.s.max():.4g}) "
                f"t_range=({chain.t.min():.4g},{chain.t.max():.4g})"
            )
        ks[it - 1] = chain.K
        ljs[it - 1] = lj
        ms[it - 1] = chain.m
        rhos[it - 1] = chain.rho
        mean_c[it - 1] = chain.c.mean()
        mean_s[it - 1] = chain.s.mean()
        mean_t[it - 1] = chain.t.mean()
        for k in KERNELS:
            d_prop = chain.diag.proposals[k] - prev.proposals[k]
            d_acc = chain.diag.accepts[k] - prev.accepts[k]
            acc[k][it - 1] = d_acc / d_prop if d_prop else np.nan
        prev = KernelDiagnostics(
            proposals=dict(chain.diag.proposals), accepts=dict(chain.diag.accepts)
        )
        if it > burn and (it - burn) % config.thin == 0:
            snapshots.append(state)
            snap_iters.append(it)
        if progress and (it % report_every == 0 or it == iters):
            print(
                f"[chain {chain_id}] iteration {it}/{iters} K={chain.K} lj={lj:.1f}",
                file=sys.stderr,
                flush=True,
            )

    trace = Trace(
        iterations=iters, burn_in=burn, thin=config.thin,
        seed=config.seed, chain_id=chain_id,
        K=ks, log_joint=ljs, m=ms, rho=rhos,
        mean_c=mean_c, mean_s=mean_s, mean_t=mean_t,
        acceptance=acc, snapshots=snapshots, snapshot_iterations=snap_iters,
    )
    trace.validate()
    return trace


def _run_chain_worker(args) -> Trace:
    data, tree, hp, config, chain_id, progress = args
    return run_chain(data, tree, hp, config, chain_id=chain_id, progress=progress)


def max_workers() -> int:
    """Worker cap from MMF_THREADS (default: number of CPUs)."""
    env = os.environ.get("MMF_THREADS", "").strip()
    if env:
        try:
            cap = int(env)
        except ValueError:
            raise ValidationError(f"MMF_THREADS must be an integer, got {env!r}") from None
        if cap < 1:
            raise ValidationError("MMF_THREADS must be >= 1")
        return cap
    return os.cpu_count() or 1


def run_chains(
    data: CountMatrix,
    tree: RankTree,
    hp: Hyperparameters,
    config: SamplerConfig,
    progress: bool = False,
    n_workers: int | None = None,
) -> list[Trace]:
    """Run config.n_chains chains (in processes when workers allow).

    Output is identical for identical (seed, config) regardless of the
    worker count: each chain's RNG stream depends only on (seed, chain_id)
    and results are collected in chain order.
    """
    workers = min(
        config.n_chains, max_workers() if n_workers is None else max(1, n_workers)
    )
    if workers <= 1 or config.n_chains == 1:
        return [
            run_chain(data, tree, hp, config, chain_id=c, progress=progress)
            for c in range(config.n_chains)
        ]
    jobs = [(data, tree, hp, config, c, progress) for c in range(config.n_chains)]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_chain_worker, jobs))
