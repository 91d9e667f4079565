"""Scikit-learn style estimator wrapping the sampler and summarization."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from .estimation import (
    map_K,
    point_estimates,
    posterior_predictive,
    psrf,
)
from .model import Hyperparameters, as_count_matrix
from .sampler import SamplerConfig, run_chains
from .tree import RankTree, parse_newick, star_tree


class MultinomialMatrixFactorization(BaseEstimator):
    """Overlapping biclustering of a count matrix by Bayesian MCMC.

    Fits the hierarchical gamma-mixture / latent-logit / pIBP model to an
    (n_hosts, n_taxa) matrix of non-negative integer counts and exposes the
    point estimates as fitted attributes.

    Parameters
    ----------
    tree : RankTree, Newick string, or None
        Taxonomic rank tree whose leaves match the columns of X.  None uses
        a flat depth-1 tree (plain IBP, no taxonomic information).
    iterations, burn_in, thin, n_chains, init_columns, seed
        MCMC schedule; see SamplerConfig for defaults.
    refit_iterations, refit_burn_in
        Length of the conditional refit used for the continuous estimates.
    hyperparameters : Hyperparameters or None for the model defaults.
    n_jobs : worker cap for chain-level parallelism (None: MMF_THREADS/CPUs).

    Attributes
    ----------
    K_ : estimated number of clusters (posterior mode).
    A_ : (n_hosts, K_) binary host-cluster matrix.
    B_ : (n_taxa, K_) binary taxon-cluster matrix.
    W_, c_, s_, t_ : posterior means of the continuous parameters.
    Z_ : (n_hosts, n_taxa) posterior mean abundance flags in [0, 1].
    traces_ : list of per-chain Traces.
    """

    def __init__(
        self,
        tree=None,
        *,
        iterations: int = 10000,
        burn_in: int = 5000,
        thin: int = 5,
        n_chains: int = 2,
        init_columns: int = 10,
        seed: int = 0,
        refit_iterations: int = 2000,
        refit_burn_in: int = 500,
        hyperparameters: Hyperparameters | None = None,
        n_jobs: int | None = None,
        progress: bool = False,
    ):
        self.tree = tree
        self.iterations = iterations
        self.burn_in = burn_in
        self.thin = thin
        self.n_chains = n_chains
        self.init_columns = init_columns
        self.seed = seed
        self.refit_iterations = refit_iterations
        self.refit_burn_in = refit_burn_in
        self.hyperparameters = hyperparameters
        self.n_jobs = n_jobs
        self.progress = progress

    def _resolve_tree(self, taxon_names: list[str]) -> RankTree:
        if self.tree is None:
            return star_tree(taxon_names)
        if isinstance(self.tree, str):
            return parse_newick(self.tree)
        return self.tree

    def fit(self, X, y=None, taxon_names: list[str] | None = None):
        data = as_count_matrix(X, taxon_names)
        tree = self._resolve_tree(data.taxon_names)
        config = SamplerConfig(
            iterations=self.iterations,
            burn_in=self.burn_in,
            thin=self.thin,
            seed=self.seed,
            n_chains=self.n_chains,
            init_columns=self.init_columns,
            refit_iterations=self.refit_iterations,
            refit_burn_in=self.refit_burn_in,
        )
        hp = self.hyperparameters or Hyperparameters()
        traces = run_chains(
            data, tree, hp, config, progress=self.progress, n_workers=self.n_jobs
        )
        est = point_estimates(data, tree, hp, config, traces)
        self.data_ = data
        self.tree_ = tree
        self.traces_ = traces
        self.n_features_in_ = data.p
        self.K_ = est.K_hat
        self.A_ = est.A_hat
        self.B_ = est.B_hat
        self.W_ = est.W_hat
        self.c_ = est.c_hat
        self.s_ = est.s_hat
        self.t_ = est.t_hat
        self.Z_ = est.Z_hat
        return self

    def transform(self, X=None) -> np.ndarray:
        """Posterior mean abundance flags of the fitted data."""
        self._check_fitted()
        if X is not None:
            raise ValueError("transform is only defined for the fitted data (pass None)")
        return self.Z_

    def fit_transform(self, X, y=None, **fit_params) -> np.ndarray:
        return self.fit(X, y, **fit_params).transform()

    def score(self, X=None, y=None) -> float:
        """Mean retained log joint density (model fit monitor)."""
        self._check_fitted()
        vals = [
            tr.log_joint[tr.burn_in :].mean() for tr in self.traces_
        ]
        return float(np.mean(vals))

    def diagnostics(self) -> dict[str, float]:
        """PSRF of K (needs >= 2 chains) and posterior predictive correlation."""
        self._check_fitted()
        out: dict[str, float] = {}
        if len(self.traces_) >= 2:
            n_snap = min(tr.n_snapshots for tr in self.traces_)
            ks = np.array(
                [[s.K for s in tr.snapshots[:n_snap]] for tr in self.traces_],
                dtype=np.float64,
            )
            out["psrf_K"] = psrf(ks)
        _, corr = posterior_predictive(self.data_, self.traces_)
        out["ppc_correlation"] = corr
        out["map_K"] = float(map_K(self.traces_))
        return out

    def _check_fitted(self) -> None:
        if not hasattr(self, "K_"):
            raise RuntimeError("estimator is not fitted; call fit(X) first")
