"""Bayesian multinomial matrix factorization for overlapping biclustering
of compositional count matrices, with a taxonomic-tree-aware nonparametric
prior on the cluster structure."""

from .estimation import (
    PointEstimates,
    RecoveryReport,
    Verdict,
    check_identifiability,
    conditional_refit,
    map_K,
    min_perm_hamming,
    point_estimates,
    posterior_mode_B,
    posterior_predictive,
    psrf,
    recovery_error,
    recovery_report,
)
from .estimator import MultinomialMatrixFactorization
from .model import (
    CountMatrix,
    Hyperparameters,
    ModelState,
    Trace,
    ValidationError,
    as_count_matrix,
    log_dm_row,
    log_joint,
    logit_abundance,
    prob_z_one,
)
from .sampler import KernelDiagnostics, SamplerConfig, run_chain, run_chains
from .simulate import (
    SimMode,
    SimScenario,
    generate_A,
    generate_B,
    generate_counts_dm,
    generate_counts_negbin,
    tsmf_dichotomize,
)
from .tree import (
    NewickError,
    RankTree,
    balanced_tree,
    column_log_prior,
    edge_flip_prob,
    leaf_conditional,
    matrix_tree_log_prob,
    new_column_rate,
    new_pk_log_density,
    parse_newick,
    partial_column_log_prob,
    sample_column,
    star_tree,
    to_newick,
)

__version__ = "0.1.0"

__all__ = [
    "CountMatrix",
    "Hyperparameters",
    "KernelDiagnostics",
    "ModelState",
    "MultinomialMatrixFactorization",
    "NewickError",
    "PointEstimates",
    "RankTree",
    "RecoveryReport",
    "SamplerConfig",
    "SimMode",
    "SimScenario",
    "Trace",
    "ValidationError",
    "Verdict",
    "as_count_matrix",
    "balanced_tree",
    "check_identifiability",
    "column_log_prior",
    "conditional_refit",
    "edge_flip_prob",
    "generate_A",
    "generate_B",
    "generate_counts_dm",
    "generate_counts_negbin",
    "leaf_conditional",
    "log_dm_row",
    "log_joint",
    "logit_abundance",
    "map_K",
    "matrix_tree_log_prob",
    "min_perm_hamming",
    "new_column_rate",
    "new_pk_log_density",
    "parse_newick",
    "partial_column_log_prob",
    "point_estimates",
    "posterior_mode_B",
    "posterior_predictive",
    "prob_z_one",
    "psrf",
    "recovery_error",
    "recovery_report",
    "run_chain",
    "run_chains",
    "sample_column",
    "star_tree",
    "to_newick",
    "tsmf_dichotomize",
]
