"""Point estimation, recovery metrics, diagnostics, identifiability."""

import itertools
import math

import numpy as np
import pytest
from scipy import stats

import mmf
from mmf.estimation import (
    Verdict,
    check_identifiability,
    conditional_refit,
    map_K,
    min_perm_hamming,
    posterior_mode_B,
    posterior_predictive,
    psrf,
    psrf_matrix,
    recovery_error,
    recovery_report,
)
from mmf.model import CountMatrix, Hyperparameters, ModelState, Trace, ValidationError
from mmf.sampler import SamplerConfig, run_chain
from mmf.tree import balanced_tree


def trace_with_K(ks, seed=0):
    """Minimal trace whose snapshots have the given K values."""
    rng = np.random.default_rng(seed)
    snaps = []
    for K in ks:
        B = np.zeros((4, K), dtype=np.int8)
        for k in range(K):
            B[rng.integers(4), k] = 1
        snaps.append(
            ModelState(
                Z=np.zeros((2, 4), dtype=np.int8),
                A=rng.integers(0, 2, size=(2, K)).astype(np.int8),
                B=B,
                W=np.ones((4, K)),
                c=np.zeros(4),
                s=np.full(4, 2.0),
                t=np.full(4, 0.5),
                p_col=np.full(K, 0.4),
                m=1.0,
                rho=0.5,
            )
        )
    n = len(ks)
    return Trace(
        iterations=n, burn_in=0, thin=1, seed=0, chain_id=0,
        K=np.array(ks), log_joint=np.zeros(n), m=np.ones(n), rho=np.full(n, 0.5),
        mean_c=np.zeros(n), mean_s=np.full(n, 2.0), mean_t=np.full(n, 0.5),
        acceptance={}, snapshots=snaps, snapshot_iterations=list(range(1, n + 1)),
    )


class TestMapK:
    def test_mode(self):
        assert map_K(trace_with_K([3, 3, 4])) == 3

    def test_tie_goes_to_smaller(self):
        assert map_K(trace_with_K([3, 4, 3, 4])) == 3

    def test_pools_chains(self):
        t1 = trace_with_K([2, 2])
        t2 = trace_with_K([5, 5, 5])
        assert map_K([t1, t2]) == 5

    def test_empty_trace_rejected(self):
        tr = trace_with_K([3])
        tr.snapshots = []
        tr.snapshot_iterations = []
        with pytest.raises(ValidationError):
            map_K(tr)


class TestMinPermHamming:
    def test_identity(self):
        rng = np.random.default_rng(0)
        B = rng.integers(0, 2, size=(6, 4))
        dist, perm = min_perm_hamming(B, B)
        assert dist == 0
        assert np.array_equal(perm, np.arange(4))

    def test_column_swap(self):
        rng = np.random.default_rng(1)
        B = rng.integers(0, 2, size=(6, 4))
        shuffle = np.array([2, 0, 3, 1])
        dist, perm = min_perm_hamming(B, B[:, shuffle])
        assert dist == 0
        assert np.array_equal(B[:, shuffle][:, perm], B)

    def test_matches_exhaustive_search(self):
        rng = np.random.default_rng(2)
        for _ in range(30):
            B1 = rng.integers(0, 2, size=(8, 5))
            B2 = rng.integers(0, 2, size=(8, 5))
            got, _ = min_perm_hamming(B1, B2)
            want = min(
                int((B1 != B2[:, list(perm)]).sum())
                for perm in itertools.permutations(range(5))
            )
            assert got == want

    def test_shape_mismatch(self):
        with pytest.raises(ValidationError):
            min_perm_hamming(np.zeros((3, 2)), np.zeros((3, 3)))

    def test_pseudometric_properties(self):
        rng = np.random.default_rng(3)
        for _ in range(25):
            Bs = [rng.integers(0, 2, size=(5, 3)) for _ in range(3)]
            d01, _ = min_perm_hamming(Bs[0], Bs[1])
            d10, _ = min_perm_hamming(Bs[1], Bs[0])
            d12, _ = min_perm_hamming(Bs[1], Bs[2])
            d02, _ = min_perm_hamming(Bs[0], Bs[2])
            assert d01 == d10
            assert d02 <= d01 + d12


class TestPosteriorModeB:
    def test_all_identical(self):
        B = np.array([[1, 0], [0, 1], [1, 1]], dtype=np.int8)
        assert np.array_equal(posterior_mode_B([B] * 5), B)

    def test_majority_beats_outlier(self):
        B = np.array([[1, 0], [0, 1], [1, 1]], dtype=np.int8)
        outlier = 1 - B
        outlier[0, 0] = 1  # keep columns non-empty
        got = posterior_mode_B([B, B, B, outlier])
        assert np.array_equal(got, B)

    def test_matches_direct_double_loop(self):
        rng = np.random.default_rng(4)
        samples = [rng.integers(0, 2, size=(6, 3)) for _ in range(20)]
        got = posterior_mode_B(samples)
        avg = []
        for cand in samples:
            avg.append(
                sum(min_perm_hamming(s, cand)[0] for s in samples) / len(samples)
            )
        best = int(np.argmin(avg))
        assert np.array_equal(got, samples[best])

    def test_empty_rejected(self):
        with pytest.raises(ValidationError):
            posterior_mode_B([])


class TestRecoveryError:
    def test_exact_match(self):
        B = np.array([[1, 0], [0, 1]])
        assert recovery_error(B, B) == 0.0

    def test_complement_is_one(self):
        # maximal distance: complementing cannot be undone by any column
        # permutation when all columns are identical
        B = np.array([[1, 1], [0, 0], [1, 1], [0, 0]])
        assert recovery_error(1 - B, B) == 1.0
        assert recovery_error(1 - B[:, :1], B[:, :1]) == 1.0

    def test_hand_computed_padding_case(self):
        # 4x3 estimate with an extra all-zero column vs 4x2 truth: the
        # minimal distance stays 1 while the denominator grows to 12
        truth = np.array([[1, 0], [1, 0], [0, 1], [0, 1]])
        est = np.array([[1, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]])
        assert recovery_error(est, truth) == pytest.approx(1.0 / 12.0)
        assert recovery_error(est[:, :2], truth) == pytest.approx(1.0 / 8.0)

    def test_row_mismatch(self):
        with pytest.raises(ValidationError):
            recovery_error(np.zeros((3, 2)), np.zeros((4, 2)))

    def test_invariant_to_column_permutations(self):
        rng = np.random.default_rng(5)
        est = rng.integers(0, 2, size=(7, 4))
        truth = rng.integers(0, 2, size=(7, 3))
        base = recovery_error(est, truth)
        for _ in range(5):
            assert recovery_error(
                est[:, rng.permutation(4)], truth[:, rng.permutation(3)]
            ) == pytest.approx(base)


class TestRecoveryReport:
    def test_shared_permutation(self):
        rng = np.random.default_rng(6)
        A_true = rng.integers(0, 2, size=(9, 3))
        B_true = rng.integers(0, 2, size=(5, 3))
        shuffle = np.array([2, 0, 1])
        report = recovery_report(
            A_true[:, shuffle], B_true[:, shuffle], A_true, B_true
        )
        assert report.error_A == 0.0
        assert report.error_B == 0.0
        assert report.K_true == report.K_hat == 3

    def test_a_error_uses_b_permutation(self):
        # the matching must come from B even when it is suboptimal for A
        B_true = np.array([[1, 0], [1, 0], [0, 1], [0, 1], [0, 1]])
        A_true = np.array([[1, 0], [0, 1], [0, 1]])
        B_est = B_true.copy()
        A_est = A_true[:, [1, 0]]  # swapped relative to the B matching
        report = recovery_report(A_est, B_est, A_true, B_true)
        assert report.error_B == 0.0
        assert report.error_A == pytest.approx(1.0)  # identity matching from B


class TestPsrf:
    def test_identical_chains(self):
        chain = np.sin(np.arange(50.0))
        got = psrf(np.stack([chain, chain]))
        assert got == pytest.approx(math.sqrt(49 / 50), abs=1e-12)

    def test_constant_distinct_chains_infinite(self):
        assert psrf(np.stack([np.ones(20), np.full(20, 2.0)])) == math.inf

    def test_all_constant_convention(self):
        assert psrf(np.ones((2, 20))) == 1.0

    def test_iid_gamma_chains_near_one(self):
        rng = np.random.default_rng(7)
        chains = rng.gamma(2.0, 1.0, size=(2, 5000))
        assert psrf(chains) < 1.01

    def test_affine_invariance(self):
        rng = np.random.default_rng(8)
        chains = rng.normal(size=(3, 200))
        assert psrf(3.0 * chains - 7.0) == pytest.approx(psrf(chains), abs=1e-12)

    def test_matrix_version_matches_scalar(self):
        rng = np.random.default_rng(9)
        vals = rng.normal(size=(2, 40, 3, 2))
        grid = psrf_matrix(vals)
        for i in range(3):
            for j in range(2):
                assert grid[i, j] == pytest.approx(psrf(vals[:, :, i, j]), abs=1e-12)


class TestPosteriorPredictive:
    def test_single_snapshot_dirichlet_mean(self):
        tr = trace_with_K([1])
        snap = tr.snapshots[0]
        snap.Z = np.array([[1, 0, 0, 0], [1, 0, 0, 0]], dtype=np.int8)
        snap.s = np.full(4, 2.0)
        snap.t = np.full(4, 1.0)
        data = CountMatrix(
            x=np.array([[5, 1, 1, 1], [2, 2, 2, 2]]), taxon_names=list("abcd")
        )
        pred, corr = posterior_predictive(data, tr)
        assert np.allclose(pred[0], [2 / 5, 1 / 5, 1 / 5, 1 / 5])
        assert np.allclose(pred.sum(axis=1), 1.0, atol=1e-12)

    def test_perfect_agreement_gives_correlation_one(self):
        tr = trace_with_K([1])
        snap = tr.snapshots[0]
        snap.Z = np.array([[1, 0, 0, 0], [0, 1, 0, 0]], dtype=np.int8)
        snap.s = np.full(4, 3.0)
        snap.t = np.full(4, 1.0)
        eta = np.where(snap.Z == 1, 3.0, 1.0)
        comp = eta / eta.sum(axis=1, keepdims=True)
        x = np.round(comp * 600).astype(int)
        data = CountMatrix(x=x, taxon_names=list("abcd"))
        _, corr = posterior_predictive(data, tr)
        assert corr > 0.999


class TestConditionalRefit:
    @pytest.fixture(scope="class")
    def desk_setup(self):
        tree = balanced_tree(8, 2, 3)
        B = np.zeros((8, 2), dtype=np.int8)
        B[:4, 0] = 1
        B[4:, 1] = 1
        scn = mmf.SimScenario(
            n=60, p=8, K=2, block_size=25, flip_frac=0.1, p_k_true=0.5,
            w_true=(4.0, 5.0), s=5.0, t=0.5, N_range=(100, 400), seed=11,
        )
        rng = np.random.default_rng(11)
        A = mmf.generate_A(scn, rng)
        data, _ = mmf.generate_counts_dm(A, B, scn, rng)
        return data, tree, A, B

    def test_frozen_B_and_block_recovery(self, desk_setup):
        data, tree, A_true, B_true = desk_setup
        cfg = SamplerConfig(
            iterations=100, burn_in=50, seed=5, n_chains=1,
            refit_iterations=800, refit_burn_in=200, thin=5,
        )
        est = conditional_refit(data, tree, Hyperparameters(), cfg, B_true)
        assert np.array_equal(est.B_hat, B_true)
        match = (est.A_hat == A_true).mean()
        assert match > 0.9

    def test_zero_retained_samples_rejected(self, desk_setup):
        data, tree, *_ = desk_setup
        with pytest.raises(ValidationError):
            cfg = SamplerConfig(
                iterations=100, burn_in=50, seed=5, n_chains=1,
                refit_iterations=6, refit_burn_in=2, thin=50,
            )
            conditional_refit(data, tree, Hyperparameters(), cfg, np.zeros((8, 0), dtype=np.int8))


class TestCheckIdentifiability:
    def test_identity_rows_sufficient(self):
        A = np.vstack([np.eye(3, dtype=int), np.ones((2, 3), dtype=int)])
        assert check_identifiability(A) is Verdict.SUFFICIENT

    def test_known_counterexample_unknown(self):
        A = np.array(
            [[0, 0, 1, 1], [1, 1, 0, 0], [0, 1, 0, 1], [1, 0, 0, 1]]
        )
        assert check_identifiability(A) is Verdict.UNKNOWN

    def test_all_zero_unknown(self):
        assert check_identifiability(np.zeros((4, 2), dtype=int)) is Verdict.UNKNOWN

    def test_zero_columns_vacuously_sufficient(self):
        assert check_identifiability(np.zeros((4, 0), dtype=int)) is Verdict.SUFFICIENT

    def test_non_binary_rejected(self):
        with pytest.raises(ValidationError):
            check_identifiability(np.array([[2, 0], [0, 1]]))
