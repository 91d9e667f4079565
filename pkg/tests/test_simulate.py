"""Synthetic-data generators and the hard-threshold baseline."""

import math

import numpy as np
import pytest
from scipy import stats

import mmf
from mmf.model import CountMatrix, ValidationError, log_dm_row
from mmf.simulate import (
    SimMode,
    SimScenario,
    generate_A,
    generate_B,
    generate_counts_dm,
    generate_counts_negbin,
    tsmf_dichotomize,
)
from mmf.tree import balanced_tree, star_tree


def desk_scenario(**kw):
    base = dict(
        n=100, p=16, K=3, block_size=30, flip_frac=0.1, p_k_true=0.3,
        w_true=(2.0, 3.0, 4.0), s=5.0, t=0.5, N_range=(50, 500), seed=0,
    )
    base.update(kw)
    return SimScenario(**base)


class TestScenario:
    def test_paper_defaults(self):
        scn = SimScenario()
        assert (scn.n, scn.p, scn.K) == (300, 46, 6)
        assert scn.block_size == 50 and scn.flip_frac == 0.10
        assert scn.w_true == (2.0, 2.5, 3.0, 3.5, 4.0, 4.5)
        assert scn.c_true == pytest.approx(math.log(0.5))
        assert scn.N_range == (50, 500)

    def test_invalid_blocks_rejected(self):
        with pytest.raises(ValidationError):
            desk_scenario(block_size=40)

    def test_mode_from_string(self):
        assert desk_scenario(mode="negbin_misspecified").mode is SimMode.NEGBIN_MISSPECIFIED


class TestGenerateA:
    def test_pure_blocks_without_flips(self):
        scn = desk_scenario(flip_frac=0.0)
        A = generate_A(scn, np.random.default_rng(0))
        want = np.zeros((100, 3), dtype=np.int8)
        for k in range(3):
            want[30 * k : 30 * (k + 1), k] = 1
        assert np.array_equal(A, want)

    def test_flip_counting_paper_sizes(self):
        scn = SimScenario(seed=1)
        A = generate_A(scn, np.random.default_rng(1))
        # blocks place 300 ones; zeros = 1800 - 300 = 1500; flips = 150
        assert A.sum() == 300 + 150
        assert A.sum(axis=1).mean() == pytest.approx(1.5)

    def test_flips_leave_sufficient_rows(self):
        from mmf.estimation import Verdict, check_identifiability

        hits = 0
        for seed in range(100):
            A = generate_A(SimScenario(seed=seed), np.random.default_rng(seed))
            hits += check_identifiability(A) is Verdict.SUFFICIENT
        assert hits >= 95

    def test_deterministic_given_seed(self):
        scn = desk_scenario()
        a1 = generate_A(scn, np.random.default_rng(9))
        a2 = generate_A(scn, np.random.default_rng(9))
        assert np.array_equal(a1, a2)


class TestGenerateB:
    def test_high_pk_limit(self):
        tree = balanced_tree(8, 2, 3)
        B = generate_B(tree, 3, 1.0 - 1e-12, np.random.default_rng(0))
        assert np.all(B == 1)

    def test_empirical_column_mean(self):
        tree = balanced_tree(46, 4, 3)
        rng = np.random.default_rng(1)
        B = generate_B(tree, 400, 0.3, rng)
        # redraw-if-empty inflates the mean slightly; allow for it
        assert abs(B.mean() - 0.3) < 0.04

    def test_flat_tree_iid_bernoulli(self):
        tree = star_tree([f"t{i}" for i in range(12)])
        rng = np.random.default_rng(2)
        B = generate_B(tree, 3000, 0.4, rng)
        assert abs(B.mean() - 0.4) < 0.01
        # no sibling correlation on a flat tree
        corr = np.corrcoef(B[0], B[1])[0, 1]
        assert abs(corr) < 0.05

    def test_no_empty_columns(self):
        tree = balanced_tree(8, 2, 3)
        B = generate_B(tree, 200, 0.05, np.random.default_rng(3))
        assert np.all(B.sum(axis=0) >= 1)


class TestGenerateCountsDM:
    def test_row_sums_in_range(self):
        scn = desk_scenario(seed=4)
        rng = np.random.default_rng(4)
        A = generate_A(scn, rng)
        B = generate_B(balanced_tree(16, 3, 3), 3, 0.3, rng)
        data, Z = generate_counts_dm(A, B, scn, rng)
        totals = data.row_totals
        assert np.all((totals >= 50) & (totals <= 500))
        assert Z.shape == (100, 16)

    def test_zero_fraction_contrast(self):
        # (s, t) = (5, 0.5): zeros are much more common where z = 0
        scn = desk_scenario(seed=5)
        rng = np.random.default_rng(5)
        A = generate_A(scn, rng)
        B = generate_B(balanced_tree(16, 3, 3), 3, 0.3, rng)
        data, Z = generate_counts_dm(A, B, scn, rng)
        zero_at_z0 = (data.x[Z == 0] == 0).mean()
        zero_at_z1 = (data.x[Z == 1] == 0).mean()
        assert zero_at_z0 > zero_at_z1 + 0.2

    def test_conditional_law_matches_likelihood(self):
        # chi-square of generated counts against the collapsed DM pmf on
        # p=2, N=20; z is forced to a fixed pattern via an extreme baseline
        scn = SimScenario(
            n=4000, p=2, K=1, block_size=4000, flip_frac=0.0, p_k_true=0.5,
            w_true=(0.5,), c_true=50.0, s=2.0, t=0.5, N_range=(20, 20), seed=6,
        )
        tree = star_tree(["a", "b"])
        rng = np.random.default_rng(6)
        A = np.ones((4000, 1), dtype=np.int8)
        B = np.ones((2, 1), dtype=np.int8)
        data, Z = generate_counts_dm(A, B, scn, rng)
        assert Z.all()  # c_true = 50 forces every flag on
        s = np.full(2, 2.0)
        t = np.full(2, 0.5)
        pmf = np.array(
            [
                math.exp(
                    log_dm_row(
                        np.array([x1, 20 - x1]), np.array([1, 1]), s, t,
                        with_coefficient=True,
                    )
                )
                for x1 in range(21)
            ]
        )
        counts = np.bincount(data.x[:, 0], minlength=21)
        # merge tail bins with tiny expectation
        expected = pmf * 4000
        keep = expected > 5
        obs = np.append(counts[keep], counts[~keep].sum())
        exp = np.append(expected[keep], expected[~keep].sum())
        assert stats.chisquare(obs, exp * obs.sum() / exp.sum()).pvalue > 0.01

    def test_deterministic(self):
        scn = desk_scenario(seed=7)
        outs = []
        for _ in range(2):
            rng = np.random.default_rng(7)
            A = generate_A(scn, rng)
            B = generate_B(balanced_tree(16, 3, 3), 3, 0.3, rng)
            data, Z = generate_counts_dm(A, B, scn, rng)
            outs.append((data.x, Z))
        assert np.array_equal(outs[0][0], outs[1][0])
        assert np.array_equal(outs[0][1], outs[1][1])


class TestGenerateCountsNegbin:
    def test_moment_relation(self):
        # for fixed (i, j): mean mu and variance 2*mu
        rng = np.random.default_rng(8)
        mu = 7.0
        draws = rng.negative_binomial(mu, 0.5, size=200_000)
        assert abs(draws.mean() - mu) < 0.05
        assert abs(draws.var() - 2 * mu) < 0.3

    def test_row_sums_exact(self):
        scn = desk_scenario(seed=9, mode="negbin_misspecified", s=1.0, t=0.5)
        rng = np.random.default_rng(9)
        A = generate_A(scn, rng)
        B = generate_B(balanced_tree(16, 3, 3), 3, 0.3, rng)
        data = generate_counts_negbin(A, B, scn, rng)
        assert np.all((data.row_totals >= 50) & (data.row_totals <= 500))

    def test_degenerate_rows_redrawn(self):
        # strongly negative baseline: all-zero load rows are common and must
        # be redrawn rather than emitted empty
        scn = SimScenario(
            n=20, p=4, K=1, block_size=20, flip_frac=0.0, p_k_true=0.5,
            w_true=(0.1,), c_true=-3.0, s=1.0, t=0.5, N_range=(50, 60),
            mode="negbin_misspecified", seed=10,
        )
        tree = star_tree(list("abcd"))
        rng = np.random.default_rng(10)
        A = np.ones((20, 1), dtype=np.int8)
        B = generate_B(tree, 1, 0.5, rng)
        data = generate_counts_negbin(A, B, scn, rng)
        assert np.all(data.row_totals >= 50)


class TestTsmfDichotomize:
    def test_all_below_floor(self):
        data = CountMatrix(
            x=np.array([[1, 10**7], [2, 10**7]]), taxon_names=["lo", "hi"]
        )
        z = tsmf_dichotomize(data, floor=1e-3, q=0.25)
        assert z[:, 0].sum() == 0

    def test_quantile_interpolation_case(self):
        x = np.array([[1, 9], [2, 8], [3, 7], [4, 6]])
        data = CountMatrix(x=x * 10, taxon_names=["a", "b"])
        # taxon a relative abundances: .1 .2 .3 .4; type-7 0.25-quantile = .175
        z = tsmf_dichotomize(data, floor=1e-5, q=0.25)
        assert z[:, 0].tolist() == [0, 1, 1, 1]

    def test_q_to_zero_keeps_everything_above_floor(self):
        rng = np.random.default_rng(11)
        x = rng.integers(1, 50, size=(10, 4))  # every entry above the floor
        data = CountMatrix(x=x, taxon_names=list("abcd"))
        z = tsmf_dichotomize(data, floor=1e-9, q=1e-9)
        assert z.all()

    def test_below_floor_entries_never_flagged(self):
        x = np.array([[0, 100], [5, 95], [50, 50]])
        data = CountMatrix(x=x, taxon_names=["a", "b"])
        z = tsmf_dichotomize(data, floor=1e-3, q=0.25)
        assert z[0, 0] == 0

    def test_row_scaling_invariance(self):
        rng = np.random.default_rng(12)
        x = rng.integers(0, 30, size=(6, 5))
        x[:, 0] += 1
        data = CountMatrix(x=x, taxon_names=list("abcde"))
        scaled = CountMatrix(x=x * 7, taxon_names=list("abcde"))
        assert np.array_equal(tsmf_dichotomize(data), tsmf_dichotomize(scaled))
