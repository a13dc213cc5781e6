import itertools
import json
import math

import numpy as np
import pytest

from explab.data import ReferenceVector, TabularDataset, apply_mask
from explab.net import init_net, scalar_fn
from explab.oracle import (
    AttributionVector,
    OracleConfig,
    OracleError,
    SingularRegressionError,
    _solve_constrained_wls,
    _value_function,
    antithetical_permutation_sampling,
    efficient_normalize,
    exact_attribution,
    kernel_shap,
    label_cache_build,
    load_label_cache,
    permutation_sampling,
    sample_orderings,
)


def linear_model(w, b=0.0):
    w = np.asarray(w, dtype=float)

    def f(X):
        return np.atleast_2d(X) @ w + b

    return f


def random_net_model(m, seed, hidden=16):
    return scalar_fn(init_net([m, hidden, hidden, 1], seed=seed))


def ordering_marginals(f, x, ref_values, perm):
    """Marginal contributions walking one feature ordering; independent of
    the library's chain-mask machinery."""
    m = len(x)
    contrib = np.zeros(m)
    mask = np.zeros(m)
    prev = float(f(np.where(mask == 1, x, ref_values)[None, :])[0])
    for i in perm:
        mask[i] = 1
        cur = float(f(np.where(mask == 1, x, ref_values)[None, :])[0])
        contrib[i] = cur - prev
        prev = cur
    return contrib


class TestExactAttribution:
    def test_linear_model_both_weightings(self):
        f = linear_model([1.0, 2.0])
        ref = ReferenceVector([0.0, 0.0])
        for weighting in ("shapley", "uniform"):
            att = exact_attribution(f, [1.0, 1.0], ref, weighting)
            np.testing.assert_allclose(att.scores, [1.0, 2.0], atol=1e-12)

    def test_product_model_hand_enumeration(self):
        # phi_1: gains 0 entering after the empty set, 1 after {2}; avg 0.5
        def f(X):
            X = np.atleast_2d(X)
            return X[:, 0] * X[:, 1]

        att = exact_attribution(f, [1.0, 1.0], ReferenceVector([0.0, 0.0]), "shapley")
        np.testing.assert_allclose(att.scores, [0.5, 0.5], atol=1e-12)

    def test_constant_model_is_all_zero(self):
        f = lambda X: np.full(np.atleast_2d(X).shape[0], 3.7)
        ref = ReferenceVector(np.ones(5))
        for weighting in ("shapley", "uniform"):
            att = exact_attribution(f, np.arange(5.0), ref, weighting)
            np.testing.assert_allclose(att.scores, np.zeros(5), atol=1e-12)

    def test_matches_all_orderings_average(self):
        # the defining average over every feature ordering, M = 4
        rng = np.random.default_rng(0)
        f = random_net_model(4, seed=5)
        x = rng.normal(size=4)
        ref = ReferenceVector(rng.normal(size=4))
        totals = np.zeros(4)
        perms = list(itertools.permutations(range(4)))
        for perm in perms:
            totals += ordering_marginals(f, x, ref.values, perm)
        np.testing.assert_allclose(
            exact_attribution(f, x, ref).scores, totals / len(perms), atol=1e-10
        )

    def test_uniform_weighting_matches_subset_average(self):
        # every subset weighted 1/2^(M-1)
        rng = np.random.default_rng(1)
        m = 5
        f = random_net_model(m, seed=2)
        x = rng.normal(size=m)
        ref = ReferenceVector(rng.normal(size=m))

        def v(bits):
            return float(f(np.where(np.array(bits) == 1, x, ref.values)[None, :])[0])

        expected = np.zeros(m)
        for i in range(m):
            others = [j for j in range(m) if j != i]
            for r in range(m):
                for combo in itertools.combinations(others, r):
                    bits = np.zeros(m, dtype=int)
                    bits[list(combo)] = 1
                    without = v(bits)
                    bits[i] = 1
                    expected[i] += (v(bits) - without) / 2 ** (m - 1)
        np.testing.assert_allclose(
            exact_attribution(f, x, ref, "uniform").scores, expected, atol=1e-10
        )

    def test_efficiency_axiom(self):
        for seed in range(100):
            rng = np.random.default_rng(seed)
            m = int(rng.integers(2, 11))
            f = random_net_model(m, seed=seed)
            x = rng.normal(size=m)
            ref = ReferenceVector(rng.normal(size=m))
            att = exact_attribution(f, x, ref)
            total = float(f(x[None, :])[0] - f(ref.values[None, :])[0])
            assert abs(att.scores.sum() - total) < 1e-8

    def test_symmetry_axiom(self):
        # exchangeable features with equal values and references
        def f(X):
            X = np.atleast_2d(X)
            return (X[:, 0] + X[:, 1]) ** 2 + 3.0 * X[:, 2]

        x = np.array([0.8, 0.8, -0.5])
        ref = ReferenceVector([0.2, 0.2, 0.1])
        att = exact_attribution(f, x, ref)
        assert abs(att.scores[0] - att.scores[1]) < 1e-9

    def test_dummy_axiom(self):
        def f(X):
            X = np.atleast_2d(X)
            return X[:, 0] ** 2 - X[:, 2]  # never reads feature 1

        rng = np.random.default_rng(4)
        att = exact_attribution(f, rng.normal(size=3), ReferenceVector(rng.normal(size=3)))
        assert abs(att.scores[1]) < 1e-10

    def test_game_linearity(self):
        rng = np.random.default_rng(9)
        m = 5
        f = random_net_model(m, seed=11)
        g = random_net_model(m, seed=12)
        alpha, beta = 1.7, -0.4
        x = rng.normal(size=m)
        ref = ReferenceVector(rng.normal(size=m))
        combo = lambda X: alpha * f(X) + beta * g(X)
        np.testing.assert_allclose(
            exact_attribution(combo, x, ref).scores,
            alpha * exact_attribution(f, x, ref).scores + beta * exact_attribution(g, x, ref).scores,
            atol=1e-9,
        )

    def test_feature_count_guard(self):
        f = linear_model(np.ones(25))
        with pytest.raises(OracleError, match="infeasible"):
            exact_attribution(f, np.ones(25), ReferenceVector(np.zeros(25)))

    def test_evaluates_each_subset_once(self):
        calls = {"rows": 0}
        w = np.array([1.0, -1.0, 0.5])

        def f(X):
            X = np.atleast_2d(X)
            calls["rows"] += X.shape[0]
            return X @ w

        exact_attribution(f, np.ones(3), ReferenceVector(np.zeros(3)))
        assert calls["rows"] == 2**3

    def test_non_finite_model_output(self):
        f = lambda X: np.full(np.atleast_2d(X).shape[0], np.nan)
        with pytest.raises(OracleError, match="non-finite model output"):
            exact_attribution(f, np.ones(2), ReferenceVector(np.zeros(2)))


class TestPermutationSampling:
    def test_linear_model_exact_at_any_budget(self):
        f = linear_model([1.0, 2.0], b=0.3)
        ref = ReferenceVector([0.0, 0.0])
        for budget in (1, 3, 8):
            att = permutation_sampling(f, [1.0, 1.0], ref, budget, seed=budget)
            np.testing.assert_allclose(att.scores, [1.0, 2.0], atol=1e-10)

    def test_deterministic_given_seed(self):
        f = random_net_model(5, seed=0)
        rng = np.random.default_rng(2)
        x, ref = rng.normal(size=5), ReferenceVector(rng.normal(size=5))
        a = permutation_sampling(f, x, ref, 16, seed=77)
        b = permutation_sampling(f, x, ref, 16, seed=77)
        np.testing.assert_array_equal(a.scores, b.scores)
        assert a.source == "ps" and a.budget == 16

    def test_matches_manual_ordering_walk(self):
        # replicate the drawn orderings and average marginals independently
        f = random_net_model(4, seed=3)
        rng = np.random.default_rng(5)
        x, ref = rng.normal(size=4), ReferenceVector(rng.normal(size=4))
        seed = 13
        orderings = sample_orderings(4, 6, np.random.default_rng(seed))
        expected = np.mean(
            [ordering_marginals(f, x, ref.values, perm) for perm in orderings], axis=0
        )
        att = permutation_sampling(f, x, ref, 6, seed=seed)
        np.testing.assert_allclose(att.scores, expected, atol=1e-10)

    def test_unbiased_within_three_standard_errors(self):
        m = 6
        f = random_net_model(m, seed=21)
        rng = np.random.default_rng(22)
        x, ref = rng.normal(size=m), ReferenceVector(rng.normal(size=m))
        exact = exact_attribution(f, x, ref).scores
        estimates = np.array(
            [permutation_sampling(f, x, ref, 8, seed=s).scores for s in range(200)]
        )
        mean = estimates.mean(axis=0)
        se = estimates.std(axis=0, ddof=1) / np.sqrt(estimates.shape[0])
        assert np.all(np.abs(mean - exact) <= 3 * se + 1e-12)

    def test_budget_guard(self):
        f = linear_model([1.0])
        with pytest.raises(OracleError, match="budget"):
            permutation_sampling(f, [1.0], ReferenceVector([0.0]), 0, seed=0)


class TestAntitheticalPermutationSampling:
    def test_odd_budget_rejected(self):
        f = linear_model([1.0, 1.0])
        with pytest.raises(OracleError, match="even budget"):
            antithetical_permutation_sampling(f, [1.0, 1.0], ReferenceVector([0.0, 0.0]), 3, 0)

    def test_budget_two_is_average_of_pair(self):
        f = random_net_model(3, seed=8)
        rng = np.random.default_rng(1)
        x, ref = rng.normal(size=3), ReferenceVector(rng.normal(size=3))
        seed = 5
        sigma = sample_orderings(3, 1, np.random.default_rng(seed))[0]
        expected = 0.5 * (
            ordering_marginals(f, x, ref.values, sigma)
            + ordering_marginals(f, x, ref.values, sigma[::-1])
        )
        att = antithetical_permutation_sampling(f, x, ref, 2, seed=seed)
        np.testing.assert_allclose(att.scores, expected, atol=1e-10)

    def test_linear_model_exact(self):
        f = linear_model([2.0, -1.0, 0.5], b=1.0)
        ref = ReferenceVector([0.1, 0.2, 0.3])
        x = np.array([1.0, 1.0, 1.0])
        att = antithetical_permutation_sampling(f, x, ref, 4, seed=0)
        np.testing.assert_allclose(att.scores, [2.0 * 0.9, -0.8, 0.5 * 0.7], atol=1e-10)

    def test_variance_reduction_on_most_random_nets(self):
        # matched budget, 200 seeds per method; antithetic pairing should cut
        # the variance on at least 70% of random targets
        m, budget, n_seeds = 8, 8, 200
        wins = 0
        n_nets = 50
        rng = np.random.default_rng(0)
        for net_id in range(n_nets):
            f = scalar_fn(init_net([m, 8, 1], seed=net_id))
            x = rng.normal(size=m)
            ref = ReferenceVector(rng.normal(size=m))
            ps = np.array(
                [permutation_sampling(f, x, ref, budget, seed=s).scores for s in range(n_seeds)]
            )
            aps = np.array(
                [
                    antithetical_permutation_sampling(f, x, ref, budget, seed=s).scores
                    for s in range(n_seeds)
                ]
            )
            if aps.var(axis=0, ddof=1).sum() <= ps.var(axis=0, ddof=1).sum():
                wins += 1
        assert wins >= 0.7 * n_nets


class TestKernelShap:
    def test_full_enumeration_recovers_exact(self):
        rng = np.random.default_rng(0)
        m = 6
        f = random_net_model(m, seed=33)
        x, ref = rng.normal(size=m), ReferenceVector(rng.normal(size=m))
        ks = kernel_shap(f, x, ref, budget=0)
        exact = exact_attribution(f, x, ref)
        np.testing.assert_allclose(ks.scores, exact.scores, atol=1e-6)

    def test_linear_model_full_enumeration(self):
        w = np.array([1.5, -2.0, 0.25])
        f = linear_model(w, b=0.7)
        rng = np.random.default_rng(2)
        x, ref_values = rng.normal(size=3), rng.normal(size=3)
        ks = kernel_shap(f, x, ReferenceVector(ref_values), budget=0)
        np.testing.assert_allclose(ks.scores, w * (x - ref_values), atol=1e-9)

    def test_two_features_equal_exact_for_any_model(self):
        # with M = 2 the two interior subsets fully determine the constrained
        # system; hand solution coincides with the exact oracle
        def f(X):
            X = np.atleast_2d(X)
            return np.exp(X[:, 0]) * (1 + np.tanh(X[:, 1]))

        rng = np.random.default_rng(7)
        for _ in range(5):
            x, ref = rng.normal(size=2), ReferenceVector(rng.normal(size=2))
            ks = kernel_shap(f, x, ref, budget=0)
            exact = exact_attribution(f, x, ref)
            np.testing.assert_allclose(ks.scores, exact.scores, atol=1e-9)

    def test_sampled_mode_converges(self):
        m = 8
        f = random_net_model(m, seed=44)
        rng = np.random.default_rng(3)
        x, ref = rng.normal(size=m), ReferenceVector(rng.normal(size=m))
        exact = exact_attribution(f, x, ref).scores
        errs = []
        for budget in (16, 64, 256):
            e = [
                np.linalg.norm(kernel_shap(f, x, ref, budget=budget, seed=s).scores - exact)
                for s in range(20)
            ]
            errs.append(np.mean(e))
        assert errs[0] > errs[-1]

    def test_deterministic_given_seed(self):
        m = 6
        f = random_net_model(m, seed=1)
        rng = np.random.default_rng(4)
        x, ref = rng.normal(size=m), ReferenceVector(rng.normal(size=m))
        a = kernel_shap(f, x, ref, budget=32, seed=9).scores
        b = kernel_shap(f, x, ref, budget=32, seed=9).scores
        np.testing.assert_array_equal(a, b)

    def test_budget_guard(self):
        f = linear_model(np.ones(6))
        with pytest.raises(OracleError, match="M \\+ 2"):
            kernel_shap(f, np.ones(6), ReferenceVector(np.zeros(6)), budget=4)

    def test_degenerate_regression_reported(self):
        # every sampled row identical: rank 1 < M-1
        f = linear_model(np.ones(4))
        x = np.ones(4)
        ref = ReferenceVector(np.zeros(4))
        values = _value_function(f, x, ref)
        masks = np.tile([1.0, 0.0, 0.0, 0.0], (6, 1))
        with pytest.raises(SingularRegressionError, match="rank-deficient"):
            _solve_constrained_wls(values, masks, np.ones(6), 0.0, 4.0)


class TestEfficientNormalize:
    def test_formula(self):
        att = AttributionVector([1.0, 1.0], "ks")
        out = efficient_normalize(att, 4.0)
        np.testing.assert_allclose(out.scores, [2.0, 2.0], atol=1e-12)
        assert out.source == "ks"

    def test_fixed_point(self):
        att = AttributionVector([0.5, -1.5, 2.0], "exact-shapley")
        out = efficient_normalize(att, att.scores.sum())
        np.testing.assert_allclose(out.scores, att.scores, atol=1e-12)

    def test_uniform_correction(self):
        out = efficient_normalize(AttributionVector([0.0, 0.0, 0.0], "ps"), 3.0)
        np.testing.assert_allclose(out.scores, [1.0, 1.0, 1.0], atol=1e-12)

    def test_sums_to_target(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            m = int(rng.integers(1, 12))
            att = AttributionVector(rng.normal(size=m), "aps")
            target = float(rng.normal())
            out = efficient_normalize(att, target)
            assert abs(out.scores.sum() - target) < 1e-10


class TestLabelCache:
    def _dataset(self, n=10, m=8, seed=0):
        rng = np.random.default_rng(seed)
        X = rng.normal(size=(n, m))
        return TabularDataset(X, [f"f{i}" for i in range(m)])

    def test_exact_cache_efficiency_per_record(self, tmp_path):
        ds = self._dataset()
        f = random_net_model(8, seed=10)
        path = tmp_path / "labels.jsonl"
        records = label_cache_build(f, ds, OracleConfig(source="exact"), path)
        assert len(records) == 10
        from explab.data import compute_reference

        ref = compute_reference(ds, "mean")
        base = float(f(ref.values[None, :])[0])
        for i, att in enumerate(records):
            total = float(f(ds.features[i][None, :])[0]) - base
            assert abs(att.scores.sum() - total) < 1e-8

    def test_rebuild_is_byte_identical(self, tmp_path):
        ds = self._dataset(n=6)
        f = random_net_model(8, seed=10)
        cfg = OracleConfig(source="ps", budget=8, seed=3)
        p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        label_cache_build(f, ds, cfg, p1)
        label_cache_build(f, ds, cfg, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_large_aps_budget_accepted_and_recorded(self, tmp_path):
        ds = self._dataset(n=1)
        f = linear_model(np.ones(8))
        cfg = OracleConfig(source="aps", budget=200_000, seed=0)
        path = tmp_path / "labels.jsonl"
        label_cache_build(f, ds, cfg, path)
        rec = json.loads(path.read_text().splitlines()[0])
        assert rec["budget"] == 200_000
        assert rec["source"] == "aps"

    def test_round_trip_and_provenance(self, tmp_path):
        ds = self._dataset(n=4, m=5)
        f = random_net_model(5, seed=2)
        path = tmp_path / "labels.jsonl"
        records = label_cache_build(f, ds, OracleConfig(source="ks", budget=16, seed=8), path)
        scores, meta = load_label_cache(path)
        assert scores.shape == (4, 5)
        np.testing.assert_allclose(scores, np.stack([r.scores for r in records]), atol=1e-15)
        assert meta == {"source": "ks", "budget": 16, "seed": 8}

    def test_config_dataset_mismatch(self, tmp_path):
        ds = self._dataset(n=2, m=8)
        # exact infeasible guard propagates through cache building
        wide = TabularDataset(np.random.default_rng(0).normal(size=(2, 25)), [f"f{i}" for i in range(25)])
        f = linear_model(np.ones(25))
        with pytest.raises(OracleError, match="infeasible"):
            label_cache_build(f, wide, OracleConfig(source="exact"), tmp_path / "x.jsonl")


class TestEstimatorConsistency:
    def test_error_decreases_with_budget(self):
        # light version of the budget study: 20 seeds, M = 8
        m = 8
        f = random_net_model(m, seed=50)
        rng = np.random.default_rng(6)
        x, ref = rng.normal(size=m), ReferenceVector(rng.normal(size=m))
        exact = exact_attribution(f, x, ref).scores
        budgets = (8, 32, 128)
        for sampler in (
            lambda b, s: permutation_sampling(f, x, ref, b, s),
            lambda b, s: antithetical_permutation_sampling(f, x, ref, b, s),
            # the regression wants some slack over its M + 2 minimum to stay
            # full-rank, so its grid is doubled
            lambda b, s: kernel_shap(f, x, ref, budget=2 * b, seed=s),
        ):
            means = [
                np.mean([np.linalg.norm(sampler(b, s).scores - exact) for s in range(20)])
                for b in budgets
            ]
            assert means[0] > means[1] > means[2]
