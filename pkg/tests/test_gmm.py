import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from featdensity.errors import NumericError
from featdensity.gmm import (
    EmConfig,
    GmmModel,
    bpd,
    fit_em,
    grad_log_density,
    log_density,
    logsumexp,
    responsibilities,
    sample,
)

HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)


def random_model(rng, k, d):
    w = rng.dirichlet(np.ones(k))
    return GmmModel(w, rng.normal(scale=2, size=(k, d)), rng.uniform(0.2, 3.0, size=(k, d)))


def naive_density(g, f):
    """Direct product-of-normals evaluation, no log space."""
    total = 0.0
    for w, mu, var in zip(g.weights, g.means, g.variances):
        total += w * np.prod(np.exp(-((f - mu) ** 2) / (2 * var)) / np.sqrt(2 * np.pi * var))
    return total


class TestModel:
    def test_rejects_non_simplex(self):
        with pytest.raises(ValueError):
            GmmModel([0.5, 0.6], np.zeros((2, 1)), np.ones((2, 1)))

    def test_rejects_nonpositive_variance(self):
        with pytest.raises(ValueError):
            GmmModel([1.0], np.zeros((1, 2)), np.array([[1.0, 0.0]]))

    def test_round_trip(self, tmp_path):
        g = random_model(np.random.default_rng(0), 3, 2)
        g.save(tmp_path / "g.json")
        back = GmmModel.load(tmp_path / "g.json")
        for a, b in ((g.weights, back.weights), (g.means, back.means), (g.variances, back.variances)):
            assert a.tobytes() == b.tobytes()


class TestLogDensity:
    def test_standard_normal_mode(self):
        g = GmmModel([1.0], [[0.0]], [[1.0]])
        assert log_density(g, [0.0]) == pytest.approx(-HALF_LOG_2PI, abs=1e-15)
        assert log_density(g, [0.0]) == pytest.approx(-0.91894, abs=1e-5)

    def test_two_components(self):
        g = GmmModel([0.5, 0.5], [[-1.0], [1.0]], [[1.0], [1.0]])
        assert log_density(g, [0.0]) == pytest.approx(-HALF_LOG_2PI - 0.5, abs=1e-14)

    def test_matches_naive(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            g = random_model(rng, int(rng.integers(1, 5)), int(rng.integers(1, 4)))
            f = rng.normal(scale=2, size=(50, g.feature_dim))
            got = log_density(g, f)
            for row, val in zip(f, got):
                naive = naive_density(g, row)
                if naive > 1e-300:
                    assert abs(val - math.log(naive)) < 1e-9

    def test_far_point_finite(self):
        g = GmmModel([1.0], [[0.0, 0.0]], [[1e-6, 1e-6]])
        assert np.isfinite(log_density(g, [1.0, 1.0]))

    def test_permutation_invariant(self):
        rng = np.random.default_rng(2)
        g = random_model(rng, 4, 3)
        perm = rng.permutation(4)
        h = GmmModel(g.weights[perm], g.means[perm], g.variances[perm])
        f = rng.normal(size=(30, 3))
        np.testing.assert_allclose(log_density(g, f), log_density(h, f), rtol=0, atol=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            log_density(GmmModel([1.0], [[0.0]], [[1.0]]), [0.0, 1.0])

    def test_logsumexp_all_neg_inf(self):
        assert logsumexp(np.array([-np.inf, -np.inf])) == -np.inf

    def test_integrates_to_one(self):
        # proposal: the same mixture with doubled variances, so the ratio p/q is
        # not identically one and the estimate actually exercises the density
        rng = np.random.default_rng(3)
        for k in (1, 2, 3):
            for d in (1, 2):
                g = random_model(rng, k, d)
                q = GmmModel(g.weights, g.means, 2.0 * g.variances)
                x = sample(q, 1_000_000, rng)
                est = np.exp(log_density(g, x) - log_density(q, x)).mean()
                assert abs(est - 1.0) < 0.01, (k, d, est)


class TestBpd:
    def test_identity(self):
        var = 4 / (2 * np.pi)
        g = GmmModel([1.0], [[0.0, 0.0]], [[var, var]])
        # log N(0; 0, var)^2 = -ln(2 pi var) = -ln 4
        assert log_density(g, [0.0, 0.0]) == pytest.approx(-math.log(4), abs=1e-14)
        assert bpd(g, [0.0, 0.0]) == pytest.approx(1.0, abs=1e-14)

    def test_zero(self):
        var = 1 / (2 * np.pi)
        g = GmmModel([1.0], [[0.0, 0.0, 0.0]], [[var] * 3])
        assert bpd(g, [0.0, 0.0, 0.0]) == pytest.approx(0.0, abs=1e-14)

    def test_monotone(self):
        rng = np.random.default_rng(4)
        g = random_model(rng, 3, 2)
        f = rng.normal(scale=3, size=(200, 2))
        ll, b = log_density(g, f), bpd(g, f)
        for i in range(0, 200, 2):
            if ll[i] != ll[i + 1]:
                assert (ll[i] < ll[i + 1]) == (b[i] > b[i + 1])
        np.testing.assert_allclose(b, -ll / (2 * math.log(2)), rtol=1e-15)


class TestResponsibilities:
    def test_single(self):
        np.testing.assert_array_equal(responsibilities(GmmModel([1.0], [[3.0]], [[2.0]]), [0.0]), [1.0])

    def test_symmetric_midpoint(self):
        g = GmmModel([0.5, 0.5], [[-1.0], [1.0]], [[1.0], [1.0]])
        np.testing.assert_allclose(responsibilities(g, [0.0]), [0.5, 0.5], atol=1e-15)

    def test_simplex(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            g = random_model(rng, int(rng.integers(1, 6)), 2)
            r = responsibilities(g, rng.normal(scale=5, size=2))
            assert abs(r.sum() - 1) <= 1e-10 and np.all((r >= 0) & (r <= 1))


class TestGradient:
    def test_mode(self):
        np.testing.assert_array_equal(grad_log_density(GmmModel([1.0], [[0.0]], [[1.0]]), [0.0]), [0.0])

    def test_closed_form(self):
        g = GmmModel([1.0], [[1.0, 1.0]], [[1.0, 1.0]])
        np.testing.assert_allclose(grad_log_density(g, [0.0, 0.0]), [1.0, 1.0], atol=1e-15)

    def test_finite_difference(self):
        rng = np.random.default_rng(6)
        h = 1e-6
        for _ in range(100):
            g = random_model(rng, int(rng.integers(1, 5)), int(rng.integers(1, 4)))
            f = rng.normal(size=g.feature_dim)
            fd = np.array([(log_density(g, f + h * e) - log_density(g, f - h * e)) / (2 * h)
                           for e in np.eye(g.feature_dim)])
            got = grad_log_density(g, f)
            assert np.max(np.abs(got - fd) / np.maximum(1e-8, np.abs(got) + np.abs(fd))) < 1e-4


def two_clusters(seed=0):
    rng = np.random.default_rng(seed)
    return np.vstack([rng.normal(-5, 1, size=(100, 2)), rng.normal(5, 1, size=(100, 2))])


class TestFitEm:
    def test_single_component_closed_form(self):
        x = np.random.default_rng(7).normal(size=(50, 3)) * [1, 2, 3]
        g, rep = fit_em(x, 1)
        np.testing.assert_allclose(g.means[0], x.mean(axis=0), atol=1e-12)
        np.testing.assert_allclose(g.variances[0], x.var(axis=0), rtol=1e-12)
        assert g.weights.tolist() == [1.0]
        assert rep.converged and rep.iterations <= 2

    def test_single_component_floor(self):
        x = np.column_stack([np.arange(5.0), np.full(5, 2.0)])
        g, rep = fit_em(x, 1)
        assert g.variances[0, 1] == 1e-6
        assert rep.floor_active

    def test_two_clusters(self):
        g, rep = fit_em(two_clusters(), 2, EmConfig(seed=0))
        order = np.argsort(g.means[:, 0])
        np.testing.assert_allclose(g.means[order], [[-5, -5], [5, 5]], atol=0.5)
        np.testing.assert_allclose(g.weights, 0.5, atol=0.1)
        assert rep.converged

    def test_too_few_points(self):
        with pytest.raises(ValueError):
            fit_em(np.zeros((3, 2)), 5)

    def test_non_finite(self):
        x = np.zeros((10, 2))
        x[3, 1] = np.nan
        with pytest.raises(NumericError):
            fit_em(x, 2)

    def test_deterministic_and_partition_independent(self):
        x = two_clusters(1)
        a, ra = fit_em(x, 3, EmConfig(seed=4))
        b, rb = fit_em(x, 3, EmConfig(seed=4, partitions=4))
        assert a.means.tobytes() == b.means.tobytes()
        assert ra.log_likelihood == rb.log_likelihood

    def test_random_points_init(self):
        g, _ = fit_em(two_clusters(2), 2, EmConfig(init="random_points", seed=3))
        assert g.component_count == 2

    def test_reseed_keeps_k(self):
        x = np.vstack([np.zeros((20, 1)), np.ones((20, 1))])
        g, rep = fit_em(x, 4, EmConfig(seed=0, max_iters=30))
        assert g.component_count == 4
        assert abs(g.weights.sum() - 1) <= 1e-10
        assert np.all(g.variances >= 1e-6)

    @settings(max_examples=40, deadline=None)
    @given(n=st.integers(10, 200), d=st.integers(1, 4), k=st.integers(1, 4), seed=st.integers(0, 10**6))
    def test_monotone_and_valid(self, n, d, k, seed):
        rng = np.random.default_rng(seed)
        centers = rng.normal(scale=3, size=(k, d))
        x = centers[rng.integers(k, size=n)] + rng.normal(size=(n, d))
        g, rep = fit_em(x, k, EmConfig(seed=seed))
        assert abs(g.weights.sum() - 1) <= 1e-10 and np.all(g.weights >= 0)
        assert np.all(g.variances >= 1e-6)
        if not (rep.floor_active or rep.reseeded):
            ll = rep.log_likelihood
            assert all(b >= a - 1e-9 for a, b in zip(ll, ll[1:]))


class TestSample:
    def test_moments(self):
        g = GmmModel([0.3, 0.7], [[-2.0], [3.0]], [[0.5], [1.5]])
        x = sample(g, 200_000, np.random.default_rng(0))
        mean = 0.3 * -2 + 0.7 * 3
        assert abs(x.mean() - mean) < 0.02
