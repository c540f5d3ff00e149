"""Gaussian mixture worlds: restriction, noised marginals, densities, exact scores."""

import json
import math

import numpy as np
import pytest

from guidancelab import (
    GaussianMixture,
    build_schedule,
    exact_eps,
    forward_noise,
    log_density,
    marginal_at_t,
    narrow2,
    restrict,
    ring8,
    resolve_world,
    sample,
)
from guidancelab.errors import (
    DegenerateTimeError,
    DimensionMismatchError,
    EmptyConditionError,
    InvalidParameterError,
)
from conftest import schedule_with_alpha_bars, single_gaussian


def two_comp_1d():
    return GaussianMixture(
        weights=np.array([0.3, 0.7]),
        means=np.array([[-2.0], [1.5]]),
        var_diags=np.array([[0.5], [2.0]]),
        coarse_labels=np.array([0, 1]),
        fine_labels=np.array([0, 1]),
    )


def normal_cdf(x, mean, var):
    return 0.5 * (1.0 + math.erf((x - mean) / math.sqrt(2.0 * var)))


class TestConstruction:
    def test_weights_are_normalized(self):
        g = GaussianMixture(
            weights=np.array([2.0, 6.0]),
            means=np.zeros((2, 1)),
            var_diags=np.ones((2, 1)),
            coarse_labels=np.array([0, 1]),
            fine_labels=np.array([0, 1]),
        )
        np.testing.assert_allclose(g.weights, [0.25, 0.75], rtol=0, atol=1e-15)

    @pytest.mark.parametrize(
        "field,value",
        [
            ("weights", np.array([1.0, 0.0])),
            ("weights", np.array([1.0, -0.5])),
            ("var_diags", np.array([[1.0], [0.0]])),
            ("coarse_labels", np.array([0, -1])),
            ("fine_labels", np.array([0, -2])),
        ],
    )
    def test_invalid_fields_rejected(self, field, value):
        kwargs = dict(
            weights=np.array([0.5, 0.5]),
            means=np.zeros((2, 1)),
            var_diags=np.ones((2, 1)),
            coarse_labels=np.array([0, 1]),
            fine_labels=np.array([0, 1]),
        )
        kwargs[field] = value
        with pytest.raises(InvalidParameterError):
            GaussianMixture(**kwargs)

    def test_component_count_mismatch_rejected(self):
        with pytest.raises(DimensionMismatchError):
            GaussianMixture(
                weights=np.array([0.5, 0.5]),
                means=np.zeros((3, 1)),
                var_diags=np.ones((2, 1)),
                coarse_labels=np.array([0, 1]),
                fine_labels=np.array([0, 1]),
            )

    def test_json_round_trip(self, tmp_path):
        g = two_comp_1d()
        path = tmp_path / "world.json"
        path.write_text(g.to_json())
        back = resolve_world(str(path))
        np.testing.assert_array_equal(back.weights, g.weights)
        np.testing.assert_array_equal(back.means, g.means)
        np.testing.assert_array_equal(back.var_diags, g.var_diags)
        np.testing.assert_array_equal(back.coarse_labels, g.coarse_labels)
        np.testing.assert_array_equal(back.fine_labels, g.fine_labels)

    def test_json_payload_shape(self):
        payload = json.loads(two_comp_1d().to_json())
        assert payload["dim"] == 1
        assert len(payload["components"]) == 2
        assert set(payload["components"][0]) == {
            "weight",
            "mean",
            "var_diag",
            "coarse_label",
            "fine_label",
        }


class TestPresets:
    def test_ring8_layout(self):
        g = ring8()
        assert g.n_components == 8
        np.testing.assert_allclose(np.linalg.norm(g.means, axis=1), 4.0, rtol=0, atol=1e-12)
        np.testing.assert_allclose(g.weights, 1 / 8, rtol=0, atol=1e-15)
        np.testing.assert_array_equal(g.var_diags, np.full((8, 2), 0.05))
        np.testing.assert_array_equal(g.coarse_labels, np.arange(8) % 4)
        np.testing.assert_array_equal(g.fine_labels, np.arange(8))

    def test_narrow2_is_ring8_subset(self):
        full, narrow = ring8(), narrow2()
        assert narrow.n_components == 2
        np.testing.assert_array_equal(narrow.means, full.means[:2])
        np.testing.assert_array_equal(narrow.fine_labels, [0, 1])
        np.testing.assert_allclose(narrow.weights, 0.5, rtol=0, atol=1e-15)

    def test_resolve_world_names(self):
        assert resolve_world("ring8").n_components == 8
        assert resolve_world("narrow2").n_components == 2
        with pytest.raises(InvalidParameterError):
            resolve_world("no_such_world")


class TestRestrict:
    def test_no_condition_is_identity(self):
        g = ring8()
        assert restrict(g, None, None) is g

    def test_fine_selects_single_component(self):
        r = restrict(ring8(), None, 5)
        assert r.n_components == 1
        np.testing.assert_array_equal(r.weights, [1.0])
        np.testing.assert_array_equal(r.means, ring8().means[5:6])

    def test_coarse_selects_pair(self):
        r = restrict(ring8(), 2, None)
        assert r.n_components == 2
        np.testing.assert_array_equal(r.fine_labels, [2, 6])

    def test_joint_condition(self):
        r = restrict(ring8(), 2, 6)
        assert r.n_components == 1
        assert r.fine_labels[0] == 6

    def test_empty_condition_rejected(self):
        with pytest.raises(EmptyConditionError):
            restrict(ring8(), 2, 5)  # component 5 has coarse label 1

    def test_restriction_is_proportional_at_means(self):
        """Restricted log-density differs from the full one by log(1/weight_sum)
        at the retained means, where cross-component leakage is negligible."""
        g = ring8()
        for fine in range(8):
            r = restrict(g, None, fine)
            m = g.means[fine]
            diff = log_density(r, m) - log_density(g, m)
            assert abs(diff - math.log(8.0)) < 1e-6

    def test_two_restrictions_merge_back(self):
        g = GaussianMixture(
            weights=np.array([0.5, 0.5]),
            means=np.array([[-4.0], [4.0]]),
            var_diags=np.array([[0.2], [0.2]]),
            coarse_labels=np.array([0, 1]),
            fine_labels=np.array([0, 1]),
        )
        halves = [restrict(g, c, None) for c in (0, 1)]
        merged = GaussianMixture(
            weights=np.concatenate([h.weights for h in halves]),
            means=np.vstack([h.means for h in halves]),
            var_diags=np.vstack([h.var_diags for h in halves]),
            coarse_labels=np.concatenate([h.coarse_labels for h in halves]),
            fine_labels=np.concatenate([h.fine_labels for h in halves]),
        )
        grid = np.linspace(-6, 6, 25).reshape(-1, 1)
        np.testing.assert_allclose(
            log_density(merged, grid), log_density(g, grid), rtol=0, atol=1e-12
        )


class TestMarginalAtT:
    def test_unchanged_at_alpha_bar_one(self):
        s = schedule_with_alpha_bars([1.0])
        m = marginal_at_t(two_comp_1d(), s, 0)
        np.testing.assert_array_equal(m.means, two_comp_1d().means)
        np.testing.assert_array_equal(m.var_diags, two_comp_1d().var_diags)

    def test_standard_normal_at_alpha_bar_zero(self):
        s = schedule_with_alpha_bars([0.0])
        m = marginal_at_t(ring8(), s, 0)
        np.testing.assert_allclose(m.means, 0.0, rtol=0, atol=1e-15)
        np.testing.assert_allclose(m.var_diags, 1.0, rtol=0, atol=1e-15)

    def test_hand_value_single_gaussian(self):
        s = build_schedule("linear", 1, 0.75, 0.75)  # alpha_bar = 0.25
        m = marginal_at_t(single_gaussian(4.0, 1.0), s, 0)
        np.testing.assert_allclose(m.means, [[2.0]], rtol=0, atol=1e-15)
        np.testing.assert_allclose(m.var_diags, [[1.0]], rtol=0, atol=1e-15)

    def test_monte_carlo_cross_check(self):
        """Empirical CDF of noised draws matches the analytic marginal (KS < 0.01)."""
        s = build_schedule("linear", 1, 0.75, 0.75)
        rng = np.random.default_rng(123)
        n = 100_000
        x0 = 4.0 + rng.standard_normal(n)
        x_t = np.sqrt(0.25) * x0 + np.sqrt(0.75) * rng.standard_normal(n)
        xs = np.sort(x_t)
        cdf = np.array([normal_cdf(x, 2.0, 1.0) for x in xs[:: n // 2000]])
        ecdf = np.arange(0, n, n // 2000) / n
        assert np.max(np.abs(ecdf - cdf)) < 0.01

    def test_terminal_marginal_near_standard_normal(self):
        """KL(marginal at final step || N(0, I)) below 1e-3 for the default schedule."""
        s = build_schedule("linear", 1000, 1e-4, 0.02)
        m = marginal_at_t(single_gaussian(4.0, 2.0), s, 999)
        mean, var = m.means[0, 0], m.var_diags[0, 0]
        kl = 0.5 * (var + mean**2 - 1.0 - math.log(var))
        assert kl < 1e-3


class TestLogDensity:
    def test_standard_normal_peak(self):
        g = single_gaussian(0.0, 1.0)
        assert abs(log_density(g, np.zeros(1)) - (-0.9189385332046727)) < 1e-15
        assert abs(log_density(g, np.zeros(1)) + 0.5 * math.log(2 * math.pi)) < 1e-15

    def test_matches_naive_sum_oracle(self):
        g = two_comp_1d()
        for x in (-3.0, -1.0, 0.0, 1.5, 4.0):
            total = 0.0
            for k in range(2):
                v = g.var_diags[k, 0]
                total += (
                    g.weights[k]
                    / math.sqrt(2 * math.pi * v)
                    * math.exp(-((x - g.means[k, 0]) ** 2) / (2 * v))
                )
            np.testing.assert_allclose(
                log_density(g, np.array([x])), math.log(total), rtol=1e-12
            )

    def test_duplicate_components_collapse(self):
        g = two_comp_1d()
        doubled = GaussianMixture(
            weights=np.concatenate([g.weights, g.weights]),
            means=np.vstack([g.means, g.means]),
            var_diags=np.vstack([g.var_diags, g.var_diags]),
            coarse_labels=np.concatenate([g.coarse_labels, g.coarse_labels]),
            fine_labels=np.concatenate([g.fine_labels, g.fine_labels]),
        )
        grid = np.linspace(-5, 5, 21).reshape(-1, 1)
        np.testing.assert_allclose(
            log_density(doubled, grid), log_density(g, grid), rtol=1e-12
        )

    def test_batch_matches_single(self):
        g = ring8()
        pts = np.random.default_rng(3).standard_normal((6, 2)) * 3
        batch = log_density(g, pts)
        singles = np.array([log_density(g, p) for p in pts])
        np.testing.assert_array_equal(batch, singles)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatchError):
            log_density(ring8(), np.zeros(3))


class TestExactEps:
    def test_single_standard_gaussian_closed_form(self):
        """For x0 ~ N(0, I) the marginal stays N(0, I), so eps*(x) = sqrt(1-ab)*x."""
        g = single_gaussian(0.0, 1.0, dim=2)
        s = build_schedule("linear", 1000, 1e-4, 0.02)
        rng = np.random.default_rng(5)
        for t in (0, 250, 999):
            x = rng.standard_normal(2) * 2
            expected = np.sqrt(1 - s.alpha_bars[t]) * x
            np.testing.assert_allclose(exact_eps(g, s, t, x), expected, rtol=0, atol=1e-12)

    def test_general_single_gaussian_closed_form(self):
        g = single_gaussian(3.0, 0.4)
        s = build_schedule("linear", 100, 1e-3, 0.05)
        t = 60
        ab = s.alpha_bars[t]
        x = np.array([1.2])
        var = ab * 0.4 + (1 - ab)
        expected = np.sqrt(1 - ab) * (x - np.sqrt(ab) * 3.0) / var
        np.testing.assert_allclose(exact_eps(g, s, t, x), expected, rtol=0, atol=1e-12)

    def test_symmetry_at_origin(self):
        s = build_schedule("linear", 1000, 1e-4, 0.02)
        out = exact_eps(ring8(), s, 500, np.zeros(2))
        np.testing.assert_allclose(out, 0.0, rtol=0, atol=1e-12)

    def test_matches_finite_difference_score(self):
        """eps = -sqrt(1-ab) * grad log p_t, checked against central differences."""
        g = two_comp_1d()
        s = build_schedule("linear", 200, 1e-4, 0.02)
        rng = np.random.default_rng(17)
        h = 1e-5
        for t in (0, 40, 120, 199):
            m = marginal_at_t(g, s, t)
            x = rng.standard_normal(1) * 2
            fd = (log_density(m, x + h) - log_density(m, x - h)) / (2 * h)
            expected = -np.sqrt(1 - s.alpha_bars[t]) * fd
            got = exact_eps(g, s, t, x)[0]
            assert abs(got - expected) < 1e-5 * max(1.0, abs(expected))

    def test_conditioning_filters_components(self):
        s = build_schedule("linear", 1000, 1e-4, 0.02)
        x = np.array([2.0, 1.0])
        via_kwargs = exact_eps(ring8(), s, 300, x, coarse=1, fine=5)
        via_restrict = exact_eps(restrict(ring8(), 1, 5), s, 300, x)
        np.testing.assert_array_equal(via_kwargs, via_restrict)

    def test_empty_condition_rejected(self):
        s = build_schedule("linear", 10, 1e-4, 0.02)
        with pytest.raises(EmptyConditionError):
            exact_eps(ring8(), s, 3, np.zeros(2), coarse=0, fine=1)

    def test_degenerate_time_rejected(self):
        s = schedule_with_alpha_bars([1.0])
        with pytest.raises(DegenerateTimeError):
            exact_eps(single_gaussian(0.0, 1.0), s, 0, np.zeros(1))

    def test_batch_matches_per_row(self):
        g = ring8()
        s = build_schedule("linear", 1000, 1e-4, 0.02)
        pts = np.random.default_rng(9).standard_normal((7, 2)) * 3
        batch = exact_eps(g, s, 400, pts)
        assert batch.shape == (7, 2)
        for i, p in enumerate(pts):
            np.testing.assert_array_equal(batch[i], exact_eps(g, s, 400, p))


class TestSample:
    def test_moments_single_gaussian(self):
        pts, _ = sample(single_gaussian(0.0, 1.0), 4000, 0)
        assert abs(pts.mean()) < 0.1
        assert abs(pts.var() - 1.0) < 0.15

    def test_shapes_and_labels(self):
        pts, labels = sample(ring8(), 100, 1)
        assert pts.shape == (100, 2)
        assert labels.shape == (100, 2)
        assert set(labels[:, 0]) <= set(range(4))
        assert set(labels[:, 1]) <= set(range(8))
        np.testing.assert_array_equal(labels[:, 0], labels[:, 1] % 4)

    def test_determinism(self):
        a, la = sample(ring8(), 50, 42)
        b, lb = sample(ring8(), 50, 42)
        np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(la, lb)

    def test_conditional_matches_restricted(self):
        a, _ = sample(ring8(), 64, 7, coarse=1, fine=None)
        b, _ = sample(restrict(ring8(), 1, None), 64, 7)
        np.testing.assert_array_equal(a, b)

    def test_ring8_mode_balance(self):
        pts, _ = sample(ring8(), 8000, 42)
        dists = np.linalg.norm(pts[:, None, :] - ring8().means[None], axis=2)
        counts = np.bincount(dists.argmin(axis=1), minlength=8)
        assert counts.sum() == 8000
        assert np.all(np.abs(counts - 1000) <= 150)

    def test_invalid_count(self):
        with pytest.raises(InvalidParameterError):
            sample(ring8(), 0, 0)
