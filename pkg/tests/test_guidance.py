"""Guidance combiners, source plumbing, and their closed-form oracles."""

import numpy as np
import pytest

from guidancelab import (
    GaussianMixture,
    GuidanceSpec,
    NoiseSource,
    build_schedule,
    cfg_noise,
    dual_cfg_noise,
    dual_replacement_cfg_noise,
    exact_eps,
    guided_eps,
    log_density,
    marginal_at_t,
    network_source,
    oracle_source,
    replacement_cfg_noise,
    restrict,
    ring8,
)
from guidancelab.denoiser import init_denoiser
from guidancelab.errors import DimensionMismatchError, InvalidParameterError
from conftest import single_gaussian

SCHED = build_schedule("linear", 1000, 1e-4, 0.02)


class TestCfgNoise:
    def test_gamma_one_returns_cond_exactly(self):
        u = np.array([0.3, -0.7])
        c = np.array([1.1, 0.2])
        out = cfg_noise(u, c, 1.0)
        np.testing.assert_array_equal(out, c)
        assert out is not c  # caller may mutate the result safely

    def test_gamma_zero_returns_uncond_exactly(self):
        u = np.array([0.3, -0.7])
        np.testing.assert_array_equal(cfg_noise(u, np.array([9.0, 9.0]), 0.0), u)

    def test_hand_value(self):
        out = cfg_noise(np.array([0.0, 0.0]), np.array([1.0, -1.0]), 2.0)
        np.testing.assert_array_equal(out, [2.0, -2.0])

    def test_dim_mismatch(self):
        with pytest.raises(DimensionMismatchError):
            cfg_noise(np.zeros(2), np.zeros(3), 1.5)


class TestReplacementCfgNoise:
    def test_gamma_one_cancels_prior_term(self):
        c = np.array([0.4, 0.5])
        for u in (np.zeros(2), np.array([100.0, -100.0])):
            np.testing.assert_array_equal(replacement_cfg_noise(u, c, 1.0), c)

    def test_degenerate_replacement_equals_cfg(self):
        u = np.array([0.2, -0.1])
        c = np.array([1.0, 2.0])
        for gamma in (0.0, 0.5, 3.0, 7.5):
            np.testing.assert_array_equal(
                replacement_cfg_noise(u, c, gamma), cfg_noise(u, c, gamma)
            )

    def test_difference_from_cfg_is_scaled_prior_gap(self):
        """cfg - replacement == (1-gamma) * (eps_ft_uncond - eps_base_uncond)."""
        rng = np.random.default_rng(0)
        e_base, e_ft, e_cond = rng.standard_normal((3, 2))
        gamma = 3.0
        diff = cfg_noise(e_ft, e_cond, gamma) - replacement_cfg_noise(e_base, e_cond, gamma)
        np.testing.assert_allclose(diff, (1 - gamma) * (e_ft - e_base), rtol=0, atol=1e-12)


class TestDualCfgNoise:
    def test_unit_gammas_return_e11_exactly(self):
        e00, e10, e11 = np.zeros(1), np.array([5.0]), np.array([-3.0])
        out = dual_cfg_noise(e00, e10, e11, 1.0, 1.0)
        np.testing.assert_array_equal(out, e11)
        assert out is not e11

    def test_gamma2_zero_collapses_to_single_condition(self):
        rng = np.random.default_rng(1)
        e00, e10, e11 = rng.standard_normal((3, 2))
        np.testing.assert_allclose(
            dual_cfg_noise(e00, e10, e11, 2.5, 0.0), cfg_noise(e00, e10, 2.5), atol=1e-12
        )

    def test_hand_value(self):
        out = dual_cfg_noise(np.array([0.0]), np.array([1.0]), np.array([3.0]), 1.5, 7.5)
        np.testing.assert_array_equal(out, [16.5])

    def test_dual_replacement_matches_when_priors_agree(self):
        rng = np.random.default_rng(2)
        e00, e10, e11 = rng.standard_normal((3, 2))
        np.testing.assert_array_equal(
            dual_replacement_cfg_noise(e00, e10, e11, 1.5, 7.5),
            dual_cfg_noise(e00, e10, e11, 1.5, 7.5),
        )

    def test_dual_replacement_unit_gammas_cancel(self):
        e11 = np.array([0.7, -0.2])
        out = dual_replacement_cfg_noise(np.array([9.0, 9.0]), np.array([-9.0, 0.0]), e11, 1.0, 1.0)
        np.testing.assert_array_equal(out, e11)


class TestAffineConsistency:
    """All four combiners are affine in each noise argument."""

    @pytest.mark.parametrize("arg_index", [0, 1])
    def test_cfg_superposition(self, arg_index):
        """Affine per slot: f(a*u + b*v, rest) = a*f(u) + b*f(v) - (a+b-1)*f(0, rest)."""
        rng = np.random.default_rng(3)
        a, b = 0.4, -1.7
        args1 = list(rng.standard_normal((2, 3)))
        args2 = list(rng.standard_normal((2, 3)))
        mixed = list(args1)
        mixed[arg_index] = a * args1[arg_index] + b * args2[arg_index]
        other = list(args1)
        other[arg_index] = args2[arg_index]
        zeroed = list(args1)
        zeroed[arg_index] = np.zeros(3)
        lhs = cfg_noise(*mixed, 2.5)
        rhs = (
            a * cfg_noise(*args1, 2.5)
            + b * cfg_noise(*other, 2.5)
            - (a + b - 1.0) * cfg_noise(*zeroed, 2.5)
        )
        np.testing.assert_allclose(lhs, rhs, rtol=0, atol=1e-12)

    @pytest.mark.parametrize("arg_index", [0, 1, 2])
    def test_dual_cfg_superposition(self, arg_index):
        rng = np.random.default_rng(4)
        a, b = 1.3, 0.6
        args1 = list(rng.standard_normal((3, 2)))
        args2 = list(rng.standard_normal((3, 2)))
        mixed = list(args1)
        mixed[arg_index] = a * args1[arg_index] + b * args2[arg_index]
        other = list(args1)
        other[arg_index] = args2[arg_index]
        zeroed = list(args1)
        zeroed[arg_index] = np.zeros(2)
        lhs = dual_cfg_noise(*mixed, 1.5, 7.5)
        rhs = (
            a * dual_cfg_noise(*args1, 1.5, 7.5)
            + b * dual_cfg_noise(*other, 1.5, 7.5)
            - (a + b - 1.0) * dual_cfg_noise(*zeroed, 1.5, 7.5)
        )
        np.testing.assert_allclose(lhs, rhs, rtol=0, atol=1e-12)


class TestNoiseSource:
    def test_oracle_source_matches_exact_eps(self):
        src = oracle_source(ring8(), SCHED, coarse=None, fine=3)
        x = np.array([1.0, 2.0])
        np.testing.assert_array_equal(src.eps(x, 400), exact_eps(ring8(), SCHED, 400, x, fine=3))

    def test_network_source_matches_predict(self):
        net = init_denoiser(2, 4, 8, SCHED, seed=0)
        src = network_source(net, coarse=1, fine=None)
        x = np.array([0.5, -0.5])
        from guidancelab.denoiser import predict_eps

        np.testing.assert_array_equal(src.eps(x, 10), predict_eps(net, x, 10, coarse=1))

    def test_exactly_one_backend_required(self):
        net = init_denoiser(2, 4, 8, SCHED, seed=0)
        with pytest.raises(InvalidParameterError):
            NoiseSource(kind="network", net=None, oracle_world=None, schedule=None)
        with pytest.raises(InvalidParameterError):
            NoiseSource(kind="oracle", net=net, oracle_world=ring8(), schedule=SCHED)
        with pytest.raises(InvalidParameterError):
            NoiseSource(kind="oracle", net=None, oracle_world=ring8(), schedule=None)

    def test_digest_distinguishes_sources(self):
        a = oracle_source(ring8(), SCHED, fine=1)
        b = oracle_source(ring8(), SCHED, fine=2)
        c = oracle_source(ring8(), SCHED, fine=1)
        assert a.digest() != b.digest()
        assert a.digest() == c.digest()
        net = init_denoiser(2, 4, 8, SCHED, seed=0)
        n1 = network_source(net, fine=1)
        n2 = network_source(net.clone(), fine=1)
        assert n1.digest() == n2.digest()
        net.weights[0][0, 0] += 1.0
        assert network_source(net, fine=1).digest() != n2.digest()


def make_cfg_spec(uncond, cond, gamma, mode="cfg", interval=None):
    return GuidanceSpec(mode=mode, sources={"uncond": uncond, "cond": cond}, gamma=gamma, interval=interval)


class TestGuidedEps:
    def test_aliased_sources_give_zero_guidance_direction(self):
        src = oracle_source(ring8(), SCHED, fine=2)
        x = np.array([2.5, 0.5])
        for gamma in (0.0, 1.0, 3.0, 7.5):
            out = guided_eps(make_cfg_spec(src, src, gamma), x, 300)
            np.testing.assert_allclose(out, src.eps(x, 300), rtol=0, atol=1e-12)

    def test_each_source_evaluated_once(self, monkeypatch):
        calls = []
        original = NoiseSource.eps

        def counting(self, x_t, t):
            calls.append(id(self))
            return original(self, x_t, t)

        monkeypatch.setattr(NoiseSource, "eps", counting)
        src = oracle_source(ring8(), SCHED, fine=2)
        guided_eps(make_cfg_spec(src, src, 3.0), np.zeros(2), 100)
        assert len(calls) == 1  # aliased uncond/cond collapse into one evaluation

        calls.clear()
        other = oracle_source(ring8(), SCHED, fine=None)
        guided_eps(make_cfg_spec(other, src, 3.0), np.zeros(2), 100)
        assert len(calls) == 2

    @pytest.mark.parametrize("gamma", [0.5, 1.0, 2.0, 5.0])
    def test_gamma_powered_gaussian_equal_variance(self, gamma):
        """CFG of two equal-variance Gaussian oracles equals the exact score of
        the gamma-powered distribution, itself a Gaussian with blended mean."""
        m_u, m_c, v = -1.0, 2.0, 0.8
        uncond = oracle_source(single_gaussian(m_u, v, dim=2), SCHED)
        cond = oracle_source(single_gaussian(m_c, v, dim=2), SCHED)
        blend = single_gaussian((1 - gamma) * m_u + gamma * m_c, v, dim=2)
        rng = np.random.default_rng(5)
        for t in (50, 500, 950):
            x = rng.standard_normal(2) * 2
            out = guided_eps(make_cfg_spec(uncond, cond, gamma), x, t)
            np.testing.assert_allclose(out, exact_eps(blend, SCHED, t, x), rtol=0, atol=1e-9)

    @pytest.mark.parametrize("gamma", [0.5, 2.0, 5.0])
    def test_gamma_powered_gaussian_unequal_variance(self, gamma):
        """With unequal variances the combined score is Gaussian with precision
        (1-gamma)/v_u + gamma/v_c at each time's marginal (positive here)."""
        m_u, v_u = -0.5, 1.4
        m_c, v_c = 1.5, 0.5
        uncond = oracle_source(single_gaussian(m_u, v_u), SCHED)
        cond = oracle_source(single_gaussian(m_c, v_c), SCHED)
        rng = np.random.default_rng(6)
        for t in (100, 600):
            ab = SCHED.alpha_bars[t]
            V_u = ab * v_u + (1 - ab)
            V_c = ab * v_c + (1 - ab)
            P = (1 - gamma) / V_u + gamma / V_c
            assert P > 0
            M_u, M_c = np.sqrt(ab) * m_u, np.sqrt(ab) * m_c
            M = ((1 - gamma) * M_u / V_u + gamma * M_c / V_c) / P
            x = rng.standard_normal(1)
            expected = np.sqrt(1 - ab) * (x - M) * P
            out = guided_eps(make_cfg_spec(uncond, cond, gamma), x, t)
            np.testing.assert_allclose(out, expected, rtol=0, atol=1e-9)

    def test_time_annealed_density_identity(self):
        """Replacement guidance equals -sqrt(1-ab) * grad of the annealed
        log-density (1-gamma)*log p_base + gamma*log p_cond, via central FD."""
        gamma = 3.0
        base_world = ring8()
        cond_world = restrict(ring8(), None, 2)
        spec = GuidanceSpec(
            mode="replacement_cfg",
            sources={
                "uncond": oracle_source(base_world, SCHED),
                "cond": oracle_source(cond_world, SCHED),
            },
            gamma=gamma,
        )
        rng = np.random.default_rng(7)
        h = 1e-5
        for t in (200, 700):
            ab = SCHED.alpha_bars[t]
            mb = marginal_at_t(base_world, SCHED, t)
            mc = marginal_at_t(cond_world, SCHED, t)
            x = rng.standard_normal(2) * 1.5

            def annealed(p):
                return (1 - gamma) * log_density(mb, p) + gamma * log_density(mc, p)

            grad = np.zeros(2)
            for d in range(2):
                e = np.zeros(2)
                e[d] = h
                grad[d] = (annealed(x + e) - annealed(x - e)) / (2 * h)
            expected = -np.sqrt(1 - ab) * grad
            out = guided_eps(spec, x, t)
            np.testing.assert_allclose(out, expected, rtol=1e-4, atol=1e-8)

    def test_gamma_one_modes_bit_identical(self):
        """At gamma=1 the unconditional slot cancels, so cfg and replacement
        produce the same bits no matter which prior fills it."""
        cond = oracle_source(ring8(), SCHED, fine=4)
        ft_uncond = oracle_source(ring8(), SCHED)
        base_uncond = oracle_source(single_gaussian(0.0, 1.0, dim=2), SCHED)
        x = np.array([-0.3, 1.7])
        a = guided_eps(make_cfg_spec(ft_uncond, cond, 1.0), x, 123)
        b = guided_eps(make_cfg_spec(base_uncond, cond, 1.0, mode="replacement_cfg"), x, 123)
        np.testing.assert_array_equal(a, b)

    def test_replacement_totality_on_grid(self):
        net = init_denoiser(2, 4, 8, SCHED, seed=1)
        for w in net.weights:
            w += 0.05
        spec = GuidanceSpec(
            mode="replacement_cfg",
            sources={
                "uncond": oracle_source(ring8(), SCHED),
                "cond": network_source(net, fine=3),
            },
            gamma=7.5,
        )
        xs = np.linspace(-6, 6, 10)
        for xi in xs:
            for yi in xs:
                out = guided_eps(spec, np.array([xi, yi]), 500)
                assert out.shape == (2,)
                assert np.all(np.isfinite(out))

    def test_dual_modes_dispatch(self):
        e00 = oracle_source(ring8(), SCHED)
        e10 = oracle_source(ring8(), SCHED, coarse=1)
        e11 = oracle_source(ring8(), SCHED, coarse=1, fine=5)
        spec = GuidanceSpec(
            mode="dual_cfg",
            sources={"uncond00": e00, "cond10": e10, "cond11": e11},
            gamma1=1.5,
            gamma2=7.5,
        )
        x = np.array([0.4, -2.0])
        t = 350
        expected = dual_cfg_noise(e00.eps(x, t), e10.eps(x, t), e11.eps(x, t), 1.5, 7.5)
        np.testing.assert_allclose(guided_eps(spec, x, t), expected, rtol=0, atol=1e-12)

        repl = GuidanceSpec(
            mode="dual_replacement_cfg",
            sources={
                "base_uncond": oracle_source(single_gaussian(0.0, 1.0, dim=2), SCHED),
                "cond10": e10,
                "cond11": e11,
            },
            gamma1=1.5,
            gamma2=7.5,
        )
        eb = repl.sources["base_uncond"].eps(x, t)
        expected_repl = dual_replacement_cfg_noise(eb, e10.eps(x, t), e11.eps(x, t), 1.5, 7.5)
        np.testing.assert_allclose(guided_eps(repl, x, t), expected_repl, rtol=0, atol=1e-12)

    def test_interval_mask(self):
        uncond = oracle_source(ring8(), SCHED)
        cond = oracle_source(ring8(), SCHED, fine=2)
        spec = make_cfg_spec(uncond, cond, 5.0, interval=(200, 800))
        x = np.array([1.0, 1.0])
        inside = guided_eps(spec, x, 500)
        np.testing.assert_allclose(
            inside, cfg_noise(uncond.eps(x, 500), cond.eps(x, 500), 5.0), atol=1e-12
        )
        for t in (0, 199, 801, 999):
            np.testing.assert_array_equal(guided_eps(spec, x, t), cond.eps(x, t))
        boundary = guided_eps(spec, x, 200)  # bounds are inclusive
        np.testing.assert_allclose(
            boundary, cfg_noise(uncond.eps(x, 200), cond.eps(x, 200), 5.0), atol=1e-12
        )


class TestGuidanceSpecValidation:
    def test_unknown_mode(self):
        with pytest.raises(InvalidParameterError):
            GuidanceSpec(mode="super_cfg", sources={}, gamma=1.0)

    def test_missing_source(self):
        with pytest.raises(InvalidParameterError):
            GuidanceSpec(mode="cfg", sources={"cond": oracle_source(ring8(), SCHED)}, gamma=1.0)

    def test_nonfinite_gamma(self):
        src = oracle_source(ring8(), SCHED)
        with pytest.raises(InvalidParameterError):
            make_cfg_spec(src, src, float("nan"))
        with pytest.raises(InvalidParameterError):
            GuidanceSpec(
                mode="dual_cfg",
                sources={"uncond00": src, "cond10": src, "cond11": src},
                gamma1=float("inf"),
                gamma2=1.0,
            )

    def test_bad_interval(self):
        src = oracle_source(ring8(), SCHED)
        with pytest.raises(InvalidParameterError):
            make_cfg_spec(src, src, 1.0, interval=(500, 100))

    def test_source_dim_disagreement(self):
        u = oracle_source(single_gaussian(0.0, 1.0, dim=1), SCHED)
        c = oracle_source(ring8(), SCHED)
        with pytest.raises(DimensionMismatchError):
            make_cfg_spec(u, c, 2.0)

    def test_digest_payload_tracks_gamma(self):
        src = oracle_source(ring8(), SCHED)
        p1 = make_cfg_spec(src, src, 2.0).digest_payload()
        p2 = make_cfg_spec(src, src, 3.0).digest_payload()
        assert p1 != p2
        assert p1 == make_cfg_spec(src, src, 2.0).digest_payload()
