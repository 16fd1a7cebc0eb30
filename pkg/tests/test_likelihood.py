"""Derivative, curvature, sampling, and staging checks for the likelihoods."""

import mpmath
import numpy as np
import pytest

from intermit import likelihood as lh
from intermit.errors import DataError


def central_diff(fun, y, h=1e-6):
    """First-order central difference of a scalar function."""
    f = lambda v: fun(np.array([v]))[0]
    return (f(y + h) - f(y - h)) / (2 * h)


class TestTransferFunctions:
    def test_twice_logistic_at_zero_is_log_two(self):
        for kappa in (0.0, 0.01, 0.5):
            tf = lh.TwiceLogisticTransfer(kappa=kappa)
            lam, _, _, _ = tf.eval(np.array([0.0]))
            assert lam[0] == pytest.approx(np.log(2.0), rel=1e-12)

    def test_logistic_deep_negative_no_underflow_artifacts(self):
        tf = lh.LogisticTransfer()
        lam, d1, d2, d3 = tf.eval(np.array([-40.0]))
        assert lam[0] == pytest.approx(np.exp(-40.0), rel=1e-10)
        assert lam[0] > 0.0 and np.isfinite([lam, d1, d2, d3]).all()

    def test_twice_logistic_matches_kappa_zero_logistic(self):
        y = np.linspace(-20, 20, 41)
        a = lh.TwiceLogisticTransfer(kappa=0.0).eval(y)
        b = lh.LogisticTransfer().eval(y)
        for ga, gb in zip(a, b):
            np.testing.assert_allclose(ga, gb, rtol=1e-12)

    def test_twice_logistic_against_arbitrary_precision(self):
        # High-precision oracle for the composite g(y (1 + kappa g(y))).
        mpmath.mp.dps = 50
        kappa = 0.01

        def mp_lambda(y):
            y = mpmath.mpf(y)
            g = lambda u: mpmath.log(1 + mpmath.exp(u))
            return g(y * (1 + kappa * g(y)))

        tf = lh.TwiceLogisticTransfer(kappa=kappa)
        for y0 in (-30.0, -5.0, 0.3, 7.0, 50.0):
            lam, d1, d2, d3 = (v[0] for v in tf.eval(np.array([y0])))
            ref = float(mp_lambda(y0))
            ref1 = float(mpmath.diff(mp_lambda, y0, 1))
            ref2 = float(mpmath.diff(mp_lambda, y0, 2))
            ref3 = float(mpmath.diff(mp_lambda, y0, 3))
            assert lam == pytest.approx(ref, rel=1e-10)
            assert d1 == pytest.approx(ref1, rel=1e-8)
            assert d2 == pytest.approx(ref2, rel=1e-6, abs=1e-12)
            assert d3 == pytest.approx(ref3, rel=1e-5, abs=1e-10)

    @pytest.mark.parametrize("kind,kappa", [
        ("exponential", None), ("logistic", None), ("twice_logistic", 0.01),
        ("twice_logistic", 0.3)])
    def test_inverse_round_trip(self, kind, kappa):
        tf = lh.make_transfer(kind, kappa=kappa or lh.DEFAULT_KAPPA)
        for lam in (0.05, 0.7, 4.0, 60.0):
            y = tf.inverse(lam)
            got = tf.eval(np.array([y]))[0][0]
            assert got == pytest.approx(lam, rel=1e-8)


class TestPhiDerivatives:
    @pytest.mark.parametrize("pot,params,targets", [
        (lh.GaussianLikelihood(), (0.7,), [-1.3, 0.0, 2.4]),
        (lh.BernoulliLikelihood(), (), [1.0, -1.0]),
        (lh.PoissonLikelihood(lh.LogisticTransfer()), (), [0.0, 1.0, 7.0]),
        (lh.PoissonLikelihood(lh.TwiceLogisticTransfer(0.01)), (), [0.0, 3.0, 26.0]),
        (lh.PoissonLikelihood(lh.ExponentialTransfer()), (), [0.0, 2.0]),
    ])
    def test_matches_finite_differences(self, pot, params, targets):
        # Each derivative is differenced against the next-lower analytic one.
        rng = np.random.default_rng(0)
        za = lambda z: np.array([z])
        for z in targets:
            for y in rng.uniform(-6, 6, size=5):
                phi, d1, d2, d3 = (v[0] for v in pot.phi_derivs(
                    za(z), np.array([y]), params))
                f1 = central_diff(lambda yy: pot.phi_derivs(za(z), yy, params)[0], y)
                f2 = central_diff(lambda yy: pot.phi_derivs(za(z), yy, params)[1], y)
                f3 = central_diff(lambda yy: pot.phi_derivs(za(z), yy, params)[2], y)
                assert d1 == pytest.approx(f1, rel=1e-6, abs=1e-8)
                assert d2 == pytest.approx(f2, rel=1e-6, abs=1e-8)
                assert d3 == pytest.approx(f3, rel=1e-6, abs=1e-8)

    def test_poisson_exponential_zero_target_closed_form(self):
        pot = lh.PoissonLikelihood(lh.ExponentialTransfer())
        y = np.array([-2.0, 0.5, 3.0])
        phi, d1, d2, d3 = pot.phi_derivs(np.zeros(3), y, ())
        ey = np.exp(y)
        np.testing.assert_allclose(phi, ey)
        np.testing.assert_allclose(d1, ey)
        np.testing.assert_allclose(d2, ey)
        np.testing.assert_allclose(d3, ey)

    def test_bernoulli_at_zero(self):
        pot = lh.BernoulliLikelihood()
        _, _, d2, d3 = pot.phi_derivs(np.array([1.0]), np.array([0.0]), ())
        assert d2[0] == pytest.approx(0.25, abs=1e-15)
        assert d3[0] == pytest.approx(0.0, abs=1e-15)

    def test_negative_poisson_target_rejected(self):
        pot = lh.PoissonLikelihood(lh.LogisticTransfer())
        with pytest.raises(DataError):
            pot.phi_derivs(np.array([-1.0]), np.array([0.0]), ())

    def test_log_concavity_on_grid(self):
        y = np.linspace(-50, 50, 201)
        pots = [
            (lh.BernoulliLikelihood(), [1.0, -1.0], ()),
            (lh.GaussianLikelihood(), [0.0, 3.0], (0.5,)),
            (lh.PoissonLikelihood(lh.TwiceLogisticTransfer(0.01)), [0, 2, 30], ()),
            (lh.PoissonLikelihood(lh.TwiceLogisticTransfer(0.0)), [0, 2, 30], ()),
            (lh.PoissonLikelihood(lh.TwiceLogisticTransfer(1.0)), [0, 2, 30], ()),
        ]
        for pot, zs, params in pots:
            for z in zs:
                d2 = pot.phi_derivs(np.full_like(y, z), y, params)[2]
                assert (d2 > 0).all(), f"{pot.kind} z={z}"

    def test_twice_logistic_curvature_band_for_large_y(self):
        # Curvature stays within a small multiple of kappa in the right
        # tail: bounded on the whole grid, near the 2*kappa asymptote once
        # y is large, exactly at it for zero targets.
        kappa = 0.01
        pot = lh.PoissonLikelihood(lh.TwiceLogisticTransfer(kappa))
        y = np.linspace(20, 50, 31)
        for z in range(0, 51, 5):
            d2 = pot.phi_derivs(np.full_like(y, z), y, ())[2]
            assert (d2 >= kappa).all()
            assert (d2 <= 16 * kappa).all()
        far = np.array([50.0])
        for z in range(0, 51, 5):
            d2 = pot.phi_derivs(np.array([float(z)]), far, ())[2]
            assert kappa <= d2[0] <= 6 * kappa
        d2_zero = pot.phi_derivs(np.zeros_like(y), y, ())[2]
        np.testing.assert_allclose(d2_zero, 2 * kappa, rtol=1e-3)

    def test_availability_weighting_scales_all_derivatives(self):
        pot = lh.PoissonLikelihood(lh.TwiceLogisticTransfer(0.01))
        z = np.array([0.0, 2.0, 5.0])
        y = np.array([-1.0, 0.5, 2.0])
        w = np.array([0.25, 0.5, 1.0])
        plain = pot.phi_derivs(z, y, ())
        weighted = pot.phi_derivs(z, y, (), weights=w)
        for pw, pp in zip(weighted, plain):
            np.testing.assert_allclose(pw, w * pp, rtol=1e-14)


class TestGaussianize:
    def test_gaussian_potential_exact(self):
        pot = lh.GaussianLikelihood()
        z = np.array([1.5, -0.3])
        for y in ([0.0, 0.0], [5.0, -7.0]):
            zt, s2, ok = lh.gaussianize(pot, z, np.array(y), (0.8,))
            np.testing.assert_allclose(zt, z, atol=1e-12)
            np.testing.assert_allclose(s2, 0.8, rtol=1e-14)
            assert ok.all()

    def test_twice_logistic_tail_variance_bounded(self):
        pot = lh.PoissonLikelihood(lh.TwiceLogisticTransfer(0.01))
        zt, s2, ok = lh.gaussianize(pot, np.array([0.0]), np.array([30.0]))
        assert ok[0]
        assert s2[0] <= 75.0

    def test_logistic_tail_variance_explodes(self):
        pot = lh.PoissonLikelihood(lh.LogisticTransfer())
        zt, s2, ok = lh.gaussianize(pot, np.array([0.0]), np.array([30.0]))
        assert (not ok[0]) or s2[0] > 1e10

    def test_floor_marks_unusable(self):
        pot = lh.BernoulliLikelihood()
        zt, s2, ok = lh.gaussianize(pot, np.array([1.0]), np.array([40.0]))
        assert not ok[0]
        assert np.isinf(s2[0])


class TestSampling:
    def test_bernoulli_saturation(self):
        pot = lh.BernoulliLikelihood()
        rng = np.random.default_rng(1)
        draws = pot.sample(np.full(1_000_000, 50.0), (), rng)
        assert (draws == 1.0).mean() > 1.0 - 1e-9

    def test_poisson_rate_four_mean(self):
        tf = lh.TwiceLogisticTransfer(0.01)
        pot = lh.PoissonLikelihood(tf)
        y = tf.inverse(4.0)
        rng = np.random.default_rng(2)
        draws = pot.sample(np.full(1_000_000, y), (), rng)
        assert draws.mean() == pytest.approx(4.0, abs=0.02)

    def test_gaussian_variance(self):
        pot = lh.GaussianLikelihood()
        rng = np.random.default_rng(3)
        v = 2.3
        draws = pot.sample(np.zeros(1_000_000), (v,), rng)
        assert draws.var() == pytest.approx(v, rel=0.03)


class TestMultiStage:
    def test_worked_example(self):
        stages = lh.multi_stage_decompose(np.array([0, 1, 3]))
        s0, s1, s2 = stages
        np.testing.assert_array_equal(s0.target, [1.0, -1.0, -1.0])
        np.testing.assert_array_equal(s0.active, [True, True, True])
        np.testing.assert_array_equal(s1.active, [False, True, True])
        np.testing.assert_array_equal(s1.target[s1.active], [1.0, -1.0])
        np.testing.assert_array_equal(s2.active, [False, False, True])
        np.testing.assert_array_equal(s2.target[s2.active], [1.0])

    def test_all_zero_series_leaves_upper_stages_empty(self):
        stages = lh.multi_stage_decompose(np.zeros(10, dtype=int))
        assert stages[0].n_active == 10
        assert stages[1].n_active == 0
        assert stages[2].n_active == 0

    def test_out_of_stock_excluded_everywhere(self):
        z = np.array([5, 0, 2])
        stock = np.array([True, False, True])
        stages = lh.multi_stage_decompose(z, stock)
        for st in stages:
            assert not st.active[1]

    def test_pmf_sums_to_one(self):
        tf = lh.TwiceLogisticTransfer(0.01)
        z = np.arange(0, 400)
        p = lh.multi_stage_pmf(z, 0.3, -0.5, tf.inverse(3.0), tf)
        assert p.sum() == pytest.approx(1.0, abs=1e-10)
