"""Raw-parameter encoding: round trips, jacobians, regularizer."""

import numpy as np
import pytest

from intermit import issm
from intermit.errors import ConfigurationError
from intermit.likelihood import GaussianLikelihood, PoissonLikelihood
from intermit.params import ModelParams, ParameterLayout

import oracles


def layout_for(n_features=2, likelihood=None):
    pat = issm.SeasonalityPattern(num_atomic=7, cycle_length=7)
    model = issm.compose([issm.make_level(), issm.make_level_trend(),
                          issm.make_seasonality(pat)])
    return ParameterLayout(model, likelihood or GaussianLikelihood(),
                           n_features)


class TestRoundTrip:
    def test_decode_encode_identity(self):
        lay = layout_for()
        rng = np.random.default_rng(0)
        for _ in range(20):
            theta = rng.normal(size=lay.size)
            params = lay.decode(theta)
            back = lay.encode(params)
            np.testing.assert_allclose(back, theta, rtol=1e-10, atol=1e-12)

    def test_encode_decode_identity_on_values(self):
        lay = layout_for()
        params = ModelParams(
            weights=np.array([0.5, -1.0]),
            strengths=np.array([0.3, 0.2, 0.6, 0.4]),
            mu0=np.linspace(-1, 1, lay.d),
            sigma0=np.array([0.7, 1.2, 0.5, 2.0]),
            lh=(0.9,),
        )
        out = lay.decode(lay.encode(params))
        np.testing.assert_allclose(out.weights, params.weights, atol=1e-12)
        np.testing.assert_allclose(out.strengths, params.strengths, atol=1e-12)
        np.testing.assert_allclose(out.mu0, params.mu0, atol=1e-12)
        np.testing.assert_allclose(out.sigma0, params.sigma0, atol=1e-12)
        np.testing.assert_allclose(out.lh, params.lh, atol=1e-12)

    def test_bounds_respected_everywhere(self):
        lay = layout_for()
        rng = np.random.default_rng(1)
        for _ in range(50):
            theta = rng.normal(scale=8.0, size=lay.size)
            p = lay.decode(theta)
            for val, (lo, hi) in zip(p.strengths, lay.strength_bounds):
                assert lo < val < hi
            assert (p.sigma0 > 0).all()
        # Deep saturation can only pin to the closed interval in floats.
        p = lay.decode(np.full(lay.size, 60.0))
        for val, (lo, hi) in zip(p.strengths, lay.strength_bounds):
            assert lo <= val <= hi

    def test_out_of_range_strength_rejected(self):
        lay = layout_for()
        params = lay.decode(np.zeros(lay.size))
        params.strengths[0] = 5.0
        with pytest.raises(ConfigurationError):
            lay.encode(params)


class TestJacobians:
    def test_matches_finite_differences(self):
        lay = layout_for(likelihood=GaussianLikelihood())
        rng = np.random.default_rng(2)
        theta = rng.normal(size=lay.size)
        jac = lay.jacobians(theta)
        h = 1e-6

        def strength_j(i, t):
            tp = theta.copy()
            tp[lay.sl_strengths][i] = t
            return lay.decode(tp).strengths[i]

        for i in range(lay.n_strengths):
            t0 = theta[lay.sl_strengths][i]
            ref = (strength_j(i, t0 + h) - strength_j(i, t0 - h)) / (2 * h)
            assert jac["strengths"][i] == pytest.approx(ref, rel=1e-6)
        for i in range(lay.n_sigma0):
            tp = theta.copy()
            tp[lay.sl_sigma0][i] += h
            tm = theta.copy()
            tm[lay.sl_sigma0][i] -= h
            ref = (lay.decode(tp).sigma0[i] - lay.decode(tm).sigma0[i]) / (2 * h)
            assert jac["sigma0"][i] == pytest.approx(ref, rel=1e-6)


class TestPriorStdMapping:
    def test_seasonal_sigma_shared(self):
        lay = layout_for()
        params = lay.decode(np.zeros(lay.size))
        std = params.prior_std(lay)
        assert std.shape == (lay.d,)
        # Level: coord 0; trend: 1, 2; seasonality shares one slot: 3..9.
        assert len(set(std[3:])) == 1


class TestDefaultsAndRegularizer:
    def test_default_center_decodes_to_documented_values(self):
        lay = layout_for()
        p = lay.decode(lay.default_center())
        np.testing.assert_allclose(p.strengths, 0.05, atol=1e-12)
        np.testing.assert_allclose(p.sigma0, 1.0, atol=1e-12)
        np.testing.assert_allclose(p.mu0, 0.0, atol=1e-12)
        np.testing.assert_allclose(p.weights, 0.0, atol=1e-12)
        np.testing.assert_allclose(p.lh, (1.0,), atol=1e-12)

    def test_regularizer_value_and_grad(self):
        lay = layout_for()
        reg = lay.make_regularizer(rho=2.0)
        rng = np.random.default_rng(3)
        theta = rng.normal(size=lay.size)
        d = theta - reg.center
        assert reg.value(theta) == pytest.approx(np.sum(d * d))
        np.testing.assert_allclose(reg.grad(theta), 2.0 * d)
        fd = oracles.finite_diff(reg.value, theta, h=1e-6)
        np.testing.assert_allclose(reg.grad(theta), fd, atol=1e-7)

    def test_block_override(self):
        lay = layout_for()
        reg = lay.make_regularizer(rho=1.0, rho_by_block={"weights": 0.0})
        assert (reg.rho[lay.sl_weights] == 0.0).all()
        assert (reg.rho[lay.sl_strengths] == 1.0).all()

    def test_names_cover_all_coordinates(self):
        lay = layout_for()
        assert len(lay.names) == lay.size
