"""Newton mode finding: dense equivalence, line search, initialization."""

import numpy as np
import pytest

from intermit import issm, likelihood as lh
from intermit.errors import ConfigurationError
from intermit.modefind import InnerProblem, LatentPath

import oracles


def poisson_problem(rng, T=12, with_season=False, mask=None, b=None):
    comps = [issm.make_level()]
    cal = None
    if with_season:
        pat = issm.SeasonalityPattern(num_atomic=7, cycle_length=7)
        comps.append(issm.make_seasonality(pat))
        cal = {"seasonal": np.arange(T) % 7}
    model = issm.compose(comps)
    coeffs = model.coefficients(T, calendar=cal)
    strengths = [0.4] + ([0.3] if with_season else [])
    pot = lh.PoissonLikelihood(lh.TwiceLogisticTransfer(0.01))
    z = rng.poisson(2.0, size=T).astype(float)
    prob = InnerProblem(coeffs, strengths, np.zeros(model.total_dim),
                        np.ones(model.total_dim), pot, (), z,
                        obs_mask=mask, b=b)
    return prob


def path_vec(path):
    return np.concatenate([path.eps, path.l0])


def vec_path(v, T, d):
    return LatentPath(v[:T - 1].copy(), v[T - 1:].copy())


def dense_pieces(prob):
    M = oracles.path_design_matrix(prob.coeffs.F, prob.coeffs.a, prob.g, prob.T)
    pm, pv = oracles.prior_moments(prob.prior_mean, prob.prior_std**2, prob.T)
    return M, pm, pv


class TestObjective:
    def test_gaussian_closed_form(self):
        T = 6
        model = issm.compose([issm.make_level()])
        coeffs = model.coefficients(T)
        pot = lh.GaussianLikelihood()
        prob = InnerProblem(coeffs, [0.5], np.zeros(1), np.ones(1), pot,
                            (1.0,), np.zeros(T))
        path = LatentPath(np.zeros(T - 1), np.zeros(1))
        f, _ = prob.objective(path)
        # Likelihood: T/2 log 2pi; eps prior: (T-1)/2 log 2pi; l0 prior:
        # half log 2pi.  All quadratic terms vanish at zero.
        expect = 0.5 * (T + (T - 1) + 1) * np.log(2 * np.pi)
        assert f == pytest.approx(expect, rel=1e-12)

    def test_missing_day_value_is_ignored(self):
        rng = np.random.default_rng(0)
        prob = poisson_problem(rng, T=10,
                               mask=np.array([1, 1, 0, 1, 1, 1, 0, 1, 1, 1],
                                             dtype=bool))
        path = LatentPath(rng.normal(size=9), rng.normal(size=1))
        f1, _ = prob.objective(path)
        prob.z = prob.z.copy()
        prob.z[2] = 999.0
        f2, _ = prob.objective(path)
        assert f1 == f2

    def test_mode_is_a_minimum(self):
        rng = np.random.default_rng(1)
        prob = poisson_problem(rng, T=15)
        res = prob.find_mode()
        assert res.converged
        for _ in range(100):
            pert = LatentPath(res.path.eps + rng.normal(scale=1e-2, size=14),
                              res.path.l0 + rng.normal(scale=1e-2, size=1))
            f, _ = prob.objective(pert)
            assert f >= res.f_value - 1e-12


class TestNewtonStep:
    def test_gaussian_one_step_exact(self):
        rng = np.random.default_rng(2)
        T = 10
        model = issm.compose([issm.make_level()])
        coeffs = model.coefficients(T)
        pot = lh.GaussianLikelihood()
        prob = InnerProblem(coeffs, [0.5], np.array([0.3]), np.ones(1), pot,
                            (0.7,), rng.normal(size=T))
        res = prob.find_mode()
        assert res.converged
        assert res.iterations == 1
        d2, _ = prob.newton_step(res.path)
        assert d2.sup_norm() < 1e-10

    @pytest.mark.parametrize("seed", range(6))
    def test_matches_dense_hessian_solve(self, seed):
        rng = np.random.default_rng(seed)
        T = int(rng.integers(5, 15))
        prob = poisson_problem(rng, T=T, with_season=(seed % 2 == 0))
        d = prob.d
        path = LatentPath(rng.normal(scale=0.5, size=T - 1),
                          rng.normal(scale=0.5, size=d))
        direction, proposed = prob.newton_step(path)

        M, pm, pv = dense_pieces(prob)
        y = prob.y_of(path)
        _, d1, d2, _ = prob.likelihood.phi_derivs(prob.z, y, ())
        ref = oracles.dense_newton_step(M, pm, pv, np.where(prob.obs_mask)[0],
                                        d1, d2, path_vec(path))
        np.testing.assert_allclose(path_vec(proposed), ref, rtol=1e-6, atol=1e-6)

    def test_curvature_floored_rows_match_deleted_oracle(self):
        rng = np.random.default_rng(11)
        T = 8
        model = issm.compose([issm.make_level()])
        coeffs = model.coefficients(T)
        pot = lh.BernoulliLikelihood()
        z = np.where(rng.random(T) > 0.5, 1.0, -1.0)
        prob = InnerProblem(coeffs, [0.4], np.zeros(1), np.ones(1), pot, (), z)
        # A path pushing one signal deep into the flat tail.
        eps = np.zeros(T - 1)
        eps[2] = 200.0
        path = LatentPath(eps, np.array([0.0]))
        y = prob.y_of(path)
        _, var, eff = prob.gaussianize_at(y)
        assert not eff.all()
        direction, proposed = prob.newton_step(path)
        M, pm, pv = dense_pieces(prob)
        _, d1, d2, _ = pot.phi_derivs(z, y, ())
        ref = oracles.dense_newton_step(M, pm, pv, np.where(eff)[0],
                                        d1, d2, path_vec(path))
        np.testing.assert_allclose(path_vec(proposed), ref, rtol=1e-6, atol=1e-6)


class TestLineSearch:
    def test_quadratic_accepts_full_step(self):
        rng = np.random.default_rng(3)
        T = 8
        model = issm.compose([issm.make_level()])
        coeffs = model.coefficients(T)
        pot = lh.GaussianLikelihood()
        prob = InnerProblem(coeffs, [0.5], np.zeros(1), np.ones(1),
                            pot, (1.0,), rng.normal(size=T))
        path = prob.initial_point()
        y = prob.y_of(path)
        f0, grad_y = prob.objective(path, y)
        direction, _ = prob.newton_step(path, y)
        fp0, md = prob.directional_derivative(path, direction, grad_y)
        hit = prob.line_search(path, y, f0, fp0, direction, md)
        assert hit is not None and hit[0] == 1.0

    def test_derivative_matches_finite_difference(self):
        rng = np.random.default_rng(4)
        prob = poisson_problem(rng, T=12)
        path = LatentPath(rng.normal(size=11), rng.normal(size=1))
        direction = LatentPath(rng.normal(size=11), rng.normal(size=1))
        y = prob.y_of(path)
        _, grad_y = prob.objective(path, y)
        fp0, md = prob.directional_derivative(path, direction, grad_y)

        def f_alpha(al):
            return prob.objective(path.axpy(al, direction))[0]

        h = 1e-6
        ref = (f_alpha(h) - f_alpha(-h)) / (2 * h)
        assert fp0 == pytest.approx(ref, rel=1e-6, abs=1e-8)

    def test_manufactured_overshoot_backtracks(self):
        rng = np.random.default_rng(5)
        prob = poisson_problem(rng, T=12)
        path = prob.initial_point()
        y = prob.y_of(path)
        f0, grad_y = prob.objective(path, y)
        direction, _ = prob.newton_step(path, y)
        big = LatentPath(10.0 * direction.eps, 10.0 * direction.l0)
        fp0, md = prob.directional_derivative(path, big, grad_y)
        hit = prob.line_search(path, y, f0, fp0, big, md)
        assert hit is not None
        alpha, f_new, _ = hit
        assert alpha < 1.0
        assert f_new < f0


class TestInitialPoint:
    def test_flat_signal_by_construction(self):
        rng = np.random.default_rng(6)
        prob = poisson_problem(rng, T=20, with_season=True,
                               b=rng.normal(size=20))
        path = prob.initial_point()
        y = prob.y_of(path)
        np.testing.assert_allclose(y, y[0], atol=1e-9)

    def test_poisson_level_solves_rate(self):
        rng = np.random.default_rng(7)
        prob = poisson_problem(rng, T=30)
        path = prob.initial_point()
        y = prob.y_of(path)
        lam = prob.likelihood.transfer.eval(y[:1])[0][0]
        assert lam == pytest.approx(max(prob.z.mean(), 1e-8), rel=1e-6)

    def test_all_zero_targets_use_default(self):
        rng = np.random.default_rng(8)
        prob = poisson_problem(rng, T=10)
        prob.z = np.zeros(10)
        path = prob.initial_point()
        assert np.isfinite(path_vec(path)).all()
        y = prob.y_of(path)
        lam = prob.likelihood.transfer.eval(y[:1])[0][0]
        assert lam == pytest.approx(1.0, rel=1e-6)

    def test_pure_seasonality_rejected(self):
        # Coupling a_{t+1}' g_t vanishes whenever consecutive steps use
        # different factors.
        pat = issm.SeasonalityPattern(num_atomic=7, cycle_length=7)
        model = issm.compose([issm.make_seasonality(pat)])
        T = 10
        coeffs = model.coefficients(T, calendar={"seasonal": np.arange(T) % 7})
        pot = lh.GaussianLikelihood()
        prob = InnerProblem(coeffs, [0.4], np.zeros(7), np.ones(7), pot,
                            (1.0,), np.zeros(T))
        with pytest.raises(ConfigurationError):
            prob.initial_point()


class TestFindMode:
    def test_monotone_descent_and_gradient_at_mode(self):
        rng = np.random.default_rng(9)
        prob = poisson_problem(rng, T=18, with_season=True)
        res = prob.find_mode()
        assert res.converged
        # Finite-difference gradient at the mode is ~0.
        v0 = path_vec(res.path)
        grad = oracles.finite_diff(
            lambda v: prob.objective(vec_path(v, prob.T, prob.d))[0], v0,
            h=1e-5)
        assert np.abs(grad).max() < 1e-6

    def test_restart_independence(self):
        rng = np.random.default_rng(10)
        prob = poisson_problem(rng, T=25)
        modes = []
        for s in range(5):
            r = np.random.default_rng(100 + s)
            start = LatentPath(r.normal(scale=0.5, size=24),
                               r.normal(scale=0.5, size=1))
            res = prob.find_mode(start=start)
            assert res.converged
            modes.append(path_vec(res.path))
        for v in modes[1:]:
            np.testing.assert_allclose(v, modes[0], atol=1e-6)

    def test_bursty_series_converge_quickly(self):
        failures = 0
        for seed in range(40):
            rng = np.random.default_rng(seed)
            T = 300
            z = np.zeros(T)
            bursts = rng.integers(0, T, size=10)
            z[bursts] = rng.poisson(20, size=10)
            model = issm.compose([issm.make_level()])
            coeffs = model.coefficients(T)
            pot = lh.PoissonLikelihood(lh.TwiceLogisticTransfer(0.01))
            prob = InnerProblem(coeffs, [0.3], np.zeros(1), np.ones(1),
                                pot, (), z)
            res = prob.find_mode()
            if not (res.converged and res.iterations <= 30):
                failures += 1
        assert failures == 0

    def test_availability_weights_enter_objective(self):
        rng = np.random.default_rng(12)
        prob = poisson_problem(rng, T=10)
        w = np.full(10, 0.5)
        probw = InnerProblem(prob.coeffs, prob.strengths, prob.prior_mean,
                             prob.prior_std, prob.likelihood, (), prob.z,
                             avail_weights=w)
        path = LatentPath(rng.normal(size=9), rng.normal(size=1))
        f_full, _ = prob.objective(path)
        f_half, _ = probw.objective(path)
        nll_full = f_full - prob.neg_log_prior(path)
        nll_half = f_half - probw.neg_log_prior(path)
        assert nll_half == pytest.approx(0.5 * nll_full, rel=1e-12)
