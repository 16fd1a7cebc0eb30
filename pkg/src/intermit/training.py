"""Outer maximum-likelihood training of the latent-state model.

The criterion is the Laplace surrogate psi(theta) = sum_t gamma_t
- log P(ztilde): find the posterior mode of the latent path, replace each
potential by its Gaussian fit there, and read the fitted model's marginal
likelihood off one filtering pass.  The gradient propagates through three
channels: (a) directly with the fits held fixed, (b) through the fit
quantities at a fixed mode, and (c) through the mode itself, which costs
exactly one extra smoothing pass regardless of how many parameters there
are.  The innovation-strength part of channel (a) is the one piece taken
by finite differences (with everything else pinned), which keeps it a
handful of cheap forward filters.

Everything here is deterministic: fixed data and options give bit-identical
fits.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from . import inference, kernels
from .errors import FitError, ModeFindingError, NumericalError
from .likelihood import (BernoulliLikelihood, PoissonLikelihood,
                         multi_stage_decompose)
from .modefind import InnerProblem, LatentPath
from .params import ParameterLayout

logger = logging.getLogger(__name__)

LOG_2PI = np.log(2.0 * np.pi)
REJECTION_VALUE = 1e15


@dataclass
class TrainingOptions:
    """Knobs for the outer optimization; defaults follow the module docs."""

    reg_rho: float = 1.0
    reg_rho_by_block: dict | None = None
    strength_center: float = 0.05
    sigma0_center: float = 1.0
    max_iterations: int = 55
    lbfgs_memory: int = 10
    grad_tol: float = 1e-5
    fallback_min_obs: int = 7
    fd_step: float = 1e-6
    max_rejections: int = 5


@dataclass
class FitDiagnostics:
    psi_trace: list = field(default_factory=list)
    grad_norm_trace: list = field(default_factory=list)
    rejections: int = 0
    optimizer_message: str = ""
    optimizer_iterations: int = 0


@dataclass
class StageFit:
    stage: int
    theta: np.ndarray
    fallback: bool
    n_obs: int
    psi: float | None = None
    diagnostics: FitDiagnostics = field(default_factory=FitDiagnostics)
    error: str | None = None

    @property
    def failed(self):
        return self.error is not None


@dataclass
class TrainedModel:
    """Per-stage parameters plus everything needed to rebuild the problems."""

    model: object                 # CompositeIssm
    likelihoods: tuple
    stages: list
    n_features: int
    multi_stage: bool

    def layout(self, k=0):
        return ParameterLayout(self.model, self.likelihoods[k], self.n_features)


class PsiProblem:
    """psi(theta) and its gradient for one series and one likelihood."""

    def __init__(self, model, likelihood, z, obs_mask=None, features=None,
                 availability=None, calendar=None, fd_step=1e-6):
        self.model = model
        self.likelihood = likelihood
        self.z = np.asarray(z)
        self.T = self.z.shape[0]
        self.coeffs = model.coefficients(self.T, calendar=calendar,
                                         train_len=self.T)
        self.obs_mask = (np.ones(self.T, dtype=bool) if obs_mask is None
                         else np.asarray(obs_mask, dtype=bool))
        self.features = None if features is None else np.asarray(features, dtype=float)
        self.avail = (None if availability is None
                      else np.asarray(availability, dtype=float))
        self.n_features = 0 if self.features is None else self.features.shape[1]
        self.layout = ParameterLayout(model, likelihood, self.n_features)
        self.fd_step = fd_step

    @property
    def n_obs(self):
        return int(self.obs_mask.sum())

    def inner_problem(self, params):
        b = None
        if self.n_features:
            b = self.features @ params.weights
        return InnerProblem(self.coeffs, params.strengths, params.mu0,
                            params.prior_std(self.layout), self.likelihood,
                            params.lh, self.z, obs_mask=self.obs_mask, b=b,
                            avail_weights=self.avail)

    def _gamma_terms(self, mode, params, o):
        w_o = None if self.avail is None else self.avail[o]
        phi_o, d1_o, d2_o, d3_o = self.likelihood.phi_derivs(
            self.z[o], mode.y_hat[o], params.lh, w_o)
        resid = mode.ztilde[o] - mode.y_hat[o]
        gamma = (phi_o - 0.5 * np.log(2.0 * np.pi * mode.obs_var[o])
                 - resid * resid / (2.0 * mode.obs_var[o]))
        return gamma, (phi_o, d1_o, d2_o, d3_o), w_o

    def evaluate(self, theta, need_grad=True):
        """Returns (psi, grad or None, aux dict)."""
        params = self.layout.decode(theta)
        inner = self.inner_problem(params)
        mode = inner.find_mode()
        o = mode.effective_mask
        if not o.any():
            raise ModeFindingError("every potential degenerated at the mode")
        smooth = inner.smooth_gaussianized(mode.ztilde, mode.obs_var, o)
        gamma, derivs, w_o = self._gamma_terms(mode, params, o)
        psi = float(gamma.sum() - smooth.loglik)
        aux = {"mode": mode, "smoothing": smooth, "params": params,
               "inner": inner}
        if not np.isfinite(psi):
            raise NumericalError("non-finite psi")
        if not need_grad:
            return psi, None, aux
        grad = self._gradient(theta, params, inner, mode, smooth, derivs, o)
        if not np.all(np.isfinite(grad)):
            raise NumericalError("non-finite gradient")
        return psi, grad, aux

    # -- gradient assembly ------------------------------------------------

    def _gradient(self, theta, params, inner, mode, smooth, derivs, o):
        lay = self.layout
        phi_o, d1_o, d2_o, d3_o = derivs
        yhat = mode.y_hat
        var_o = mode.obs_var[o]
        Ey = smooth.y_mean
        e1 = Ey[o] - yhat[o]
        e2 = 0.5 * (e1 * e1 + smooth.y_var[o])
        dpsi_dy = 0.5 * d3_o * ((yhat[o] - Ey[o]) ** 2 + smooth.y_var[o])

        # Channel (c): one posterior-mean computation against a zero-mean
        # prior, with targets sigma^2 * dpsi/dy at the same curvatures.
        zt_xi = np.zeros(self.T)
        zt_xi[o] = var_o * dpsi_dy
        prior_std = params.prior_std(lay)
        res_xi = inference.smooth(
            self.coeffs, params.strengths, np.zeros(lay.d), prior_std,
            zt_xi, np.sqrt(mode.obs_var), obs_mask=o)
        xi = LatentPath(res_xi.eps_mean.copy(), res_xi.l0_mean.copy())
        m_xi = inner.direction_image(xi)
        core = dpsi_dy - d2_o * m_xi[o]

        grad = np.zeros(lay.size)
        jac = lay.jacobians(theta)

        if lay.n_features:
            resid_info = (Ey[o] - mode.ztilde[o]) / var_o
            grad[lay.sl_weights] = self.features[o].T @ (resid_info + core)

        v0 = prior_std**2
        e0 = (smooth.l0_mean - params.mu0) / v0
        grad[lay.sl_mu0] = -e0 + xi.l0 / v0
        gv0 = (0.5 * (1.0 / v0 - e0 * e0 - smooth.l0_cov_diag / (v0 * v0))
               + xi.l0 * (mode.path.l0 - params.mu0) / (v0 * v0))
        gs0 = np.zeros(lay.n_sigma0)
        for si, coords in enumerate(self.model.sigma0_slots):
            gs0[si] = 2.0 * params.sigma0[si] * sum(gv0[c] for c in coords)
        grad[lay.sl_sigma0] = gs0 * jac["sigma0"]

        if lay.n_strengths:
            grad[lay.sl_strengths] = (
                self._strength_fd(theta, params, mode, o)
                + jac["strengths"] * self._strength_analytic(
                    mode, xi, o, core, d1_o))

        if lay.n_lh:
            dp, dp1, dp2 = self.likelihood.dphi_dparams(
                self.z[o], yhat[o], params.lh,
                None if self.avail is None else self.avail[o])
            glh = dp.sum(axis=1) + dp1 @ e1 + dp2 @ e2 - dp1 @ m_xi[o]
            grad[lay.sl_lh] = glh * jac["lh"]
        return grad

    def _strength_fd(self, theta, params, mode, o):
        """Channel (a) for the strengths: finite differences of the fitted
        model's marginal likelihood in raw coordinates, fits held fixed."""
        lay = self.layout
        h = self.fd_step
        prior_std = params.prior_std(lay)
        b = self.features @ params.weights if lay.n_features else None
        obs_std = np.sqrt(mode.obs_var)

        def neg_loglik(strengths):
            fwd = inference.forward_filter(
                self.coeffs, strengths, params.mu0, prior_std,
                mode.ztilde, obs_std, obs_mask=o, b=b)
            return -fwd.loglik

        out = np.zeros(lay.n_strengths)
        for j in range(lay.n_strengths):
            tp = theta.copy()
            tp[lay.sl_strengths][j] += h
            tm = theta.copy()
            tm[lay.sl_strengths][j] -= h
            sp = lay.decode(tp).strengths
            sm = lay.decode(tm).strengths
            out[j] = (neg_loglik(sp) - neg_loglik(sm)) / (2.0 * h)
        return out

    def _strength_analytic(self, mode, xi, o, core, d1_o):
        """Channels (b)+(c) for the strengths via sensitivity recursions."""
        lay = self.layout
        out = np.zeros(lay.n_strengths)
        Tm1 = max(self.T - 1, 0)
        for j in range(lay.n_strengths):
            gt = np.ascontiguousarray(self.coeffs.gtilde[j, :Tm1])
            dy = kernels.sensitivity_map(self.coeffs.F, self.coeffs.a, gt,
                                         mode.path.eps)
            dmxi = kernels.sensitivity_map(self.coeffs.F, self.coeffs.a, gt,
                                           xi.eps)
            out[j] = float(dy[o] @ core - d1_o @ dmxi[o])
        return out


def fit_stage(problem, options=None, stage=0):
    """L-BFGS over the raw encoding with quadratic regularization.

    Below the minimum number of observed days no optimization happens and
    the regularization center is returned with the fallback flag set.
    Inner failures at a trial point reject the step; repeated consecutive
    rejections abort the fit.
    """
    options = options or TrainingOptions()
    lay = problem.layout
    reg = lay.make_regularizer(rho=options.reg_rho,
                               center=lay.default_center(
                                   options.strength_center,
                                   options.sigma0_center),
                               rho_by_block=options.reg_rho_by_block)
    n_obs = problem.n_obs
    if n_obs < options.fallback_min_obs:
        logger.info("stage %d: %d observed days < %d, falling back",
                    stage, n_obs, options.fallback_min_obs)
        return StageFit(stage=stage, theta=reg.center.copy(), fallback=True,
                        n_obs=n_obs)

    diag = FitDiagnostics()
    state = {"consecutive": 0}

    def objective(theta):
        try:
            psi, grad, _ = problem.evaluate(theta, need_grad=True)
        except (NumericalError, ModeFindingError) as exc:
            state["consecutive"] += 1
            diag.rejections += 1
            if state["consecutive"] > options.max_rejections:
                raise FitError(
                    f"{state['consecutive']} consecutive inner failures; "
                    f"last: {exc}") from exc
            logger.debug("stage %d: rejected step (%s)", stage, exc)
            return REJECTION_VALUE + reg.value(theta), reg.grad(theta)
        state["consecutive"] = 0
        total_grad = grad + reg.grad(theta)
        diag.psi_trace.append(psi)
        diag.grad_norm_trace.append(float(np.abs(total_grad).max()))
        return psi + reg.value(theta), total_grad

    try:
        out = minimize(objective, reg.center, jac=True, method="L-BFGS-B",
                       options={"maxiter": options.max_iterations,
                                "maxcor": options.lbfgs_memory,
                                "gtol": options.grad_tol})
    except FitError as exc:
        return StageFit(stage=stage, theta=reg.center.copy(), fallback=True,
                        n_obs=n_obs, error=str(exc))
    diag.optimizer_message = str(out.message)
    diag.optimizer_iterations = int(out.nit)
    psi_final, _, _ = problem.evaluate(out.x, need_grad=False)
    return StageFit(stage=stage, theta=out.x.copy(), fallback=False,
                    n_obs=n_obs, psi=psi_final, diagnostics=diag)


def fit(model, likelihood, z, obs_mask=None, features=None, availability=None,
        calendar=None, options=None):
    """Single-stage training; returns a TrainedModel with one stage."""
    options = options or TrainingOptions()
    problem = PsiProblem(model, likelihood, z, obs_mask=obs_mask,
                         features=features, availability=availability,
                         calendar=calendar, fd_step=options.fd_step)
    stage = fit_stage(problem, options)
    n_feat = 0 if features is None else np.asarray(features).shape[1]
    return TrainedModel(model=model, likelihoods=(likelihood,),
                        stages=[stage], n_features=n_feat, multi_stage=False)


def stage_likelihoods(transfer):
    """The three emission-stage likelihood families."""
    return (BernoulliLikelihood(), BernoulliLikelihood(),
            PoissonLikelihood(transfer=transfer))


def fit_multi_stage(model, transfer, z, availability=None, features=None,
                    calendar=None, options=None):
    """Independent training of the three emission stages.

    Every stage runs over the full range with its non-active days treated
    as unobserved; failures in one stage never abort the others.
    """
    options = options or TrainingOptions()
    z = np.asarray(z)
    in_stock = None if availability is None else np.asarray(availability) > 0.0
    stages_data = multi_stage_decompose(z, in_stock)
    likelihoods = stage_likelihoods(transfer)
    fits = []
    for data, lik in zip(stages_data, likelihoods):
        try:
            problem = PsiProblem(model, lik, data.target,
                                 obs_mask=data.active, features=features,
                                 availability=availability, calendar=calendar,
                                 fd_step=options.fd_step)
            fits.append(fit_stage(problem, options, stage=data.stage))
        except (NumericalError, FitError) as exc:
            lay = ParameterLayout(model, lik,
                                  0 if features is None else features.shape[1])
            fits.append(StageFit(
                stage=data.stage, theta=lay.default_center(), fallback=True,
                n_obs=data.n_active, error=str(exc)))
    n_feat = 0 if features is None else np.asarray(features).shape[1]
    return TrainedModel(model=model, likelihoods=likelihoods, stages=fits,
                        n_features=n_feat, multi_stage=True)


def fit_feature_only(likelihood, z, features, obs_mask=None,
                     availability=None, lh_params=None, reg_rho=1.0):
    """Degenerate baseline: y_t = w' x_t with no latent state.

    Plain regularized maximum likelihood on the weights; the same
    likelihood families apply.  Returns the fitted weight vector.
    """
    z = np.asarray(z)
    X = np.asarray(features, dtype=float)
    T, p = X.shape
    mask = np.ones(T, dtype=bool) if obs_mask is None else np.asarray(obs_mask, bool)
    w_t = None if availability is None else np.asarray(availability, float)[mask]
    lh_params = tuple(lh_params or likelihood.param_centers)
    Xo, zo = X[mask], z[mask]

    def objective(w):
        y = Xo @ w
        phi, d1, _, _ = likelihood.phi_derivs(zo, y, lh_params, w_t)
        val = float(phi.sum()) + 0.5 * reg_rho * float(w @ w)
        grad = Xo.T @ d1 + reg_rho * w
        return val, grad

    out = minimize(objective, np.zeros(p), jac=True, method="L-BFGS-B",
                   options={"maxiter": 200, "gtol": 1e-7})
    return out.x
