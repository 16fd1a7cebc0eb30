"""Newton-Raphson mode finding for the latent path.

The optimization variable is s = [eps_1..eps_{T-1}, l_0].  Each Newton
step replaces every likelihood potential by its second-order Gaussian fit
at the current signal values and jumps to the posterior mean of the
resulting linear-Gaussian model, which one Kalman smoothing pass yields
in linear time.  A backtracking line search guards against overshoot; it
costs one likelihood sweep per trial because the image of the direction
under the path-to-signal map is precomputed.
"""

from dataclasses import dataclass

import numpy as np

from . import inference, kernels
from .errors import ConfigurationError, ModeFindingError
from .likelihood import CURVATURE_FLOOR, gaussianize

# The step sup-norm is the primary stopping criterion: a Newton step is a
# direct estimate of the remaining mode error, whereas the objective drop
# measures its square and goes quiet while the mode is still ~sqrt(tol)
# away, which is too loose for the outer gradients built on top of the
# mode.  The objective-based test stays as a stagnation escape only.
REL_F_TOL = 1e-13
STEP_TOL = 1e-11
MAX_ITERATIONS = 50
ARMIJO_C = 1e-4
# Near machine convergence the Armijo comparison pits two floats that
# agree to ~12 digits; without a roundoff allowance its outcome flips
# with the last bits of the inputs and the final Newton step is taken or
# dropped erratically.  The slack is invisible away from convergence.
ARMIJO_SLACK = 1e-14
BACKTRACK_FACTOR = 0.5
MAX_HALVINGS = 30
MIN_COUPLING = 1e-12

LOG_2PI = np.log(2.0 * np.pi)


@dataclass
class LatentPath:
    """The optimized variables: innovations and the initial state."""

    eps: np.ndarray
    l0: np.ndarray

    def copy(self):
        return LatentPath(self.eps.copy(), self.l0.copy())

    def axpy(self, alpha, other):
        return LatentPath(self.eps + alpha * other.eps,
                          self.l0 + alpha * other.l0)

    def sup_norm(self):
        m = abs(self.l0).max() if self.l0.size else 0.0
        if self.eps.size:
            m = max(m, abs(self.eps).max())
        return m


@dataclass
class ModeResult:
    path: LatentPath
    y_hat: np.ndarray
    f_value: float
    iterations: int
    converged: bool
    ztilde: np.ndarray        # Gaussianized observations at the mode
    obs_var: np.ndarray
    effective_mask: np.ndarray  # observed and not curvature-floored
    line_search_failed: bool = False


class InnerProblem:
    """Bundles everything the inner optimization needs for one series.

    Availability weights scale each observation's potential; days with
    mask False contribute nothing anywhere.
    """

    def __init__(self, coeffs, strengths, prior_mean, prior_std, likelihood,
                 lh_params, z, obs_mask=None, b=None, avail_weights=None):
        self.coeffs = coeffs
        self.strengths = np.asarray(strengths, dtype=float)
        self.prior_mean = np.asarray(prior_mean, dtype=float)
        self.prior_std = np.asarray(prior_std, dtype=float)
        self.likelihood = likelihood
        self.lh_params = tuple(lh_params)
        self.z = np.asarray(z)
        self.T, self.d = coeffs.a.shape[0], coeffs.a.shape[1]
        self.obs_mask = (np.ones(self.T, dtype=bool) if obs_mask is None
                         else np.asarray(obs_mask, dtype=bool))
        if not self.obs_mask.any():
            raise ModeFindingError("no observed days")
        self.b = np.zeros(self.T) if b is None else np.asarray(b, dtype=float)
        self.weights = (None if avail_weights is None
                        else np.asarray(avail_weights, dtype=float))
        self.g = (np.ascontiguousarray(coeffs.g(self.strengths)[: self.T - 1])
                  if self.T > 1 else np.zeros((0, self.d)))
        self._prior_const = (0.5 * (self.T - 1) * LOG_2PI
                            + np.sum(0.5 * np.log(2.0 * np.pi
                                                  * self.prior_std**2)))

    # -- maps ---------------------------------------------------------

    def y_of(self, path):
        return kernels.forward_map(self.coeffs.F, self.coeffs.a, self.g,
                                   path.eps, path.l0, self.b)

    def direction_image(self, direction):
        """M d: signal change per unit step along the direction (b-free)."""
        return kernels.forward_map(self.coeffs.F, self.coeffs.a, self.g,
                                   direction.eps, direction.l0,
                                   np.zeros(self.T))

    # -- objective ----------------------------------------------------

    def _weights_at(self, idx):
        return None if self.weights is None else self.weights[idx]

    def neg_loglik(self, y):
        """(sum of potentials on observed days, gradient wrt observed y)."""
        o = self.obs_mask
        phi, d1, _, _ = self.likelihood.phi_derivs(
            self.z[o], y[o], self.lh_params, self._weights_at(o))
        grad = np.zeros(self.T)
        grad[o] = d1
        if not np.all(np.isfinite(phi)):
            t = int(np.where(o)[0][int(np.argmax(~np.isfinite(phi)))])
            raise ModeFindingError(f"non-finite potential at t={t}")
        return float(phi.sum()), grad

    def neg_log_prior(self, path):
        r = (path.l0 - self.prior_mean) / self.prior_std
        return float(0.5 * (path.eps @ path.eps) + 0.5 * (r @ r)
                     + self._prior_const)

    def objective(self, path, y=None):
        if y is None:
            y = self.y_of(path)
        nll, grad_y = self.neg_loglik(y)
        return nll + self.neg_log_prior(path), grad_y

    # -- Newton machinery ----------------------------------------------

    def gaussianize_at(self, y):
        o = self.obs_mask
        zt = np.zeros(self.T)
        var = np.ones(self.T)
        eff = np.zeros(self.T, dtype=bool)
        zt_o, s2_o, ok_o = gaussianize(
            self.likelihood, self.z[o], y[o], self.lh_params,
            self._weights_at(o), floor=CURVATURE_FLOOR)
        zt[o] = np.where(ok_o, zt_o, 0.0)
        var[o] = np.where(ok_o, s2_o, 1.0)
        eff[o] = ok_o
        return zt, var, eff

    def smooth_gaussianized(self, ztilde, obs_var, eff_mask):
        return inference.smooth(self.coeffs, self.strengths, self.prior_mean,
                                self.prior_std, ztilde, np.sqrt(obs_var),
                                obs_mask=eff_mask, b=self.b)

    def newton_step(self, path, y=None):
        """Posterior mean of the Gaussianized model and the step towards it."""
        if y is None:
            y = self.y_of(path)
        zt, var, eff = self.gaussianize_at(y)
        res = self.smooth_gaussianized(zt, var, eff)
        proposed = LatentPath(res.eps_mean.copy(), res.l0_mean.copy())
        direction = LatentPath(proposed.eps - path.eps, proposed.l0 - path.l0)
        return direction, proposed

    def directional_derivative(self, path, direction, grad_y, md=None):
        """F'(0) along the direction, using the precomputed gradient at y."""
        if md is None:
            md = self.direction_image(direction)
        o = self.obs_mask
        val = float(md[o] @ grad_y[o])
        val += float(direction.eps @ path.eps)
        val += float(direction.l0 @ ((path.l0 - self.prior_mean)
                                     / self.prior_std**2))
        return val, md

    def line_search(self, path, y, f0, fprime0, direction, md):
        """Backtracking Armijo search; returns (alpha, new_f, new_y) or None."""
        if fprime0 >= 0.0:
            return None
        alpha = 1.0
        slack = ARMIJO_SLACK * max(1.0, abs(f0))
        for _ in range(MAX_HALVINGS):
            y_try = y + alpha * md
            trial = path.axpy(alpha, direction)
            try:
                nll, _ = self.neg_loglik(y_try)
                f_try = nll + self.neg_log_prior(trial)
            except ModeFindingError:
                f_try = np.inf
            if np.isfinite(f_try) and \
                    f_try <= f0 + ARMIJO_C * alpha * fprime0 + slack:
                return alpha, f_try, y_try
            alpha *= BACKTRACK_FACTOR
        return None

    # -- starting point -------------------------------------------------

    def initial_point(self):
        """Start where every signal value equals the flat target level.

        Requires the selector at t=1 to have a nonzero entry and every
        coupling a_{t+1}' g_t to be bounded away from zero; any model with
        a level component satisfies both.
        """
        a = self.coeffs.a
        j = int(np.argmax(np.abs(a[0])))
        if abs(a[0, j]) < MIN_COUPLING:
            raise ConfigurationError(
                "initial selector is zero; add a level component")
        ybar = self.likelihood.ml_latent(self.z[self.obs_mask])
        l0 = np.zeros(self.d)
        l0[j] = (ybar - self.b[0]) / a[0, j]
        eps = np.zeros(max(self.T - 1, 0))
        l = l0.copy()
        for t in range(1, self.T):
            drift = a[t] @ (self.coeffs.F @ l)
            coupling = float(a[t] @ self.g[t - 1])
            if abs(coupling) < MIN_COUPLING:
                raise ConfigurationError(
                    f"selector/innovation coupling vanishes at t={t}; "
                    "add a level component")
            eps[t - 1] = (ybar - self.b[t] - drift) / coupling
            l = self.coeffs.F @ l + self.g[t - 1] * eps[t - 1]
        return LatentPath(eps, l0)

    # -- driver ----------------------------------------------------------

    def find_mode(self, start=None, max_iterations=MAX_ITERATIONS):
        path = start.copy() if start is not None else self.initial_point()
        y = self.y_of(path)
        f_val, grad_y = self.objective(path, y)
        if not np.isfinite(f_val):
            raise ModeFindingError("non-finite objective at the starting point")
        converged = False
        ls_failed = False
        iterations = 0
        for _ in range(max_iterations):
            direction, proposed = self.newton_step(path, y)
            if direction.sup_norm() < STEP_TOL:
                converged = True
                break
            fprime0, md = self.directional_derivative(path, direction, grad_y)
            hit = self.line_search(path, y, f_val, fprime0, direction, md)
            if hit is None:
                # Numerically stuck: flat direction means we are done,
                # anything else is reported for the caller to handle.
                ls_failed = True
                converged = abs(fprime0) <= REL_F_TOL * max(1.0, abs(f_val))
                break
            alpha, f_new, y_new = hit
            if f_new > f_val + ARMIJO_SLACK * max(1.0, abs(f_val)):
                raise ModeFindingError("objective increased despite line search")
            iterations += 1
            path = path.axpy(alpha, direction)
            y = y_new
            rel_drop = max(f_val - f_new, 0.0) / max(1.0, abs(f_new))
            f_val = f_new
            _, grad_y = self.objective(path, y)
            if rel_drop < REL_F_TOL:
                converged = True
                break
        zt, var, eff = self.gaussianize_at(y)
        return ModeResult(path=path, y_hat=y, f_value=f_val,
                          iterations=iterations, converged=converged,
                          ztilde=zt, obs_var=var, effective_mask=eff,
                          line_search_failed=ls_failed)
