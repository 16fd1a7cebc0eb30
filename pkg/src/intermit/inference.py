"""Gaussian posterior inference for the composite model via the SRIF.

The filter itself works on centred observations (deterministic offsets
b_t are subtracted before filtering and added back onto the smoothed
signal moments afterwards, including at missing positions).  Missing
observations simply skip the conditioning row and contribute nothing to
the marginal log likelihood.

Optionally the feature weights join the latent state ("weight mode"),
giving their exact posterior after the forward pass alone.
"""

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import NumericalError


@dataclass
class GaussianMessage:
    """Stochastic equation system R x = c, c ~ N(mean, diag(std^2))."""

    R: np.ndarray
    mean: np.ndarray
    std: np.ndarray

    @property
    def dim(self):
        return self.mean.shape[0]

    def state_mean(self):
        return kernels.solve_unit_upper(self.R, self.mean)

    def cov(self):
        Rinv = np.linalg.inv(self.R)
        return Rinv @ np.diag(self.std**2) @ Rinv.T

    def sample(self, rng, size=None):
        """Draw states by sampling the RHS and back-substituting."""
        if size is None:
            c = self.mean + self.std * rng.standard_normal(self.dim)
            return kernels.solve_unit_upper(self.R, c)
        out = np.empty((size, self.dim))
        for i in range(size):
            c = self.mean + self.std * rng.standard_normal(self.dim)
            out[i] = kernels.solve_unit_upper(self.R, c)
        return out


@dataclass
class ForwardState:
    """Everything produced by the forward pass."""

    R: np.ndarray             # (T, J, J) messages q_{t+1}(l_t [, w])
    mean: np.ndarray          # (T, J)
    std: np.ndarray           # (T, J)
    k: np.ndarray             # (T-1, d) innovation-given-state coefficients
    q: np.ndarray             # (T-1, p) weight coefficients (weight mode)
    m_eps: np.ndarray         # (T-1,)
    v_eps: np.ndarray         # (T-1,)
    pred_mean: np.ndarray     # (T,) one-step predictive mean of centred obs
    pred_std: np.ndarray      # (T,)
    loglik: float
    state_dim: int
    n_weights: int

    def final_message(self):
        return GaussianMessage(self.R[-1].copy(), self.mean[-1].copy(),
                               self.std[-1].copy())

    def weight_message(self):
        d = self.state_dim
        if self.n_weights == 0:
            return None
        return GaussianMessage(self.R[-1, d:, d:].copy(),
                               self.mean[-1, d:].copy(),
                               self.std[-1, d:].copy())


@dataclass
class SmoothingResult:
    """Posterior summaries given all observations."""

    eps_mean: np.ndarray      # (T-1,)
    eps_var: np.ndarray       # (T-1,)
    l0_mean: np.ndarray       # (d,)
    l0_cov_diag: np.ndarray   # (d,)
    y_mean: np.ndarray        # (T,) includes the offset b
    y_var: np.ndarray         # (T,)
    loglik: float
    final_state: GaussianMessage
    weights_mean: np.ndarray | None = None
    weights_cov_diag: np.ndarray | None = None
    weights_message: GaussianMessage | None = None
    smoothed: object = None   # (Rs, ms, ss) triples, kept for diagnostics


def _as_mask(obs_mask, T):
    if obs_mask is None:
        return np.ones(T, dtype=np.uint8)
    m = np.asarray(obs_mask)
    if m.dtype != np.uint8:
        m = m.astype(bool).astype(np.uint8)
    return m


def _validate(name, arr):
    if not np.all(np.isfinite(arr)):
        bad = int(np.argmax(~np.isfinite(np.asarray(arr).ravel())))
        raise NumericalError(f"non-finite value in {name} (flat index {bad})")


def forward_filter(coeffs, strengths, prior_mean, prior_std, ztilde, obs_std,
                   obs_mask=None, b=None, x=None, weight_prior=None):
    """Run the forward pass; see ForwardState.

    ``ztilde``/``obs_std`` cover the full range with arbitrary values at
    missing positions.  ``weight_prior`` = (mean, std) switches on joint
    inference over the feature weights, in which case ``b`` must be None.
    """
    a = coeffs.a
    T, d = a.shape
    mask = _as_mask(obs_mask, T)
    g = np.ascontiguousarray(coeffs.g(strengths)[: T - 1]) if T > 1 else np.zeros((0, d))
    if weight_prior is not None:
        if b is not None:
            raise NumericalError("offsets b and weight inference are exclusive")
        wmu, ws = (np.asarray(v, dtype=float) for v in weight_prior)
        xs = np.asarray(x, dtype=float)
        zc = np.asarray(ztilde, dtype=float)
    else:
        xs = np.zeros((T, 0))
        wmu = np.zeros(0)
        ws = np.zeros(0)
        zc = np.asarray(ztilde, dtype=float)
        if b is not None:
            zc = zc - np.asarray(b, dtype=float)
    zc = np.where(mask.astype(bool), zc, 0.0)
    ostd = np.where(mask.astype(bool), np.asarray(obs_std, dtype=float), 1.0)
    for name, arr in (("observations", zc[mask.astype(bool)]),
                      ("observation stds", ostd[mask.astype(bool)]),
                      ("prior mean", prior_mean), ("prior std", prior_std),
                      ("innovations", g)):
        _validate(name, arr)
    out = kernels.srif_forward(
        coeffs.F, coeffs.Finv, a, xs, g,
        np.asarray(prior_mean, dtype=float), np.asarray(prior_std, dtype=float),
        wmu, ws, zc, ostd, mask)
    (R, m, s, k, q, m_eps, v_eps, pred_mean, pred_std, loglik, status) = out
    if status != 0:
        raise NumericalError(f"singular system in forward pass at step {status - 1}")
    if not np.isfinite(loglik):
        raise NumericalError("non-finite filter log likelihood")
    return ForwardState(R=R, mean=m, std=s, k=k, q=q, m_eps=m_eps,
                        v_eps=v_eps, pred_mean=pred_mean, pred_std=pred_std,
                        loglik=float(loglik), state_dim=d, n_weights=xs.shape[1])


def backward_smooth(forward, coeffs, strengths, b=None, x=None):
    """Backward pass; returns SmoothingResult with b re-added to y moments."""
    a = coeffs.a
    T, d = a.shape
    p = forward.n_weights
    xs = np.asarray(x, dtype=float) if p else np.zeros((T, 0))
    g = np.ascontiguousarray(coeffs.g(strengths)[: T - 1]) if T > 1 else np.zeros((0, d))
    out = kernels.srif_backward(
        coeffs.F, coeffs.Finv, a, xs, g,
        forward.R, forward.mean, forward.std,
        forward.k, forward.q, forward.m_eps, forward.v_eps)
    (Rs, ms, ss, eps_mean, eps_var, y_mean, y_std, j0_mean, j0_cov,
     status) = out
    if status != 0:
        raise NumericalError(f"singular system in backward pass at step {status}")
    y_mean = y_mean.copy()
    if b is not None:
        y_mean += np.asarray(b, dtype=float)
    wmsg = forward.weight_message()
    return SmoothingResult(
        eps_mean=eps_mean, eps_var=eps_var,
        l0_mean=j0_mean[:d], l0_cov_diag=j0_cov[:d],
        y_mean=y_mean, y_var=y_std**2, loglik=forward.loglik,
        final_state=forward.final_message(),
        weights_mean=j0_mean[d:] if p else None,
        weights_cov_diag=j0_cov[d:] if p else None,
        weights_message=wmsg,
        smoothed=(Rs, ms, ss))


def smooth(coeffs, strengths, prior_mean, prior_std, ztilde, obs_std,
           obs_mask=None, b=None):
    """Forward + backward in one call (fixed weights)."""
    fwd = forward_filter(coeffs, strengths, prior_mean, prior_std,
                         ztilde, obs_std, obs_mask=obs_mask, b=b)
    return backward_smooth(fwd, coeffs, strengths, b=b)


def infer_with_weights(coeffs, strengths, prior_mean, prior_std, ztilde,
                       obs_std, x, weight_prior, obs_mask=None):
    """Joint smoothing over latent states and feature weights.

    The weight posterior is already exact after the forward pass; the
    backward pass never touches its block of the stored system.
    """
    fwd = forward_filter(coeffs, strengths, prior_mean, prior_std, ztilde,
                         obs_std, obs_mask=obs_mask, x=x,
                         weight_prior=weight_prior)
    return backward_smooth(fwd, coeffs, strengths, x=x)
