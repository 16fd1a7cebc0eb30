"""Unconstrained encoding of the learnable parameters.

The raw vector handed to the outer optimizer concatenates, in order:
feature weights (free), innovation strengths (sigmoid-squashed into their
bounds), initial-state means (free), initial-state deviations (softplus,
one slot per component coordinate group), and likelihood parameters
(softplus).  Quadratic regularization acts on the raw coordinates.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError
from .likelihood import sigmoid, softplus, softplus_inverse

DEFAULT_STRENGTH_CENTER = 0.05
DEFAULT_SIGMA0_CENTER = 1.0


@dataclass
class ModelParams:
    """Decoded (constrained) parameter values."""

    weights: np.ndarray
    strengths: np.ndarray
    mu0: np.ndarray
    sigma0: np.ndarray        # one per slot
    lh: tuple

    def prior_std(self, layout):
        return self.sigma0[layout.sigma0_coord_slot]


@dataclass
class Regularizer:
    """Quadratic pull sum_j rho_j/2 (theta_j - center_j)^2 on raw coords."""

    rho: np.ndarray
    center: np.ndarray

    def value(self, theta):
        d = theta - self.center
        return float(0.5 * np.sum(self.rho * d * d))

    def grad(self, theta):
        return self.rho * (theta - self.center)


class ParameterLayout:
    """Maps between the raw optimizer vector and model quantities."""

    def __init__(self, model, likelihood, n_features=0):
        self.model = model
        self.likelihood = likelihood
        self.n_features = int(n_features)
        self.n_strengths = model.n_strengths
        self.d = model.total_dim
        self.n_sigma0 = len(model.sigma0_slots)
        self.n_lh = likelihood.n_params
        self.strength_bounds = model.strength_bounds
        for lo, hi in self.strength_bounds:
            if not (0.0 <= lo < hi):
                raise ConfigurationError("strength bounds must satisfy 0 <= lo < hi")
        sizes = [self.n_features, self.n_strengths, self.d,
                 self.n_sigma0, self.n_lh]
        self.size = sum(sizes)
        edges = np.concatenate([[0], np.cumsum(sizes)])
        self.sl_weights = slice(edges[0], edges[1])
        self.sl_strengths = slice(edges[1], edges[2])
        self.sl_mu0 = slice(edges[2], edges[3])
        self.sl_sigma0 = slice(edges[3], edges[4])
        self.sl_lh = slice(edges[4], edges[5])
        # For each state coordinate, which sigma0 slot covers it.
        coord_slot = np.zeros(self.d, dtype=np.int64)
        for si, coords in enumerate(model.sigma0_slots):
            for c in coords:
                coord_slot[c] = si
        self.sigma0_coord_slot = coord_slot
        self.names = (
            [f"w[{i}]" for i in range(self.n_features)]
            + [f"strength.{n}" for n in model.strength_names]
            + [f"mu0[{i}]" for i in range(self.d)]
            + [f"sigma0[{i}]" for i in range(self.n_sigma0)]
            + [f"lh.{n}" for n in likelihood.param_names]
        )

    # -- transforms ----------------------------------------------------

    def decode(self, theta):
        theta = np.asarray(theta, dtype=float)
        strengths = np.empty(self.n_strengths)
        for j, (lo, hi) in enumerate(self.strength_bounds):
            strengths[j] = lo + (hi - lo) * float(sigmoid(theta[self.sl_strengths][j]))
        return ModelParams(
            weights=theta[self.sl_weights].copy(),
            strengths=strengths,
            mu0=theta[self.sl_mu0].copy(),
            sigma0=np.asarray(softplus(theta[self.sl_sigma0]), dtype=float),
            lh=tuple(softplus(theta[self.sl_lh])),
        )

    def encode(self, params):
        theta = np.zeros(self.size)
        theta[self.sl_weights] = params.weights
        raw_s = np.empty(self.n_strengths)
        for j, (lo, hi) in enumerate(self.strength_bounds):
            u = (params.strengths[j] - lo) / (hi - lo)
            if not (0.0 < u < 1.0):
                raise ConfigurationError(
                    f"strength {params.strengths[j]} outside bounds ({lo}, {hi})")
            raw_s[j] = np.log(u) - np.log1p(-u)
        theta[self.sl_strengths] = raw_s
        theta[self.sl_mu0] = params.mu0
        theta[self.sl_sigma0] = softplus_inverse(params.sigma0)
        theta[self.sl_lh] = softplus_inverse(np.asarray(params.lh, dtype=float))
        return theta

    def jacobians(self, theta):
        """Derivative of each constrained block wrt its raw coordinates."""
        theta = np.asarray(theta, dtype=float)
        widths = np.array([hi - lo for lo, hi in self.strength_bounds])
        s = sigmoid(theta[self.sl_strengths])
        return {
            "strengths": widths * s * (1.0 - s),
            "sigma0": np.asarray(sigmoid(theta[self.sl_sigma0]), dtype=float),
            "lh": np.asarray(sigmoid(theta[self.sl_lh]), dtype=float),
        }

    # -- defaults -------------------------------------------------------

    def default_center(self, strength_center=DEFAULT_STRENGTH_CENTER,
                       sigma0_center=DEFAULT_SIGMA0_CENTER):
        """Raw coordinates of the canonical center (also the fallback)."""
        strengths = np.empty(self.n_strengths)
        for j, (lo, hi) in enumerate(self.strength_bounds):
            c = strength_center
            if not (lo < c < hi):
                c = 0.5 * (lo + hi)
            strengths[j] = c
        params = ModelParams(
            weights=np.zeros(self.n_features),
            strengths=strengths,
            mu0=np.zeros(self.d),
            sigma0=np.full(self.n_sigma0, sigma0_center),
            lh=tuple(self.likelihood.param_centers),
        )
        return self.encode(params)

    def make_regularizer(self, rho=1.0, center=None, rho_by_block=None):
        """Uniform strength by default; per-block overrides allowed."""
        rhos = np.full(self.size, float(rho))
        if rho_by_block:
            blocks = {"weights": self.sl_weights, "strengths": self.sl_strengths,
                      "mu0": self.sl_mu0, "sigma0": self.sl_sigma0,
                      "lh": self.sl_lh}
            for name, value in rho_by_block.items():
                if name not in blocks:
                    raise ConfigurationError(f"unknown parameter block {name!r}")
                rhos[blocks[name]] = float(value)
        if center is None:
            center = self.default_center()
        return Regularizer(rho=rhos, center=np.asarray(center, dtype=float))
