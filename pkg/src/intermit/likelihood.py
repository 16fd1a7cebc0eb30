"""Likelihood potentials, transfer functions, and the multi-stage split.

A potential exposes the negative log likelihood phi and its first three
derivatives in the latent function value, analytic throughout.  All
sigmoid/softplus evaluations branch at zero so nothing overflows for
|y| in the hundreds; the curvature pathologies of the plain logistic
transfer for large y are handled by the twice-logistic variant, whose
curvature is bounded below by roughly twice its kappa.

Fractional availability enters as a per-observation power on the
likelihood, i.e. a multiplicative weight on phi and every derivative.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq
from scipy.special import gammaln

from .errors import ConfigurationError, DataError

CURVATURE_FLOOR = 1e-10
DEFAULT_KAPPA = 0.01

_LAMBDA_FLOOR = 1e-300


def softplus(u):
    """log(1 + e^u) without overflow, branch at zero."""
    u = np.asarray(u, dtype=float)
    return np.log1p(np.exp(-np.abs(u))) + np.maximum(u, 0.0)




def sigmoid(u):
    """Logistic sigmoid, branch at zero."""
    u = np.asarray(u, dtype=float)
    e = np.exp(-np.abs(u))
    return np.where(u >= 0.0, 1.0 / (1.0 + e), e / (1.0 + e))


def softplus_inverse(v):
    """Inverse of softplus for v > 0."""
    v = np.asarray(v, dtype=float)
    with np.errstate(over="ignore"):
        small = v < 30.0
    out = np.where(small, np.log(np.expm1(np.where(small, v, 1.0))), v)
    return out


@dataclass(frozen=True)
class ExponentialTransfer:
    """lambda(y) = e^y; kept for the documented failure analysis."""

    kind = "exponential"

    def eval(self, y):
        lam = np.exp(np.asarray(y, dtype=float))
        return lam, lam, lam, lam

    def inverse(self, lam):
        return float(np.log(lam))


@dataclass(frozen=True)
class LogisticTransfer:
    """lambda(y) = log(1 + e^y): exponential left tail, linear right."""

    kind = "logistic"

    def eval(self, y):
        y = np.asarray(y, dtype=float)
        lam = softplus(y)
        s = sigmoid(y)
        sp = s * sigmoid(-y)
        return lam, s, sp, sp * (1.0 - 2.0 * s)

    def inverse(self, lam):
        return float(softplus_inverse(np.asarray(lam, dtype=float)))


@dataclass(frozen=True)
class TwiceLogisticTransfer:
    """lambda(y) = g(y (1 + kappa g(y))) with g the softplus.

    Behaves like the logistic transfer for small or negative y but keeps
    the curvature of the Poisson potential bounded away from zero for
    large y, which is what keeps the Gaussian fits finite on bursty data.
    """

    kappa: float = DEFAULT_KAPPA

    kind = "twice_logistic"

    def __post_init__(self):
        if self.kappa < 0.0:
            raise ConfigurationError("kappa must be nonnegative")

    def eval(self, y):
        y = np.asarray(y, dtype=float)
        kap = self.kappa
        gy = softplus(y)
        sy = sigmoid(y)
        spy = sy * sigmoid(-y)
        sppy = spy * (1.0 - 2.0 * sy)
        u = y * (1.0 + kap * gy)
        u1 = 1.0 + kap * (gy + y * sy)
        u2 = kap * (2.0 * sy + y * spy)
        u3 = kap * (3.0 * spy + y * sppy)
        gu = softplus(u)
        su = sigmoid(u)
        spu = su * sigmoid(-u)
        sppu = spu * (1.0 - 2.0 * su)
        lam = gu
        d1 = su * u1
        d2 = spu * u1 * u1 + su * u2
        d3 = sppu * u1 ** 3 + 3.0 * spu * u1 * u2 + su * u3
        return lam, d1, d2, d3

    def inverse(self, lam):
        target = float(softplus_inverse(np.asarray(lam, dtype=float)))
        if self.kappa == 0.0:
            return target
        lo = -abs(target) - 20.0
        hi = abs(target) + 20.0
        return brentq(
            lambda y: y * (1.0 + self.kappa * float(softplus(np.array(y)))) - target,
            lo, hi, xtol=1e-12)


def make_transfer(kind, kappa=DEFAULT_KAPPA):
    if kind == "exponential":
        return ExponentialTransfer()
    if kind == "logistic":
        return LogisticTransfer()
    if kind == "twice_logistic":
        return TwiceLogisticTransfer(kappa=kappa)
    raise ConfigurationError(f"unknown transfer function {kind!r}")


def _weighted(values, weights):
    if weights is None:
        return values
    return tuple(w if w is None else w * weights for w in values)


@dataclass(frozen=True)
class GaussianLikelihood:
    """N(z | y, v); the observation variance v is a learnable parameter."""

    kind = "gaussian"
    n_params = 1
    param_names = ("variance",)
    param_centers = (1.0,)
    integer_valued = False

    def phi_derivs(self, z, y, params, weights=None):
        v = params[0]
        z = np.asarray(z, dtype=float)
        y = np.asarray(y, dtype=float)
        r = y - z
        phi = 0.5 * (r * r / v + np.log(2.0 * np.pi * v)) * np.ones_like(y)
        d1 = r / v
        d2 = np.full_like(y, 1.0 / v)
        d3 = np.zeros_like(y)
        return _weighted((phi, d1, d2, d3), weights)

    def dphi_dparams(self, z, y, params, weights=None):
        v = params[0]
        r = np.asarray(y, dtype=float) - np.asarray(z, dtype=float)
        dphi = (0.5 / v) * (1.0 - r * r / v)
        dd1 = -r / (v * v)
        dd2 = np.full_like(r, -1.0 / (v * v))
        out = _weighted((dphi, dd1, dd2), weights)
        return tuple(o[None, :] for o in out)

    def sample(self, y, params, rng):
        return rng.normal(np.asarray(y, dtype=float), np.sqrt(params[0]))

    def mean_function(self, y, params):
        return np.asarray(y, dtype=float)

    def ml_latent(self, z):
        z = np.asarray(z, dtype=float)
        if z.size == 0:
            return self.default_latent()
        return float(z.mean())

    def default_latent(self):
        return 0.0


@dataclass(frozen=True)
class BernoulliLikelihood:
    """Logistic binary potential on signed targets z in {+1, -1}.

    The +1 branch fires with probability sigma(y); multi-stage targets
    arrive already signed.
    """

    kind = "bernoulli"
    n_params = 0
    param_names = ()
    param_centers = ()
    integer_valued = True

    def phi_derivs(self, z, y, params=(), weights=None):
        zs = np.asarray(z, dtype=float)
        y = np.asarray(y, dtype=float)
        u = zs * y
        phi = softplus(-u)
        d1 = -zs * sigmoid(-u)
        d2 = sigmoid(y) * sigmoid(-y)
        d3 = d2 * (1.0 - 2.0 * sigmoid(y))
        return _weighted((phi, d1, d2, d3), weights)

    def dphi_dparams(self, z, y, params=(), weights=None):
        empty = np.zeros((0, np.asarray(y).shape[0]))
        return empty, empty, empty

    def sample(self, y, params, rng):
        p = sigmoid(np.asarray(y, dtype=float))
        return np.where(rng.random(size=p.shape) < p, 1.0, -1.0)

    def mean_function(self, y, params):
        return sigmoid(np.asarray(y, dtype=float))

    def ml_latent(self, z):
        zs = np.asarray(z, dtype=float)
        if zs.size == 0:
            return self.default_latent()
        p = (np.sum(zs > 0) + 0.5) / (zs.size + 1.0)
        return float(np.log(p) - np.log1p(-p))

    def default_latent(self):
        return 0.0


@dataclass(frozen=True)
class PoissonLikelihood:
    """Poisson counts with a positive rate transfer lambda(y)."""

    transfer: TwiceLogisticTransfer = field(
        default_factory=lambda: TwiceLogisticTransfer())

    kind = "poisson"
    n_params = 0
    param_names = ()
    param_centers = ()
    integer_valued = True

    def phi_derivs(self, z, y, params=(), weights=None):
        z = np.asarray(z, dtype=float)
        if np.any(z < 0):
            raise DataError("Poisson targets must be nonnegative")
        y = np.asarray(y, dtype=float)
        lam, l1, l2, l3 = self.transfer.eval(y)
        lam = np.maximum(lam, _LAMBDA_FLOOR)
        r1 = l1 / lam
        r2 = l2 / lam
        r3 = l3 / lam
        phi = lam - z * np.log(lam) + gammaln(z + 1.0)
        d1 = l1 - z * r1
        # phi'' = lambda'' + z * (-(log lambda)''); the second factor is
        # nonnegative for the supported transfers but cancellation noise in
        # the deep left tail can flip its sign, so clamp it.
        q2 = np.maximum(r1 * r1 - r2, 0.0)
        d2 = l2 + z * q2
        d3 = l3 - z * (r3 - 3.0 * r1 * r2 + 2.0 * r1 ** 3)
        return _weighted((phi, d1, d2, d3), weights)

    def dphi_dparams(self, z, y, params=(), weights=None):
        empty = np.zeros((0, np.asarray(y).shape[0]))
        return empty, empty, empty

    def sample(self, y, params, rng):
        lam, _, _, _ = self.transfer.eval(np.asarray(y, dtype=float))
        return rng.poisson(lam).astype(float)

    def mean_function(self, y, params):
        return self.transfer.eval(np.asarray(y, dtype=float))[0]

    def ml_latent(self, z):
        z = np.asarray(z, dtype=float)
        if z.size == 0 or z.mean() <= 1e-8:
            return self.default_latent()
        return self.transfer.inverse(float(z.mean()))

    def default_latent(self):
        # Rate-1 latent value; used when the targets carry no signal.
        return self.transfer.inverse(1.0)


def make_likelihood(kind, transfer=None, kappa=DEFAULT_KAPPA):
    if kind == "gaussian":
        return GaussianLikelihood()
    if kind == "bernoulli":
        return BernoulliLikelihood()
    if kind == "poisson":
        tf = make_transfer(transfer or "twice_logistic", kappa=kappa)
        return PoissonLikelihood(transfer=tf)
    raise ConfigurationError(f"unknown likelihood kind {kind!r}")


def gaussianize(likelihood, z, y, params=(), weights=None,
                floor=CURVATURE_FLOOR):
    """Second-order fit N(ztilde | y, sigma^2) to each potential at y.

    Positions whose (weighted) curvature falls below ``floor`` are flagged
    unusable and should be treated as temporarily unobserved; this reuses
    the missing-observation path instead of infinite-variance arithmetic.
    Returns (ztilde, sigma_sq, usable).
    """
    phi, d1, d2, _ = likelihood.phi_derivs(z, y, params, weights)
    usable = d2 > floor
    safe_d2 = np.where(usable, d2, 1.0)
    sigma_sq = 1.0 / safe_d2
    ztilde = np.asarray(y, dtype=float) - sigma_sq * d1
    sigma_sq = np.where(usable, sigma_sq, np.inf)
    ztilde = np.where(usable, ztilde, 0.0)
    return ztilde, sigma_sq, usable


@dataclass(frozen=True)
class StageData:
    """Targets and active mask for one stage of the multi-stage split."""

    stage: int
    target: np.ndarray
    active: np.ndarray

    @property
    def n_active(self):
        return int(self.active.sum())


def multi_stage_decompose(z, in_stock=None):
    """Split counts into the three emission stages.

    Stage 0 classifies z = 0 vs z > 0, stage 1 classifies z = 1 vs z > 1
    (on days with z >= 1), stage 2 regresses z - 2 on days with z >= 2.
    Binary stages use signed targets (+1 for "stop here").  Out-of-stock
    days are excluded from every stage: the observed zero is explained
    away rather than interpreted as absent demand.
    """
    z = np.asarray(z)
    if np.any(z[np.isfinite(z)] < 0):
        raise DataError("counts must be nonnegative")
    zi = np.where(np.isfinite(z), z, 0).astype(np.int64)
    stock = (np.ones(z.shape, dtype=bool) if in_stock is None
             else np.asarray(in_stock, dtype=bool))
    stages = []
    for k in range(2):
        target = np.where(zi == k, 1.0, -1.0)
        active = (zi >= k) & stock
        stages.append(StageData(stage=k, target=target, active=active))
    target2 = np.maximum(zi - 2, 0).astype(float)
    active2 = (zi >= 2) & stock
    stages.append(StageData(stage=2, target=target2, active=active2))
    return stages


def multi_stage_pmf(z, y0, y1, y2, transfer):
    """Exact pmf of the three-stage emission at pinned latent values."""
    z = np.asarray(z, dtype=np.int64)
    p0 = float(sigmoid(np.array(y0)))
    p1 = float(sigmoid(np.array(y1)))
    lam = float(transfer.eval(np.array(y2))[0])
    pois = np.exp(-lam + (z - 2) * np.log(lam) - gammaln(np.maximum(z - 2, 0) + 1.0))
    out = np.where(z == 0, p0,
                   np.where(z == 1, (1 - p0) * p1,
                            (1 - p0) * (1 - p1) * pois))
    return out
