"""Probabilistic forecasting by forward-sampling the fitted model.

One more mode-finding run at the trained parameters yields the Gaussian
posterior over the last in-sample state; each sample path draws a state,
fresh unit innovations, and an emission per horizon step.  Paths are
independent: path i uses its own generator seeded by (root_seed, i), so
any subset of paths can be reproduced or parallelized.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .inference import forward_filter, smooth
from .likelihood import sigmoid
from .modefind import InnerProblem
from .params import ParameterLayout


@dataclass
class ForecastSamples:
    """Sample paths over the prediction range; (n_paths, horizon)."""

    paths: np.ndarray
    seed: int | None = None

    @property
    def n_paths(self):
        return self.paths.shape[0]

    @property
    def horizon(self):
        return self.paths.shape[1]


def path_rng(seed, index):
    """Per-path generator: path index mixed into the root seed.

    ``seed`` may itself be a sequence (e.g. root seed plus item index);
    the path index is appended to the entropy sequence.
    """
    if isinstance(seed, (tuple, list)):
        entropy = [int(v) for v in seed]
    else:
        entropy = [int(seed)]
    return np.random.default_rng(entropy + [int(index)])


def final_state_posterior(model, likelihood, theta, z, obs_mask=None,
                          features=None, availability=None, calendar=None):
    """Gaussian posterior over the last in-sample state at fixed theta."""
    z = np.asarray(z)
    T = z.shape[0]
    n_feat = 0 if features is None else np.asarray(features).shape[1]
    lay = ParameterLayout(model, likelihood, n_feat)
    params = lay.decode(theta)
    coeffs = model.coefficients(T, calendar=calendar, train_len=T)
    b = None if features is None else np.asarray(features) @ params.weights
    mask = (np.ones(T, dtype=bool) if obs_mask is None
            else np.asarray(obs_mask, dtype=bool))
    if availability is not None:
        mask = mask & (np.asarray(availability) > 0.0)
    if not mask.any():
        # Nothing observed: the posterior is the prior pushed through the
        # transitions, which the filter produces with every row skipped.
        fwd = forward_filter(coeffs, params.strengths, params.mu0,
                             params.prior_std(lay), np.zeros(T), np.ones(T),
                             obs_mask=mask, b=b)
        return fwd.final_message(), params
    inner = InnerProblem(coeffs, params.strengths, params.mu0,
                         params.prior_std(lay), likelihood, params.lh, z,
                         obs_mask=mask, b=b,
                         avail_weights=availability)
    mode = inner.find_mode()
    res = inner.smooth_gaussianized(mode.ztilde, mode.obs_var,
                                    mode.effective_mask)
    return res.final_state, params


def _prediction_coeffs(model, params, t_train, horizon, calendar=None):
    coeffs = model.coefficients(t_train + horizon, calendar=calendar,
                                train_len=t_train)
    g = coeffs.g(params.strengths)
    return coeffs, g


def sample_paths(model, likelihood, params, posterior, horizon, n_paths,
                 t_train, features_pred=None, calendar=None, seed=0):
    """Independent sample paths from one fitted stage.

    ``calendar`` must cover training plus prediction range; ``features_pred``
    has one row per horizon step.
    """
    if features_pred is not None:
        features_pred = np.asarray(features_pred, dtype=float)
        if features_pred.shape[0] < horizon:
            raise DataError("features do not cover the forecast horizon")
        b_pred = features_pred[:horizon] @ params.weights
    else:
        b_pred = np.zeros(horizon)
    coeffs, g = _prediction_coeffs(model, params, t_train, horizon, calendar)
    F = coeffs.F
    a = coeffs.a
    paths = np.empty((n_paths, horizon))
    for i in range(n_paths):
        rng = path_rng(seed, i)
        state = posterior.sample(rng)
        for h in range(horizon):
            state = F @ state + g[t_train - 1 + h] * rng.standard_normal()
            y = float(a[t_train + h] @ state + b_pred[h])
            paths[i, h] = likelihood.sample(np.array([y]), params.lh, rng)[0]
    return ForecastSamples(paths=paths, seed=seed)


def multi_stage_emit(y0, y1, y2, transfer, rng, size=None):
    """Vectorized three-stage emission at pinned latent values."""
    if size is not None:
        y0 = np.full(size, y0)
        y1 = np.full(size, y1)
        y2 = np.full(size, y2)
    p0 = sigmoid(np.asarray(y0, dtype=float))
    p1 = sigmoid(np.asarray(y1, dtype=float))
    lam = transfer.eval(np.asarray(y2, dtype=float))[0]
    u0 = rng.random(size=p0.shape)
    u1 = rng.random(size=p0.shape)
    tail = 2 + rng.poisson(lam)
    return np.where(u0 < p0, 0, np.where(u1 < p1, 1, tail)).astype(float)


def multi_stage_sample(model, transfer, stage_params, posteriors, horizon,
                       n_paths, t_train, features_pred=None, calendar=None,
                       seed=0):
    """Sample paths for the three-stage count emission.

    Each stage carries its own latent process; per path and step the
    emission cascades: zero, one, or two-plus-Poisson.
    """
    if len(stage_params) != 3 or len(posteriors) != 3:
        raise DataError("multi-stage sampling needs all three stages")
    b_preds = []
    for params in stage_params:
        if features_pred is not None:
            b_preds.append(np.asarray(features_pred)[:horizon] @ params.weights)
        else:
            b_preds.append(np.zeros(horizon))
    pieces = [_prediction_coeffs(model, p, t_train, horizon, calendar)
              for p in stage_params]
    F = pieces[0][0].F
    a = pieces[0][0].a
    gs = [g for (_, g) in pieces]
    paths = np.empty((n_paths, horizon))
    for i in range(n_paths):
        rng = path_rng(seed, i)
        states = [post.sample(rng) for post in posteriors]
        for h in range(horizon):
            ys = np.empty(3)
            for k in range(3):
                states[k] = (F @ states[k]
                             + gs[k][t_train - 1 + h] * rng.standard_normal())
                ys[k] = a[t_train + h] @ states[k] + b_preds[k][h]
            paths[i, h] = multi_stage_emit(ys[0], ys[1], ys[2], transfer,
                                           rng, size=1)[0]
    return ForecastSamples(paths=paths, seed=seed)


def feature_only_sample(likelihood, weights, features_pred, horizon, n_paths,
                        lh_params=(), seed=0):
    """Baseline sampler: y_t = w' x_t, no latent state."""
    features_pred = np.asarray(features_pred, dtype=float)
    if features_pred.shape[0] < horizon:
        raise DataError("features do not cover the forecast horizon")
    y = features_pred[:horizon] @ weights
    paths = np.empty((n_paths, horizon))
    for i in range(n_paths):
        rng = path_rng(seed, i)
        paths[i] = likelihood.sample(y, tuple(lh_params), rng)
    return ForecastSamples(paths=paths, seed=seed)


def span_quantile(samples, lead, span, rho):
    """rho-quantile of span demand: sum over [lead, lead+span), then sort.

    The estimator is the ceil(rho * n)-th order statistic (1-based), with
    no interpolation, so results are reproducible bit for bit.
    """
    if not 0.0 < rho < 1.0:
        raise DataError("quantile level must lie in (0, 1)")
    paths = samples.paths if isinstance(samples, ForecastSamples) else samples
    n, horizon = paths.shape
    if lead < 0 or span < 1 or lead + span > horizon:
        raise DataError(
            f"span [{lead}, {lead + span}) outside horizon {horizon}")
    z = paths[:, lead:lead + span].sum(axis=1)
    z.sort()
    idx = int(np.ceil(rho * n))
    return float(z[max(idx - 1, 0)])


def forecast_trained(trained, z, horizon, n_paths, seed=0, obs_mask=None,
                     features=None, features_pred=None, availability=None,
                     calendar=None):
    """Forecast a TrainedModel: posterior per stage, then sample paths."""
    z = np.asarray(z)
    t_train = z.shape[0]
    if trained.multi_stage:
        from .likelihood import multi_stage_decompose

        in_stock = None if availability is None else np.asarray(availability) > 0
        stage_data = multi_stage_decompose(z, in_stock)
        posteriors = []
        stage_params = []
        for fit, lik, data in zip(trained.stages, trained.likelihoods,
                                  stage_data):
            post, params = final_state_posterior(
                trained.model, lik, fit.theta, data.target,
                obs_mask=data.active, features=features,
                availability=availability, calendar=calendar)
            posteriors.append(post)
            stage_params.append(params)
        transfer = trained.likelihoods[2].transfer
        return multi_stage_sample(trained.model, transfer, stage_params,
                                  posteriors, horizon, n_paths, t_train,
                                  features_pred=features_pred,
                                  calendar=calendar, seed=seed)
    lik = trained.likelihoods[0]
    post, params = final_state_posterior(
        trained.model, lik, trained.stages[0].theta, z, obs_mask=obs_mask,
        features=features, availability=availability, calendar=calendar)
    return sample_paths(trained.model, lik, params, post, horizon, n_paths,
                        t_train, features_pred=features_pred,
                        calendar=calendar, seed=seed)
