"""Run configuration: schema checks and construction of model objects.

Configs are plain JSON documents validated eagerly so that nothing heavy
runs on a malformed input.  Unknown keys are rejected to catch typos.
"""

import json

import numpy as np

from .errors import ConfigurationError
from .evaluation import EvaluationSpec
from .issm import (SeasonalityPattern, compose, make_level, make_level_trend,
                   make_seasonality)
from .likelihood import DEFAULT_KAPPA, make_likelihood, make_transfer
from .training import TrainingOptions

_TOP_KEYS = {"model", "likelihood", "training", "forecast", "evaluation",
             "data", "simulate", "parallelism"}


def _require(cond, msg):
    if not cond:
        raise ConfigurationError(msg)


def _check_keys(section, obj, allowed):
    unknown = set(obj) - set(allowed)
    _require(not unknown, f"{section}: unknown keys {sorted(unknown)}")


def load_config(path):
    with open(path) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config is not valid JSON: {exc}") from None
    return validate_config(raw)


def validate_config(raw):
    _require(isinstance(raw, dict), "config must be a JSON object")
    _check_keys("config", raw, _TOP_KEYS)
    _require("model" in raw, "config needs a 'model' section")
    _require("likelihood" in raw, "config needs a 'likelihood' section")
    build_model(raw["model"])
    build_likelihood_spec(raw["likelihood"])
    build_training_options(raw.get("training", {}))
    forecast_settings(raw)
    build_evaluation_spec(raw.get("evaluation", {}))
    data_settings(raw)
    par = raw.get("parallelism", 1)
    _require(isinstance(par, int) and par >= 1,
             "parallelism must be a positive integer")
    return raw


def build_model(cfg):
    _check_keys("model", cfg, {"components", "strength_bounds"})
    comps_cfg = cfg.get("components")
    _require(isinstance(comps_cfg, list) and comps_cfg,
             "model.components must be a non-empty list")
    bounds = cfg.get("strength_bounds")
    if bounds is not None:
        _require(len(bounds) == 2 and 0 <= bounds[0] < bounds[1],
                 "strength_bounds must be [lo, hi] with 0 <= lo < hi")
        bounds = tuple(bounds)
    comps = []
    for i, c in enumerate(comps_cfg):
        _require(isinstance(c, dict) and "kind" in c,
                 f"model.components[{i}] needs a 'kind'")
        kind = c["kind"]
        if kind == "level":
            _check_keys(f"components[{i}]", c, {"kind"})
            comps.append(make_level(alpha_bounds=bounds))
        elif kind == "level_trend":
            _check_keys(f"components[{i}]", c, {"kind", "damping"})
            comps.append(make_level_trend(alpha_bounds=bounds,
                                          beta_bounds=bounds,
                                          damping=c.get("damping")))
        elif kind == "seasonality":
            _check_keys(f"components[{i}]", c,
                        {"kind", "name", "num_atomic", "cycle_length",
                         "grouping", "usage_counts"})
            _require("name" in c and "num_atomic" in c and "cycle_length" in c,
                     f"components[{i}]: seasonality needs name, num_atomic, "
                     "cycle_length")
            grouping = c.get("grouping")
            pattern = SeasonalityPattern(
                num_atomic=int(c["num_atomic"]),
                cycle_length=int(c["cycle_length"]),
                grouping=None if grouping is None else np.asarray(grouping),
                usage_counts=(None if c.get("usage_counts") is None
                              else np.asarray(c["usage_counts"], dtype=float)),
                name=c["name"])
            comps.append(make_seasonality(pattern, gamma_bounds=bounds,
                                          name=c["name"]))
        else:
            raise ConfigurationError(
                f"components[{i}]: unknown component kind {kind!r}")
    return compose(comps)


def build_likelihood_spec(cfg):
    """Returns ('single', likelihood) or ('multi_stage', transfer)."""
    _check_keys("likelihood", cfg, {"mode", "kind", "transfer", "kappa"})
    mode = cfg.get("mode", "single")
    kappa = float(cfg.get("kappa", DEFAULT_KAPPA))
    transfer = cfg.get("transfer", "twice_logistic")
    if mode == "multi_stage":
        return "multi_stage", make_transfer(transfer, kappa=kappa)
    if mode == "single":
        kind = cfg.get("kind")
        _require(kind is not None, "likelihood.kind required in single mode")
        return "single", make_likelihood(kind, transfer=transfer, kappa=kappa)
    raise ConfigurationError(f"unknown likelihood mode {mode!r}")


def build_training_options(cfg):
    _check_keys("training", cfg,
                {"reg_rho", "reg_rho_by_block", "strength_center",
                 "sigma0_center", "max_iterations", "lbfgs_memory",
                 "grad_tol", "fallback_min_obs", "fd_step", "max_rejections"})
    return TrainingOptions(**cfg)


def forecast_settings(raw):
    cfg = raw.get("forecast", {})
    _check_keys("forecast", cfg, {"horizon", "n_paths", "seed"})
    horizon = int(cfg.get("horizon", 28))
    n_paths = int(cfg.get("n_paths", 100))
    _require(horizon >= 1 and n_paths >= 1,
             "forecast horizon and n_paths must be positive")
    return {"horizon": horizon, "n_paths": n_paths,
            "seed": int(cfg.get("seed", 0))}


def build_evaluation_spec(cfg):
    _check_keys("evaluation", cfg, {"spans", "quantiles", "in_stock_fraction"})
    kwargs = {}
    if "spans" in cfg:
        kwargs["spans"] = [tuple(int(v) for v in s) for s in cfg["spans"]]
    if "quantiles" in cfg:
        kwargs["quantiles"] = [float(q) for q in cfg["quantiles"]]
    if "in_stock_fraction" in cfg:
        kwargs["in_stock_fraction"] = float(cfg["in_stock_fraction"])
    try:
        return EvaluationSpec(**kwargs)
    except Exception as exc:
        raise ConfigurationError(f"evaluation: {exc}") from None


def data_settings(raw):
    cfg = raw.get("data", {})
    _check_keys("data", cfg,
                {"train_length", "train_fraction", "mask_out_of_stock"})
    _require(not ("train_length" in cfg and "train_fraction" in cfg),
             "data: give train_length or train_fraction, not both")
    if "train_fraction" in cfg:
        f = float(cfg["train_fraction"])
        _require(0.0 < f <= 1.0, "train_fraction must lie in (0, 1]")
    if "train_length" in cfg:
        _require(int(cfg["train_length"]) >= 1,
                 "train_length must be positive")
    return {
        "train_length": cfg.get("train_length"),
        "train_fraction": cfg.get("train_fraction"),
        "mask_out_of_stock": bool(cfg.get("mask_out_of_stock", True)),
    }


def train_length_for(raw, total):
    ds = data_settings(raw)
    if ds["train_length"] is not None:
        return min(int(ds["train_length"]), total)
    if ds["train_fraction"] is not None:
        return max(1, int(round(ds["train_fraction"] * total)))
    return total
