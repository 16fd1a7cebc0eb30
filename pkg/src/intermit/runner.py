"""Fleet execution: per-item train/forecast/evaluate with isolation.

Items are the unit of work.  Each job sees only immutable config and its
own series; failures are captured per item and never abort the rest of
the fleet.  At parallelism 1 everything runs inline in a fixed item
order, so artifacts are bit-reproducible.
"""

import csv
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import config as cfgmod
from . import data as datamod
from . import evaluation, forecast, training
from .errors import ConfigurationError, DataError, IntermitError
from .params import ParameterLayout

logger = logging.getLogger(__name__)


# ----------------------------------------------------------------------
# Per-item jobs (top level so worker processes can import them)
# ----------------------------------------------------------------------

def _training_inputs(raw, series):
    n_train = cfgmod.train_length_for(raw, series.length)
    z, avail, feats = series.train_slice(n_train)
    mask_oos = cfgmod.data_settings(raw)["mask_out_of_stock"]
    availability = avail if mask_oos else None
    calendar = series.calendar_dict()
    return n_train, z, availability, feats, calendar


def train_item(raw, series):
    """Train one item; returns a JSON-ready record with per-stage timing."""
    model = cfgmod.build_model(raw["model"])
    mode, lik = cfgmod.build_likelihood_spec(raw["likelihood"])
    options = cfgmod.build_training_options(raw.get("training", {}))
    n_train, z, availability, feats, calendar = _training_inputs(raw, series)
    stage_records = []
    timings = []
    if mode == "multi_stage":
        in_stock = None if availability is None else availability > 0
        from .likelihood import multi_stage_decompose

        parts = multi_stage_decompose(z, in_stock)
        likelihoods = training.stage_likelihoods(lik)
        for part, stage_lik in zip(parts, likelihoods):
            t0 = time.perf_counter()
            problem = training.PsiProblem(
                model, stage_lik, part.target, obs_mask=part.active,
                features=feats, availability=availability,
                calendar=calendar, fd_step=options.fd_step)
            fit = training.fit_stage(problem, options, stage=part.stage)
            timings.append(time.perf_counter() - t0)
            stage_records.append(_stage_record(fit))
    else:
        t0 = time.perf_counter()
        trained = training.fit(model, lik, z, features=feats,
                               availability=availability, calendar=calendar,
                               options=options)
        timings.append(time.perf_counter() - t0)
        stage_records.append(_stage_record(trained.stages[0]))
    return {"item_id": series.item_id, "n_train": n_train,
            "stages": stage_records, "timings": timings}


def _stage_record(fit):
    return {
        "stage": fit.stage,
        "theta": [float(v) for v in fit.theta],
        "fallback": bool(fit.fallback),
        "n_obs": int(fit.n_obs),
        "psi": None if fit.psi is None else float(fit.psi),
        "error": fit.error,
        "iterations": fit.diagnostics.optimizer_iterations,
    }


def forecast_item(raw, series, stage_thetas, horizon, n_paths, seed):
    """Sample paths for one item from stored stage parameters."""
    model = cfgmod.build_model(raw["model"])
    mode, lik = cfgmod.build_likelihood_spec(raw["likelihood"])
    n_train, z, availability, feats, calendar = _training_inputs(raw, series)
    if series.length < n_train + 0:
        raise DataError("series shorter than the training length")
    feats_pred = None
    if series.features is not None:
        feats_pred = series.features[n_train:n_train + horizon]
    needed = n_train + horizon
    for name, cal in (series.calendar or {}).items():
        if len(cal) < needed:
            raise DataError(
                f"item {series.item_id!r}: calendar column {name!r} must "
                f"cover the horizon ({len(cal)} < {needed})")
    if mode == "multi_stage":
        likelihoods = training.stage_likelihoods(lik)
        trained = training.TrainedModel(
            model=model, likelihoods=likelihoods,
            stages=[training.StageFit(stage=k, theta=np.asarray(th),
                                      fallback=False, n_obs=0)
                    for k, th in enumerate(stage_thetas)],
            n_features=0 if feats is None else feats.shape[1],
            multi_stage=True)
    else:
        trained = training.TrainedModel(
            model=model, likelihoods=(lik,),
            stages=[training.StageFit(stage=0,
                                      theta=np.asarray(stage_thetas[0]),
                                      fallback=False, n_obs=0)],
            n_features=0 if feats is None else feats.shape[1],
            multi_stage=False)
    samples = forecast.forecast_trained(
        trained, z, horizon, n_paths, seed=seed,
        features=feats, features_pred=feats_pred,
        availability=availability, calendar=calendar)
    t0 = series.t_start + n_train
    return {"item_id": series.item_id, "t0": t0, "paths": samples.paths}


def _run_job(args):
    kind, raw, series, extra = args
    try:
        if kind == "train":
            return series.item_id, train_item(raw, series), None
        if kind == "forecast":
            return (series.item_id,
                    forecast_item(raw, series, **extra), None)
        raise ValueError(kind)
    except IntermitError as exc:
        return series.item_id, None, f"{type(exc).__name__}: {exc}"
    except Exception as exc:  # pragma: no cover - defensive isolation
        return series.item_id, None, f"{type(exc).__name__}: {exc}"


def _dispatch(jobs, parallelism):
    if parallelism <= 1:
        return [_run_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=parallelism) as pool:
        return list(pool.map(_run_job, jobs))


# ----------------------------------------------------------------------
# Fleet commands
# ----------------------------------------------------------------------

@dataclass
class FleetOutcome:
    n_items: int
    n_failed: int
    artifacts: list

    @property
    def exit_code(self):
        if self.n_items and self.n_failed == self.n_items:
            return 1
        return 0


def _percentiles(values):
    if not values:
        return None
    arr = np.asarray(values)
    p5, p50, p95 = np.percentile(arr, [5, 50, 95])
    return {"p5": float(p5), "p50": float(p50), "p95": float(p95),
            "max": float(arr.max()), "n": int(arr.size)}


def run_train(raw, series_map, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    items = [series_map[k] for k in sorted(series_map)]
    par = raw.get("parallelism", 1)
    results = _dispatch([("train", raw, s, None) for s in items], par)
    records, failures = {}, {}
    stage_times = {}
    for item_id, rec, err in results:
        if err is not None:
            failures[item_id] = err
            continue
        records[item_id] = rec
        for k, dt in enumerate(rec["timings"]):
            stage_times.setdefault(k, []).append(dt)
    payload = {
        "config": raw,
        "items": records,
        "failures": failures,
    }
    params_path = os.path.join(out_dir, "params.json")
    with open(params_path, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
    timing_path = os.path.join(out_dir, "train_timings.json")
    with open(timing_path, "w") as fh:
        json.dump({f"stage_{k}": _percentiles(v)
                   for k, v in sorted(stage_times.items())}, fh, indent=1)
    logger.info("trained %d items, %d failures", len(records), len(failures))
    return FleetOutcome(len(items), len(failures),
                        [params_path, timing_path])


def run_forecast(raw, series_map, model_payload, out_dir, horizon=None,
                 n_paths=None, seed=None):
    os.makedirs(out_dir, exist_ok=True)
    fc = cfgmod.forecast_settings(raw)
    horizon = fc["horizon"] if horizon is None else int(horizon)
    n_paths = fc["n_paths"] if n_paths is None else int(n_paths)
    seed = fc["seed"] if seed is None else int(seed)
    trained_items = model_payload["items"]
    items = [series_map[k] for k in sorted(series_map) if k in trained_items]
    jobs = []
    for idx, s in enumerate(items):
        thetas = [np.asarray(st["theta"])
                  for st in trained_items[s.item_id]["stages"]]
        jobs.append(("forecast", raw, s,
                     {"stage_thetas": thetas, "horizon": horizon,
                      "n_paths": n_paths, "seed": (seed, idx)}))
    par = raw.get("parallelism", 1)
    results = _dispatch(jobs, par)
    samples_path = os.path.join(out_dir, "samples.csv")
    failures = {}
    n_ok = 0
    with open(samples_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["item_id", "path", "t", "z"])
        for item_id, rec, err in results:
            if err is not None:
                failures[item_id] = err
                continue
            n_ok += 1
            paths = rec["paths"]
            for p in range(paths.shape[0]):
                for h in range(paths.shape[1]):
                    writer.writerow([item_id, p, rec["t0"] + h,
                                     repr(float(paths[p, h]))])
    if failures:
        with open(os.path.join(out_dir, "forecast_failures.json"), "w") as fh:
            json.dump(failures, fh, indent=1)
    logger.info("forecast %d items, %d failures", n_ok, len(failures))
    return FleetOutcome(len(items), len(failures), [samples_path])


def load_samples_csv(path):
    """samples.csv -> {item_id: (t0, paths array)}."""
    per_item = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            per_item.setdefault(row["item_id"], []).append(
                (int(row["path"]), int(row["t"]), float(row["z"])))
    out = {}
    for item, rows in per_item.items():
        n_paths = max(r[0] for r in rows) + 1
        ts = sorted({r[1] for r in rows})
        t0 = ts[0]
        horizon = len(ts)
        paths = np.zeros((n_paths, horizon))
        for p, t, z in rows:
            paths[p, t - t0] = z
        out[item] = (t0, paths)
    return out


def run_evaluate(samples_by_item, series_map, spec, out_dir):
    """Risk metrics from stored samples against the held-out actuals."""
    os.makedirs(out_dir, exist_ok=True)
    quant_rows = []
    metrics = []
    for lead, span in spec.spans:
        for rho in spec.quantiles:
            preds, actuals, stock = {}, {}, {}
            for item, (t0, paths) in samples_by_item.items():
                if item not in series_map:
                    continue
                s = series_map[item]
                off = t0 - s.t_start
                if off < 0 or off + lead + span > s.length:
                    continue
                qv = forecast.span_quantile(paths, lead, span, rho)
                preds[item] = qv
                actuals[item] = s.z[off:]
                stock[item] = s.availability[off:]
                quant_rows.append((item, lead, span, rho, qv))
            rr = evaluation.risk(preds, actuals, stock, lead, span, rho,
                                 spec.in_stock_fraction)
            metrics.append({"metric": "risk", "rho": rho, "lead": lead,
                            "span": span,
                            "value": None if np.isnan(rr.value) else rr.value,
                            "n_items": rr.n_items})
    qpath = os.path.join(out_dir, "quantiles.csv")
    with open(qpath, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["item_id", "lead", "span", "rho", "value"])
        for row in quant_rows:
            writer.writerow(row)
    mpath = os.path.join(out_dir, "metrics.json")
    with open(mpath, "w") as fh:
        json.dump(metrics, fh, indent=1)
    return FleetOutcome(len(samples_by_item), 0, [qpath, mpath]), metrics


# ----------------------------------------------------------------------
# Simulation
# ----------------------------------------------------------------------

def run_simulate(raw, seed, out_path):
    sim = raw.get("simulate")
    if not sim:
        raise ConfigurationError("config needs a 'simulate' section")
    kind = sim.get("kind", "issm")
    n_items = int(sim.get("n_items", 1))
    length = int(sim.get("length", 100))
    rng = np.random.default_rng(seed)
    model = cfgmod.build_model(raw["model"])
    mode, lik = cfgmod.build_likelihood_spec(raw["likelihood"])
    series = {}
    truths = {}
    calendar = _synthetic_calendar(model, length)
    for i in range(n_items):
        item = f"item_{i:04d}"
        oos = [tuple(w) for w in sim.get("oos_windows", [])]
        if kind == "drifting_seasonal":
            drift = sim.get("drifting", {})
            z, idx = datamod.simulate_drifting_seasonal(
                length, int(drift.get("cycle", 24)), rng=rng,
                base=float(drift.get("base", 5.0)),
                amplitude_start=float(drift.get("amp_start", 1.0)),
                amplitude_end=float(drift.get("amp_end", 3.0)),
                noise_std=float(drift.get("noise_std", 0.3)))
            avail = np.ones(length)
            cal = {name: idx.copy() for name in model.calendar_names} or calendar
            truths[item] = {"kind": kind}
        elif mode == "multi_stage":
            stage_params = [_params_from_config(model, training.stage_likelihoods(lik)[k],
                                                sim["stage_params"][k])
                            for k in range(3)]
            z, avail, truth = datamod.simulate_multi_stage(
                model, lik, stage_params, length, calendar=calendar,
                rng=rng, oos_windows=oos)
            cal = calendar
            truths[item] = {"kind": "multi_stage"}
        else:
            params = _params_from_config(model, lik, sim.get("params", {}))
            z, avail, truth = datamod.simulate_issm(
                model, lik, params, length, calendar=calendar, rng=rng,
                oos_windows=oos)
            cal = calendar
            truths[item] = {
                "kind": "issm",
                "strengths": [float(v) for v in params.strengths],
                "mu0": [float(v) for v in params.mu0],
            }
        series[item] = datamod.ItemSeries(
            item_id=item, z=np.asarray(z, dtype=float),
            availability=avail, features=None,
            calendar={k: v for k, v in (cal or {}).items()})
    datamod.write_csv(series, out_path)
    truth_path = os.path.splitext(out_path)[0] + "_truth.json"
    with open(truth_path, "w") as fh:
        json.dump(truths, fh, indent=1)
    return FleetOutcome(n_items, 0, [out_path, truth_path])


def _synthetic_calendar(model, length):
    cal = {}
    for comp in model.components:
        if not comp.needs_calendar:
            continue
        cyc = comp.pattern.cycle_length
        na = comp.pattern.num_atomic
        step = max(cyc // na, 1)
        cal[comp.name] = ((np.arange(length) // step) % na).astype(np.int64)
    return cal or None


def _params_from_config(model, likelihood, cfg):
    from .params import ModelParams

    lay = ParameterLayout(model, likelihood, 0)
    base = lay.decode(lay.default_center())
    strengths = np.asarray(cfg.get("strengths", base.strengths), dtype=float)
    mu0 = np.asarray(cfg.get("mu0", base.mu0), dtype=float)
    sigma0 = np.asarray(cfg.get("sigma0", base.sigma0), dtype=float)
    lh = tuple(cfg.get("lh", base.lh))
    if strengths.shape != base.strengths.shape:
        raise ConfigurationError(
            f"simulate.params.strengths needs {base.strengths.shape[0]} entries")
    if mu0.shape != base.mu0.shape:
        raise ConfigurationError(
            f"simulate.params.mu0 needs {base.mu0.shape[0]} entries")
    if sigma0.shape != base.sigma0.shape:
        raise ConfigurationError(
            f"simulate.params.sigma0 needs {base.sigma0.shape[0]} entries")
    return ModelParams(weights=np.zeros(0), strengths=strengths, mu0=mu0,
                       sigma0=sigma0, lh=lh)


def run_pipeline(raw, series_map, out_dir):
    outcome = run_train(raw, series_map, out_dir)
    with open(os.path.join(out_dir, "params.json")) as fh:
        payload = json.load(fh)
    fo = run_forecast(raw, series_map, payload, out_dir)
    samples = load_samples_csv(os.path.join(out_dir, "samples.csv"))
    spec = cfgmod.build_evaluation_spec(raw.get("evaluation", {}))
    ev_out, _ = run_evaluate(samples, series_map, spec, out_dir)
    n_failed = outcome.n_failed + fo.n_failed
    return FleetOutcome(outcome.n_items, n_failed,
                        outcome.artifacts + fo.artifacts + ev_out.artifacts)
