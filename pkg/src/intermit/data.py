"""Data ingestion and synthetic-series generation.

The on-disk format is one CSV per dataset with columns::

    item_id, t, z, availability, feature_<name>..., season_<name>...

``t`` must be contiguous per item (any integer start).  ``availability``
defaults to 1.0 when the column is absent.  Rows beyond the configured
training length carry the prediction range: their features and seasonal
calendar drive forecasting, their targets serve as evaluation actuals.
"""

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError


@dataclass
class ItemSeries:
    """Full-range data for one item."""

    item_id: str
    z: np.ndarray
    availability: np.ndarray
    features: np.ndarray | None = None
    calendar: dict = field(default_factory=dict)
    feature_names: tuple = ()
    t_start: int = 0

    @property
    def length(self):
        return self.z.shape[0]

    def train_slice(self, n_train):
        n_train = min(n_train, self.length)
        feats = None if self.features is None else self.features[:n_train]
        return self.z[:n_train], self.availability[:n_train], feats

    def calendar_dict(self):
        return self.calendar or None


def load_csv(path_or_file):
    """Parse a dataset; strict about schema, reports offending line numbers."""
    close = False
    if isinstance(path_or_file, (str, bytes)) or hasattr(path_or_file, "__fspath__"):
        fh = open(path_or_file, "r", newline="")
        close = True
    else:
        fh = path_or_file
    try:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError("empty file: header row required") from None
        header = [h.strip() for h in header]
        required = ["item_id", "t", "z"]
        for col in required:
            if col not in header:
                raise DataError(f"missing required column {col!r}")
        idx = {name: i for i, name in enumerate(header)}
        feat_cols = [h for h in header if h.startswith("feature_")]
        season_cols = [h for h in header if h.startswith("season_")]
        has_avail = "availability" in idx
        rows = {}
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != len(header):
                raise DataError(f"line {lineno}: expected {len(header)} "
                                f"fields, got {len(row)}")
            try:
                item = row[idx["item_id"]]
                t = int(row[idx["t"]])
                z = float(row[idx["z"]])
                avail = float(row[idx["availability"]]) if has_avail else 1.0
                feats = [float(row[idx[c]]) for c in feat_cols]
                seasons = [int(row[idx[c]]) for c in season_cols]
            except ValueError as exc:
                raise DataError(f"line {lineno}: {exc}") from None
            if z < 0 and np.isfinite(z):
                raise DataError(f"line {lineno}: negative target {z}")
            if not 0.0 <= avail <= 1.0:
                raise DataError(f"line {lineno}: availability {avail} "
                                "outside [0, 1]")
            rows.setdefault(item, []).append(
                (t, z, avail, feats, seasons, lineno))
        out = {}
        for item, recs in rows.items():
            recs.sort(key=lambda r: r[0])
            ts = [r[0] for r in recs]
            for prev, cur, rec in zip(ts, ts[1:], recs[1:]):
                if cur != prev + 1:
                    raise DataError(
                        f"line {rec[5]}: gap in t for item {item!r} "
                        f"({prev} -> {cur})")
            feats = (np.array([r[3] for r in recs])
                     if feat_cols else None)
            seasons = np.array([r[4] for r in recs], dtype=np.int64)
            calendar = {c[len("season_"):]: seasons[:, j]
                        for j, c in enumerate(season_cols)}
            out[item] = ItemSeries(
                item_id=item,
                z=np.array([r[1] for r in recs]),
                availability=np.array([r[2] for r in recs]),
                features=feats,
                calendar=calendar,
                feature_names=tuple(c[len("feature_"):] for c in feat_cols),
                t_start=ts[0],
            )
        return out
    finally:
        if close:
            fh.close()


def write_csv(series_map, path_or_file):
    """Inverse of load_csv for the same schema."""
    close = False
    if isinstance(path_or_file, (str, bytes)) or hasattr(path_or_file, "__fspath__"):
        fh = open(path_or_file, "w", newline="")
        close = True
    else:
        fh = path_or_file
    try:
        writer = csv.writer(fh)
        first = next(iter(series_map.values()))
        feat_cols = [f"feature_{n}" for n in first.feature_names]
        season_cols = [f"season_{n}" for n in first.calendar]
        writer.writerow(["item_id", "t", "z", "availability",
                         *feat_cols, *season_cols])
        for item in series_map.values():
            for i in range(item.length):
                feats = ([] if item.features is None
                         else [repr(float(v)) for v in item.features[i]])
                seasons = [str(int(item.calendar[n][i]))
                           for n in item.calendar]
                writer.writerow([item.item_id, item.t_start + i,
                                 repr(float(item.z[i])),
                                 repr(float(item.availability[i])),
                                 *feats, *seasons])
    finally:
        if close:
            fh.close()


def dumps_csv(series_map):
    buf = io.StringIO()
    write_csv(series_map, buf)
    return buf.getvalue()


def simulate_issm(model, likelihood, params, length, calendar=None,
                  features=None, rng=None, oos_windows=()):
    """Exact draw from the generative model; returns (series arrays, truth).

    ``oos_windows`` is a list of (start, stop) index pairs; inside them the
    availability is zeroed and recorded sales are forced to zero.
    """
    rng = rng or np.random.default_rng(0)
    coeffs = model.coefficients(length, calendar=calendar, train_len=length)
    g = coeffs.g(params.strengths)
    from .params import ParameterLayout  # just for the std mapping

    lay = ParameterLayout(model, likelihood,
                          0 if features is None else features.shape[1])
    prior_std = params.prior_std(lay)
    state = params.mu0 + prior_std * rng.standard_normal(model.total_dim)
    b = (features @ params.weights if features is not None
         else np.zeros(length))
    y = np.empty(length)
    y[0] = coeffs.a[0] @ state + b[0]
    for t in range(1, length):
        state = coeffs.F @ state + g[t - 1] * rng.standard_normal()
        y[t] = coeffs.a[t] @ state + b[t]
    z = likelihood.sample(y, params.lh, rng)
    availability = np.ones(length)
    for start, stop in oos_windows:
        start = max(int(start), 0)
        stop = min(int(stop), length)
        availability[start:stop] = 0.0
        z[start:stop] = 0.0
    truth = {"y": y, "params": params}
    return z, availability, truth


def simulate_multi_stage(model, transfer, stage_params, length, calendar=None,
                         features=None, rng=None, oos_windows=()):
    """Draw from the three-stage emission with independent stage processes."""
    from .likelihood import BernoulliLikelihood, sigmoid

    rng = rng or np.random.default_rng(0)
    ys = []
    for params in stage_params:
        coeffs = model.coefficients(length, calendar=calendar,
                                    train_len=length)
        g = coeffs.g(params.strengths)
        from .params import ParameterLayout

        lay = ParameterLayout(model, BernoulliLikelihood(),
                              0 if features is None else features.shape[1])
        prior_std = params.prior_std(lay)
        state = params.mu0 + prior_std * rng.standard_normal(model.total_dim)
        b = (features @ params.weights if features is not None
             else np.zeros(length))
        y = np.empty(length)
        y[0] = coeffs.a[0] @ state + b[0]
        for t in range(1, length):
            state = coeffs.F @ state + g[t - 1] * rng.standard_normal()
            y[t] = coeffs.a[t] @ state + b[t]
        ys.append(y)
    p0 = sigmoid(ys[0])
    p1 = sigmoid(ys[1])
    lam = transfer.eval(ys[2])[0]
    z = np.where(rng.random(length) < p0, 0.0,
                 np.where(rng.random(length) < p1, 1.0,
                          2.0 + rng.poisson(lam)))
    availability = np.ones(length)
    for start, stop in oos_windows:
        availability[int(start):int(stop)] = 0.0
        z[int(start):int(stop)] = 0.0
    return z, availability, {"y": ys}


def simulate_drifting_seasonal(length, cycle, rng=None, base=5.0,
                               amplitude_start=1.0, amplitude_end=3.0,
                               noise_std=0.3):
    """Seasonal shape whose amplitude drifts linearly over the range.

    A feature-only model can only learn the average amplitude, which is
    exactly the failure mode this generator exists to demonstrate.
    """
    rng = rng or np.random.default_rng(0)
    shape = np.sin(2.0 * np.pi * np.arange(cycle) / cycle)
    amp = np.linspace(amplitude_start, amplitude_end, length)
    idx = np.arange(length) % cycle
    z = base + amp * shape[idx] + noise_std * rng.standard_normal(length)
    return z, idx
