"""Quantile-loss and risk metrics over spans of the prediction range.

Span demand is the availability-weighted sum of actuals over [lead,
lead+span); items insufficiently in stock over the span are dropped
before averaging.  Availability may be fractional in the data model: it
weights the demand sums as-is, while the in-stock filter coerces it to a
binary "in stock at least half the day".
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

IN_STOCK_CUTOFF = 0.5


@dataclass
class EvaluationSpec:
    """Which spans and quantiles to report, plus the in-stock threshold."""

    spans: list = field(default_factory=lambda: [(0, 7)])
    quantiles: list = field(default_factory=lambda: [0.5, 0.9])
    in_stock_fraction: float = 0.8

    def __post_init__(self):
        for rho in self.quantiles:
            if not 0.0 < rho < 1.0:
                raise DataError(f"quantile {rho} outside (0, 1)")
        for lead, span in self.spans:
            if lead < 0 or span < 1:
                raise DataError(f"invalid span ({lead}, {span})")
        if not 0.0 < self.in_stock_fraction <= 1.0:
            raise DataError("in-stock threshold must lie in (0, 1]")


def quantile_loss(z, z_hat, rho):
    """2 (z - zhat) (rho 1{z > zhat} - (1 - rho) 1{z <= zhat})."""
    if not 0.0 < rho < 1.0:
        raise DataError(f"quantile {rho} outside (0, 1)")
    z = np.asarray(z, dtype=float)
    z_hat = np.asarray(z_hat, dtype=float)
    over = (z > z_hat).astype(float)
    return 2.0 * (z - z_hat) * (rho * over - (1.0 - rho) * (1.0 - over))


@dataclass
class RiskResult:
    value: float
    n_items: int


def span_actual(z, in_stock, lead, span):
    """Availability-weighted actual demand over the span."""
    zs = np.asarray(z, dtype=float)[lead:lead + span]
    pi = np.asarray(in_stock, dtype=float)[lead:lead + span]
    return float(np.sum(pi * zs))


def risk(predicted_quantiles, actuals, in_stock, lead, span, rho,
         in_stock_fraction=0.8):
    """Mean rho-quantile loss of span demand over sufficiently stocked items.

    ``predicted_quantiles`` maps item -> predicted rho-quantile of span
    demand; ``actuals``/``in_stock`` map item -> per-step arrays.  Items
    whose in-stock day count over the span falls below the threshold are
    excluded; an empty retained set is reported explicitly, never as 0.
    """
    losses = []
    for item, z_hat in predicted_quantiles.items():
        z = np.asarray(actuals[item], dtype=float)
        pi = np.asarray(in_stock[item], dtype=float)
        if lead + span > len(z):
            raise DataError(f"span outside actuals range for item {item!r}")
        stocked = (pi[lead:lead + span] >= IN_STOCK_CUTOFF).sum()
        if stocked < in_stock_fraction * span:
            continue
        z_span = span_actual(z, pi, lead, span)
        losses.append(float(quantile_loss(z_span, z_hat, rho)))
    if not losses:
        return RiskResult(value=float("nan"), n_items=0)
    return RiskResult(value=float(np.mean(losses)), n_items=len(losses))


def weekly_risk_average(predicted_by_span, actuals, in_stock, rho, n_weeks,
                        in_stock_fraction=0.8):
    """Average of weekly risks over spans (7k, 7), k = 0..n_weeks-1."""
    vals = []
    for k in range(n_weeks):
        r = risk(predicted_by_span[(7 * k, 7)], actuals, in_stock,
                 7 * k, 7, rho, in_stock_fraction)
        if r.n_items:
            vals.append(r.value)
    return float(np.mean(vals)) if vals else float("nan")


def daily_risk_average(predicted_by_span, actuals, in_stock, rho, n_days,
                       in_stock_fraction=0.8):
    """Average of daily risks over spans (k, 1), k = 0..n_days-1."""
    vals = []
    for k in range(n_days):
        r = risk(predicted_by_span[(k, 1)], actuals, in_stock, k, 1, rho,
                 in_stock_fraction)
        if r.n_items:
            vals.append(r.value)
    return float(np.mean(vals)) if vals else float("nan")
