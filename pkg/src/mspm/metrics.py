"""Performance metrics over daily log-return series.

Percentages follow the net convention ``(gross - 1) * 100``; the literal gross
values are kept in :class:`MetricBundle` as ``raw_mean_gross`` and
``raw_value_ratio``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np


class MetricError(ValueError):
    pass


def _returns(R) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    if R.ndim != 1 or R.size == 0:
        raise MetricError("need a non-empty 1-D return series")
    if not np.all(np.isfinite(R)):
        raise MetricError("return series contains non-finite values")
    return R


def mean_gross_return(R) -> float:
    return float(np.mean(np.exp(_returns(R))))


def drr(R) -> float:
    """Daily rate of return in percent: mean of exp(R_t), net of 1."""
    return (mean_gross_return(R) - 1.0) * 100.0


def final_value(R, p0: float) -> float:
    return float(p0 * np.exp(np.sum(_returns(R))))


def arr(R, p0: float = 10_000.0) -> tuple[float, float]:
    """Accumulated rate of return in percent, and the terminal value p_T."""
    pT = final_value(R, p0)
    return (pT / p0 - 1.0) * 100.0, pT


def sortino(R, risk_free: float = 0.0) -> float:
    """Net mean daily return over the dispersion of the negative returns.

    Uses ``Var(R_l - R_f)`` (population variance) of the negative log-returns,
    without annualisation.
    """
    R = _returns(R)
    neg = R[R < 0]
    if neg.size == 0:
        raise MetricError("no negative returns: downside deviation is zero")
    downside = np.sqrt(np.var(neg - risk_free))
    if downside == 0:
        raise MetricError("downside deviation is zero")
    return float((np.mean(np.exp(R)) - 1.0 - risk_free) / downside)


def drawdown_series(values) -> np.ndarray:
    """Per-step drawdown in percent relative to the running peak (<= 0)."""
    p = np.asarray(values, dtype=np.float64)
    if p.size == 0 or np.any(p <= 0):
        raise MetricError("drawdown needs a non-empty positive value series")
    return (p / np.maximum.accumulate(p) - 1.0) * 100.0


def max_drawdown(values) -> float:
    return float(drawdown_series(values).min())


def sma(series, n: int) -> np.ndarray:
    x = np.asarray(series, dtype=np.float64)
    if n < 1 or x.size < n:
        raise MetricError(f"series of length {x.size} shorter than window {n}")
    return np.lib.stride_tricks.sliding_window_view(x, n).mean(axis=1)


def rstd_drr(series, n: int = 5) -> np.ndarray:
    """Trailing-window population standard deviation around the window SMA."""
    x = np.asarray(series, dtype=np.float64)
    means = sma(x, n)
    windows = np.lib.stride_tricks.sliding_window_view(x, n)
    return np.sqrt(np.mean((windows - means[:, None]) ** 2, axis=1))


def daily_gross_returns(R) -> np.ndarray:
    """Per-day exp(R_t): the DRR series whose rolling dispersion measures stability."""
    return np.exp(_returns(R))


@dataclass(frozen=True)
class MetricBundle:
    drr_pct: float
    arr_pct: float
    sortino: float | None
    max_drawdown_pct: float
    raw_mean_gross: float
    raw_value_ratio: float
    final_value: float

    def to_json(self) -> dict:
        return asdict(self)

    def rounded(self) -> dict:
        """Display precision: 3 decimals DRR, 1 decimal ARR/MD, 2 decimals SR."""
        return {"DRR (%)": round(self.drr_pct, 3), "ARR (%)": round(self.arr_pct, 1),
                "MD (%)": round(self.max_drawdown_pct, 1),
                "SR": None if self.sortino is None else round(self.sortino, 2)}


def metric_bundle(R, p0: float = 10_000.0) -> MetricBundle:
    R = _returns(R)
    arr_pct, pT = arr(R, p0)
    values = p0 * np.exp(np.concatenate([[0.0], np.cumsum(R)]))
    try:
        sr = sortino(R)
    except MetricError:
        sr = None
    return MetricBundle(drr_pct=drr(R), arr_pct=arr_pct, sortino=sr,
                        max_drawdown_pct=max_drawdown(values),
                        raw_mean_gross=mean_gross_return(R), raw_value_ratio=pT / p0,
                        final_value=pT)
