"""Online portfolio-selection baselines run through the shared ledger engine.

All four allocate over the risky assets only; the cash entry of their
m*-vectors is held at zero.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .metrics import MetricBundle
from .sam import Ledger, Market, run_ledger

KINDS = ("CRP", "BAH", "EG", "FTRL")


class ConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class BaselineSpec:
    kind: str
    eta: float = 0.05  # EG learning rate
    reg: float = 0.1  # FTRL L2 strength

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown baseline {self.kind!r}; expected one of {KINDS}")
        if self.kind == "EG" and self.eta < 0:
            raise ValueError("EG learning rate must be >= 0")
        if self.reg < 0:
            raise ValueError("FTRL regularization must be >= 0")


def crp_weights(m_star: int, t: int = 0) -> np.ndarray:
    """Equal weight 1/N on the N = m* - 1 risky assets, nothing in cash."""
    if m_star < 2:
        raise ValueError("need at least one risky asset")
    a = np.full(m_star, 1.0 / (m_star - 1))
    a[0] = 0.0
    return a


def bah_weights(a0, y_history) -> np.ndarray:
    """Post-drift weights of an untouched portfolio, one row per period."""
    w = np.asarray(a0, dtype=np.float64)
    out = []
    for y in np.asarray(y_history, dtype=np.float64):
        v = w * y
        w = v / v.sum()
        out.append(w)
    return np.array(out).reshape(-1, w.size)


def eg_update(w, y, eta: float) -> np.ndarray:
    """Multiplicative update ``w_i exp(eta y_i / (w . y))``, renormalised."""
    w = np.asarray(w, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    g = eta * y / float(w @ y)
    v = w * np.exp(g - g.max())
    return v / v.sum()


def project_simplex(v) -> np.ndarray:
    """Euclidean projection onto the probability simplex (sort-based)."""
    v = np.asarray(v, dtype=np.float64)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    rho = np.nonzero(u * np.arange(1, v.size + 1) > css)[0][-1]
    theta = css[rho] / (rho + 1.0)
    return np.maximum(v - theta, 0.0)


def ftrl_objective(a, y_history, reg: float) -> float:
    y = np.asarray(y_history, dtype=np.float64)
    return float(np.log(y @ a).sum() - 0.5 * reg * float(a @ a))


def ftrl_update(y_history, reg: float, x0=None, tol: float = 1e-8, max_iter: int = 10_000) -> np.ndarray:
    """``argmax_a sum_s ln(a . y_s) - reg/2 |a|^2`` over the simplex of risky
    assets, by projected gradient ascent with a backtracking step."""
    y = np.asarray(y_history, dtype=np.float64)
    if y.ndim != 2 or y.shape[0] < 1:
        raise ValueError("FTRL needs at least one period of history")
    m = y.shape[1]
    a = np.full(m, 1.0 / m) if x0 is None else project_simplex(x0)
    grad = lambda x: (y / (y @ x)[:, None]).sum(axis=0) - reg * x  # noqa: E731
    g = grad(a)
    step = 1.0
    for _ in range(max_iter):
        while True:
            cand = project_simplex(a + step * g)
            d = cand - a
            gc = grad(cand)
            # local Lipschitz test on gradients; objective differences drown
            # in rounding near the optimum
            if -float((gc - g) @ d) <= float(d @ d) / step:
                break
            step *= 0.5
            if step < 1e-20:
                raise ConvergenceError("FTRL line search failed")
        a, g = cand, gc
        if np.abs(d).max() < tol:
            return a
        step *= 2.0
    raise ConvergenceError(f"FTRL did not converge in {max_iter} iterations")


def _with_cash(risky: np.ndarray) -> np.ndarray:
    return np.concatenate([[0.0], risky])


def baseline_policy(spec: BaselineSpec, market: Market, start: int):
    """A ``policy(k, w_prev)`` closure for the ledger engine."""
    m_star = market.m + 1
    uniform = crp_weights(m_star)
    state = {"a": uniform}

    if spec.kind == "CRP":
        return lambda k, w: uniform

    if spec.kind == "BAH":
        def bah(k, w):
            return uniform if k == start and w[0] == 1.0 else w
        return bah

    if spec.kind == "EG":
        def eg(k, w):
            if k > start:
                state["a"] = eg_update(state["a"], market.y[k], spec.eta)
            return state["a"]
        return eg

    def ftrl(k, w):
        history = market.y[1:k + 1, 1:]
        if history.shape[0] == 0:
            return uniform
        risky = ftrl_update(history, spec.reg, x0=state["a"][1:])
        state["a"] = _with_cash(risky)
        return state["a"]
    return ftrl


def run_baseline(spec: BaselineSpec, market: Market, p0: float = 10_000.0, beta: float = 0.0025,
                 phi: float = 0.001, window: int = 50, start: int | None = None, stop: int | None = None,
                 initial_weights=None) -> tuple[Ledger, MetricBundle | None]:
    """Same accounting path as the SAM backtest with the policy swapped.

    BAH starts from the uniform risky allocation; when ``initial_weights``
    are given it simply holds them (no trade at all).
    """
    start = market.first_decision(window) if start is None else start
    ledger = run_ledger(market, baseline_policy(spec, market, start), spec.kind, p0, beta, phi,
                        window, start, stop, initial_weights)
    return ledger, (ledger.metrics() if len(ledger) else None)
