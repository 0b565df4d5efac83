"""Normality, variance-equality and rank tests for comparing return stability."""
from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import ndtr, ndtri
from scipy.stats import f as f_dist

from .metrics import rstd_drr


class StatsError(ValueError):
    pass


# Royston (1995) polynomial approximations for the Shapiro-Wilk W test.
_C1 = (0.0, 0.221157, -0.147981, -2.07119, 4.434685, -2.706056)
_C2 = (0.0, 0.042981, -0.293762, -1.752461, 5.682633, -3.582633)
_C3 = (0.544, -0.39978, 0.025054, -6.714e-4)
_C4 = (1.3822, -0.77857, 0.062767, -0.0020322)
_C5 = (-1.5861, -0.31082, -0.083751, 0.0038915)
_C6 = (-0.4803, -0.082676, 0.0030302)
_G = (-2.273, 0.459)


def _poly(coef, x: float) -> float:
    out = 0.0
    for c in reversed(coef):
        out = out * x + c
    return out


def shapiro_wilk_coefficients(n: int) -> np.ndarray:
    """Antisymmetric weights for the ordered sample (sum of squares 1)."""
    half = n // 2
    if n == 3:
        upper = np.array([math.sqrt(0.5)])
    else:
        m = -ndtri((np.arange(1, half + 1) - 0.375) / (n + 0.25))
        summ2 = 2.0 * float(m @ m)
        ssumm2 = math.sqrt(summ2)
        rsn = 1.0 / math.sqrt(n)
        a1 = _poly(_C1, rsn) + m[0] / ssumm2
        upper = m.copy()
        if n > 5:
            a2 = _poly(_C2, rsn) + m[1] / ssumm2
            fac = math.sqrt((summ2 - 2 * m[0] ** 2 - 2 * m[1] ** 2) / (1 - 2 * a1 ** 2 - 2 * a2 ** 2))
            upper = m / fac
            upper[1] = a2
        else:
            fac = math.sqrt((summ2 - 2 * m[0] ** 2) / (1 - 2 * a1 ** 2))
            upper = m / fac
        upper[0] = a1
    a = np.zeros(n)
    a[:half] = -upper
    a[n - half:] = upper[::-1]
    return a


def shapiro_wilk(sample) -> tuple[float, float]:
    """Shapiro-Wilk W and its p-value (Royston's AS R94 approximation)."""
    x = np.sort(np.asarray(sample, dtype=np.float64))
    n = x.size
    if not 3 <= n <= 5000:
        raise StatsError(f"Shapiro-Wilk needs 3 <= n <= 5000, got {n}")
    rng_ = x[-1] - x[0]
    if rng_ < 1e-19:
        raise StatsError("Shapiro-Wilk: sample has zero range")
    a = shapiro_wilk_coefficients(n)
    xs = x / rng_
    xs = xs - xs.mean()
    a = a - a.mean()
    ssa, ssx, sax = float(a @ a), float(xs @ xs), float(a @ xs)
    root = math.sqrt(ssa * ssx)
    w1 = (root - sax) * (root + sax) / (ssa * ssx)
    w = 1.0 - w1
    if n == 3:
        p = (6.0 / math.pi) * (math.asin(math.sqrt(w)) - math.pi / 3.0)
        return w, min(max(p, 0.0), 1.0)
    y = math.log(w1)
    if n <= 11:
        gamma = _poly(_G, n)
        if y >= gamma:
            return w, 1e-99
        y = -math.log(gamma - y)
        mean, sd = _poly(_C3, n), math.exp(_poly(_C4, n))
    else:
        ln = math.log(n)
        mean, sd = _poly(_C5, ln), math.exp(_poly(_C6, ln))
    return w, float(ndtr((mean - y) / sd))


def levene(sample1, sample2) -> tuple[float, float]:
    """Levene's test with group-mean centring; p from F(1, n1 + n2 - 2)."""
    groups = [np.asarray(s, dtype=np.float64) for s in (sample1, sample2)]
    if any(g.size < 2 for g in groups):
        raise StatsError("Levene's test needs at least 2 observations per group")
    z = [np.abs(g - g.mean()) for g in groups]
    N = sum(g.size for g in groups)
    k = len(groups)
    zbar = np.concatenate(z).mean()
    between = sum(zi.size * (zi.mean() - zbar) ** 2 for zi in z)
    within = sum(float(((zi - zi.mean()) ** 2).sum()) for zi in z)
    if within == 0:
        if between == 0:
            return 0.0, 1.0
        raise StatsError("Levene's test: zero within-group dispersion")
    W = (N - k) / (k - 1) * between / within
    return float(W), float(f_dist.sf(W, k - 1, N - k))


def _midranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(values.size)
    sorted_vals = values[order]
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


EXACT_LIMIT = 20


def mann_whitney_exact_distribution(ranks: np.ndarray, n1: int) -> tuple[np.ndarray, np.ndarray]:
    """All attainable U values for the first sample and their probabilities,
    enumerating every assignment of the pooled (mid)ranks to sample 1."""
    combos = np.array(list(itertools.combinations(range(ranks.size), n1)), dtype=np.int64)
    u = ranks[combos].sum(axis=1) - n1 * (n1 + 1) / 2.0
    values, counts = np.unique(u, return_counts=True)
    return values, counts / counts.sum()


def mann_whitney_u(sample1, sample2, tail: str = "less") -> tuple[float, float]:
    """Mann-Whitney U of ``sample1`` and its one-tailed p-value.

    ``tail="less"`` tests whether sample1 tends to be smaller. Exact
    enumeration when ``n1 + n2 <= 20``; otherwise the normal approximation
    with tie and continuity corrections.
    """
    if tail not in ("less", "greater"):
        raise ValueError("tail must be 'less' or 'greater'")
    x = np.asarray(sample1, dtype=np.float64)
    y = np.asarray(sample2, dtype=np.float64)
    n1, n2 = x.size, y.size
    if n1 < 1 or n2 < 1:
        raise StatsError("Mann-Whitney needs non-empty samples")
    ranks = _midranks(np.concatenate([x, y]))
    U = float(ranks[:n1].sum() - n1 * (n1 + 1) / 2.0)
    N = n1 + n2
    if N <= EXACT_LIMIT:
        values, probs = mann_whitney_exact_distribution(ranks, n1)
        eps = 1e-9
        mask = values <= U + eps if tail == "less" else values >= U - eps
        return U, float(min(probs[mask].sum(), 1.0))
    _, counts = np.unique(ranks, return_counts=True)
    tie = float(((counts ** 3) - counts).sum())
    var = n1 * n2 / 12.0 * ((N + 1) - tie / (N * (N - 1)))
    if var <= 0:
        return U, 1.0
    mu = n1 * n2 / 2.0
    sd = math.sqrt(var)
    if tail == "less":
        return U, float(ndtr((U - mu + 0.5) / sd))
    return U, float(ndtr((mu - U + 0.5) / sd))


@dataclass(frozen=True)
class StabilityTestReport:
    label_a: str
    label_b: str
    n_a: int
    n_b: int
    mean_a: float
    sd_a: float
    mean_b: float
    sd_b: float
    normality_p_a: float
    normality_p_b: float
    normality_w_a: float
    normality_w_b: float
    levene_statistic: float
    levene_p: float
    tail: str
    u_statistic: float
    p_value: float
    alpha: float
    null_hypothesis: str
    alternative_hypothesis: str
    verdict: str

    def to_json(self) -> dict:
        d = asdict(self)
        d["table"] = {
            f"{self.label_a} M(SD)": f"{self.mean_a:.3f}({self.sd_a:.3f})",
            f"{self.label_a} Normality": self.normality_p_a,
            f"{self.label_b} M(SD)": f"{self.mean_b:.3f}({self.sd_b:.3f})",
            f"{self.label_b} Normality": self.normality_p_b,
            "EV": self.levene_statistic,
            "U": self.u_statistic,
            "p-value": self.p_value,
        }
        return d


def stability_protocol(rstd_a, rstd_b, alpha: float = 0.05, label_a: str = "A",
                       label_b: str = "B") -> StabilityTestReport:
    """Normality and equal-variance checks, then a one-tailed Mann-Whitney U
    test whose direction follows the sample means: if A's mean rolling std is
    lower, the alternative is "A more stable", otherwise "A less stable"."""
    a = np.asarray(rstd_a, dtype=np.float64)
    b = np.asarray(rstd_b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise StatsError("stability protocol needs non-empty series")
    wa, pa = shapiro_wilk(a)
    wb, pb = shapiro_wilk(b)
    lev, lev_p = levene(a, b)
    if a.mean() <= b.mean():
        tail = "less"
        h0 = f"{label_a} mean RstdDRR >= {label_b} ({label_a} not more stable)"
        ha = f"{label_a} mean RstdDRR < {label_b} ({label_a} more stable)"
        win = f"{label_a} more stable"
    else:
        tail = "greater"
        h0 = f"{label_a} mean RstdDRR <= {label_b} ({label_a} not less stable)"
        ha = f"{label_a} mean RstdDRR > {label_b} ({label_a} less stable)"
        win = f"{label_a} less stable"
    U, p = mann_whitney_u(a, b, tail=tail)
    verdict = f"reject H0: {win}" if p < alpha else "H0 retained"
    return StabilityTestReport(
        label_a=label_a, label_b=label_b, n_a=int(a.size), n_b=int(b.size),
        mean_a=float(a.mean()), sd_a=float(a.std(ddof=1)) if a.size > 1 else 0.0,
        mean_b=float(b.mean()), sd_b=float(b.std(ddof=1)) if b.size > 1 else 0.0,
        normality_p_a=pa, normality_p_b=pb, normality_w_a=wa, normality_w_b=wb,
        levene_statistic=lev, levene_p=lev_p, tail=tail, u_statistic=U, p_value=p,
        alpha=alpha, null_hypothesis=h0, alternative_hypothesis=ha, verdict=verdict)


def stability_from_returns(R_a, R_b, window: int = 5, **kw) -> StabilityTestReport:
    """Rolling std of the daily gross-return series of each strategy, then the protocol."""
    return stability_protocol(rstd_drr(np.exp(np.asarray(R_a)), window),
                              rstd_drr(np.exp(np.asarray(R_b)), window), **kw)
