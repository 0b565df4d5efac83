"""Portfolio allocator: profound-state assembly, portfolio accounting,
a Gaussian-softmax policy trained with clipped PPO, and the backtest loop.

Timing convention: the allocation chosen at day ``k`` sees the window of
days ``k-n+1 .. k`` and earns the price relatives ``y[k+1]``; its ledger row
is dated ``k+1``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .data import DataError
from .eam import SignalFrame
from .metrics import MetricBundle, metric_bundle
from .nncore import (
    AdamState,
    AllocationHead,
    Conv1d,
    Dense,
    Flatten,
    Network,
    NonFiniteError,
    PerAsset,
    ReLU,
    adam_step,
    clip_by_global_norm,
    gaussian_log_prob,
    gaussian_log_prob_backward,
    softmax,
)

FEATURES = ("close", "open", "high", "low", "volume", "signal")
CASH = "CASH"
CATASTROPHE_REWARD = -10.0
SIMPLEX_TOL = 1e-9


class AccountingError(RuntimeError):
    pass


class CatastrophicLoss(ArithmeticError):
    """The log argument of the period reward was non-positive."""


@dataclass(frozen=True)
class SamHyperparams:
    beta: float = 0.0025
    phi: float = 0.001
    window: int = 50
    clip: float = 0.2
    gamma: float = 0.99
    lam: float = 0.95
    epochs: int = 4
    rollout: int = 256
    minibatch: int = 64
    sigma_train: float = 0.1
    lr_actor: float = 3e-4
    lr_critic: float = 1e-3
    updates: int = 200
    conv_channels: tuple[int, int] = (4, 16)
    grad_clip: float = 1.0
    p0: float = 10_000.0

    def __post_init__(self) -> None:
        if self.beta < 0 or self.phi < 0:
            raise ValueError("beta and phi must be >= 0")
        if not 0 < self.clip < 1:
            raise ValueError("clip must be in (0, 1)")
        if self.sigma_train < 0:
            raise ValueError("sigma_train must be >= 0")
        if self.window < 3:
            raise ValueError("window must be >= 3")


# --- accounting -------------------------------------------------------------

def relative_price_vector(prev_close, close) -> np.ndarray:
    """``y = (1, close_t / close_{t-1})`` with the cash entry first."""
    prev = np.asarray(prev_close, dtype=np.float64)
    cur = np.asarray(close, dtype=np.float64)
    if np.any(prev <= 0) or np.any(cur <= 0):
        raise DataError("relative prices need positive closes")
    return np.concatenate([[1.0], cur / prev])


def drift_weights(a, y) -> np.ndarray:
    """Weights after prices move: ``(y * a) / (y . a)``."""
    a = np.asarray(a, dtype=np.float64)
    v = np.asarray(y, dtype=np.float64) * a
    return v / v.sum()


def transaction_cost(a, w_prev, beta: float) -> float:
    return float(beta * np.abs(np.asarray(a) - np.asarray(w_prev)).sum())


def risk_penalty(y_window) -> float:
    """``(1/n) * sum_s sum_i (y[s, i] - mean_s y[:, i])**2`` over an (n, m*) window."""
    y = np.asarray(y_window, dtype=np.float64)
    if y.ndim != 2 or y.shape[0] < 1:
        raise DataError("risk penalty needs an (n, m*) window of relative prices")
    return float(((y - y.mean(axis=0)) ** 2).sum() / y.shape[0])


def sam_reward(a, y, w_prev, beta: float, phi: float, sigma2: float) -> tuple[float, float, float]:
    """Risk-adjusted log return ``r*``, plain log return ``R`` and the cost.

    Raises :class:`CatastrophicLoss` when either log argument is not positive.
    """
    gross = float(np.dot(a, y))
    cost = transaction_cost(a, w_prev, beta)
    plain = gross - cost
    adjusted = plain - phi * sigma2
    if plain <= 0 or adjusted <= 0:
        raise CatastrophicLoss(f"non-positive log argument (gross {gross}, cost {cost}, risk {phi * sigma2})")
    return float(np.log(adjusted)), float(np.log(plain)), cost


def on_simplex(a, tol: float = SIMPLEX_TOL) -> bool:
    a = np.asarray(a)
    return bool(np.all(a >= 0) and abs(a.sum() - 1.0) <= tol)


# --- market tensor and profound state ---------------------------------------

class Market:
    """Aligned per-asset signal frames as one (6, m, T) tensor."""

    def __init__(self, frames: list[SignalFrame]) -> None:
        if not frames:
            raise DataError("market needs at least one asset")
        dates = frames[0].dates
        for f in frames[1:]:
            if len(f.dates) != len(dates) or not np.array_equal(f.dates, dates):
                raise DataError(f"frames misaligned: {f.symbol} vs {frames[0].symbol}")
        self.symbols = [f.symbol for f in frames]
        self.dates = dates
        self.data = np.stack([f.tensor() for f in frames], axis=1)  # (6, m, T)
        close = self.data[0]
        if np.any(close <= 0):
            raise DataError("non-positive close in market")
        y = np.ones((close.shape[1], close.shape[0] + 1))
        y[1:, 1:] = (close[:, 1:] / close[:, :-1]).T
        self.y = y  # y[k] relates day k-1 to day k; y[0] is undefined (ones)

    @property
    def m(self) -> int:
        return len(self.symbols)

    @property
    def T(self) -> int:
        return len(self.dates)

    def state(self, k: int, n: int) -> np.ndarray:
        return self.states(np.array([k]), n)[0]

    def states(self, ks: np.ndarray, n: int) -> np.ndarray:
        """Profound states (B, 6, m+1, n) for windows ending at days ``ks``.

        Prices are rebased by each asset's last close in the window and volume
        by its window mean; the cash row (first) has prices 1, volume 0 and
        signal 0.
        """
        ks = np.asarray(ks)
        if np.any(ks < n - 1) or np.any(ks >= self.T):
            raise DataError(f"window of {n} days ending at {ks.min()}..{ks.max()} outside the market")
        idx = ks[:, None] + np.arange(-n + 1, 1)[None, :]  # (B, n)
        win = self.data[:, :, idx]  # (6, m, B, n)
        win = win.transpose(2, 0, 1, 3).copy()  # (B, 6, m, n)
        last = win[:, 0:1, :, -1:]
        win[:, :4] /= last
        vmean = win[:, 4].mean(axis=-1, keepdims=True)
        win[:, 4] = np.divide(win[:, 4], vmean, out=np.zeros_like(win[:, 4]), where=vmean > 0)
        B = ks.size
        out = np.empty((B, 6, self.m + 1, n))
        out[:, :, 1:] = win
        out[:, :4, 0] = 1.0
        out[:, 4:, 0] = 0.0
        return out

    def ablated(self) -> "Market":
        """Same market with the signal channel zeroed."""
        other = object.__new__(Market)
        other.symbols, other.dates, other.y = self.symbols, self.dates, self.y
        other.data = self.data.copy()
        other.data[5] = 0.0
        return other

    def first_decision(self, n: int) -> int:
        return n - 1

    def index_of(self, date) -> int:
        i = int(np.searchsorted(self.dates, np.datetime64(date, "D")))
        if i >= self.T:
            raise DataError(f"{date} after the market's last date")
        return i


def stack_profound_state(frames: list[SignalFrame], t: int, n: int) -> np.ndarray:
    """(6, m+1, n) state for the window ending at day index ``t``."""
    return Market(frames).state(t, n)


# --- networks and policy ----------------------------------------------------

def network_input(states: np.ndarray) -> np.ndarray:
    """Fixed centring of the profound state for the networks: log prices
    (scaled by 10), volume minus 1, signals unchanged."""
    x = np.array(states, dtype=np.float64, copy=True)
    x[:, :4] = 10.0 * np.log(x[:, :4])
    x[:, 4] -= 1.0
    return x


def _trunk(f: int, n: int, c1: int, c2: int) -> PerAsset:
    return PerAsset([Conv1d(f, c1, 3), ReLU(), Conv1d(c1, c2, n - 2), ReLU()])


def actor_network(m_star: int, hp: SamHyperparams, f: int = 6) -> Network:
    """Per-asset conv stack over time (weights shared across assets) and a
    shared linear score per asset."""
    c1, c2 = hp.conv_channels
    return Network([_trunk(f, hp.window, c1, c2), AllocationHead(c2)], name="sam_actor")


def critic_network(m_star: int, hp: SamHyperparams, f: int = 6) -> Network:
    c1, c2 = hp.conv_channels
    return Network([_trunk(f, hp.window, c1, c2), Flatten(), Dense(m_star * c2, 1)], name="sam_critic")


def policy_forward(actor: Network, state: np.ndarray, sigma: float,
                   rng: np.random.Generator | None = None):
    """Sample ``x = mu + sigma * z`` and return ``(x, softmax(x), log p(x))``.

    With ``sigma == 0`` the draw is skipped and the log-probability is None.
    Accepts a single (6, m*, n) state or a batch.
    """
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    s = np.asarray(state, dtype=np.float64)
    single = s.ndim == 3
    mu = actor(network_input(s[None] if single else s))
    if sigma == 0:
        x, logp = mu, None
    else:
        if rng is None:
            raise ValueError("sampling with sigma > 0 needs an rng")
        x = mu + sigma * rng.standard_normal(mu.shape)
        logp = gaussian_log_prob(x, mu, sigma)
    a = softmax(x)
    if single:
        return x[0], a[0], None if logp is None else float(logp[0])
    return x, a, logp


# --- advantage estimation ---------------------------------------------------

def gae(rewards, values, next_values, terminal, episode_end, gamma: float, lam: float):
    """Generalized advantage estimates and return targets (``A + V``).

    ``terminal`` drops the bootstrap value; ``episode_end`` (terminal or
    truncated) stops the backward recursion.
    """
    r = np.asarray(rewards, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    nv = np.asarray(next_values, dtype=np.float64)
    term = np.asarray(terminal, dtype=bool)
    end = np.asarray(episode_end, dtype=bool) | term
    adv = np.zeros_like(r)
    running = 0.0
    for t in range(r.size - 1, -1, -1):
        delta = r[t] + gamma * nv[t] * (not term[t]) - v[t]
        running = delta + (0.0 if end[t] else gamma * lam * running)
        adv[t] = running
    return adv, adv + v


def advantage_estimates(rewards, values, last_value: float, gamma: float, lam: float,
                        dones=None, normalize: bool = True):
    """GAE over a single contiguous rollout that bootstraps from ``last_value``."""
    v = np.asarray(values, dtype=np.float64)
    nv = np.append(v[1:], last_value)
    d = np.zeros(v.size, dtype=bool) if dones is None else np.asarray(dones, dtype=bool)
    adv, ret = gae(rewards, v, nv, d, d, gamma, lam)
    return (normalize_advantages(adv) if normalize else adv), ret


def normalize_advantages(adv) -> np.ndarray:
    adv = np.asarray(adv, dtype=np.float64)
    sd = adv.std()
    return (adv - adv.mean()) / (sd if sd > 1e-12 else 1.0)


# --- PPO --------------------------------------------------------------------

def clipped_surrogate(logp_new, logp_old, adv, clip: float):
    """Mean clipped surrogate, its gradient w.r.t. ``logp_new`` and the
    fraction of samples whose ratio left ``[1 - clip, 1 + clip]``."""
    ratio = np.exp(np.asarray(logp_new) - np.asarray(logp_old))
    adv = np.asarray(adv)
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1 - clip, 1 + clip) * adv
    surr = np.minimum(unclipped, clipped)
    active = unclipped <= clipped  # gradient flows through the unclipped branch
    dlogp = np.where(active, unclipped, 0.0) / ratio.size
    return float(surr.mean()), dlogp, float(np.mean(np.abs(ratio - 1) > clip)), ratio


def surrogate_grad_mu(mu, x, logp_old, adv, sigma: float, clip: float):
    """Surrogate value and its gradient w.r.t. the policy means ``mu``."""
    logp = gaussian_log_prob(x, mu, sigma)
    value, dlogp, frac, ratio = clipped_surrogate(logp, logp_old, adv, clip)
    _, dmu = gaussian_log_prob_backward(x, mu, sigma, dlogp)
    return value, dmu, frac, ratio


@dataclass
class PpoBatch:
    states: np.ndarray
    x: np.ndarray
    actions: np.ndarray
    logp: np.ndarray
    rewards: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray

    def __post_init__(self) -> None:
        n = len(self.states)
        for name in ("x", "actions", "logp", "rewards", "advantages", "returns"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"PPO batch field {name} misaligned")
        if not np.all(np.isfinite(self.advantages)):
            raise NonFiniteError("non-finite advantages")


def ppo_update(batch: PpoBatch, actor: Network, critic: Network, opt_actor: AdamState,
               opt_critic: AdamState, hp: SamHyperparams, rng: np.random.Generator) -> dict:
    """Several epochs of minibatch ascent on the clipped surrogate (actor)
    and descent on squared return error (critic)."""
    if hp.sigma_train <= 0:
        raise ValueError("PPO updates need sigma_train > 0")
    N = len(batch.states)
    inputs = network_input(batch.states)
    stats = {"policy_objective": [], "value_loss": [], "clip_fraction": [], "approx_kl": []}
    for _ in range(hp.epochs):
        order = rng.permutation(N)
        for lo in range(0, N, hp.minibatch):
            idx = order[lo:lo + hp.minibatch]
            xb = inputs[idx]
            mu, cache = actor.forward(xb)
            obj, dmu, frac, ratio = surrogate_grad_mu(mu, batch.x[idx], batch.logp[idx],
                                                      batch.advantages[idx], hp.sigma_train, hp.clip)
            if not np.isfinite(obj):
                raise NonFiniteError("non-finite policy objective")
            _, g = actor.backward(cache, -dmu)  # ascend the surrogate
            actor.set_parameters(adam_step(opt_actor, actor.parameters(), clip_by_global_norm(g, hp.grad_clip)))
            v, vcache = critic.forward(xb)
            err = v[:, 0] - batch.returns[idx]
            vloss = float(0.5 * np.mean(err ** 2))
            if not np.isfinite(vloss):
                raise NonFiniteError("non-finite value loss")
            _, gv = critic.backward(vcache, (err / idx.size)[:, None])
            critic.set_parameters(adam_step(opt_critic, critic.parameters(), clip_by_global_norm(gv, hp.grad_clip)))
            stats["policy_objective"].append(obj)
            stats["value_loss"].append(vloss)
            stats["clip_fraction"].append(frac)
            stats["approx_kl"].append(float(np.mean((ratio - 1) - np.log(ratio))))
    return {k: float(np.mean(v)) for k, v in stats.items()}


# --- rollout environment ----------------------------------------------------

class PortfolioEnv:
    """Daily reallocation over ``market`` from decision day ``start`` to the
    last day with a following price relative."""

    def __init__(self, market: Market, hp: SamHyperparams, start: int | None = None,
                 stop: int | None = None) -> None:
        self.market = market
        self.hp = hp
        self.start = market.first_decision(hp.window) if start is None else start
        self.stop = market.T - 1 if stop is None else stop
        if self.start < hp.window - 1 or self.stop > market.T - 1 or self.stop <= self.start:
            raise DataError(f"no decision days in [{self.start}, {self.stop}) for window {hp.window}")
        self.reset()

    def reset(self) -> int:
        self.k = self.start
        self.w = np.zeros(self.market.m + 1)
        self.w[0] = 1.0
        return self.k

    def step(self, a: np.ndarray) -> tuple[float, float, bool, bool]:
        """Returns (r*, R, terminal, end of data)."""
        k = self.k
        y = self.market.y[k + 1]
        n = self.hp.window
        sigma2 = risk_penalty(self.market.y[k + 2 - n:k + 2])
        try:
            r_star, R, _ = sam_reward(a, y, self.w, self.hp.beta, self.hp.phi, sigma2)
        except CatastrophicLoss:
            return CATASTROPHE_REWARD, CATASTROPHE_REWARD, True, False
        self.w = drift_weights(a, y)
        self.k = k + 1
        return r_star, R, False, self.k >= self.stop


@dataclass
class SamTrainingLog:
    updates: list[dict] = field(default_factory=list)

    def to_csv(self, path: str | Path) -> None:
        keys = ["update", "mean_reward", "policy_objective", "value_loss", "clip_fraction", "approx_kl"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(keys)
            for u in self.updates:
                w.writerow([u["update"]] + [repr(float(u[k])) for k in keys[1:]])


def train_sam(market: Market, hp: SamHyperparams, seed: int = 0, start: int | None = None,
              stop: int | None = None) -> tuple[Network, Network, SamTrainingLog]:
    """PPO on repeated passes over the training market; returns (actor, critic, log)."""
    env = PortfolioEnv(market, hp, start, stop)
    m_star = market.m + 1
    actor = actor_network(m_star, hp).init(np.random.default_rng([seed, 11]))
    critic = critic_network(m_star, hp).init(np.random.default_rng([seed, 12]))
    opt_a = AdamState.fresh(actor.parameters(), lr=hp.lr_actor)
    opt_c = AdamState.fresh(critic.parameters(), lr=hp.lr_critic)
    noise_rng = np.random.default_rng([seed, 13])
    batch_rng = np.random.default_rng([seed, 14])
    log = SamTrainingLog()
    n = hp.window
    L = hp.rollout
    for u in range(hp.updates):
        ks = np.empty(L, dtype=np.int64)
        next_ks = np.empty(L, dtype=np.int64)
        xs = np.empty((L, m_star))
        acts = np.empty((L, m_star))
        logps = np.empty(L)
        rewards = np.empty(L)
        term = np.zeros(L, dtype=bool)
        ends = np.zeros(L, dtype=bool)
        for i in range(L):
            k = env.k
            x, a, lp = policy_forward(actor, market.state(k, n), hp.sigma_train, noise_rng)
            r_star, _, terminal, end = env.step(a)
            ks[i], xs[i], acts[i], logps[i], rewards[i] = k, x, a, lp, r_star
            next_ks[i] = env.k if not terminal else k
            term[i], ends[i] = terminal, end
            if terminal or end:
                env.reset()
        states = market.states(ks, n)
        values = critic(network_input(states))[:, 0]
        next_values = critic(network_input(market.states(next_ks, n)))[:, 0]
        ends[-1] = True  # bootstrap the rollout tail from its next state
        adv, ret = gae(rewards, values, next_values, term, ends, hp.gamma, hp.lam)
        batch = PpoBatch(states, xs, acts, logps, rewards, normalize_advantages(adv), ret)
        try:
            diag = ppo_update(batch, actor, critic, opt_a, opt_c, hp, batch_rng)
        except NonFiniteError as exc:
            raise NonFiniteError(f"SAM training diverged at update {u}: {exc}") from exc
        diag.update(update=u, mean_reward=float(rewards.mean()))
        log.updates.append(diag)
    return actor, critic, log


# --- ledger engine ----------------------------------------------------------

Policy = Callable[[int, np.ndarray], np.ndarray]


@dataclass
class Ledger:
    strategy: str
    symbols: list[str]  # cash first
    dates: np.ndarray
    allocations: np.ndarray  # (K, m*) target weights a_t
    weights: np.ndarray  # (K, m*) post-drift weights w_t
    cost: np.ndarray
    R: np.ndarray
    r_star: np.ndarray
    values: np.ndarray  # p_t after each row
    p0: float
    terminated: bool = False

    def __len__(self) -> int:
        return len(self.dates)

    def value_series(self) -> np.ndarray:
        return np.concatenate([[self.p0], self.values])

    def check_recursion(self, tol: float = 1e-12) -> None:
        prev = self.value_series()[:-1]
        expect = prev * np.exp(self.R)
        bad = np.abs(self.values - expect) > tol * np.maximum(np.abs(expect), 1.0)
        if np.any(bad):
            i = int(np.argmax(bad))
            raise AccountingError(f"value recursion violated at row {i} ({self.dates[i]})")

    def metrics(self) -> MetricBundle:
        return metric_bundle(self.R, self.p0)

    def to_csv(self, path: str | Path, with_strategy: bool = False) -> None:
        header = ["date"] + [f"w_{s}" for s in self.symbols] + ["cost", "R_t", "r_star_t", "p_t"]
        if with_strategy:
            header.append("strategy")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for i in range(len(self)):
                row = [str(self.dates[i])] + [repr(float(v)) for v in self.allocations[i]]
                row += [repr(float(self.cost[i])), repr(float(self.R[i])), repr(float(self.r_star[i])),
                        repr(float(self.values[i]))]
                if with_strategy:
                    row.append(self.strategy)
                w.writerow(row)

    @classmethod
    def read_csv(cls, path: str | Path, p0: float, strategy: str = "") -> "Ledger":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        wcols = [i for i, h in enumerate(header) if h.startswith("w_")]
        col = {h: i for i, h in enumerate(header)}
        alloc = np.array([[float(r[i]) for i in wcols] for r in body]).reshape(len(body), len(wcols))
        get = lambda name: np.array([float(r[col[name]]) for r in body])  # noqa: E731
        return cls(strategy or (body[0][col["strategy"]] if "strategy" in col and body else ""),
                   [header[i][2:] for i in wcols], np.array([r[0] for r in body], dtype="datetime64[D]"),
                   alloc, np.full_like(alloc, np.nan), get("cost"), get("R_t"), get("r_star_t"),
                   get("p_t"), p0)


def run_ledger(market: Market, policy: Policy, strategy: str, p0: float, beta: float, phi: float,
               window: int, start: int | None = None, stop: int | None = None,
               initial_weights=None) -> Ledger:
    """Shared daily accounting loop: ``a = policy(k, w_prev)`` -> cost -> R, r*
    -> ``p_t = p_{t-1} exp(R)`` -> drift. Stops early on a catastrophic loss."""
    start = market.first_decision(window) if start is None else start
    stop = market.T - 1 if stop is None else stop
    if start < window - 1 or stop > market.T - 1 or stop <= start:
        raise DataError(f"no decision days in [{start}, {stop}) for window {window}")
    m_star = market.m + 1
    w = np.zeros(m_star)
    w[0] = 1.0
    if initial_weights is not None:
        w = np.asarray(initial_weights, dtype=np.float64).copy()
        if not on_simplex(w):
            raise AccountingError("initial weights not on the simplex")
    rows = {k: [] for k in ("dates", "alloc", "w", "cost", "R", "r_star", "p")}
    p = float(p0)
    terminated = False
    for k in range(start, stop):
        a = np.asarray(policy(k, w.copy()), dtype=np.float64)
        if a.shape != (m_star,) or not on_simplex(a):
            raise AccountingError(f"{strategy}: allocation at {market.dates[k]} is not on the simplex")
        y = market.y[k + 1]
        sigma2 = risk_penalty(market.y[k + 2 - window:k + 2])
        try:
            r_star, R, cost = sam_reward(a, y, w, beta, phi, sigma2)
        except CatastrophicLoss:
            terminated = True
            break
        p = p * np.exp(R)
        w = drift_weights(a, y)
        for key, val in (("dates", market.dates[k + 1]), ("alloc", a), ("w", w), ("cost", cost),
                         ("R", R), ("r_star", r_star), ("p", p)):
            rows[key].append(val)
    K = len(rows["R"])
    ledger = Ledger(strategy, [CASH] + list(market.symbols), np.array(rows["dates"], dtype="datetime64[D]"),
                    np.array(rows["alloc"]).reshape(K, m_star), np.array(rows["w"]).reshape(K, m_star),
                    np.array(rows["cost"]), np.array(rows["R"]), np.array(rows["r_star"]),
                    np.array(rows["p"]), float(p0), terminated)
    ledger.check_recursion()
    return ledger


def backtest(actor: Network, market: Market, hp: SamHyperparams, start: int | None = None,
             stop: int | None = None, strategy: str = "MSPM") -> tuple[Ledger, MetricBundle | None]:
    """Deterministic (sigma = 0) rollout of a trained actor."""
    n = hp.window

    def policy(k, _w):
        return policy_forward(actor, market.state(k, n), 0.0)[1]

    ledger = run_ledger(market, policy, strategy, hp.p0, hp.beta, hp.phi, n, start, stop)
    return ledger, (ledger.metrics() if len(ledger) else None)
