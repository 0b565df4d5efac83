"""Per-asset signal agent: a long-only trading environment, a dueling double
DQN with two-step returns, and greedy Buy/Close/Skip signal generation."""
from __future__ import annotations

import csv
from collections import deque
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .data import AssetSeries, DataError
from .nncore import (
    AdamState,
    Branch,
    Conv1d,
    Dense,
    DuelingHead,
    Flatten,
    Network,
    NonFiniteError,
    ReLU,
    ResidualBlock,
    adam_step,
    clip_by_global_norm,
)

BUY, CLOSE, SKIP = 0, 1, 2
ACTION_NAMES = ("Buy", "Close", "Skip")
SIGNAL_CODE = np.array([1, -1, 0], dtype=np.int8)  # indexed by action
PRICE_GAIN = 10.0


class EnvError(ValueError):
    pass


@dataclass(frozen=True)
class EamHyperparams:
    gamma: float = 0.99
    beta: float = 0.0025
    reward_scale: float = 100.0
    window: int = 50
    episode_length: int = 250
    n_step: int = 2
    eps_start: float = 1.0
    eps_end: float = 0.02
    eps_decay_steps: int = 20_000
    target_sync: int = 1_000
    buffer_capacity: int = 100_000
    batch_size: int = 64
    lr: float = 1e-4
    train_steps: int = 50_000
    learning_starts: int = 1_000
    train_every: int = 1
    grad_clip: float = 10.0
    channels: int = 32
    res_blocks: int = 2
    hidden: int = 128

    def __post_init__(self) -> None:
        if not 0 <= self.gamma <= 1:
            raise ValueError("gamma must be in [0, 1]")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        for name in ("eps_start", "eps_end"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must be in [0, 1]")
        if self.window < 1 or self.episode_length < 1 or self.n_step < 1:
            raise ValueError("window, episode_length and n_step must be positive")

    @property
    def state_dim(self) -> int:
        return 7 * self.window + 2


# --- signal-comprised frames ------------------------------------------------

SIGNAL_HEADER = ["date", "open", "high", "low", "close", "volume", "signal"]


@dataclass(frozen=True)
class SignalFrame:
    """Price/volume rows of one asset with the agent's per-day signal
    (Buy=1, Close=-1, Skip=0) stacked as an extra channel."""

    symbol: str
    dates: np.ndarray
    prices: np.ndarray  # (5, T): close, open, high, low, volume
    signal: np.ndarray  # (T,) int8

    def __post_init__(self) -> None:
        if self.prices.shape != (5, len(self.dates)) or self.signal.shape != (len(self.dates),):
            raise DataError(f"{self.symbol}: signal frame arrays do not match {len(self.dates)} dates")
        if not set(np.unique(self.signal).tolist()) <= {-1, 0, 1}:
            raise DataError(f"{self.symbol}: signal values outside {{-1, 0, 1}}")

    def __len__(self) -> int:
        return len(self.dates)

    @property
    def close(self) -> np.ndarray:
        return self.prices[0]

    def tensor(self) -> np.ndarray:
        """(6, T): the five price features and the signal channel."""
        return np.vstack([self.prices, self.signal[None, :].astype(np.float64)])

    def without_signals(self) -> "SignalFrame":
        return replace(self, signal=np.zeros_like(self.signal))

    def take(self, index) -> "SignalFrame":
        return SignalFrame(self.symbol, self.dates[index], self.prices[:, index], self.signal[index])

    def between(self, start, end) -> "SignalFrame":
        start, end = np.datetime64(start, "D"), np.datetime64(end, "D")
        return self.take(np.flatnonzero((self.dates >= start) & (self.dates <= end)))

    @classmethod
    def from_series(cls, series: AssetSeries, signal=None) -> "SignalFrame":
        sig = np.zeros(len(series), dtype=np.int8) if signal is None else np.asarray(signal, dtype=np.int8)
        return cls(series.symbol, series.dates.copy(), series.features().copy(), sig)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(SIGNAL_HEADER)
            c, o, h, lo, v = self.prices
            for i, d in enumerate(self.dates):
                w.writerow([str(d), repr(float(o[i])), repr(float(h[i])), repr(float(lo[i])),
                            repr(float(c[i])), repr(float(v[i])), int(self.signal[i])])

    @classmethod
    def from_csv(cls, path: str | Path, symbol: str) -> "SignalFrame":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or rows[0] != SIGNAL_HEADER:
            raise DataError(f"{path}: header must be {','.join(SIGNAL_HEADER)}")
        body = rows[1:]
        dates = np.array([r[0] for r in body], dtype="datetime64[D]")
        vals = np.array([[float(x) for x in r[1:6]] for r in body]).reshape(-1, 5)
        prices = np.vstack([vals[:, 3], vals[:, 0], vals[:, 1], vals[:, 2], vals[:, 4]])
        return cls(symbol, dates, prices, np.array([int(r[6]) for r in body], dtype=np.int8))


# --- environment ------------------------------------------------------------

@dataclass(frozen=True)
class EamState:
    """Decision point ``t``: the agent sees days ``t-n .. t-1`` and its
    action earns the move from ``close[t-1]`` to ``close[t]``."""

    t: int
    start: int
    position_open: bool = False
    bars_held: int = 0
    entry_index: int = -1


@dataclass
class PositionLedger:
    trades: list[tuple[int, int, float]] = field(default_factory=list)  # entry day, exit day, return


def effective_action(action: int, position_open: bool) -> int:
    """Illegal choices (Buy while open, Close while flat) degrade to Skip."""
    if action == BUY and position_open:
        return SKIP
    if action == CLOSE and not position_open:
        return SKIP
    return action


class TradingEnv:
    """Long-only single-asset environment with per-side commission."""

    def __init__(self, series: AssetSeries, hp: EamHyperparams) -> None:
        self.hp = hp
        self.n = hp.window
        self.close = np.asarray(series.close, dtype=np.float64)
        self.T = len(self.close)
        self.features = build_features(series, hp.window)
        self.ledger = PositionLedger()

    def valid_starts(self) -> tuple[int, int]:
        lo, hi = self.n, self.T - self.hp.episode_length
        if hi < lo:
            raise EnvError(f"series of {self.T} days too short for window {self.n} "
                           f"and episode length {self.hp.episode_length}")
        return lo, hi

    def reset(self, rng: np.random.Generator) -> EamState:
        lo, hi = self.valid_starts()
        start = int(rng.integers(lo, hi + 1))
        self.ledger = PositionLedger()
        return EamState(t=start, start=start)

    def step(self, state: EamState, action: int) -> tuple[EamState, float, bool, bool]:
        """Returns (next state, reward, terminal, truncated)."""
        t = state.t
        if t >= self.T:
            raise EnvError("episode already at end of data")
        a = effective_action(int(action), state.position_open)
        scale, beta = self.hp.reward_scale, self.hp.beta
        is_open, held, entry = state.position_open, state.bars_held, state.entry_index
        reward = 0.0
        if a == BUY:
            reward -= scale * beta
            is_open, held, entry = True, 0, t - 1
        elif a == CLOSE:
            reward -= scale * beta
            self.ledger.trades.append((entry, t - 1, self.close[t - 1] / self.close[entry] - 1.0))
            is_open, held, entry = False, 0, -1
        if is_open:
            reward += scale * (self.close[t] / self.close[t - 1] - 1.0)
            held += 1
        nxt = EamState(t + 1, state.start, is_open, held, entry)
        terminal = nxt.t >= self.T
        truncated = not terminal and nxt.t - state.start >= self.hp.episode_length
        return nxt, reward, terminal, truncated

    def observe(self, state: EamState) -> np.ndarray:
        return self.features.batch(np.array([state.t]), np.array([state.position_open]),
                                   np.array([state.bars_held]))[0]


class FeatureBank:
    """Precomputed per-day feature rows; states are cut from them by window end."""

    def __init__(self, prices: np.ndarray, volume: np.ndarray, sentiment: np.ndarray,
                 buzz: np.ndarray, n: int) -> None:
        self.n = n
        self.T = volume.size
        if self.T < n:
            raise EnvError(f"series of {self.T} days shorter than window {n}")
        # read-only (num_windows, ..., n) views, indexed by the window's first day
        self._lp = sliding_window_view(np.log(prices), n, axis=1).transpose(1, 0, 2)
        self._vol = sliding_window_view(volume, n)
        self._sent = sliding_window_view(sentiment / 5.0, n)
        self._buzz = sliding_window_view(buzz / 10.0, n)

    def __len__(self) -> int:
        return self.T

    def windows(self, t: int) -> tuple[np.ndarray, np.ndarray]:
        """(5, n) price/volume window and (2, n) sentiment window for days t-n .. t-1."""
        x = self.batch(np.array([t]), np.array([False]), np.array([0]))[0]
        n = self.n
        return x[:5 * n].reshape(5, n), x[5 * n:7 * n].reshape(2, n)

    def batch(self, t: np.ndarray, is_open: np.ndarray, held: np.ndarray) -> np.ndarray:
        """Flat network inputs for decision points ``t`` (windows end at day t-1)."""
        n = self.n
        lo = np.asarray(t) - n
        if np.any(lo < 0) or np.any(lo > self.T - n):
            raise EnvError("window outside the series")
        lp = self._lp[lo]  # (B, 4, n): log close, open, high, low
        B = lo.size
        out = np.empty((B, 7 * n + 2))
        price = out[:, :5 * n].reshape(B, 5, n)
        np.subtract(lp, lp[:, 0:1, -1:], out=price[:, :4])
        price[:, :4] *= PRICE_GAIN
        vol = self._vol[lo]
        m = vol.mean(axis=1, keepdims=True)
        price[:, 4] = np.divide(vol, m, out=np.ones_like(vol), where=m > 0) - 1.0
        out[:, 5 * n:6 * n] = self._sent[lo]
        out[:, 6 * n:7 * n] = self._buzz[lo]
        out[:, 7 * n] = np.asarray(is_open, dtype=np.float64)
        out[:, 7 * n + 1] = np.minimum(np.asarray(held, dtype=np.float64), n) / n
        return out


def build_features(series: AssetSeries, window: int) -> FeatureBank:
    if series.sentiment is None or np.any(np.isnan(series.sentiment)):
        raise DataError(f"{series.symbol}: sentiment gaps must be filled before training")
    bank = FeatureBank(np.vstack([series.close, series.open, series.high, series.low]),
                       np.asarray(series.volume, dtype=np.float64),
                       np.asarray(series.sentiment, dtype=np.float64),
                       np.nan_to_num(np.asarray(series.news_buzz, dtype=np.float64)), window)
    return bank


# --- network and Q-learning -------------------------------------------------

def eam_network(hp: EamHyperparams) -> Network:
    """Conv-1D residual trunk over the price window; sentiment and position
    features join after flattening; dueling head over Buy/Close/Skip."""
    n, c = hp.window, hp.channels
    body = [Conv1d(5, c, 5, padding="same"), ReLU()]
    for _ in range(hp.res_blocks):
        body += [ResidualBlock([Conv1d(c, c, 3, padding="same"), ReLU(),
                                Conv1d(c, c, 3, padding="same")]), ReLU()]
    body.append(Flatten())
    return Network([Branch(5, n, body), Dense(c * n + 2 * n + 2, hp.hidden), ReLU(),
                    DuelingHead(hp.hidden, 3)], name="eam")


def q_values(net: Network, states: np.ndarray) -> np.ndarray:
    s = np.asarray(states, dtype=np.float64)
    single = s.ndim == 1
    q = net(s[None, :] if single else s)
    return q[0] if single else q


def act_epsilon_greedy(q: np.ndarray, eps: float, rng: np.random.Generator) -> int:
    """Uniform random action with probability ``eps``, else the argmax
    (lowest index wins ties)."""
    if not 0 <= eps <= 1:
        raise ValueError("eps must be in [0, 1]")
    if eps > 0 and rng.random() < eps:
        return int(rng.integers(len(q)))
    return int(np.argmax(q))


def epsilon_at(step: int, hp: EamHyperparams) -> float:
    if hp.eps_decay_steps <= 0:
        return hp.eps_end
    frac = min(step / hp.eps_decay_steps, 1.0)
    return hp.eps_start + frac * (hp.eps_end - hp.eps_start)


@dataclass
class TransitionBatch:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray  # discounted n-step sums
    next_states: np.ndarray
    discounts: np.ndarray  # gamma**k, or 0 when the episode terminated


def dqn_target(batch: TransitionBatch, online: Network, target: Network) -> np.ndarray:
    """Double-DQN n-step target: ``r + gamma**k * Q_target(s'', argmax_a Q_online(s'', a))``."""
    live = batch.discounts != 0
    out = np.asarray(batch.rewards, dtype=np.float64).copy()
    if np.any(live):
        nxt = batch.next_states[live]
        best = np.argmax(online(nxt), axis=1)
        q_eval = target(nxt)[np.arange(best.size), best]
        out[live] += batch.discounts[live] * q_eval
    return out


def dqn_loss_and_grads(net: Network, batch: TransitionBatch, targets: np.ndarray):
    """Mean squared TD error over the taken actions and its gradients."""
    q, cache = net.forward(batch.states)
    idx = np.arange(len(targets))
    err = q[idx, batch.actions] - targets
    loss = float(np.mean(err ** 2))
    dq = np.zeros_like(q)
    dq[idx, batch.actions] = 2.0 * err / len(targets)
    _, grads = net.backward(cache, dq)
    return loss, grads


def dqn_update(online: Network, target: Network, opt: AdamState, batch: TransitionBatch,
               grad_clip: float = 0.0) -> float:
    targets = dqn_target(batch, online, target)
    loss, grads = dqn_loss_and_grads(online, batch, targets)
    if not np.isfinite(loss):
        raise NonFiniteError("non-finite DQN loss")
    if grad_clip > 0:
        grads = clip_by_global_norm(grads, grad_clip)
    online.set_parameters(adam_step(opt, online.parameters(), grads))
    return loss


# --- replay -----------------------------------------------------------------

class ReplayBuffer:
    """Ring of n-step transitions. States are stored as (day, open flag,
    bars held) keys and rebuilt from the feature bank when sampled."""

    def __init__(self, capacity: int, seed: int | np.random.Generator = 0) -> None:
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.keys = np.zeros((capacity, 3), dtype=np.int64)
        self.next_keys = np.zeros((capacity, 3), dtype=np.int64)
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.rewards = np.zeros(capacity)
        self.discounts = np.zeros(capacity)
        self.size = 0
        self._pos = 0

    def __len__(self) -> int:
        return self.size

    def add(self, key, action: int, reward: float, next_key, discount: float) -> None:
        i = self._pos
        self.keys[i] = key
        self.actions[i] = action
        self.rewards[i] = reward
        self.next_keys[i] = next_key
        self.discounts[i] = discount
        self._pos = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample_indices(self, batch_size: int) -> np.ndarray:
        if batch_size > self.size:
            raise ValueError(f"cannot sample {batch_size} from {self.size} transitions")
        return self.rng.choice(self.size, size=batch_size, replace=False)

    def sample(self, batch_size: int, bank: FeatureBank) -> TransitionBatch:
        idx = self.sample_indices(batch_size)
        k, nk = self.keys[idx], self.next_keys[idx]
        return TransitionBatch(bank.batch(k[:, 0], k[:, 1], k[:, 2]), self.actions[idx],
                               self.rewards[idx], bank.batch(nk[:, 0], nk[:, 1], nk[:, 2]),
                               self.discounts[idx])


class NStepAccumulator:
    """Folds single steps into k-step transitions (k = n, or fewer at the end
    of an episode). Terminal ends drop the bootstrap; truncation keeps it."""

    def __init__(self, n: int, gamma: float) -> None:
        self.n = n
        self.gamma = gamma
        self.pending: deque = deque()

    def push(self, key, action: int, reward: float, next_key, terminal: bool,
             truncated: bool) -> list[tuple]:
        self.pending.append((key, action, reward))
        out = []
        if terminal or truncated:
            while self.pending:
                out.append(self._emit(next_key, terminal))
        elif len(self.pending) == self.n:
            out.append(self._emit(next_key, False))
        return out

    def _emit(self, next_key, terminal: bool) -> tuple:
        key, action, _ = self.pending[0]
        ret = sum(self.gamma ** i * r for i, (_, _, r) in enumerate(self.pending))
        discount = 0.0 if terminal else self.gamma ** len(self.pending)
        self.pending.popleft()
        return key, action, ret, next_key, discount


def _key(s: EamState) -> tuple[int, int, int]:
    return s.t, int(s.position_open), s.bars_held


@dataclass
class EamTrainingLog:
    episodes: list[dict] = field(default_factory=list)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["episode", "steps", "total_reward", "loss"])
            for e in self.episodes:
                w.writerow([e["episode"], e["steps"], repr(e["total_reward"]), repr(e["loss"])])


def train_eam(series: AssetSeries, hp: EamHyperparams, seed: int = 0,
              init_params: dict[str, np.ndarray] | None = None) -> tuple[Network, EamTrainingLog]:
    """Train one asset's agent. ``init_params`` (e.g. from a foundational
    agent) are copied exactly before any update; optimizer state starts fresh."""
    env = TradingEnv(series, hp)
    env.valid_starts()
    online = eam_network(hp).init(np.random.default_rng([seed, 1]))
    if init_params is not None:
        online.set_parameters(init_params)
    target = online.clone()
    opt = AdamState.fresh(online.parameters(), lr=hp.lr)
    buf = ReplayBuffer(min(hp.buffer_capacity, max(hp.train_steps, 1)), np.random.default_rng([seed, 2]))
    act_rng = np.random.default_rng([seed, 3])
    env_rng = np.random.default_rng([seed, 4])
    acc = NStepAccumulator(hp.n_step, hp.gamma)
    log = EamTrainingLog()

    state = env.reset(env_rng)
    ep_reward, ep_steps, ep_losses, episode = 0.0, 0, [], 0
    for step in range(hp.train_steps):
        eps = epsilon_at(step, hp)
        # same rule as act_epsilon_greedy, without a forward pass when exploring
        if eps > 0 and act_rng.random() < eps:
            action = int(act_rng.integers(3))
        else:
            action = int(np.argmax(q_values(online, env.observe(state))))
        nxt, reward, terminal, truncated = env.step(state, action)
        for tr in acc.push(_key(state), action, reward, _key(nxt), terminal, truncated):
            buf.add(*tr)
        ep_reward += reward
        ep_steps += 1
        state = nxt
        if len(buf) >= max(hp.learning_starts, hp.batch_size) and step % hp.train_every == 0:
            batch = buf.sample(hp.batch_size, env.features)
            try:
                ep_losses.append(dqn_update(online, target, opt, batch, hp.grad_clip))
            except NonFiniteError as exc:
                raise NonFiniteError(f"EAM training diverged at step {step}: {exc}") from exc
        if hp.target_sync > 0 and (step + 1) % hp.target_sync == 0:
            target.set_parameters(online.parameters())
        if terminal or truncated:
            log.episodes.append({"episode": episode, "steps": ep_steps, "total_reward": ep_reward,
                                 "loss": float(np.mean(ep_losses)) if ep_losses else float("nan")})
            episode += 1
            state = env.reset(env_rng)
            ep_reward, ep_steps, ep_losses = 0.0, 0, []
    return online, log


# --- greedy signals ---------------------------------------------------------

def generate_signals(net: Network, series: AssetSeries, hp: EamHyperparams,
                     emit_from=None) -> SignalFrame:
    """One greedy signal per day from ``emit_from`` (default: the first day
    with a full window). The day-d signal is the decision taken after the
    close of day d; legality is enforced against the running position."""
    n = hp.window
    bank = build_features(series, n)
    first = n - 1 if emit_from is None else int(np.searchsorted(series.dates, np.datetime64(emit_from, "D")))
    if first < n - 1 or first >= len(series):
        raise EnvError(f"{series.symbol}: need {n} days of history before the first signal")
    days = np.arange(first, len(series))
    signal = np.zeros(days.size, dtype=np.int8)
    is_open, held = False, 0
    for i, d in enumerate(days):
        x = bank.batch(np.array([d + 1]), np.array([is_open]), np.array([held]))
        a = effective_action(int(np.argmax(net(x)[0])), is_open)
        signal[i] = SIGNAL_CODE[a]
        if a == BUY:
            is_open, held = True, 0
        elif a == CLOSE:
            is_open, held = False, 0
        if is_open:
            held += 1
    frame = SignalFrame.from_series(series.take(days), signal)
    return frame


@dataclass(frozen=True)
class PositionReport:
    positions: int
    winning: int
    winning_rate: float | None
    position_returns_pct: tuple[float, ...]
    open_at_end: bool

    def to_json(self) -> dict:
        d = asdict(self)
        d["position_returns_pct"] = list(self.position_returns_pct)
        return d


def position_report(frame: SignalFrame) -> PositionReport:
    """A position opens at the first Buy while flat and closes at the next
    Close; it wins iff the exit close exceeds the entry close. A position
    still open at the end is flagged, not counted."""
    entry = None
    rets = []
    for i, s in enumerate(frame.signal):
        if s == 1 and entry is None:
            entry = i
        elif s == -1 and entry is not None:
            rets.append(frame.close[i] / frame.close[entry] - 1.0)
            entry = None
    wins = sum(r > 0 for r in rets)
    return PositionReport(len(rets), int(wins), wins / len(rets) if rets else None,
                          tuple(100.0 * r for r in rets), entry is not None)


def signal_legal(signal: np.ndarray) -> bool:
    """Buy and Close strictly alternate, starting with Buy."""
    is_open = False
    for s in signal:
        if s == 1:
            if is_open:
                return False
            is_open = True
        elif s == -1:
            if not is_open:
                return False
            is_open = False
    return True
