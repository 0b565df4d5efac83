from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .graph import Network, NonFiniteError


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def fresh(cls, params: dict[str, np.ndarray], lr: float = 1e-3, **kw) -> "AdamState":
        return cls(lr=lr, m={k: np.zeros_like(p) for k, p in params.items()},
                   v={k: np.zeros_like(p) for k, p in params.items()}, **kw)


def adam_step(state: AdamState, params: dict[str, np.ndarray],
              grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """One bias-corrected Adam update. Returns new parameter arrays and
    advances ``state`` in place."""
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {k}")
        if g.shape != params[k].shape:
            raise ValueError(f"gradient shape mismatch for {k}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    out = {}
    for k, p in params.items():
        g = grads[k]
        m = state.m.setdefault(k, np.zeros_like(p))
        v = state.v.setdefault(k, np.zeros_like(p))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        out[k] = p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return out


def apply_adam(net: Network, state: AdamState, grads: dict[str, np.ndarray]) -> None:
    net.set_parameters(adam_step(state, net.parameters(), grads))


def sgd_step(net: Network, grads: dict[str, np.ndarray], lr: float) -> None:
    params = net.parameters()
    net.set_parameters({k: p - lr * grads[k] for k, p in params.items()})


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    total = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm <= 0 or total <= max_norm:
        return grads
    scale = max_norm / total
    return {k: g * scale for k, g in grads.items()}
