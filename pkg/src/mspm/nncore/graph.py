from __future__ import annotations

import copy
import hashlib
import json

import numpy as np

from .layers import Layer, Sequential


class NonFiniteError(FloatingPointError):
    pass


def check_finite(x: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"non-finite values in {where}")


class Network:
    """A layered computation graph with named parameters.

    ``forward`` is a pure function of (parameters, input); activations needed
    by ``backward`` are returned as an opaque cache rather than stored.
    """

    def __init__(self, layers: list[Layer] | Sequential, name: str = "net") -> None:
        self.body = layers if isinstance(layers, Sequential) else Sequential(layers)
        self.name = name

    def init(self, seed: int | np.random.Generator) -> "Network":
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.body.init(rng)
        return self

    def describe(self) -> dict:
        return {"name": self.name, "body": self.body.describe(),
                "params": [[k, list(v.shape)] for k, v in self.body.named_params()]}

    def digest(self) -> bytes:
        blob = json.dumps(self.describe(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).digest()

    def parameters(self) -> dict[str, np.ndarray]:
        return dict(self.body.named_params())

    @property
    def parameter_count(self) -> int:
        return int(sum(v.size for v in self.parameters().values()))

    def set_parameters(self, params: dict[str, np.ndarray]) -> None:
        current = self.parameters()
        if set(params) != set(current):
            raise KeyError("parameter names do not match the graph")
        for k, v in params.items():
            if v.shape != current[k].shape:
                raise ValueError(f"shape mismatch for {k}: {v.shape} vs {current[k].shape}")
            self.body.set_param(k, np.array(v, dtype=np.float64, copy=True))

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.parameters().items()}

    def clone(self) -> "Network":
        return copy.deepcopy(self)

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, list]:
        x = np.asarray(x, dtype=np.float64)
        check_finite(x, f"{self.name} input")
        y, cache = self.body.forward(x)
        check_finite(y, f"{self.name} output")
        return y, cache

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, cache: list | None, dy: np.ndarray) -> tuple[np.ndarray, dict[str, np.ndarray]]:
        if cache is None:
            raise ValueError("backward called without a forward cache")
        dx, grads = self.body.backward(np.asarray(dy, dtype=np.float64), cache)
        # layers without gradient contributions (e.g. unused) still get zeros
        for k, v in self.parameters().items():
            if k not in grads:
                grads[k] = np.zeros_like(v)
        return dx, grads
