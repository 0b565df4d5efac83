"""Layer primitives with explicit forward/backward passes.

Every layer is functional with respect to its parameters: ``forward`` returns
the output together with a cache, and ``backward`` consumes that cache and
returns the input gradient plus a dict of parameter gradients. Layers never
mutate their parameters; optimizers do.
"""
from __future__ import annotations

from typing import Any

import numpy as np


class ShapeError(ValueError):
    pass


class Layer:
    kind = "layer"

    def __init__(self) -> None:
        self.params: dict[str, np.ndarray] = {}

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, Any]:
        raise NotImplementedError

    def backward(self, dy: np.ndarray, cache: Any) -> tuple[np.ndarray, dict[str, np.ndarray]]:
        raise NotImplementedError

    def describe(self) -> dict:
        return {"kind": self.kind}

    def init(self, rng: np.random.Generator) -> None:
        """(Re)initialize parameters in place from ``rng``."""

    def named_params(self, prefix: str = "") -> list[tuple[str, np.ndarray]]:
        return [(prefix + k, v) for k, v in self.params.items()]

    def set_param(self, name: str, value: np.ndarray) -> None:
        if name not in self.params:
            raise KeyError(name)
        self.params[name] = value


def he_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


class Dense(Layer):
    """Affine map ``x @ W + b`` over the last axis of a (batch, in) array."""

    kind = "dense"

    def __init__(self, in_features: int, out_features: int) -> None:
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.params = {
            "W": np.zeros((in_features, out_features)),
            "b": np.zeros(out_features),
        }

    def init(self, rng):
        self.params["W"] = he_uniform(rng, (self.in_features, self.out_features), self.in_features)
        self.params["b"] = np.zeros(self.out_features)

    def describe(self):
        return {"kind": self.kind, "in": self.in_features, "out": self.out_features}

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError(f"dense expects (B, {self.in_features}), got {x.shape}")
        return x @ self.params["W"] + self.params["b"], x

    def backward(self, dy, cache):
        x = cache
        grads = {"W": x.T @ dy, "b": dy.sum(axis=0)}
        return dy @ self.params["W"].T, grads


class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        mask = x > 0
        return x * mask, mask

    def backward(self, dy, cache):
        return dy * cache, {}


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dy, cache):
        return dy.reshape(cache), {}


class Conv1d(Layer):
    """1-D cross-correlation over (batch, channels, length) input.

    ``y[b, o, l] = bias[o] + sum_{c, j} W[o, c, j] * x_pad[b, c, l*stride + j]``.
    ``padding="same"`` (stride 1, odd kernel) keeps the length unchanged.
    """

    kind = "conv1d"

    def __init__(self, in_channels: int, out_channels: int, kernel: int,
                 stride: int = 1, padding: str = "valid") -> None:
        super().__init__()
        if padding not in ("valid", "same"):
            raise ValueError(f"unknown padding {padding!r}")
        if padding == "same" and (stride != 1 or kernel % 2 == 0):
            raise ValueError("'same' padding needs stride 1 and an odd kernel")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        self.padding = padding
        self.params = {
            "W": np.zeros((out_channels, in_channels, kernel)),
            "b": np.zeros(out_channels),
        }

    def init(self, rng):
        fan_in = self.in_channels * self.kernel
        self.params["W"] = he_uniform(rng, self.params["W"].shape, fan_in)
        self.params["b"] = np.zeros(self.out_channels)

    def describe(self):
        return {"kind": self.kind, "in": self.in_channels, "out": self.out_channels,
                "kernel": self.kernel, "stride": self.stride, "padding": self.padding}

    @property
    def _pad(self) -> int:
        return (self.kernel - 1) // 2 if self.padding == "same" else 0

    def output_length(self, length: int) -> int:
        return (length + 2 * self._pad - self.kernel) // self.stride + 1

    def forward(self, x):
        if x.ndim != 3 or x.shape[1] != self.in_channels:
            raise ShapeError(f"conv1d expects (B, {self.in_channels}, L), got {x.shape}")
        p = self._pad
        if p:
            xp = np.zeros(x.shape[:2] + (x.shape[2] + 2 * p,))
            xp[:, :, p:-p] = x
        else:
            xp = x
        if xp.shape[2] < self.kernel:
            raise ShapeError(f"sequence length {x.shape[2]} shorter than kernel {self.kernel}")
        B, C = x.shape[:2]
        k, s = self.kernel, self.stride
        L_out = (xp.shape[2] - k) // s + 1
        span = s * (L_out - 1) + 1
        # (B, L_out, C, k) patches, one strided slice per kernel tap
        patches = np.stack([xp[:, :, j:j + span:s] for j in range(k)], axis=-1)
        cols = patches.transpose(0, 2, 1, 3).reshape(B * L_out, C * k)
        W = self.params["W"].reshape(self.out_channels, C * k)
        y = (cols @ W.T + self.params["b"]).reshape(B, L_out, self.out_channels)
        return y.transpose(0, 2, 1), (cols, xp.shape, L_out)

    def backward(self, dy, cache):
        cols, xp_shape, L_out = cache
        B = dy.shape[0]
        C, k = self.in_channels, self.kernel
        dy2 = dy.transpose(0, 2, 1).reshape(B * L_out, self.out_channels)
        W = self.params["W"].reshape(self.out_channels, C * k)
        grads = {"W": (dy2.T @ cols).reshape(self.params["W"].shape), "b": dy2.sum(axis=0)}
        dcols = (dy2 @ W).reshape(B, L_out, C, k)
        dxp = np.zeros(xp_shape)
        s = self.stride
        span = s * (L_out - 1) + 1
        for j in range(k):
            dxp[:, :, j:j + span:s] += dcols[:, :, :, j].transpose(0, 2, 1)
        p = self._pad
        dx = dxp[:, :, p:xp_shape[2] - p] if p else dxp
        return dx, grads


class Sequential(Layer):
    """Ordered composition of layers; also the body of composite layers."""

    kind = "sequential"

    def __init__(self, layers: list[Layer]) -> None:
        super().__init__()
        self.layers = list(layers)

    def describe(self):
        return {"kind": self.kind, "layers": [layer.describe() for layer in self.layers]}

    def init(self, rng):
        for layer in self.layers:
            layer.init(rng)

    def named_params(self, prefix=""):
        out = []
        for i, layer in enumerate(self.layers):
            out.extend(layer.named_params(f"{prefix}{i}.{layer.kind}."))
        return out

    def set_param(self, name, value):
        idx, _, rest = name.partition(".")
        _, _, rest = rest.partition(".")
        self.layers[int(idx)].set_param(rest, value)

    def forward(self, x):
        caches = []
        for layer in self.layers:
            x, c = layer.forward(x)
            caches.append(c)
        return x, caches

    def backward(self, dy, cache):
        grads: dict[str, np.ndarray] = {}
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            dy, g = layer.backward(dy, cache[i])
            prefix = f"{i}.{layer.kind}."
            for k, v in g.items():
                grads[prefix + k] = v
        return dy, grads


class ResidualBlock(Sequential):
    """``y = x + body(x)``; the body must preserve shape."""

    kind = "residual"

    def forward(self, x):
        h, caches = super().forward(x)
        if h.shape != x.shape:
            raise ShapeError(f"residual body changed shape {x.shape} -> {h.shape}")
        return x + h, caches

    def backward(self, dy, cache):
        dx, grads = super().backward(dy, cache)
        return dx + dy, grads


class Branch(Sequential):
    """Split a flat (B, D) input into a reshaped trunk part and a side part.

    The first ``channels * length`` columns are reshaped to (B, channels,
    length) and run through the inner layers (which must end flat); the
    remaining columns are appended unchanged to the trunk output.
    """

    kind = "branch"

    def __init__(self, channels: int, length: int, layers: list[Layer]) -> None:
        super().__init__(layers)
        self.channels = channels
        self.length = length

    def describe(self):
        d = super().describe()
        d.update(channels=self.channels, length=self.length)
        return d

    def forward(self, x):
        cut = self.channels * self.length
        if x.ndim != 2 or x.shape[1] < cut:
            raise ShapeError(f"branch expects (B, >={cut}), got {x.shape}")
        trunk = x[:, :cut].reshape(x.shape[0], self.channels, self.length)
        h, caches = super().forward(trunk)
        if h.ndim != 2:
            raise ShapeError("branch body must end with a flat output")
        return np.concatenate([h, x[:, cut:]], axis=1), (caches, h.shape[1])

    def backward(self, dy, cache):
        caches, width = cache
        dtrunk, grads = super().backward(dy[:, :width], caches)
        dx = np.concatenate([dtrunk.reshape(dy.shape[0], -1), dy[:, width:]], axis=1)
        return dx, grads


class DuelingHead(Layer):
    """Dueling aggregation ``Q = V + A - mean_a A`` from a (B, H) feature."""

    kind = "dueling"

    def __init__(self, in_features: int, num_actions: int) -> None:
        super().__init__()
        self.in_features = in_features
        self.num_actions = num_actions
        self.params = {
            "Wv": np.zeros((in_features, 1)),
            "bv": np.zeros(1),
            "Wa": np.zeros((in_features, num_actions)),
            "ba": np.zeros(num_actions),
        }

    def init(self, rng):
        self.params["Wv"] = he_uniform(rng, (self.in_features, 1), self.in_features)
        self.params["Wa"] = he_uniform(rng, (self.in_features, self.num_actions), self.in_features)
        self.params["bv"] = np.zeros(1)
        self.params["ba"] = np.zeros(self.num_actions)

    def describe(self):
        return {"kind": self.kind, "in": self.in_features, "actions": self.num_actions}

    def streams(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        v = x @ self.params["Wv"] + self.params["bv"]
        a = x @ self.params["Wa"] + self.params["ba"]
        return v, a

    @staticmethod
    def aggregate(v: np.ndarray, a: np.ndarray) -> np.ndarray:
        return v + (a - a.mean(axis=1, keepdims=True))

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError(f"dueling head expects (B, {self.in_features}), got {x.shape}")
        v, a = self.streams(x)
        return self.aggregate(v, a), x

    def backward(self, dy, cache):
        x = cache
        dv = dy.sum(axis=1, keepdims=True)
        da = dy - dy.mean(axis=1, keepdims=True)
        grads = {"Wv": x.T @ dv, "bv": dv.sum(axis=0), "Wa": x.T @ da, "ba": da.sum(axis=0)}
        dx = dv @ self.params["Wv"].T + da @ self.params["Wa"].T
        return dx, grads


class PerAsset(Sequential):
    """Run a 1-D conv stack on every asset row with shared weights.

    Input (B, F, M, N) is folded to (B*M, F, N); the inner layers must reduce
    the time axis to length 1, and the result is unfolded to (B, M, C).
    """

    kind = "per_asset"

    def forward(self, x):
        if x.ndim != 4:
            raise ShapeError(f"per-asset stack expects (B, F, M, N), got {x.shape}")
        B, F, M, N = x.shape
        h, caches = super().forward(x.transpose(0, 2, 1, 3).reshape(B * M, F, N))
        if h.ndim != 3 or h.shape[2] != 1:
            raise ShapeError(f"per-asset body must end at length 1, got {h.shape}")
        return h.reshape(B, M, h.shape[1]), (caches, x.shape, h.shape)

    def backward(self, dy, cache):
        caches, x_shape, h_shape = cache
        B, F, M, N = x_shape
        dx, grads = super().backward(dy.reshape(h_shape), caches)
        return dx.reshape(B, M, F, N).transpose(0, 2, 1, 3), grads


class AllocationHead(Layer):
    """Per-asset linear score ``mu[b, m] = h[b, m, :] @ w + bias``, shared over assets."""

    kind = "allocation"

    def __init__(self, in_features: int) -> None:
        super().__init__()
        self.in_features = in_features
        self.params = {"w": np.zeros(in_features), "b": np.zeros(1)}

    def init(self, rng):
        self.params["w"] = he_uniform(rng, (self.in_features,), self.in_features)
        self.params["b"] = np.zeros(1)

    def describe(self):
        return {"kind": self.kind, "in": self.in_features}

    def forward(self, x):
        if x.ndim != 3 or x.shape[2] != self.in_features:
            raise ShapeError(f"allocation head expects (B, M, {self.in_features}), got {x.shape}")
        return x @ self.params["w"] + self.params["b"][0], x

    def backward(self, dy, cache):
        x = cache
        grads = {"w": np.einsum("bm,bmc->c", dy, x), "b": np.array([dy.sum()])}
        return dy[:, :, None] * self.params["w"], grads


# Standalone differentiable nodes used by the policy head.

def softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(s: np.ndarray, ds: np.ndarray) -> np.ndarray:
    """Input gradient of softmax given its output ``s`` and output gradient ``ds``."""
    return s * (ds - (ds * s).sum(axis=-1, keepdims=True))


LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)


def gaussian_log_prob(x: np.ndarray, mu: np.ndarray, sigma: float) -> np.ndarray:
    """Sum over the last axis of independent N(mu, sigma^2) log-densities."""
    if sigma <= 0:
        raise ValueError("log-probability needs sigma > 0")
    z = (x - mu) / sigma
    return (-0.5 * z * z - np.log(sigma) - LOG_SQRT_2PI).sum(axis=-1)


def gaussian_log_prob_backward(x: np.ndarray, mu: np.ndarray, sigma: float,
                               dlogp: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of :func:`gaussian_log_prob` w.r.t. ``(x, mu)``."""
    g = (x - mu) / (sigma * sigma) * dlogp[..., None]
    return -g, g
