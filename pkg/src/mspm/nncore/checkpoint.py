"""Binary checkpoint format.

Layout (all little-endian)::

    magic     8 bytes  b"MSPMCKPT"
    version   u32
    digest    32 bytes sha256 of the graph topology
    meta      u32 length + UTF-8 JSON (seed, epoch, free-form training metadata)
    nparams   u32
    per parameter: u16 name length, name, u32 ndim, u32 dims..., float64 payload
    has_opt   u8
    if has_opt: u64 step, f64 lr, beta1, beta2, eps, then m and v arrays in
                parameter order (same shape as the parameter, raw float64)
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .graph import Network, check_finite
from .optim import AdamState

MAGIC = b"MSPMCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    version: int
    digest: bytes
    params: dict[str, np.ndarray]
    optimizer: AdamState | None = None
    meta: dict = field(default_factory=dict)


def _write_array(buf: io.BytesIO, a: np.ndarray) -> None:
    buf.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def encode(net: Network, optimizer: AdamState | None = None, meta: dict | None = None) -> bytes:
    params = net.parameters()
    for k, v in params.items():
        check_finite(v, f"parameter {k}")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    buf.write(net.digest())
    mblob = json.dumps(meta or {}, sort_keys=True).encode()
    buf.write(struct.pack("<I", len(mblob)))
    buf.write(mblob)
    buf.write(struct.pack("<I", len(params)))
    for name, arr in params.items():
        nb = name.encode()
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        _write_array(buf, arr)
    if optimizer is None:
        buf.write(b"\x00")
    else:
        buf.write(b"\x01")
        buf.write(struct.pack("<Q4d", optimizer.step, optimizer.lr, optimizer.beta1,
                              optimizer.beta2, optimizer.eps))
        for name, arr in params.items():
            _write_array(buf, optimizer.m.get(name, np.zeros_like(arr)))
            _write_array(buf, optimizer.v.get(name, np.zeros_like(arr)))
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes) -> None:
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated checkpoint")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, shape: tuple[int, ...]) -> np.ndarray:
        count = int(np.prod(shape)) if shape else 1
        return np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)


def decode(data: bytes) -> Checkpoint:
    r = _Reader(data)
    if r.take(8) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    digest = r.take(32)
    (mlen,) = r.unpack("<I")
    meta = json.loads(r.take(mlen).decode())
    (count,) = r.unpack("<I")
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        (ndim,) = r.unpack("<I")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        params[name] = r.array(tuple(shape))
    (has_opt,) = r.unpack("<B")
    opt = None
    if has_opt:
        step, lr, b1, b2, eps = r.unpack("<Q4d")
        opt = AdamState(lr=lr, beta1=b1, beta2=b2, eps=eps, step=step)
        for name, arr in params.items():
            opt.m[name] = r.array(arr.shape)
            opt.v[name] = r.array(arr.shape)
    if r.pos != len(data):
        raise CheckpointError("trailing bytes after checkpoint payload")
    return Checkpoint(version=version, digest=digest, params=params, optimizer=opt, meta=meta)


def save(net: Network, path: str | Path, optimizer: AdamState | None = None,
         meta: dict | None = None) -> None:
    Path(path).write_bytes(encode(net, optimizer, meta))


def read(path: str | Path) -> Checkpoint:
    return decode(Path(path).read_bytes())


def load_into(net: Network, source: str | Path | Checkpoint,
              lr: float = 1e-3) -> tuple[Checkpoint, AdamState]:
    """Verify the topology digest and copy parameters into ``net``.

    Returns the checkpoint and its optimizer state, or a fresh Adam state
    (with ``lr``) when the file carries none.
    """
    ckpt = source if isinstance(source, Checkpoint) else read(source)
    if ckpt.digest != net.digest():
        raise CheckpointError("topology digest mismatch: checkpoint was saved from a different graph")
    net.set_parameters(ckpt.params)
    opt = ckpt.optimizer if ckpt.optimizer is not None else AdamState.fresh(net.parameters(), lr=lr)
    return ckpt, opt
