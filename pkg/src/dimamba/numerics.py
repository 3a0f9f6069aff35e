"""Dense-array substrate: deterministic RNG, activations, finite-difference
oracle and the raw ``DIMT`` tensor container.

Tensors are plain ``numpy.ndarray`` objects in float64. The RNG is numpy's
Philox-4x64 counter-based generator keyed directly by the 64-bit seed; normal
deviates come from numpy's ziggurat sampler.
"""

from __future__ import annotations

import io
import struct
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64

TENSOR_MAGIC = b"DIMT"
TENSOR_VERSION = 1
_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class NonFiniteError(FloatingPointError):
    """Raised when an operation would hand back NaN or Inf."""


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        bad = np.argwhere(~np.isfinite(np.asarray(x)))
        where = tuple(int(i) for i in bad[0]) if bad.size else ()
        raise NonFiniteError(f"non-finite value in {what} at index {where}")
    return x


def _check_shape(shape: Sequence[int]) -> tuple[int, ...]:
    shape = tuple(int(s) for s in shape)
    if not shape:
        raise ValueError("shape must be non-empty")
    if any(s < 1 for s in shape):
        raise ValueError(f"all dimensions must be >= 1, got {shape}")
    return shape


class Rng:
    """Single-owner random stream.

    The Philox key is the seed itself (upper key word zero), so a stream is
    fully described by ``(seed, counter, buffer position)`` and can be
    serialized with :meth:`get_state`.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._bitgen = np.random.Philox(key=self.seed)
        self.gen = np.random.Generator(self._bitgen)

    def split(self, lane: int) -> "Rng":
        """Stream for batch worker ``lane``: seed xor lane index."""
        return Rng(self.seed ^ int(lane))

    def get_state(self) -> dict:
        st = self._bitgen.state
        return {
            "seed": self.seed,
            "counter": [int(v) for v in st["state"]["counter"]],
            "key": [int(v) for v in st["state"]["key"]],
            "buffer": [int(v) for v in st["buffer"]],
            "buffer_pos": int(st["buffer_pos"]),
            "has_uint32": int(st["has_uint32"]),
            "uinteger": int(st["uinteger"]),
        }

    @classmethod
    def from_state(cls, state: dict) -> "Rng":
        rng = cls(state["seed"])
        rng._bitgen.state = {
            "bit_generator": "Philox",
            "state": {
                "counter": np.array(state["counter"], dtype=np.uint64),
                "key": np.array(state["key"], dtype=np.uint64),
            },
            "buffer": np.array(state["buffer"], dtype=np.uint64),
            "buffer_pos": state["buffer_pos"],
            "has_uint32": state["has_uint32"],
            "uinteger": state["uinteger"],
        }
        return rng

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)


def randn(rng: Rng, shape: Sequence[int]) -> np.ndarray:
    """I.i.d. standard normal tensor drawn from ``rng``."""
    return rng.gen.standard_normal(_check_shape(shape))


def sigmoid(x):
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=DTYPE)))


def silu(x):
    x = np.asarray(x, dtype=DTYPE)
    return x * sigmoid(x)


def silu_grad(x):
    s = sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


def softplus(x):
    x = np.asarray(x, dtype=DTYPE)
    big = x > 20.0
    small = np.log1p(np.exp(np.minimum(x, 20.0)))
    return np.where(big, x + np.log1p(np.exp(-np.abs(x))), small)


def finite_diff_grad(f: Callable[[np.ndarray], float], x: np.ndarray,
                     eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if not 1e-6 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-6, 1e-3], got {eps}")
    x = np.array(x, dtype=DTYPE, copy=True)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x))
        flat[i] = orig - eps
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            idx = np.unravel_index(i, x.shape)
            raise NonFiniteError(f"f is not finite when perturbing coordinate {tuple(int(j) for j in idx)}")
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


def rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-12) -> float:
    """Max-norm relative error ``max|a-b| / max(max|a|, max|b|)``.

    Measured against the tensor's own scale, so entries many orders below the
    largest one do not dominate through finite-difference noise.
    """
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if a.size == 0:
        return 0.0
    scale = max(float(np.max(np.abs(a))), float(np.max(np.abs(b))), floor)
    return float(np.max(np.abs(a - b))) / scale


# -- DIMT container ---------------------------------------------------------

def write_tensor(fh, x: np.ndarray, dtype: str = "f64") -> None:
    code = {"f32": 0, "f64": 1}[dtype]
    x = np.ascontiguousarray(x, dtype=_DTYPE_CODES[code])
    fh.write(TENSOR_MAGIC)
    fh.write(struct.pack("<BI", TENSOR_VERSION, x.ndim))
    fh.write(struct.pack(f"<{x.ndim}Q", *x.shape))
    fh.write(struct.pack("<B", code))
    fh.write(x.tobytes(order="C"))


def read_tensor(fh) -> np.ndarray:
    magic = fh.read(4)
    if magic != TENSOR_MAGIC:
        raise ValueError(f"bad tensor magic {magic!r}")
    version, rank = struct.unpack("<BI", fh.read(5))
    if version != TENSOR_VERSION:
        raise ValueError(f"unsupported tensor version {version}")
    dims = struct.unpack(f"<{rank}Q", fh.read(8 * rank))
    (code,) = struct.unpack("<B", fh.read(1))
    if code not in _DTYPE_CODES:
        raise ValueError(f"unknown dtype code {code}")
    dt = _DTYPE_CODES[code]
    n = int(np.prod(dims)) if rank else 1
    payload = fh.read(n * dt.itemsize)
    if len(payload) != n * dt.itemsize:
        raise ValueError("truncated tensor payload")
    return np.frombuffer(payload, dtype=dt).reshape(dims).astype(DTYPE)


def tensor_to_bytes(x: np.ndarray, dtype: str = "f64") -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, x, dtype)
    return buf.getvalue()


def tensor_from_bytes(data: bytes) -> np.ndarray:
    return read_tensor(io.BytesIO(data))
