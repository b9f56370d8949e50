"""Dense tensors, deterministic RNG streams and the small numeric kernels
everything else is built on.

Compute always happens in float32. ``F16`` and ``BF16`` exist only as storage
formats: a half tensor holds float32 values that lie exactly on the half
grid, and must be promoted with :meth:`Tensor.promote` before it can enter a
kernel. Nothing broadcasts; shapes must agree exactly.
"""

from __future__ import annotations

import hashlib
import math
from typing import Iterable, Sequence

import numpy as np

from .errors import DTypeError, FormatError, ShapeError, ZeroNormError

DTYPES = ("F32", "F16", "BF16")
ITEMSIZE = {"F32": 4, "F16": 2, "BF16": 2}


# --- half-precision codecs -------------------------------------------------

def f32_to_f16_bits(values: np.ndarray) -> np.ndarray:
    """Round float32 values to IEEE binary16 (nearest-even) and return the bits.

    Values that overflow to infinity, or are already non-finite, are rejected.
    """
    v = np.asarray(values, dtype=np.float32)
    if not np.all(np.isfinite(v)):
        raise DTypeError("F16 cannot store non-finite values", code="non-finite")
    with np.errstate(over="ignore"):
        h = v.astype(np.float16)
    if not np.all(np.isfinite(h)):
        raise DTypeError("value out of F16 range (rounds to infinity)", code="non-finite")
    return h.view(np.uint16)


def f16_bits_to_f32(bits: np.ndarray) -> np.ndarray:
    out = np.asarray(bits, dtype=np.uint16).view(np.float16).astype(np.float32)
    if not np.all(np.isfinite(out)):
        raise DTypeError("F16 payload decodes to a non-finite value", code="non-finite")
    return out


def f32_to_bf16_bits(values: np.ndarray) -> np.ndarray:
    """Round float32 values to bfloat16 (nearest-even on the upper 16 bits)."""
    v = np.asarray(values, dtype=np.float32)
    if not np.all(np.isfinite(v)):
        raise DTypeError("BF16 cannot store non-finite values", code="non-finite")
    bits = v.view(np.uint32).astype(np.uint64)
    lsb = (bits >> 16) & 1
    rounded = ((bits + 0x7FFF + lsb) >> 16).astype(np.uint16)
    # exponent field all ones means the rounding carried into infinity
    if np.any((rounded & 0x7F80) == 0x7F80):
        raise DTypeError("value out of BF16 range (rounds to infinity)", code="non-finite")
    return rounded


def bf16_bits_to_f32(bits: np.ndarray) -> np.ndarray:
    wide = np.asarray(bits, dtype=np.uint16).astype(np.uint32) << 16
    out = wide.view(np.float32)
    if not np.all(np.isfinite(out)):
        raise DTypeError("BF16 payload decodes to a non-finite value", code="non-finite")
    return out


def _quantize(values: np.ndarray, dtype: str) -> np.ndarray:
    if dtype == "F16":
        return f16_bits_to_f32(f32_to_f16_bits(values))
    if dtype == "BF16":
        return bf16_bits_to_f32(f32_to_bf16_bits(values))
    return values


# --- Tensor ----------------------------------------------------------------

class Tensor:
    """Immutable dense row-major tensor.

    ``data`` is always a read-only float32 array; ``dtype`` records the
    storage format the values are representable in.
    """

    __slots__ = ("_data", "dtype")

    def __init__(self, values, dtype: str = "F32") -> None:
        if dtype not in DTYPES:
            raise DTypeError(f"unknown dtype {dtype!r}")
        arr = np.array(values, dtype=np.float32, copy=True, order="C")
        if arr.ndim == 0:
            raise ShapeError("zero-dimensional tensors are not allowed; use shape [1]")
        if any(n < 1 for n in arr.shape):
            raise ShapeError(f"every dimension must be >= 1, got {list(arr.shape)}")
        if not np.all(np.isfinite(arr)):
            raise DTypeError("tensor values must be finite", code="non-finite")
        arr = np.ascontiguousarray(_quantize(arr, dtype))
        arr.flags.writeable = False
        self._data = arr
        self.dtype = dtype

    # construction from the wire
    @classmethod
    def from_bytes(cls, buf: bytes, dtype: str, shape: Sequence[int]) -> "Tensor":
        if dtype not in DTYPES:
            raise FormatError(f"unknown dtype {dtype!r}", code="unknown-dtype")
        shape = tuple(int(n) for n in shape) or (1,)
        count = math.prod(shape)
        if len(buf) != count * ITEMSIZE[dtype]:
            raise FormatError(
                f"payload of {len(buf)} bytes does not match shape {list(shape)} as {dtype}"
            )
        if dtype == "F32":
            vals = np.frombuffer(buf, dtype="<f4").astype(np.float32)
        elif dtype == "F16":
            vals = f16_bits_to_f32(np.frombuffer(buf, dtype="<u2"))
        else:
            vals = bf16_bits_to_f32(np.frombuffer(buf, dtype="<u2"))
        return cls(vals.reshape(shape), dtype)

    def to_bytes(self) -> bytes:
        if self.dtype == "F32":
            return self._data.astype("<f4").tobytes()
        if self.dtype == "F16":
            return f32_to_f16_bits(self._data).astype("<u2").tobytes()
        return f32_to_bf16_bits(self._data).astype("<u2").tobytes()

    @property
    def shape(self) -> tuple[int, ...]:
        return self._data.shape

    @property
    def size(self) -> int:
        return self._data.size

    def numpy(self) -> np.ndarray:
        """Read-only float32 view of the values."""
        return self._data

    def promote(self) -> "Tensor":
        return self if self.dtype == "F32" else Tensor(self._data, "F32")

    def to(self, dtype: str) -> "Tensor":
        return self if dtype == self.dtype else Tensor(self._data, dtype)

    def reshape(self, *shape: int) -> "Tensor":
        return Tensor(self._data.reshape(shape), self.dtype)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Tensor):
            return NotImplemented
        return (
            self.dtype == other.dtype
            and self.shape == other.shape
            and self._data.tobytes() == other._data.tobytes()
        )

    def __hash__(self) -> int:
        return hash((self.dtype, self.shape, self._data.tobytes()))

    def __repr__(self) -> str:
        return f"Tensor(shape={list(self.shape)}, dtype={self.dtype})"


def _require_f32(*tensors: Tensor) -> None:
    for t in tensors:
        if t.dtype != "F32":
            raise DTypeError(f"kernels take F32 only, got {t.dtype}; call promote() first")


# --- kernels ---------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with float32 accumulation in a fixed order.

    The inner index is summed from 0 upward, one rank-1 update at a time, so
    results are independent of BLAS and thread count.
    """
    _require_f32(a, b)
    if len(a.shape) != 2 or len(b.shape) != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {list(a.shape)} x {list(b.shape)}")
    x, y = a.numpy(), b.numpy()
    out = np.zeros((x.shape[0], y.shape[1]), dtype=np.float32)
    for t in range(x.shape[1]):
        out += np.multiply.outer(x[:, t], y[t, :])
    return Tensor(out)


def softmax_rows(x: Tensor) -> Tensor:
    _require_f32(x)
    if len(x.shape) != 2:
        raise ShapeError(f"softmax_rows expects a matrix, got shape {list(x.shape)}")
    v = x.numpy()
    e = np.exp(v - v.max(axis=1, keepdims=True))
    return Tensor(e / e.sum(axis=1, keepdims=True))


def _as_vector(x) -> np.ndarray:
    arr = x.numpy() if isinstance(x, Tensor) else np.asarray(x)
    return np.asarray(arr, dtype=np.float64).reshape(-1)


def cosine_sim(x, y) -> float:
    """Cosine similarity clamped to [-1, 1]. Accepts Tensors or array-likes."""
    u, v = _as_vector(x), _as_vector(y)
    if u.shape != v.shape:
        raise ShapeError(f"cosine_sim length mismatch: {u.size} vs {v.size}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise ZeroNormError("cosine similarity is undefined for a zero vector")
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


def axpy_scale(w0: Tensor, delta: Tensor, alpha: float) -> Tensor:
    """``w0 + alpha * delta`` elementwise; ``alpha == 0`` returns ``w0`` itself."""
    _require_f32(w0, delta)
    if w0.shape != delta.shape:
        raise ShapeError(f"axpy shape mismatch: {list(w0.shape)} vs {list(delta.shape)}")
    if alpha == 0:
        return w0
    return Tensor(w0.numpy() + np.float32(alpha) * delta.numpy())


# --- RNG -------------------------------------------------------------------

class Rng:
    """Seeded counter-based random stream.

    Backed by numpy's Philox4x64-10 bit generator. The key comes from
    ``SeedSequence(seed, spawn_key=path)``, so ``Rng(s).child(i, j)`` is an
    independent stream that depends only on ``(s, i, j)``.
    """

    def __init__(self, seed: int, path: tuple[int, ...] = ()) -> None:
        self.seed = int(seed)
        self.path = tuple(int(p) for p in path)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.path)
        self._gen = np.random.Generator(np.random.Philox(ss))

    def child(self, *keys: int) -> "Rng":
        return Rng(self.seed, self.path + tuple(keys))

    @classmethod
    def from_label(cls, label: str, seed: int = 0) -> "Rng":
        """Stream keyed by a string (sha256 of the UTF-8 label)."""
        digest = hashlib.sha256(label.encode("utf-8")).digest()
        return cls(seed, (int.from_bytes(digest[:8], "little"),))

    def normal(self, shape: int | Iterable[int], std: float = 1.0) -> np.ndarray:
        return self._gen.standard_normal(shape) * std

    def uniform(self, shape: int | Iterable[int], low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._gen.uniform(low, high, shape)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)
