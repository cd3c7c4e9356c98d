"""Tensor primitives and the deterministic random number generator.

Tensors are C-contiguous (row-major, last dimension fastest) numpy arrays of
dtype float32 or float64. float32 is the training dtype; float64 is used for
finite-difference gradient checks. There is no implicit broadcasting: binary
operations accept either an equally-shaped tensor or a Python scalar.

``Rng`` is SplitMix64. Each output is a pure function of ``seed`` and the
position in the stream, so bulk draws are vectorised without changing the
sequence:

    state_k = seed + k * 0x9E3779B97F4A7C15          (mod 2**64, k = 1, 2, ...)
    out_k   = mix64(state_k)

Uniform floats use the top 53 bits: ``(out >> 11) * 2**-53`` in [0, 1).
Normals use Box-Muller on consecutive uniform pairs ``(u1, u2)``:
``r = sqrt(-2 ln(1 - u1))``, emitting ``r cos(2 pi u2)`` then ``r sin(2 pi u2)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .errors import DTypeError, NumericError, ShapeError

MASK64 = (1 << 64) - 1
GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB

DTYPES = (np.float32, np.float64)


def mix64(z: int) -> int:
    """SplitMix64 finaliser on a Python int."""
    z &= MASK64
    z = ((z ^ (z >> 30)) * _MIX1) & MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & MASK64
    return z ^ (z >> 31)


def _mix64_array(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
    return z ^ (z >> np.uint64(31))


def _key_hash(key: Union[int, str]) -> int:
    # FNV-1a over the key's UTF-8 text; stable across processes unlike hash().
    h = 0xCBF29CE484222325
    for byte in str(key).encode("utf-8"):
        h = ((h ^ byte) * 0x100000001B3) & MASK64
    return h


class Rng:
    """SplitMix64 stream. Identical seeds give identical sequences everywhere."""

    def __init__(self, seed: int):
        self.seed = int(seed) & MASK64
        self.state = self.seed

    def derive(self, *keys: Union[int, str]) -> "Rng":
        """Independent child stream named by ``keys``.

        Derivation uses the seed, not the current state, so children do not
        depend on how much of the parent has been consumed.
        """
        s = self.seed
        for key in keys:
            s = mix64(s ^ _key_hash(key))
        return Rng(s)

    def next_u64(self) -> int:
        self.state = (self.state + GAMMA) & MASK64
        return mix64(self.state)

    def u64(self, n: int) -> np.ndarray:
        """The next ``n`` outputs as a uint64 array."""
        if n <= 0:
            return np.zeros(0, dtype=np.uint64)
        k = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + k * np.uint64(GAMMA)
            out = _mix64_array(z)
        self.state = (self.state + n * GAMMA) & MASK64
        return out

    def random(self) -> float:
        """One uniform float in [0, 1)."""
        return (self.next_u64() >> 11) * 2.0**-53

    def uniform(self, n: int, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        u = (self.u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        if low == 0.0 and high == 1.0:
            return u
        return low + (high - low) * u

    def normal(self, n: int, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs).reshape(pairs, 2)
        r = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        theta = 2.0 * math.pi * u[:, 1]
        z = np.empty((pairs, 2))
        z[:, 0] = r * np.cos(theta)
        z[:, 1] = r * np.sin(theta)
        return mean + std * z.reshape(-1)[:n]

    def randbelow(self, n: int) -> int:
        """Integer in [0, n) as ``floor(random() * n)``."""
        return min(int(self.random() * n), n - 1)

    def permutation(self, n: int) -> list[int]:
        """Fisher-Yates shuffle of ``range(n)``."""
        items = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.randbelow(i + 1)
            items[i], items[j] = items[j], items[i]
        return items

    def shuffle(self, seq: list) -> list:
        return [seq[i] for i in self.permutation(len(seq))]

    def sample_sorted(self, n: int, k: int) -> list[int]:
        """``k`` distinct indices from ``range(n)``, ascending."""
        if not 0 <= k <= n:
            raise ValueError(f"cannot sample {k} of {n}")
        items = list(range(n))
        for i in range(k):
            j = i + self.randbelow(n - i)
            items[i], items[j] = items[j], items[i]
        return sorted(items[:k])


@dataclass(frozen=True)
class Uniform:
    low: float = 0.0
    high: float = 1.0


@dataclass(frozen=True)
class Normal:
    mean: float = 0.0
    std: float = 1.0


Fill = Union[float, int, Uniform, Normal]


def row_major_strides(shape: Sequence[int]) -> tuple[int, ...]:
    """Element (not byte) strides of a row-major layout."""
    strides = []
    acc = 1
    for dim in reversed(shape):
        strides.append(acc)
        acc *= dim
    return tuple(reversed(strides))


def flat_index(shape: Sequence[int], index: Sequence[int]) -> int:
    if len(index) != len(shape):
        raise ShapeError(f"index rank {len(index)} != tensor rank {len(shape)}")
    return sum(i * s for i, s in zip(index, row_major_strides(shape)))


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values in {what}")
    return x


def tensor_new(shape: Sequence[int], fill: Fill = 0.0, rng: Rng | None = None,
               dtype=np.float32) -> np.ndarray:
    """Allocate a tensor filled with a constant or random draws from ``rng``."""
    shape = tuple(int(d) for d in shape)
    if not shape or any(d < 1 for d in shape):
        raise ShapeError(f"all dimensions must be >= 1, got {shape}")
    if dtype not in DTYPES:
        raise DTypeError(f"unsupported dtype {dtype}")
    n = math.prod(shape)
    if isinstance(fill, (Uniform, Normal)):
        if rng is None:
            raise ValueError("random fill needs an Rng")
        if isinstance(fill, Uniform):
            values = rng.uniform(n, fill.low, fill.high)
        else:
            values = rng.normal(n, fill.mean, fill.std)
        return values.astype(dtype).reshape(shape)
    return np.full(shape, fill, dtype=dtype)


def _check_dtypes(a: np.ndarray, b: np.ndarray) -> None:
    if a.dtype != b.dtype:
        raise DTypeError(f"dtype mismatch: {a.dtype} vs {b.dtype}")


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """(M, K) x (K, N) -> (M, N)."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")
    _check_dtypes(a, b)
    return check_finite(a @ b, "matmul result")


_OPS = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
    "div": np.divide,
    "max": np.maximum,
}


def elementwise(a: np.ndarray, b, op: str) -> np.ndarray:
    """Apply ``op`` per element. ``b`` is an equally-shaped tensor or a scalar."""
    try:
        fn = _OPS[op]
    except KeyError:
        raise ValueError(f"unknown op {op!r}") from None
    if isinstance(b, np.ndarray):
        if b.shape != a.shape:
            raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
        _check_dtypes(a, b)
    else:
        b = a.dtype.type(b)
    if op == "div" and np.any(b == 0):
        raise NumericError("division by zero")
    with np.errstate(over="ignore", invalid="ignore"):
        out = fn(a, b)
    return check_finite(out, f"{op} result")
