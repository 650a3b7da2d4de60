"""
Dense float64 tensor substrate built on numpy.

Tensors are plain ``numpy.ndarray`` values in row-major (C) order. Every
operation here returns a fresh, contiguous array and never mutates its inputs,
so results can be shared between threads.

The random source is a fixed splitmix64 stream with Box-Muller Gaussians, so
a seed maps to the same draws on every platform and in any language that
implements the same two algorithms.
"""
import math
import numbers
from typing import Sequence, Tuple

import numpy as np

from src.errors import DimensionError, DomainError, ParameterError

Shape = Tuple[int, ...]

_GOLDEN_GAMMA = 0x9E3779B97F4A7C15
_MIX_1 = 0xBF58476D1CE4E5B9
_MIX_2 = 0x94D049BB133111EB
_MASK_64 = (1 << 64) - 1


def as_tensor(values, *, allow_nonfinite: bool = False) -> np.ndarray:
    """Coerce ``values`` to a contiguous float64 array, rejecting NaN/inf."""
    tensor = np.ascontiguousarray(values, dtype=np.float64)
    if tensor.ndim == 0:
        tensor = tensor.reshape(1)
    if not allow_nonfinite and tensor.size and not np.all(np.isfinite(tensor)):
        raise DomainError(f"tensor of shape {tensor.shape} contains non-finite values")
    return tensor


def shape_size(shape: Sequence[int]) -> int:
    """Element count of ``shape``; validates rank and extents."""
    dims = tuple(int(d) for d in shape)
    if len(dims) < 1:
        raise DimensionError("shape must have rank >= 1", dims)
    if any(d < 0 for d in dims):
        raise DimensionError("shape extents must be nonnegative", dims)
    return math.prod(dims)


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> np.ndarray:
    """Matrix product over the trailing two axes with broadcast leading axes."""
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError("matmul inner dimensions do not match", a.shape, b.shape)
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError("matmul leading dimensions are not broadcast-compatible", a.shape, b.shape)
    return np.ascontiguousarray(np.matmul(a, b))


def linear(x: np.ndarray, weight: np.ndarray) -> np.ndarray:
    """``x @ weight`` with ``weight`` laid out as (in_features, out_features)."""
    return matmul(x, weight)


def softmax_rows(x, scale: float = 1.0) -> np.ndarray:
    """
    Softmax over the trailing axis of ``x / scale``.

    Stabilised by subtracting the row maximum, so logits of magnitude ~700
    (where ``exp`` would overflow) still give rows summing to one.
    """
    if not (isinstance(scale, numbers.Real) and not isinstance(scale, bool) and math.isfinite(scale) and scale > 0):
        raise ParameterError(f"softmax scale must be a finite positive number, got {scale!r}")
    x = as_tensor(x)
    if x.ndim < 2:
        raise DimensionError("softmax_rows needs rank >= 2", x.shape)
    z = x / scale
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    return np.ascontiguousarray(e / np.sum(e, axis=-1, keepdims=True))


# ---------------------------------------------------------------------------
# Layout
# ---------------------------------------------------------------------------

def reshape(x, new_shape: Sequence[int]) -> np.ndarray:
    x = as_tensor(x, allow_nonfinite=True)
    new_shape = tuple(int(d) for d in new_shape)
    if shape_size(new_shape) != x.size:
        raise DimensionError("reshape must preserve element count", x.shape, new_shape)
    return np.ascontiguousarray(x.reshape(new_shape))


def _check_permutation(order: Sequence[int], rank: int) -> Tuple[int, ...]:
    order = tuple(int(i) for i in order)
    if sorted(order) != list(range(rank)):
        raise DimensionError(f"{order} is not a permutation of {rank} axes")
    return order


def permute(x, order: Sequence[int]) -> np.ndarray:
    """Materialised axis permutation; output axis ``k`` is input axis ``order[k]``."""
    x = as_tensor(x, allow_nonfinite=True)
    order = _check_permutation(order, x.ndim)
    return np.ascontiguousarray(np.transpose(x, order))


def inverse_permutation(order: Sequence[int]) -> Tuple[int, ...]:
    order = _check_permutation(order, len(order))
    inverse = [0] * len(order)
    for position, axis in enumerate(order):
        inverse[axis] = position
    return tuple(inverse)


# ---------------------------------------------------------------------------
# Reductions and elementwise helpers
# ---------------------------------------------------------------------------

def l2_norm(x) -> float:
    x = as_tensor(x)
    if x.size == 0:
        raise DomainError("l2_norm of an empty tensor is undefined")
    flat = x.ravel()
    return float(np.sqrt(np.dot(flat, flat)))


def mean(x) -> float:
    x = as_tensor(x)
    if x.size == 0:
        raise DomainError("mean of an empty tensor is undefined")
    return float(np.mean(x))


def rms_norm(x, eps: float = 1e-6) -> np.ndarray:
    """Root-mean-square normalisation over the trailing axis (no learned gain)."""
    x = as_tensor(x)
    variance = np.mean(x * x, axis=-1, keepdims=True)
    return np.ascontiguousarray(x / np.sqrt(variance + eps))


def gelu(x) -> np.ndarray:
    """tanh approximation of GELU."""
    x = as_tensor(x)
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x ** 3)))


def timestep_embedding(t: float, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Sinusoidal embedding of a scalar timestep into ``dim`` features."""
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half, dtype=np.float64) / max(half, 1))
    args = float(t) * freqs
    embedding = np.concatenate([np.sin(args), np.cos(args)])
    if dim % 2:
        embedding = np.concatenate([embedding, np.zeros(1)])
    return embedding


# ---------------------------------------------------------------------------
# Random source
# ---------------------------------------------------------------------------

def splitmix64(x: int) -> int:
    """One splitmix64 output for state ``x`` (already advanced)."""
    z = x & _MASK_64
    z = ((z ^ (z >> 30)) * _MIX_1) & _MASK_64
    z = ((z ^ (z >> 27)) * _MIX_2) & _MASK_64
    return z ^ (z >> 31)


class Rng:
    """
    splitmix64 generator.

    State advances by the golden gamma on every draw; uniforms take the top 53
    bits of each output mapped to (0, 1]; Gaussians use Box-Muller on
    consecutive uniform pairs ``(u1, u2)`` emitting ``r*cos`` then ``r*sin``.
    An Rng is single-owner state: do not share one across threads.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK_64
        self._state = self.seed

    def fork(self, stream: int) -> "Rng":
        """Independent generator for sub-stream ``stream``; does not advance self."""
        return Rng(splitmix64((self.seed + (int(stream) + 1) * _GOLDEN_GAMMA) & _MASK_64))

    def next_u64(self, n: int) -> np.ndarray:
        if n < 0:
            raise ParameterError(f"draw count must be nonnegative, got {n}")
        if n == 0:
            return np.zeros(0, dtype=np.uint64)
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            counters = np.uint64(self._state) + steps * np.uint64(_GOLDEN_GAMMA)
            self._state = int(counters[-1])
            z = counters
            z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX_1)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX_2)
            z = z ^ (z >> np.uint64(31))
        return z

    def uniform(self, n: int) -> np.ndarray:
        """``n`` draws in (0, 1]."""
        bits = self.next_u64(n) >> np.uint64(11)
        return (bits.astype(np.float64) + 1.0) * (2.0 ** -53)

    def gaussian(self, shape: Sequence[int]) -> np.ndarray:
        shape = tuple(int(d) for d in shape)
        n = shape_size(shape)
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs)
        radius = np.sqrt(-2.0 * np.log(u[0::2]))
        angle = 2.0 * math.pi * u[1::2]
        draws = np.empty(2 * pairs, dtype=np.float64)
        draws[0::2] = radius * np.cos(angle)
        draws[1::2] = radius * np.sin(angle)
        return draws[:n].reshape(shape)


def gaussian(rng: Rng, shape: Sequence[int]) -> np.ndarray:
    return rng.gaussian(shape)
