"""
Temporal self-attention over the frame axis of a video latent, plus the
frame-by-frame sub-view of 3D full attention.

Layout conventions
------------------
* Video latent: ``(B, F, C, H, W)``.
* Frame-axis layout: ``(B*H*W, F, C)``; spatial site ``(b, h, w)`` becomes
  group ``b*H*W + h*W + w``.
* 3D token layout: ``(B, F*H*W, C)``; token ``(f, h, w)`` sits at index
  ``f*H*W + h*W + w``.
"""
import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from src.errors import DimensionError
from src.tensor_core import Rng, as_tensor, inverse_permutation, linear, matmul, permute, reshape, softmax_rows

ROW_SUM_TOLERANCE = 1e-9

# (B, F, C, H, W) -> (B, H, W, F, C)
_LATENT_TO_SITES = (0, 3, 4, 1, 2)
# (B, H, W, F, C) -> (B, F, H, W, C)
_SITES_TO_TOKENS = (0, 3, 1, 2, 4)


@dataclass(frozen=True)
class VideoLatent:
    """Latent video with axes (batch, frames, channels, height, width)."""

    data: np.ndarray

    AXES = ("batch", "frames", "channels", "height", "width")

    def __post_init__(self):
        data = as_tensor(self.data)
        if data.ndim != 5:
            raise DimensionError("video latent must have axes (B, F, C, H, W)", data.shape)
        if any(extent < 1 for extent in data.shape):
            raise DimensionError("video latent extents must all be >= 1", data.shape)
        object.__setattr__(self, "data", data)

    @property
    def batch(self) -> int:
        return self.data.shape[0]

    @property
    def frames(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def height(self) -> int:
        return self.data.shape[3]

    @property
    def width(self) -> int:
        return self.data.shape[4]

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @classmethod
    def gaussian(cls, rng: Rng, batch: int, frames: int, channels: int, height: int, width: int) -> "VideoLatent":
        return cls(rng.gaussian((batch, frames, channels, height, width)))


@dataclass(frozen=True)
class AttentionParams:
    """Projection weights for multi-head attention, laid out (in, out)."""

    d_model: int
    d_k: int
    heads: int
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray

    def __post_init__(self):
        inner = self.d_k * self.heads
        expected = {
            "w_q": (self.d_model, inner),
            "w_k": (self.d_model, inner),
            "w_v": (self.d_model, inner),
            "w_o": (inner, self.d_model),
        }
        for name, shape in expected.items():
            weight = as_tensor(getattr(self, name))
            if weight.shape != shape:
                raise DimensionError(f"{name} does not match d_model={self.d_model}, d_k={self.d_k}, heads={self.heads}",
                                     weight.shape, shape)
            object.__setattr__(self, name, weight)

    @property
    def default_scale(self) -> float:
        """Softmax denominator of standard attention, sqrt(d_k)."""
        return math.sqrt(self.d_k)

    @classmethod
    def initialize(cls, rng: Rng, d_model: int, d_k: int, heads: int) -> "AttentionParams":
        """Seeded Gaussian weights scaled by 1/sqrt(d_model), drawn in q, k, v, o order."""
        inner = d_k * heads
        gain = 1.0 / math.sqrt(d_model)
        w_q = rng.gaussian((d_model, inner)) * gain
        w_k = rng.gaussian((d_model, inner)) * gain
        w_v = rng.gaussian((d_model, inner)) * gain
        w_o = rng.gaussian((inner, d_model)) * gain
        return cls(d_model=d_model, d_k=d_k, heads=heads, w_q=w_q, w_k=w_k, w_v=w_v, w_o=w_o)


@dataclass(frozen=True)
class AttentionMap:
    """Row-stochastic attention weights of shape (groups, heads, F, F)."""

    weights: np.ndarray

    def __post_init__(self):
        weights = as_tensor(self.weights)
        if weights.ndim != 4 or weights.shape[-1] != weights.shape[-2]:
            raise DimensionError("attention map must be (groups, heads, F, F)", weights.shape)
        row_sums = weights.sum(axis=-1)
        if weights.size and np.max(np.abs(row_sums - 1.0)) > ROW_SUM_TOLERANCE:
            raise DimensionError("attention rows must sum to 1", weights.shape)
        if weights.size and (weights.min() < 0.0 or weights.max() > 1.0):
            raise DimensionError("attention weights must lie in [0, 1]", weights.shape)
        object.__setattr__(self, "weights", weights)

    @property
    def groups(self) -> int:
        return self.weights.shape[0]

    @property
    def heads(self) -> int:
        return self.weights.shape[1]

    @property
    def frames(self) -> int:
        return self.weights.shape[-1]

    def mean_map(self) -> np.ndarray:
        """F x F aggregate over groups and heads."""
        return self.weights.mean(axis=(0, 1))


# ---------------------------------------------------------------------------
# Layout bridges
# ---------------------------------------------------------------------------

def to_frame_axis(z: VideoLatent) -> np.ndarray:
    """(B, F, C, H, W) -> (B*H*W, F, C), merging spatial sites into the batch."""
    sites = permute(z.data, _LATENT_TO_SITES)
    return reshape(sites, (z.batch * z.height * z.width, z.frames, z.channels))


def from_frame_axis(x: np.ndarray, batch: int, height: int, width: int) -> VideoLatent:
    x = as_tensor(x)
    if x.ndim != 3 or x.shape[0] != batch * height * width:
        raise DimensionError(f"frame-axis tensor does not hold {batch}x{height}x{width} sites", x.shape)
    frames, channels = x.shape[1], x.shape[2]
    sites = reshape(x, (batch, height, width, frames, channels))
    return VideoLatent(permute(sites, inverse_permutation(_LATENT_TO_SITES)))


def frame_axis_to_tokens(x: np.ndarray, batch: int, height: int, width: int) -> np.ndarray:
    """(B*H*W, F, C) -> (B, F*H*W, C)."""
    x = as_tensor(x)
    if x.ndim != 3 or x.shape[0] != batch * height * width:
        raise DimensionError(f"frame-axis tensor does not hold {batch}x{height}x{width} sites", x.shape)
    frames, channels = x.shape[1], x.shape[2]
    sites = reshape(x, (batch, height, width, frames, channels))
    return reshape(permute(sites, _SITES_TO_TOKENS), (batch, frames * height * width, channels))


def tokens_to_frame_axis(tokens: np.ndarray, frames: int, height: int, width: int) -> np.ndarray:
    """(B, F*H*W, C) -> (B*H*W, F, C), fixing the spatial site and varying the frame."""
    tokens = as_tensor(tokens)
    if tokens.ndim != 3:
        raise DimensionError("3D tokens must be (B, F*H*W, C)", tokens.shape)
    batch, count, channels = tokens.shape
    if count != frames * height * width:
        raise DimensionError(f"token count {count} is not F*H*W = {frames}*{height}*{width}", tokens.shape)
    grid = reshape(tokens, (batch, frames, height, width, channels))
    sites = permute(grid, inverse_permutation(_SITES_TO_TOKENS))
    return reshape(sites, (batch * height * width, frames, channels))


# ---------------------------------------------------------------------------
# Attention
# ---------------------------------------------------------------------------

def _split_heads(x: np.ndarray, heads: int, d_k: int) -> np.ndarray:
    groups, length, _ = x.shape
    return permute(reshape(x, (groups, length, heads, d_k)), (0, 2, 1, 3))


def _multi_head(x: np.ndarray, params: AttentionParams, scale: float) -> Tuple[np.ndarray, np.ndarray]:
    q = _split_heads(linear(x, params.w_q), params.heads, params.d_k)
    k = _split_heads(linear(x, params.w_k), params.heads, params.d_k)
    v = _split_heads(linear(x, params.w_v), params.heads, params.d_k)
    weights = softmax_rows(matmul(q, permute(k, (0, 1, 3, 2))), scale)
    context = permute(matmul(weights, v), (0, 2, 1, 3))
    groups, length = x.shape[0], x.shape[1]
    merged = reshape(context, (groups, length, params.heads * params.d_k))
    return linear(merged, params.w_o), weights


def _check_sequence(x: np.ndarray, params: AttentionParams) -> np.ndarray:
    x = as_tensor(x)
    if x.ndim != 3 or x.shape[-1] != params.d_model:
        raise DimensionError(f"attention input must be (groups, length, {params.d_model})", x.shape)
    return x


def temporal_attention(
    z: np.ndarray,
    params: AttentionParams,
    scale_override: Optional[float] = None,
) -> Tuple[np.ndarray, AttentionMap]:
    """
    Self-attention along the frame axis of a ``(G, F, C)`` tensor.

    The softmax denominator is ``sqrt(d_k)`` unless ``scale_override`` is
    given, in which case it replaces it (e.g. ``tau * sqrt(d_k)``).

    Returns the output-projected attention result and the attention map.
    """
    z = _check_sequence(z, params)
    scale = params.default_scale if scale_override is None else scale_override
    output, weights = _multi_head(z, params, scale)
    return output, AttentionMap(weights)


def full_attention_3d(
    tokens: np.ndarray,
    params: AttentionParams,
    scale_override: Optional[float] = None,
) -> Tuple[np.ndarray, AttentionMap]:
    """Joint attention over all F*H*W tokens of each batch element."""
    tokens = _check_sequence(tokens, params)
    scale = params.default_scale if scale_override is None else scale_override
    output, weights = _multi_head(tokens, params, scale)
    return output, AttentionMap(weights)


def temporal_subview_3d(
    tokens: np.ndarray,
    params: AttentionParams,
    frames: int,
    height: int,
    width: int,
    scale_override: Optional[float] = None,
) -> AttentionMap:
    """
    Frame-by-frame attention map hidden inside a 3D full-attention block.

    Tokens are regrouped per spatial site and the block's own Q/K weights are
    re-applied along frames. The map only feeds CFI; the 3D block's output is
    computed by :func:`full_attention_3d`.
    """
    tokens = _check_sequence(tokens, params)
    _, weights = _multi_head(tokens_to_frame_axis(tokens, frames, height, width), params,
                             params.default_scale if scale_override is None else scale_override)
    return AttentionMap(weights)
