"""
Cross-frame intensity (CFI) and the strategies that turn it into an
enhancement of temporal attention.

* ``baseline``               standard attention, standard residual.
* ``enhance_block``          attention untouched; the attention output is
                             scaled by clipped ``(tau + F) * CFI`` before the
                             residual add.
* ``temp_attention_scaling`` softmax denominator ``tau * sqrt(d_k)``.
* ``cfi_attention_scaling``  softmax denominator ``CFI_enhanced * sqrt(d_k)``,
                             with CFI_enhanced taken from a first pass at the
                             default scale.
"""
import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, replace
from typing import Callable, Dict, FrozenSet, Optional, Tuple, Type

import numpy as np

from src.attention import AttentionMap, AttentionParams, full_attention_3d, temporal_attention, temporal_subview_3d
from src.config_schema import EnhanceConfig, Strategy
from src.errors import ConfigError, DimensionError, ParameterError
from src.tensor_core import as_tensor

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CfiReport:
    cfi: float
    cfi_enhanced: Optional[float]
    per_group_cfi: np.ndarray
    layer: int = -1
    step: int = -1
    # Mean over groups/heads of the clipped per-group values (head-first order).
    cfi_enhanced_groupwise: Optional[float] = None
    gain: float = 1.0
    enhanced: bool = False
    strategy: str = Strategy.BASELINE.value


def cfi(attention: AttentionMap) -> CfiReport:
    """
    Mean of the off-diagonal attention weights, per group/head and overall.

    A single frame has no cross-frame mass and is defined to have CFI 0.
    """
    frames = attention.frames
    count = attention.groups * attention.heads
    if frames == 1:
        per_group = np.zeros(count)
    else:
        off_diagonal = attention.weights[..., ~np.eye(frames, dtype=bool)]
        per_group = off_diagonal.mean(axis=-1).reshape(count)
    return CfiReport(cfi=float(per_group.mean()), cfi_enhanced=None, per_group_cfi=per_group)


def cfi_enhanced(cfi_value: float, frames: int, tau: float, clip_enabled: bool) -> float:
    """``(tau + F) * CFI``, floored at 1 when clipping is on."""
    if not (0.0 <= cfi_value <= 1.0):
        raise ParameterError(f"CFI must lie in [0, 1], got {cfi_value}")
    if frames < 1:
        raise ParameterError(f"frame count must be >= 1, got {frames}")
    value = (tau + frames) * cfi_value
    if clip_enabled:
        return max(value, 1.0)
    return value


def fuse_residual(attention_output, hidden, gain: float) -> np.ndarray:
    """``gain * attention_output + hidden``."""
    attention_output = as_tensor(attention_output)
    hidden = as_tensor(hidden)
    if attention_output.shape != hidden.shape:
        raise DimensionError("attention output and residual must have the same shape",
                             attention_output.shape, hidden.shape)
    if not math.isfinite(gain):
        raise ParameterError(f"residual gain must be finite, got {gain}")
    return gain * attention_output + hidden


# ---------------------------------------------------------------------------
# Attention evaluation contexts
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AttentionContext:
    """
    Everything a strategy needs to evaluate one attention layer.

    ``evaluate(scale_override)`` returns the attention output to be fused into
    ``hidden`` and the frame-by-frame map CFI is read from.
    """

    hidden: np.ndarray
    evaluate: Callable[[Optional[float]], Tuple[np.ndarray, AttentionMap]]
    frames: int
    d_k: int

    @property
    def default_scale(self) -> float:
        return math.sqrt(self.d_k)


def temporal_context(z_tilde: np.ndarray, hidden: np.ndarray, params: AttentionParams) -> AttentionContext:
    """Context for a temporal block: attention input ``z_tilde``, residual ``hidden``, both (G, F, C)."""
    return AttentionContext(
        hidden=hidden,
        evaluate=lambda scale: temporal_attention(z_tilde, params, scale),
        frames=z_tilde.shape[1],
        d_k=params.d_k,
    )


def full_3d_context(
    tokens_tilde: np.ndarray,
    hidden: np.ndarray,
    params: AttentionParams,
    frames: int,
    height: int,
    width: int,
) -> AttentionContext:
    """Context for a 3D full-attention block; CFI comes from the temporal sub-view."""

    def evaluate(scale: Optional[float]) -> Tuple[np.ndarray, AttentionMap]:
        output, _ = full_attention_3d(tokens_tilde, params, scale)
        return output, temporal_subview_3d(tokens_tilde, params, frames, height, width, scale)

    return AttentionContext(hidden=hidden, evaluate=evaluate, frames=frames, d_k=params.d_k)


# ---------------------------------------------------------------------------
# Strategies
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EnhanceResult:
    output: np.ndarray
    report: CfiReport
    attention: AttentionMap
    # Default-scale map on the same input; identical object when unchanged.
    reference_attention: AttentionMap
    attention_output: np.ndarray


class EnhanceStrategy(ABC):
    name: Strategy

    def __init__(self, tau: float, clip_enabled: bool):
        self.tau = tau
        self.clip_enabled = clip_enabled

    @abstractmethod
    def apply(self, context: AttentionContext) -> EnhanceResult:
        pass

    def report(self, attention: AttentionMap, frames: int, gain: float, enhanced: bool) -> CfiReport:
        base = cfi(attention)
        scaled = (self.tau + frames) * base.per_group_cfi
        if self.clip_enabled:
            scaled = np.maximum(scaled, 1.0)
        return replace(
            base,
            cfi_enhanced=cfi_enhanced(base.cfi, frames, self.tau, self.clip_enabled),
            cfi_enhanced_groupwise=float(scaled.mean()),
            gain=gain,
            enhanced=enhanced,
            strategy=self.name.value,
        )


class BaselineStrategy(EnhanceStrategy):
    name = Strategy.BASELINE

    def apply(self, context: AttentionContext) -> EnhanceResult:
        output, attention = context.evaluate(None)
        return EnhanceResult(
            output=output + context.hidden,
            report=self.report(attention, context.frames, 1.0, enhanced=False),
            attention=attention,
            reference_attention=attention,
            attention_output=output,
        )


class EnhanceBlockStrategy(EnhanceStrategy):
    name = Strategy.ENHANCE_BLOCK

    def apply(self, context: AttentionContext) -> EnhanceResult:
        output, attention = context.evaluate(None)
        report = self.report(attention, context.frames, 1.0, enhanced=True)
        report = replace(report, gain=report.cfi_enhanced)
        return EnhanceResult(
            output=fuse_residual(output, context.hidden, report.cfi_enhanced),
            report=report,
            attention=attention,
            reference_attention=attention,
            attention_output=output,
        )


class TempAttentionScalingStrategy(EnhanceStrategy):
    name = Strategy.TEMP_ATTENTION_SCALING

    def apply(self, context: AttentionContext) -> EnhanceResult:
        if not self.tau > 0:
            raise ParameterError(f"temp_attention_scaling needs tau > 0, got {self.tau}")
        output, attention = context.evaluate(self.tau * context.default_scale)
        reference = attention if self.tau == 1.0 else context.evaluate(None)[1]
        return EnhanceResult(
            output=output + context.hidden,
            report=self.report(attention, context.frames, 1.0, enhanced=True),
            attention=attention,
            reference_attention=reference,
            attention_output=output,
        )


class CfiAttentionScalingStrategy(EnhanceStrategy):
    name = Strategy.CFI_ATTENTION_SCALING

    def apply(self, context: AttentionContext) -> EnhanceResult:
        first_output, reference = context.evaluate(None)
        report = self.report(reference, context.frames, 1.0, enhanced=True)
        scale = report.cfi_enhanced
        if context.frames == 1:
            # [[1]] regardless of the denominator
            output, attention = first_output, reference
        elif scale > 0:
            output, attention = context.evaluate(scale * context.default_scale)
        else:
            raise ParameterError(f"cfi_attention_scaling needs CFI_enhanced > 0, got {scale}")
        return EnhanceResult(
            output=output + context.hidden,
            report=report,
            attention=attention,
            reference_attention=reference,
            attention_output=output,
        )


_STRATEGIES: Dict[Strategy, Type[EnhanceStrategy]] = {
    Strategy.BASELINE: BaselineStrategy,
    Strategy.ENHANCE_BLOCK: EnhanceBlockStrategy,
    Strategy.TEMP_ATTENTION_SCALING: TempAttentionScalingStrategy,
    Strategy.CFI_ATTENTION_SCALING: CfiAttentionScalingStrategy,
}


def strategy_for(name, tau: float = 1.0, clip_enabled: bool = True) -> EnhanceStrategy:
    try:
        key = Strategy(name)
    except ValueError:
        raise ConfigError(f"unknown strategy {name!r}", [f"choose one of {[s.value for s in Strategy]}"])
    return _STRATEGIES[key](tau, clip_enabled)


def apply_strategy(
    config: EnhanceConfig,
    layer: int,
    context: AttentionContext,
    layer_mask: Optional[FrozenSet[int]] = None,
    step: int = -1,
) -> EnhanceResult:
    """
    Run one attention layer under ``config``.

    Layers outside ``layer_mask`` (default: ``config.layers``, or every layer
    when that is null) take the baseline path but still report CFI.
    """
    if layer_mask is None:
        layer_mask = frozenset(config.layers) if config.layers is not None else None
    masked = layer_mask is None or layer in layer_mask
    name = config.strategy if masked else Strategy.BASELINE
    result = strategy_for(name, config.tau, config.clip_enabled).apply(context)
    logger.debug("layer %d step %d %s: cfi=%.6f cfi_enhanced=%.6f", layer, step,
                 result.report.strategy, result.report.cfi, result.report.cfi_enhanced)
    return replace(result, report=replace(result.report, layer=layer, step=step))
