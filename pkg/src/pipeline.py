"""
Deterministic toy latent-video diffusion sandbox.

Forward noising follows the standard per-step rule
``x_t = sqrt(alpha_t) x_{t-1} + sqrt(1 - alpha_t) z_t``. The reverse process
is a deterministic residual update ``x_{t-1} = x_t - model(x_t, t) / T``
driven by a fixed, seeded diffusion-transformer stand-in whose attention
layers go through the enhancement strategies.
"""
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import FrozenSet, List, Optional, Sequence, Tuple

import numpy as np

from src.attention import (
    AttentionParams,
    VideoLatent,
    frame_axis_to_tokens,
    from_frame_axis,
    to_frame_axis,
    tokens_to_frame_axis,
)
from src.config_schema import Config, EnhanceConfig, Layout, ModelConfig, RunConfig, ScheduleConfig, Strategy, TraceConfig
from src.enhance import apply_strategy, full_3d_context, temporal_context
from src.errors import ParameterError
from src.metrics import MetricsManager
from src.tensor_core import Rng, as_tensor, gelu, linear, rms_norm, timestep_embedding
from src.trace import TraceSink

logger = logging.getLogger(__name__)

MODEL_STREAM = 0
LATENT_STREAM = 1


class NoiseSchedule:
    """Per-step ``alpha_t`` for t = 1..T and their cumulative products."""

    def __init__(self, alphas: Sequence[float]):
        alphas = as_tensor(alphas).copy()
        if alphas.ndim != 1 or alphas.size < 1:
            raise ParameterError("a noise schedule needs at least one step")
        # alpha_t = 0 is admitted for the pure-noise degenerate step
        if np.any(alphas < 0.0) or np.any(alphas > 1.0):
            raise ParameterError("every alpha_t must lie in [0, 1]")
        alphas.setflags(write=False)
        self.alphas = alphas
        self.alpha_bars = np.cumprod(alphas)
        self.alpha_bars.setflags(write=False)

    def __eq__(self, other):
        return isinstance(other, NoiseSchedule) and np.array_equal(self.alphas, other.alphas)

    def __repr__(self):
        return f"NoiseSchedule(steps={self.steps}, alpha_bar_T={self.alpha_bars[-1]:.4g})"

    @property
    def steps(self) -> int:
        return self.alphas.size

    def _check_step(self, t: int):
        if not 1 <= t <= self.steps:
            raise ParameterError(f"step t={t} outside 1..{self.steps}")

    def alpha(self, t: int) -> float:
        self._check_step(t)
        return float(self.alphas[t - 1])

    def alpha_bar(self, t: int) -> float:
        self._check_step(t)
        return float(self.alpha_bars[t - 1])

    @classmethod
    def linear(cls, steps: int, start: float = 1.0, end: float = 0.01) -> "NoiseSchedule":
        """Cumulative alpha-bar falling linearly from ``start`` to ``end``."""
        if steps < 1:
            raise ParameterError(f"steps must be >= 1, got {steps}")
        bars = np.linspace(start, end, steps) if steps > 1 else np.array([end], dtype=np.float64)
        previous = np.concatenate([[1.0], bars[:-1]])
        return cls(bars / previous)

    @classmethod
    def from_alphas(cls, alphas: Sequence[float]) -> "NoiseSchedule":
        return cls(alphas)

    @classmethod
    def constant(cls, steps: int, alpha: float) -> "NoiseSchedule":
        return cls(np.full(steps, float(alpha)))

    @classmethod
    def from_config(cls, schedule: ScheduleConfig, steps: int) -> "NoiseSchedule":
        if schedule.alphas is not None:
            return cls.from_alphas(schedule.alphas)
        return cls.linear(steps, schedule.alpha_bar_start, schedule.alpha_bar_end)


def forward_diffuse(x0: VideoLatent, schedule: NoiseSchedule, t: int, rng: Rng) -> VideoLatent:
    """Apply the one-step noising rule for steps 1..t, drawing fresh noise each step."""
    schedule._check_step(t)
    x = x0.data
    for step in range(1, t + 1):
        alpha = schedule.alpha(step)
        z = rng.gaussian(x.shape)
        x = math.sqrt(alpha) * x + math.sqrt(1.0 - alpha) * z
    return VideoLatent(x)


def forward_diffuse_closed_form(x0: VideoLatent, schedule: NoiseSchedule, t: int, rng: Rng) -> VideoLatent:
    """Single jump ``sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) z``."""
    alpha_bar = schedule.alpha_bar(t)
    z = rng.gaussian(x0.shape)
    return VideoLatent(math.sqrt(alpha_bar) * x0.data + math.sqrt(1.0 - alpha_bar) * z)


# ---------------------------------------------------------------------------
# Synthetic denoiser
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DenoiserBlock:
    layout: Layout
    attention: AttentionParams
    ff_in: np.ndarray
    ff_out: np.ndarray

    def feed_forward(self, x: np.ndarray) -> np.ndarray:
        return linear(gelu(linear(rms_norm(x), self.ff_in)), self.ff_out)


@dataclass(frozen=True)
class ToyDenoiser:
    blocks: Tuple[DenoiserBlock, ...]
    out_proj: np.ndarray

    @property
    def depth(self) -> int:
        return len(self.blocks)

    @property
    def d_model(self) -> int:
        return self.out_proj.shape[0]

    @classmethod
    def build(cls, seed: int, depth: int, d_model: int, d_k: int, heads: int,
              ff_mult: int = 2, layout: Layout = Layout.TEMPORAL, qk_gain: float = 1.0) -> "ToyDenoiser":
        """
        Seeded weights. ``hybrid`` alternates temporal (even layers) and 3D
        full-attention (odd layers) blocks; ``qk_gain`` multiplies the query
        and key projections, sharpening attention as it grows.
        """
        rng = Rng(seed).fork(MODEL_STREAM)
        hidden = ff_mult * d_model
        blocks = []
        for index in range(depth):
            params = AttentionParams.initialize(rng, d_model, d_k, heads)
            if qk_gain != 1.0:
                params = replace(params, w_q=params.w_q * qk_gain, w_k=params.w_k * qk_gain)
            ff_in = rng.gaussian((d_model, hidden)) / math.sqrt(d_model)
            ff_out = rng.gaussian((hidden, d_model)) / math.sqrt(hidden)
            blocks.append(DenoiserBlock(_block_layout(layout, index), params, ff_in, ff_out))
        out_proj = rng.gaussian((d_model, d_model)) / math.sqrt(d_model)
        return cls(blocks=tuple(blocks), out_proj=out_proj)

    def with_attention(self, layer: int, params: AttentionParams) -> "ToyDenoiser":
        blocks = list(self.blocks)
        blocks[layer] = replace(blocks[layer], attention=params)
        return replace(self, blocks=tuple(blocks))

    def predict(
        self,
        x_t: VideoLatent,
        t: int,
        enhance: EnhanceConfig,
        trace: TraceSink,
        step_index: int = 0,
        layer_mask: Optional[FrozenSet[int]] = None,
        metrics: Optional[MetricsManager] = None,
    ) -> np.ndarray:
        """Model output for ``x_t`` at diffusion step ``t``, shaped like the latent."""
        if x_t.channels != self.d_model:
            raise ParameterError(f"latent has {x_t.channels} channels, model width is {self.d_model}")
        batch, frames, height, width = x_t.batch, x_t.frames, x_t.height, x_t.width
        if layer_mask is None:
            layer_mask = enhance.layer_mask(self.depth)
        hidden = to_frame_axis(x_t) + timestep_embedding(t, self.d_model)

        for index, block in enumerate(self.blocks):
            start = time.perf_counter()
            if block.layout == Layout.TEMPORAL:
                context = temporal_context(rms_norm(hidden), hidden, block.attention)
                result = apply_strategy(enhance, index, context, layer_mask, step_index)
                fused = result.output
            else:
                tokens = frame_axis_to_tokens(hidden, batch, height, width)
                context = full_3d_context(rms_norm(tokens), tokens, block.attention, frames, height, width)
                result = apply_strategy(enhance, index, context, layer_mask, step_index)
                fused = tokens_to_frame_axis(result.output, frames, height, width)
            hidden = fused + block.feed_forward(fused)
            elapsed = time.perf_counter() - start

            trace.record_block(step_index, index, block.layout.value, result, context.hidden, elapsed)
            if metrics is not None:
                metrics.record_block(block.layout.value, index, result.report.strategy,
                                     result.report.enhanced, result.report.cfi_enhanced, elapsed)

        return from_frame_axis(linear(hidden, self.out_proj), batch, height, width).data


def _block_layout(layout: Layout, index: int) -> Layout:
    if layout == Layout.HYBRID:
        return Layout.TEMPORAL if index % 2 == 0 else Layout.FULL_3D
    return Layout(layout)


def denoise_step(
    x_t: VideoLatent,
    t: int,
    model: ToyDenoiser,
    enhance: EnhanceConfig,
    trace: TraceSink,
    total_steps: int,
    step_index: int = 0,
    layer_mask: Optional[FrozenSet[int]] = None,
    metrics: Optional[MetricsManager] = None,
) -> VideoLatent:
    """``x_{t-1} = x_t - model(x_t, t) / T``."""
    if t < 1:
        raise ParameterError(f"denoise step t must be >= 1, got {t}")
    prediction = model.predict(x_t, t, enhance, trace, step_index, layer_mask, metrics)
    return VideoLatent(x_t.data - prediction / total_steps)


# ---------------------------------------------------------------------------
# Runs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RunSpec:
    seed: int = 0
    batch: int = 1
    frames: int = 8
    channels: int = 16
    height: int = 4
    width: int = 4
    steps: int = 10
    schedule: NoiseSchedule = None
    enhance: EnhanceConfig = field(default_factory=EnhanceConfig)
    layout: Layout = Layout.TEMPORAL
    depth: int = 4
    d_k: int = 8
    heads: int = 2
    ff_mult: int = 2
    qk_gain: float = 1.0
    snapshots: bool = True
    full_maps: bool = False

    def __post_init__(self):
        dims = {"batch": self.batch, "frames": self.frames, "channels": self.channels, "height": self.height,
                "width": self.width, "steps": self.steps, "depth": self.depth, "d_k": self.d_k, "heads": self.heads}
        bad = [name for name, value in dims.items() if value < 1]
        if bad:
            raise ParameterError(f"run dimensions must be positive: {bad}")
        if self.schedule is None:
            object.__setattr__(self, "schedule", NoiseSchedule.linear(self.steps))
        if self.schedule.steps != self.steps:
            raise ParameterError(f"schedule has {self.schedule.steps} steps, run has {self.steps}")
        if self.enhance.layers is not None and max(self.enhance.layers, default=-1) >= self.depth:
            raise ParameterError(f"enhance layers {self.enhance.layers} exceed depth {self.depth}")

    @classmethod
    def from_config(cls, config: Config) -> "RunSpec":
        run, model = config.run, config.model
        return cls(
            seed=run.seed, batch=run.batch, frames=run.frames, channels=run.channels,
            height=run.height, width=run.width, steps=run.steps,
            schedule=NoiseSchedule.from_config(config.schedule, run.steps),
            enhance=config.enhance, layout=run.layout,
            depth=model.depth, d_k=model.d_k, heads=model.heads, ff_mult=model.ff_mult, qk_gain=model.qk_gain,
            snapshots=config.trace.snapshots, full_maps=config.trace.full_maps,
        )

    def to_config(self, base: Optional[Config] = None) -> Config:
        """Config document for this spec; sections not covered by RunSpec come from ``base``."""
        base = base or Config()
        return base.model_copy(update={
            "run": RunConfig(seed=self.seed, batch=self.batch, frames=self.frames, channels=self.channels,
                             height=self.height, width=self.width, steps=self.steps, layout=self.layout),
            "model": ModelConfig(depth=self.depth, d_k=self.d_k, heads=self.heads, ff_mult=self.ff_mult,
                                 qk_gain=self.qk_gain),
            "schedule": ScheduleConfig(alphas=[float(a) for a in self.schedule.alphas]),
            "enhance": self.enhance,
            "trace": TraceConfig(snapshots=self.snapshots, full_maps=self.full_maps),
        })

    def with_enhance(self, **changes) -> "RunSpec":
        return replace(self, enhance=EnhanceConfig.model_validate({**self.enhance.model_dump(), **changes}))

    def build_model(self) -> ToyDenoiser:
        return ToyDenoiser.build(self.seed, self.depth, self.channels, self.d_k, self.heads,
                                 self.ff_mult, self.layout, self.qk_gain)

    def initial_latent(self) -> VideoLatent:
        rng = Rng(self.seed).fork(LATENT_STREAM)
        return VideoLatent.gaussian(rng, self.batch, self.frames, self.channels, self.height, self.width)


@dataclass
class RunResult:
    spec: RunSpec
    latent: VideoLatent
    trace: TraceSink
    duration: float


def run(spec: RunSpec, model: Optional[ToyDenoiser] = None, metrics: Optional[MetricsManager] = None) -> RunResult:
    """
    Start from the seeded Gaussian ``x_T`` and apply T denoise steps.

    Output is a pure function of ``spec`` (and ``model`` when one is given).
    """
    model = model or spec.build_model()
    trace = TraceSink(snapshots=spec.snapshots, full_maps=spec.full_maps)
    layer_mask = spec.enhance.layer_mask(model.depth)
    strategy = Strategy(spec.enhance.strategy).value
    x = spec.initial_latent()

    start = time.perf_counter()
    try:
        for step_index, t in enumerate(range(spec.steps, 0, -1)):
            x = denoise_step(x, t, model, spec.enhance, trace, spec.steps, step_index, layer_mask, metrics)
    except Exception:
        if metrics is not None:
            metrics.record_run(strategy, 'failure', time.perf_counter() - start)
        raise
    duration = time.perf_counter() - start

    if metrics is not None:
        metrics.record_run(strategy, 'success', duration)
    logger.info("run seed=%d strategy=%s tau=%g: %d records in %.3fs",
                spec.seed, strategy, spec.enhance.tau, len(trace), duration)
    return RunResult(spec=spec, latent=x, trace=trace, duration=duration)


def run_many(specs: List[RunSpec], max_workers: int = 1,
             metrics: Optional[MetricsManager] = None) -> List[RunResult]:
    """Independent runs, optionally concurrent; results keep the input order."""
    if max_workers <= 1 or len(specs) <= 1:
        return [run(spec, metrics=metrics) for spec in specs]
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        return list(pool.map(lambda spec: run(spec, metrics=metrics), specs))
