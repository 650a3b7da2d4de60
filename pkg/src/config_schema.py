"""
Configuration Schema Definitions using Pydantic for type-safe configuration management.

Every section forbids unknown keys so that typos in a config file fail loudly
instead of silently falling back to a default.
"""
import math
from enum import Enum
from pathlib import Path
from typing import List, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

SCHEMA_VERSION = 1


class Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class Strategy(str, Enum):
    BASELINE = "baseline"
    ENHANCE_BLOCK = "enhance_block"
    TEMP_ATTENTION_SCALING = "temp_attention_scaling"
    CFI_ATTENTION_SCALING = "cfi_attention_scaling"


class Layout(str, Enum):
    TEMPORAL = "temporal"
    FULL_3D = "full_3d"
    HYBRID = "hybrid"


class EnvironmentConfig(Strict):
    """Environment-specific configuration."""
    log_level: str = Field(default="INFO", description="Logging level, overridden by EAV_LOG_LEVEL")

    @field_validator('log_level')
    @classmethod
    def validate_log_level(cls, v):
        """Validate log level."""
        allowed = ["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"]
        if v.upper() not in allowed:
            raise ValueError(f"Log level must be one of {allowed}")
        return v.upper()


class RunConfig(Strict):
    """Latent geometry, seed and step count of one denoising run."""
    seed: int = Field(default=0, ge=0, description="Seed for weights and the initial latent")
    batch: int = Field(default=1, ge=1, description="B")
    frames: int = Field(default=8, ge=1, description="F")
    channels: int = Field(default=16, ge=1, description="C, also the model width d_model")
    height: int = Field(default=4, ge=1, description="H")
    width: int = Field(default=4, ge=1, description="W")
    steps: int = Field(default=10, ge=1, description="Denoising steps T")
    layout: Layout = Field(default=Layout.TEMPORAL, description="Block layout: temporal, full_3d or hybrid")


class ModelConfig(Strict):
    """Synthetic denoiser geometry."""
    depth: int = Field(default=4, ge=1, description="Number of blocks")
    d_k: int = Field(default=8, ge=1, description="Per-head key width")
    heads: int = Field(default=2, ge=1, description="Attention heads")
    ff_mult: int = Field(default=2, ge=1, description="Feed-forward hidden width as a multiple of d_model")
    qk_gain: float = Field(default=1.0, gt=0.0, description="Multiplier on query and key weights; larger values sharpen attention")


class ScheduleConfig(Strict):
    """Noise schedule. Explicit ``alphas`` win over the linear alpha-bar ramp."""
    alpha_bar_start: float = Field(default=1.0, gt=0.0, le=1.0, description="First cumulative alpha")
    alpha_bar_end: float = Field(default=0.01, gt=0.0, le=1.0, description="Last cumulative alpha")
    alphas: Optional[List[float]] = Field(default=None, description="Per-step alpha_t, length T")

    @field_validator('alphas')
    @classmethod
    def validate_alphas(cls, v):
        if v is not None and any(not (0.0 <= a <= 1.0) for a in v):
            raise ValueError("every alpha_t must lie in [0, 1]")
        return v

    @model_validator(mode='after')
    def validate_ramp(self):
        if self.alpha_bar_end > self.alpha_bar_start:
            raise ValueError("alpha_bar_end must not exceed alpha_bar_start")
        return self


class EnhanceConfig(Strict):
    """Enhancement strategy, enhance temperature and clipping."""
    strategy: Strategy = Field(default=Strategy.ENHANCE_BLOCK, description="Which enhancement to apply")
    tau: float = Field(default=1.0, description="Enhance temperature")
    clip_enabled: bool = Field(default=True, description="Floor CFI_enhanced at 1")
    layers: Optional[List[int]] = Field(default=None, description="Enhanced layer indices; null means every layer")

    @field_validator('tau')
    @classmethod
    def validate_tau(cls, v):
        if not math.isfinite(v):
            raise ValueError("tau must be finite")
        return v

    @field_validator('layers')
    @classmethod
    def validate_layers(cls, v):
        if v is not None:
            if any(layer < 0 for layer in v):
                raise ValueError("layer indices must be nonnegative")
            v = sorted(set(v))
        return v

    @model_validator(mode='after')
    def validate_strategy_tau(self):
        if self.strategy == Strategy.TEMP_ATTENTION_SCALING and self.tau <= 0:
            raise ValueError("temp_attention_scaling divides logits by tau, so tau must be > 0")
        return self

    def layer_mask(self, depth: int) -> frozenset:
        if self.layers is None:
            return frozenset(range(depth))
        return frozenset(self.layers)


class TraceConfig(Strict):
    """Instrumentation switches."""
    snapshots: bool = Field(default=True, description="Store F x F mean attention maps per record")
    full_maps: bool = Field(default=False, description="Keep full maps and block tensors in memory")


class OutputConfig(Strict):
    """Where artifacts are written."""
    out_dir: Path = Field(default=Path("runs/default"), description="Output directory")

    @field_validator('out_dir', mode='before')
    @classmethod
    def resolve_path(cls, v):
        if isinstance(v, str):
            return Path(v)
        return v


class PerformanceConfig(Strict):
    """Concurrency and benchmarking."""
    max_parallel_runs: int = Field(default=1, ge=1, le=32, description="Concurrent member runs in compare/sweep")
    bench_repetitions: int = Field(default=5, ge=3, description="Default repetitions for bench")


class MetricsConfig(Strict):
    """Prometheus exposition."""
    enable_metrics: bool = Field(default=False, description="Serve prometheus metrics over HTTP")
    port: int = Field(default=8000, ge=1, le=65535, description="Metrics HTTP port")


class Config(Strict):
    """Main configuration object combining all sub-configurations."""
    model_config = ConfigDict(extra="forbid", arbitrary_types_allowed=True)

    schema_version: int = Field(default=SCHEMA_VERSION, description="Config schema tag")
    environment: EnvironmentConfig = Field(default_factory=EnvironmentConfig)
    run: RunConfig = Field(default_factory=RunConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    schedule: ScheduleConfig = Field(default_factory=ScheduleConfig)
    enhance: EnhanceConfig = Field(default_factory=EnhanceConfig)
    trace: TraceConfig = Field(default_factory=TraceConfig)
    output: OutputConfig = Field(default_factory=OutputConfig)
    performance: PerformanceConfig = Field(default_factory=PerformanceConfig)
    metrics: MetricsConfig = Field(default_factory=MetricsConfig)

    @field_validator('schema_version')
    @classmethod
    def validate_schema_version(cls, v):
        if v != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema_version {v}, expected {SCHEMA_VERSION}")
        return v

    @model_validator(mode='after')
    def validate_cross_sections(self):
        """Layer mask must name existing layers; explicit alphas must cover every step."""
        if self.enhance.layers is not None:
            missing = [layer for layer in self.enhance.layers if layer >= self.model.depth]
            if missing:
                raise ValueError(f"enhance.layers {missing} exceed model depth {self.model.depth}")
        if self.schedule.alphas is not None and len(self.schedule.alphas) != self.run.steps:
            raise ValueError(f"schedule.alphas has {len(self.schedule.alphas)} entries, run.steps is {self.run.steps}")
        return self

    def ensure_directories(self):
        """Create the output directory if it doesn't exist."""
        self.output.out_dir.mkdir(parents=True, exist_ok=True)
