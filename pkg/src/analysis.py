"""
Analysis artifacts from traces: attention difference maps, CFI trajectories,
residual norm proportions, overhead measurement, and CSV/PGM exports.
"""
import json
import logging
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np
import pandas as pd

from src.artifacts import atomic_write_bytes, atomic_write_text
from src.config_schema import Strategy
from src.errors import DomainError, PairingError, ParameterError
from src.pipeline import RunSpec, run
from src.trace import FLOAT_FORMAT, TraceRecord

logger = logging.getLogger(__name__)

DIFF_ROW_TOLERANCE = 1e-9


@dataclass(frozen=True)
class DiffMap:
    """``A_variant - A_baseline`` for one (step, layer)."""

    step: int
    layer: int
    values: np.ndarray
    max_abs_diagonal_delta: float
    mean_off_diagonal_delta: float

    @property
    def max_abs_entry(self) -> float:
        return float(np.max(np.abs(self.values)))

    @classmethod
    def between(cls, step: int, layer: int, base: np.ndarray, variant: np.ndarray) -> "DiffMap":
        base = np.asarray(base, dtype=np.float64)
        variant = np.asarray(variant, dtype=np.float64)
        if base.shape != variant.shape:
            raise PairingError(f"step {step} layer {layer}: maps {base.shape} and {variant.shape} differ in size")
        values = variant - base
        row_error = float(np.max(np.abs(values.sum(axis=-1))))
        if row_error > DIFF_ROW_TOLERANCE:
            raise DomainError(f"step {step} layer {layer}: diff rows sum to {row_error:.3g}, maps are not stochastic")
        frames = values.shape[-1]
        diagonal = np.diag(values)
        off = values[~np.eye(frames, dtype=bool)]
        return cls(
            step=step,
            layer=layer,
            values=values,
            max_abs_diagonal_delta=float(np.max(np.abs(diagonal))),
            mean_off_diagonal_delta=float(off.mean()) if off.size else 0.0,
        )


def _snapshot(record: TraceRecord, name: str) -> np.ndarray:
    value = getattr(record, name)
    if value is None:
        raise PairingError(f"step {record.step} layer {record.layer} has no {name}")
    return value


def diff_map(base: TraceRecord, variant: TraceRecord) -> DiffMap:
    if base.key != variant.key:
        raise PairingError(f"cannot pair (step, layer) {base.key} with {variant.key}")
    if base.frames != variant.frames:
        raise PairingError(f"cannot pair F={base.frames} with F={variant.frames} at {base.key}")
    return DiffMap.between(base.step, base.layer,
                           _snapshot(base, "attention_snapshot"), _snapshot(variant, "attention_snapshot"))


def within_layer_diff(record: TraceRecord) -> DiffMap:
    """Map actually used minus the default-scale map on the same layer input."""
    return DiffMap.between(record.step, record.layer,
                           _snapshot(record, "reference_snapshot"), _snapshot(record, "attention_snapshot"))


def pair_diff_maps(base: Sequence[TraceRecord], variant: Sequence[TraceRecord]) -> List[DiffMap]:
    variant_by_key = {r.key: r for r in variant}
    base_keys = [r.key for r in base]
    if set(base_keys) != set(variant_by_key):
        raise PairingError("traces cover different (step, layer) coordinates")
    return [diff_map(record, variant_by_key[record.key]) for record in base]


def diff_summary(diffs: Iterable[DiffMap], **labels) -> pd.DataFrame:
    rows = [
        {**labels, "step": d.step, "layer": d.layer,
         "max_abs_diagonal_delta": d.max_abs_diagonal_delta,
         "mean_off_diagonal_delta": d.mean_off_diagonal_delta,
         "max_abs_entry": d.max_abs_entry}
        for d in diffs
    ]
    columns = list(labels) + ["step", "layer", "max_abs_diagonal_delta", "mean_off_diagonal_delta", "max_abs_entry"]
    return pd.DataFrame(rows, columns=columns)


# ---------------------------------------------------------------------------
# Series
# ---------------------------------------------------------------------------

@dataclass
class NormProportions:
    frame: pd.DataFrame
    undefined: int = 0


def norm_proportions(records: Iterable[TraceRecord], layer: Optional[int] = None) -> NormProportions:
    """
    ``||O_attn|| / ||H||`` and ``CFI_enhanced * ||O_attn|| / ||H||`` per record.

    Records with a zero residual norm have no proportion; they are counted
    in ``undefined`` and left out of the frame.
    """
    rows = []
    undefined = 0
    for record in records:
        if layer is not None and record.layer != layer:
            continue
        if record.norm_hidden == 0.0:
            undefined += 1
            continue
        base = record.norm_attention_output / record.norm_hidden
        rows.append((record.step, record.layer, base, record.cfi_enhanced * record.norm_attention_output / record.norm_hidden))
    if undefined:
        logger.warning("%d records with zero residual norm excluded from norm proportions", undefined)
    frame = pd.DataFrame(rows, columns=["step", "layer", "prop_baseline", "prop_enhanced"])
    return NormProportions(frame=frame, undefined=undefined)


def cfi_trajectory(records: Sequence[TraceRecord], layer: int) -> pd.DataFrame:
    """Ordered (step, cfi, cfi_enhanced) series of one layer."""
    records = list(records)
    if not records:
        raise DomainError("cannot build a CFI trajectory from an empty trace")
    selected = sorted((r for r in records if r.layer == layer), key=lambda r: r.step)
    if not selected:
        known = sorted({r.layer for r in records})
        raise ParameterError(f"layer {layer} not in trace (layers: {known})")
    return pd.DataFrame(
        [(r.step, r.cfi, r.cfi_enhanced, r.cfi_enhanced_groupwise) for r in selected],
        columns=["step", "cfi", "cfi_enhanced", "cfi_enhanced_groupwise"],
    )


# ---------------------------------------------------------------------------
# Overhead
# ---------------------------------------------------------------------------

@dataclass
class BenchReport:
    baseline_strategy: str
    enhanced_strategy: str
    baseline_times: List[float] = field(default_factory=list)
    enhanced_times: List[float] = field(default_factory=list)

    @property
    def repetitions(self) -> int:
        return len(self.baseline_times)

    @property
    def median_baseline(self) -> float:
        return statistics.median(self.baseline_times)

    @property
    def median_enhanced(self) -> float:
        return statistics.median(self.enhanced_times)

    @property
    def overhead_fraction(self) -> float:
        return (self.median_enhanced - self.median_baseline) / self.median_baseline

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [
                ("baseline", self.baseline_strategy, self.repetitions, self.median_baseline),
                ("enhanced", self.enhanced_strategy, self.repetitions, self.median_enhanced),
            ],
            columns=["arm", "strategy", "repetitions", "median_seconds"],
        )

    def format_table(self) -> str:
        lines = [
            f"{'arm':<10}{'strategy':<26}{'median time (s)':>16}",
            f"{'baseline':<10}{self.baseline_strategy:<26}{self.median_baseline:>16.6f}",
            f"{'enhanced':<10}{self.enhanced_strategy:<26}{self.median_enhanced:>16.6f}",
            f"overhead: {self.overhead_fraction * 100:.2f}% over {self.repetitions} repetitions",
        ]
        return "\n".join(lines)


def overhead_bench(spec: RunSpec, repetitions: int = 5,
                   baseline: Strategy = Strategy.BASELINE,
                   enhanced: Strategy = Strategy.ENHANCE_BLOCK,
                   warmup: int = 1) -> BenchReport:
    """
    Median wall time of two runs differing only in strategy.

    Arms alternate which goes first each repetition so slow drift in machine
    load hits both equally. Model construction is outside the timed region.
    """
    if repetitions < 3:
        raise ParameterError(f"overhead bench needs at least 3 repetitions, got {repetitions}")
    arms = {
        "baseline": spec.with_enhance(strategy=Strategy(baseline)),
        "enhanced": spec.with_enhance(strategy=Strategy(enhanced)),
    }
    model = spec.build_model()
    report = BenchReport(baseline_strategy=Strategy(baseline).value, enhanced_strategy=Strategy(enhanced).value)

    for _ in range(warmup):
        for arm_spec in arms.values():
            run(arm_spec, model=model)

    for repetition in range(repetitions):
        order = ("baseline", "enhanced") if repetition % 2 == 0 else ("enhanced", "baseline")
        for arm in order:
            duration = run(arms[arm], model=model).duration
            (report.baseline_times if arm == "baseline" else report.enhanced_times).append(duration)

    logger.info("bench %s vs %s: overhead %.2f%%", report.baseline_strategy, report.enhanced_strategy,
                report.overhead_fraction * 100)
    return report


# ---------------------------------------------------------------------------
# Exports
# ---------------------------------------------------------------------------

def export_series_csv(frame: pd.DataFrame, path: Path) -> Path:
    return atomic_write_text(path, frame.to_csv(index=False, float_format=FLOAT_FORMAT))


def read_series_csv(path: Path) -> pd.DataFrame:
    return pd.read_csv(path, float_precision="round_trip")


def export_map_csv(values: np.ndarray, path: Path) -> Path:
    """Row-major F x F map with frame indices as the header."""
    values = np.asarray(values, dtype=np.float64)
    frame = pd.DataFrame(values, columns=[str(i) for i in range(values.shape[1])])
    return export_series_csv(frame, path)


def read_map_csv(path: Path) -> np.ndarray:
    return read_series_csv(path).to_numpy(dtype=np.float64)


def export_map_pgm(values: np.ndarray, path: Path) -> Dict[str, Path]:
    """
    8-bit binary graymap scaled so the map's minimum is 0 and maximum is 255,
    with a JSON sidecar holding the raw range. Colour rendering is left to
    the reader.
    """
    values = np.asarray(values, dtype=np.float64)
    low, high = float(values.min()), float(values.max())
    if high > low:
        pixels = np.rint((values - low) / (high - low) * 255.0).astype(np.uint8)
    else:
        pixels = np.zeros(values.shape, dtype=np.uint8)
    rows, cols = values.shape
    path = Path(path)
    atomic_write_bytes(path, f"P5\n{cols} {rows}\n255\n".encode("ascii") + pixels.tobytes())
    sidecar = path.with_suffix(".json")
    atomic_write_text(sidecar, json.dumps({"min": low, "max": high, "rows": rows, "cols": cols}, indent=2) + "\n")
    return {"image": path, "sidecar": sidecar}


def read_pgm(path: Path) -> np.ndarray:
    data = Path(path).read_bytes()
    magic, dims, maxval, pixels = data.split(b"\n", 3)
    if magic != b"P5" or maxval != b"255":
        raise ValueError(f"{path} is not an 8-bit binary PGM")
    cols, rows = (int(v) for v in dims.split())
    return np.frombuffer(pixels, dtype=np.uint8).reshape(rows, cols)
