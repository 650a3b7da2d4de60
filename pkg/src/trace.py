"""
Per-layer, per-step instrumentation of a denoising run.

Trace file format
-----------------
One JSON object per line, keys in the order of ``TRACE_FIELDS``. Floats are
written with 17 significant digits so re-reading reproduces them exactly.
Snapshots are nested lists (rows of the F x F map) or ``null``. Wall times
are not part of the trace file; they go to a separate timings CSV so two
runs of the same config give byte-identical traces.
"""
import hashlib
import json
import math
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional

import numpy as np
import pandas as pd

from src.enhance import EnhanceResult
from src.tensor_core import l2_norm

TRACE_FIELDS = (
    "step",
    "layer",
    "layout",
    "strategy",
    "enhanced",
    "frames",
    "cfi",
    "cfi_enhanced",
    "cfi_enhanced_groupwise",
    "gain",
    "norm_attention_output",
    "norm_hidden",
    "subview_projection",
    "attention_snapshot",
    "reference_snapshot",
)

FLOAT_FORMAT = "%.17g"

# How 3D blocks obtain the frame-by-frame map.
SUBVIEW_PROJECTION = "block_qk_recomputed"


@dataclass
class TraceRecord:
    step: int
    layer: int
    layout: str
    strategy: str
    enhanced: bool
    frames: int
    cfi: float
    cfi_enhanced: float
    cfi_enhanced_groupwise: float
    gain: float
    norm_attention_output: float
    norm_hidden: float
    subview_projection: Optional[str] = None
    attention_snapshot: Optional[np.ndarray] = None
    reference_snapshot: Optional[np.ndarray] = None
    wall_time: float = 0.0
    # In-memory only (TraceConfig.full_maps).
    per_group_cfi: Optional[np.ndarray] = None
    full_attention: Optional[np.ndarray] = None
    tensors: Dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def key(self):
        return (self.step, self.layer)

    def to_dict(self) -> dict:
        return {name: getattr(self, name) for name in TRACE_FIELDS}

    @classmethod
    def from_dict(cls, data: dict) -> "TraceRecord":
        unknown = set(data) - set(TRACE_FIELDS)
        if unknown:
            raise ValueError(f"unknown trace fields: {sorted(unknown)}")

        def snapshot(value):
            return None if value is None else np.asarray(value, dtype=np.float64)

        return cls(
            step=int(data["step"]),
            layer=int(data["layer"]),
            layout=data["layout"],
            strategy=data["strategy"],
            enhanced=bool(data["enhanced"]),
            frames=int(data["frames"]),
            cfi=float(data["cfi"]),
            cfi_enhanced=float(data["cfi_enhanced"]),
            cfi_enhanced_groupwise=float(data["cfi_enhanced_groupwise"]),
            gain=float(data["gain"]),
            norm_attention_output=float(data["norm_attention_output"]),
            norm_hidden=float(data["norm_hidden"]),
            subview_projection=data.get("subview_projection"),
            attention_snapshot=snapshot(data.get("attention_snapshot")),
            reference_snapshot=snapshot(data.get("reference_snapshot")),
        )


class TraceSink:
    """Collects TraceRecords; appends are serialised with a lock."""

    def __init__(self, snapshots: bool = True, full_maps: bool = False):
        self.snapshots = snapshots
        self.full_maps = full_maps
        self._lock = threading.Lock()
        self._records: List[TraceRecord] = []

    def append(self, record: TraceRecord):
        with self._lock:
            self._records.append(record)

    @property
    def records(self) -> List[TraceRecord]:
        with self._lock:
            return list(self._records)

    def __len__(self):
        with self._lock:
            return len(self._records)

    def __iter__(self):
        return iter(self.records)

    def for_layer(self, layer: int) -> List[TraceRecord]:
        return [r for r in self.records if r.layer == layer]

    def record_block(self, step: int, layer: int, layout: str, result: EnhanceResult,
                     hidden: np.ndarray, wall_time: float) -> TraceRecord:
        """Build and append the record for one attention layer evaluation."""
        report = result.report
        record = TraceRecord(
            step=step,
            layer=layer,
            layout=layout,
            strategy=report.strategy,
            enhanced=report.enhanced,
            frames=result.attention.frames,
            cfi=report.cfi,
            cfi_enhanced=report.cfi_enhanced,
            cfi_enhanced_groupwise=report.cfi_enhanced_groupwise,
            gain=report.gain,
            norm_attention_output=l2_norm(result.attention_output),
            norm_hidden=l2_norm(hidden),
            subview_projection=SUBVIEW_PROJECTION if layout == "full_3d" else None,
            wall_time=wall_time,
        )
        if self.snapshots:
            record.attention_snapshot = result.attention.mean_map()
            record.reference_snapshot = (record.attention_snapshot
                                         if result.reference_attention is result.attention
                                         else result.reference_attention.mean_map())
        if self.full_maps:
            record.per_group_cfi = report.per_group_cfi
            record.full_attention = result.attention.weights
            record.tensors = {
                "attention_output": result.attention_output,
                "hidden": hidden,
                "output": result.output,
                "reference_attention": result.reference_attention.weights,
            }
        self.append(record)
        return record


# ---------------------------------------------------------------------------
# Serialisation
# ---------------------------------------------------------------------------

def _encode(value) -> str:
    if value is None:
        return "null"
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return FLOAT_FORMAT % value if math.isfinite(value) else "null"
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, np.ndarray):
        value = value.tolist()
    if isinstance(value, (list, tuple)):
        return "[" + ",".join(_encode(v) for v in value) + "]"
    raise TypeError(f"cannot encode {type(value).__name__} in a trace")


def encode_record(record: TraceRecord) -> str:
    return "{" + ",".join(f"{json.dumps(name)}:{_encode(value)}" for name, value in record.to_dict().items()) + "}"


def dumps_trace(records: Iterable[TraceRecord]) -> str:
    return "".join(encode_record(r) + "\n" for r in records)


def loads_trace(text: str) -> List[TraceRecord]:
    records = []
    for number, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            records.append(TraceRecord.from_dict(json.loads(line)))
        except (ValueError, KeyError, TypeError) as e:
            raise ValueError(f"trace line {number}: {e}")
    return records


def read_trace(path: Path) -> List[TraceRecord]:
    return loads_trace(Path(path).read_text(encoding="utf-8"))


def trace_hash(records: Iterable[TraceRecord]) -> str:
    return hashlib.sha256(dumps_trace(records).encode("utf-8")).hexdigest()


def timings_frame(records: Iterable[TraceRecord]) -> pd.DataFrame:
    return pd.DataFrame(
        [(r.step, r.layer, r.layout, r.wall_time) for r in records],
        columns=["step", "layer", "layout", "wall_time"],
    )
