from abc import ABC, abstractmethod
from typing import List, Optional, Sequence

import numpy as np

from src.errors import TraceValidationError
from src.trace import TraceRecord

SNAPSHOT_ROW_TOLERANCE = 1e-6


class ValidationResult:
    def __init__(self, success: bool, message: Optional[str] = None):
        self.success = success
        self.message = message


class TraceRule(ABC):
    @abstractmethod
    def check(self, records: Sequence[TraceRecord]) -> ValidationResult:
        pass


class RowStochasticRule(TraceRule):
    def __init__(self, tolerance: float = SNAPSHOT_ROW_TOLERANCE):
        self.tolerance = tolerance

    def check(self, records: Sequence[TraceRecord]) -> ValidationResult:
        bad = []
        for record in records:
            for name in ("attention_snapshot", "reference_snapshot"):
                snapshot = getattr(record, name)
                if snapshot is None:
                    continue
                error = float(np.max(np.abs(snapshot.sum(axis=-1) - 1.0)))
                if error > self.tolerance:
                    bad.append(f"{record.key} {name} ({error:.2e})")
        if bad:
            return ValidationResult(False, f"{len(bad)} snapshots are not row-stochastic: {', '.join(bad[:5])}")
        return ValidationResult(True)


class NonNegativeNormRule(TraceRule):
    def check(self, records: Sequence[TraceRecord]) -> ValidationResult:
        bad = [r.key for r in records if r.norm_attention_output < 0 or r.norm_hidden < 0]
        if bad:
            return ValidationResult(False, f"{len(bad)} records have negative norms: {bad[:5]}")
        return ValidationResult(True)


class CfiRangeRule(TraceRule):
    def check(self, records: Sequence[TraceRecord]) -> ValidationResult:
        bad = [r.key for r in records if not 0.0 <= r.cfi <= 1.0]
        if bad:
            return ValidationResult(False, f"{len(bad)} records have CFI outside [0, 1]: {bad[:5]}")
        return ValidationResult(True)


class ClipFloorRule(TraceRule):
    def __init__(self, clip_enabled: bool):
        self.clip_enabled = clip_enabled

    def check(self, records: Sequence[TraceRecord]) -> ValidationResult:
        if not self.clip_enabled:
            return ValidationResult(True)
        bad = [r.key for r in records if r.cfi_enhanced < 1.0 or r.cfi_enhanced_groupwise < 1.0]
        if bad:
            return ValidationResult(False, f"{len(bad)} records have clipped CFI_enhanced below 1: {bad[:5]}")
        return ValidationResult(True)


def default_rules(clip_enabled: bool) -> List[TraceRule]:
    return [RowStochasticRule(), NonNegativeNormRule(), CfiRangeRule(), ClipFloorRule(clip_enabled)]


class TraceValidator:
    def __init__(self, rules: List[TraceRule]):
        self.rules = rules

    def validate(self, records: Sequence[TraceRecord]) -> bool:
        """
        Run all rules on the trace.
        Raises TraceValidationError if any rule fails.
        Returns True if all pass.
        """
        errors = []
        for rule in self.rules:
            result = rule.check(records)
            if not result.success:
                errors.append(result.message)

        if errors:
            raise TraceValidationError(errors)

        return True
