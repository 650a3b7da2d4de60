import numpy as np
import pytest

from src.errors import TraceValidationError
from src.invariants import (CfiRangeRule, ClipFloorRule, NonNegativeNormRule, RowStochasticRule, TraceValidator,
                            default_rules)
from src.pipeline import run
from src.trace import TraceRecord


def record(**fields):
    values = dict(step=0, layer=0, layout="temporal", strategy="enhance_block", enhanced=True, frames=2,
                  cfi=0.25, cfi_enhanced=1.25, cfi_enhanced_groupwise=1.25, gain=1.25,
                  norm_attention_output=1.0, norm_hidden=2.0,
                  attention_snapshot=np.array([[0.75, 0.25], [0.25, 0.75]]))
    values.update(fields)
    return TraceRecord(**values)


class TestTraceRules:
    def test_row_stochastic(self):
        rule = RowStochasticRule()
        assert rule.check([record()]).success is True
        result = rule.check([record(attention_snapshot=np.array([[0.5, 0.6], [0.5, 0.5]]))])
        assert result.success is False
        assert "not row-stochastic" in result.message

    def test_missing_snapshot_is_skipped(self):
        assert RowStochasticRule().check([record(attention_snapshot=None)]).success is True

    def test_negative_norm(self):
        result = NonNegativeNormRule().check([record(norm_hidden=-1.0)])
        assert result.success is False
        assert "negative norms" in result.message

    def test_cfi_range(self):
        assert CfiRangeRule().check([record(cfi=1.5)]).success is False

    def test_clip_floor_only_when_clipping(self):
        low = record(cfi_enhanced=0.5, cfi_enhanced_groupwise=0.5)
        assert ClipFloorRule(clip_enabled=True).check([low]).success is False
        assert ClipFloorRule(clip_enabled=False).check([low]).success is True


class TestTraceValidator:
    def test_validator_aggregation(self):
        bad = record(cfi=2.0, norm_attention_output=-1.0)
        validator = TraceValidator(default_rules(clip_enabled=True))
        with pytest.raises(TraceValidationError) as excinfo:
            validator.validate([bad])
        assert "negative norms" in str(excinfo.value)
        assert "outside [0, 1]" in str(excinfo.value)
        assert len(excinfo.value.errors) == 2

    def test_real_run_passes(self, small_spec):
        records = run(small_spec).trace.records
        assert TraceValidator(default_rules(small_spec.enhance.clip_enabled)).validate(records) is True
