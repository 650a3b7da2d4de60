import math
import time
from dataclasses import replace

import numpy as np
import pytest

from src.attention import VideoLatent
from src.config_schema import Config, EnhanceConfig, Layout, Strategy
from src.errors import ParameterError
from src.pipeline import (NoiseSchedule, RunSpec, ToyDenoiser, denoise_step, forward_diffuse,
                          forward_diffuse_closed_form, run, run_many)
from src.tensor_core import Rng, rms_norm
from src.trace import TraceSink, dumps_trace, trace_hash


class TestNoiseSchedule:
    def test_linear_ramp_hits_endpoints(self):
        schedule = NoiseSchedule.linear(5, start=1.0, end=0.2)
        assert schedule.alpha_bar(1) == pytest.approx(1.0)
        assert schedule.alpha_bar(5) == pytest.approx(0.2)
        assert np.all(np.diff(schedule.alpha_bars) <= 0)

    def test_rejects_alpha_above_one(self):
        with pytest.raises(ParameterError):
            NoiseSchedule([0.5, 1.5])

    def test_step_out_of_range(self):
        with pytest.raises(ParameterError):
            NoiseSchedule.constant(3, 0.9).alpha(4)

    def test_alphas_are_copied(self):
        source = np.array([0.9, 0.8])
        schedule = NoiseSchedule(source)
        source[0] = 0.1
        assert schedule.alpha(1) == 0.9


class TestForwardDiffuse:
    def test_unit_alpha_keeps_x0(self):
        x0 = VideoLatent.gaussian(Rng(1), 1, 2, 3, 2, 2)
        xt = forward_diffuse(x0, NoiseSchedule.constant(4, 1.0), 4, Rng(2))
        np.testing.assert_array_equal(xt.data, x0.data)

    def test_zero_alpha_is_pure_noise(self):
        x0 = VideoLatent.gaussian(Rng(1), 1, 2, 3, 2, 2)
        xt = forward_diffuse(x0, NoiseSchedule.from_alphas([0.0]), 1, Rng(2))
        np.testing.assert_array_equal(xt.data, Rng(2).gaussian(x0.shape))

    def test_closed_form_variance_from_zero(self):
        x0 = VideoLatent(np.zeros((100_000, 1, 1, 1, 1)))
        schedule = NoiseSchedule.from_alphas([0.5, 0.5])
        sample = forward_diffuse_closed_form(x0, schedule, 2, Rng(8)).data
        assert abs(sample.var() - 0.75) < 0.05 * 0.75

    def test_iterated_matches_closed_form_statistics(self):
        samples = 100_000
        x0 = VideoLatent(np.ones((samples, 1, 1, 1, 1)))
        schedule = NoiseSchedule.from_alphas([0.5, 0.5])
        iterated = forward_diffuse(x0, schedule, 2, Rng(3)).data
        closed = forward_diffuse_closed_form(x0, schedule, 2, Rng(4)).data
        for sample in (iterated, closed):
            assert abs(sample.mean() - 0.5) < 0.02
            assert abs(sample.var() - 0.75) < 0.05
        assert abs(iterated.mean() - closed.mean()) < 0.02
        assert abs(iterated.var() - closed.var()) < 0.05


class TestToyDenoiser:
    def test_build_is_deterministic(self):
        a = ToyDenoiser.build(5, 2, 8, 4, 2)
        b = ToyDenoiser.build(5, 2, 8, 4, 2)
        np.testing.assert_array_equal(a.blocks[1].attention.w_q, b.blocks[1].attention.w_q)
        np.testing.assert_array_equal(a.out_proj, b.out_proj)

    def test_hybrid_alternates_layouts(self):
        model = ToyDenoiser.build(0, 4, 8, 4, 2, layout=Layout.HYBRID)
        assert [b.layout for b in model.blocks] == [Layout.TEMPORAL, Layout.FULL_3D, Layout.TEMPORAL, Layout.FULL_3D]

    def test_channel_mismatch(self):
        model = ToyDenoiser.build(0, 1, 8, 4, 2)
        with pytest.raises(ParameterError):
            model.predict(VideoLatent(np.zeros((1, 2, 4, 1, 1))), 1, EnhanceConfig(), TraceSink())

    def test_single_frame_enhancement_is_noop(self):
        model = ToyDenoiser.build(2, 1, 8, 4, 2)
        x = VideoLatent.gaussian(Rng(3), 1, 1, 8, 2, 2)
        base = denoise_step(x, 3, model, EnhanceConfig(strategy=Strategy.BASELINE), TraceSink(), 3)
        trace = TraceSink()
        enhanced = denoise_step(x, 3, model, EnhanceConfig(strategy=Strategy.ENHANCE_BLOCK, tau=4.0), trace, 3)
        assert trace.records[0].cfi == 0.0 and trace.records[0].gain == 1.0
        assert enhanced.data.tobytes() == base.data.tobytes()

    def test_denoise_step_rejects_t_zero(self):
        model = ToyDenoiser.build(2, 1, 8, 4, 2)
        with pytest.raises(ParameterError):
            denoise_step(VideoLatent.gaussian(Rng(3), 1, 2, 8, 1, 1), 0, model, EnhanceConfig(), TraceSink(), 3)


class TestReplayOracle:
    def test_enhanced_output_replays_from_traced_map(self):
        spec = RunSpec(seed=11, frames=4, channels=8, height=2, width=2, steps=1, depth=2, d_k=4, heads=2,
                       enhance=EnhanceConfig(strategy=Strategy.ENHANCE_BLOCK, tau=2.0, layers=[1]),
                       full_maps=True)
        model = spec.build_model()
        result = run(spec, model=model)
        record = [r for r in result.trace.records if r.layer == 1][0]
        params = model.blocks[1].attention
        hidden = record.tensors["hidden"]
        weights = record.full_attention

        groups, frames, _ = hidden.shape
        v = (rms_norm(hidden) @ params.w_v).reshape(groups, frames, params.heads, params.d_k).transpose(0, 2, 1, 3)
        context = np.einsum('ghij,ghjd->ghid', weights, v).transpose(0, 2, 1, 3).reshape(groups, frames, -1)
        attention_output = context @ params.w_o

        off = weights[..., ~np.eye(frames, dtype=bool)].mean()
        gain = max((2.0 + frames) * off, 1.0)
        assert record.enhanced and record.gain == pytest.approx(gain, abs=1e-12)
        np.testing.assert_allclose(record.tensors["output"], gain * attention_output + hidden, atol=1e-10, rtol=0)


class TestRun:
    def test_same_spec_same_hashes(self, small_spec):
        first, second = run(small_spec), run(small_spec)
        assert first.latent.data.tobytes() == second.latent.data.tobytes()
        assert trace_hash(first.trace.records) == trace_hash(second.trace.records)

    def test_trace_covers_every_step_and_layer(self, small_spec):
        records = run(small_spec).trace.records
        assert [r.key for r in records] == [(s, l) for s in range(3) for l in range(2)]

    def test_empty_mask_equals_baseline(self, small_spec):
        masked = run(small_spec.with_enhance(layers=[]))
        baseline = run(small_spec.with_enhance(strategy=Strategy.BASELINE))
        assert masked.latent.data.tobytes() == baseline.latent.data.tobytes()

    def test_tau_minus_frames_equals_baseline(self, small_spec):
        clipped = run(small_spec.with_enhance(tau=-float(small_spec.frames)))
        baseline = run(small_spec.with_enhance(strategy=Strategy.BASELINE))
        assert all(r.gain == 1.0 for r in clipped.trace.records)
        assert clipped.latent.data.tobytes() == baseline.latent.data.tobytes()

    def test_enhancement_changes_the_latent(self, small_spec):
        enhanced = run(small_spec.with_enhance(tau=4.0))
        baseline = run(small_spec.with_enhance(strategy=Strategy.BASELINE))
        assert not np.array_equal(enhanced.latent.data, baseline.latent.data)

    def test_unmasked_layers_before_first_enhanced_layer_are_unchanged(self, small_spec):
        masked = run(small_spec.with_enhance(layers=[1], tau=4.0)).trace.records
        baseline = run(small_spec.with_enhance(strategy=Strategy.BASELINE)).trace.records
        first_masked, first_base = masked[0], baseline[0]
        assert first_masked.key == (0, 0)
        assert first_masked.cfi == first_base.cfi
        np.testing.assert_array_equal(first_masked.attention_snapshot, first_base.attention_snapshot)
        assert masked[1].enhanced and masked[1].cfi == baseline[1].cfi

    @pytest.mark.parametrize("layout", [Layout.FULL_3D, Layout.HYBRID])
    def test_three_d_layouts_record_subview(self, small_spec, layout):
        records = run(replace(small_spec, layout=layout)).trace.records
        subviews = [r for r in records if r.layout == "full_3d"]
        assert subviews and all(r.subview_projection == "block_qk_recomputed" for r in subviews)
        assert all(r.attention_snapshot.shape == (4, 4) for r in records)

    def test_temp_scaling_records_default_scale_reference(self, small_spec):
        records = run(small_spec.with_enhance(strategy=Strategy.TEMP_ATTENTION_SCALING, tau=2.0)).trace.records
        assert all(not np.array_equal(r.attention_snapshot, r.reference_snapshot) for r in records)

    def test_snapshots_can_be_disabled(self, small_spec):
        records = run(replace(small_spec, snapshots=False)).trace.records
        assert all(r.attention_snapshot is None for r in records)
        assert '"attention_snapshot":null' in dumps_trace(records)

    def test_run_many_matches_sequential(self, small_spec):
        specs = [small_spec.with_enhance(tau=tau) for tau in (0.0, 2.0, 4.0)]
        parallel = run_many(specs, max_workers=3)
        sequential = [run(spec) for spec in specs]
        for a, b in zip(parallel, sequential):
            assert a.latent.data.tobytes() == b.latent.data.tobytes()

    def test_toy_default_runs_quickly(self):
        start = time.perf_counter()
        result = run(RunSpec())
        assert time.perf_counter() - start < 10.0
        assert len(result.trace) == 10 * 4


class TestRunSpec:
    def test_from_config_round_trip(self):
        config = Config(**{'run': {'seed': 4, 'steps': 3}, 'enhance': {'tau': 2.5}})
        spec = RunSpec.from_config(config)
        assert spec.seed == 4 and spec.enhance.tau == 2.5
        assert RunSpec.from_config(spec.to_config()) == spec

    def test_schedule_length_must_match(self):
        with pytest.raises(ParameterError):
            RunSpec(steps=3, schedule=NoiseSchedule.constant(2, 0.9))

    def test_mask_beyond_depth(self):
        with pytest.raises(ParameterError):
            RunSpec(depth=2, enhance=EnhanceConfig(layers=[3]))

    def test_initial_latent_is_seeded(self):
        assert math.isclose(RunSpec(seed=1).initial_latent().data.sum(), RunSpec(seed=1).initial_latent().data.sum())
        assert not np.array_equal(RunSpec(seed=1).initial_latent().data, RunSpec(seed=2).initial_latent().data)
