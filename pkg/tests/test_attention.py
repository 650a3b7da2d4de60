import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from src.attention import (AttentionMap, AttentionParams, VideoLatent, frame_axis_to_tokens, from_frame_axis,
                           full_attention_3d, temporal_attention, temporal_subview_3d, to_frame_axis,
                           tokens_to_frame_axis)
from src.errors import DimensionError
from src.tensor_core import Rng


def loop_attention_map(x, params, scale):
    """Q, K, logits and softmax by explicit loops; returns (G, heads, F, F)."""
    groups, frames, _ = x.shape
    out = np.zeros((groups, params.heads, frames, frames))
    for g in range(groups):
        for h in range(params.heads):
            cols = slice(h * params.d_k, (h + 1) * params.d_k)
            q = x[g] @ params.w_q[:, cols]
            k = x[g] @ params.w_k[:, cols]
            for i in range(frames):
                logits = [sum(q[i, d] * k[j, d] for d in range(params.d_k)) / scale for j in range(frames)]
                top = max(logits)
                exps = [math.exp(v - top) for v in logits]
                total = sum(exps)
                for j in range(frames):
                    out[g, h, i, j] = exps[j] / total
    return out


class TestVideoLatent:
    def test_rejects_wrong_rank(self):
        with pytest.raises(DimensionError):
            VideoLatent(np.zeros((1, 2, 3)))

    def test_rejects_zero_extent(self):
        with pytest.raises(DimensionError):
            VideoLatent(np.zeros((1, 0, 3, 1, 1)))


class TestLayoutBridges:
    def test_unit_spatial_is_relabel(self):
        z = VideoLatent(np.arange(6.0).reshape(1, 2, 3, 1, 1))
        x = to_frame_axis(z)
        assert x.shape == (1, 2, 3)
        np.testing.assert_array_equal(x[0], z.data[0, :, :, 0, 0])

    def test_group_index_is_h_times_w_plus_w(self):
        z = VideoLatent(np.arange(8.0).reshape(1, 2, 1, 2, 2))
        x = to_frame_axis(z)
        assert x.shape == (4, 2, 1)
        np.testing.assert_array_equal(x[3, :, 0], z.data[0, :, 0, 1, 1])

    def test_round_trip(self):
        z = VideoLatent.gaussian(Rng(3), 2, 3, 4, 2, 3)
        back = from_frame_axis(to_frame_axis(z), 2, 2, 3)
        assert back.data.tobytes() == z.data.tobytes()

    def test_token_index_is_f_hw_plus_h_w_plus_w(self):
        z = VideoLatent.gaussian(Rng(8), 1, 3, 2, 2, 2)
        tokens = frame_axis_to_tokens(to_frame_axis(z), 1, 2, 2)
        for f in range(3):
            for h in range(2):
                for w in range(2):
                    np.testing.assert_array_equal(tokens[0, f * 4 + h * 2 + w], z.data[0, f, :, h, w])

    def test_tokens_round_trip(self):
        x = Rng(2).gaussian((8, 3, 5))
        back = tokens_to_frame_axis(frame_axis_to_tokens(x, 2, 2, 2), 3, 2, 2)
        np.testing.assert_array_equal(back, x)

    def test_token_count_mismatch(self):
        with pytest.raises(DimensionError):
            tokens_to_frame_axis(np.zeros((1, 7, 4)), 2, 2, 2)


class TestAttentionParams:
    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            AttentionParams(d_model=4, d_k=2, heads=2, w_q=np.zeros((4, 3)), w_k=np.zeros((4, 4)),
                            w_v=np.zeros((4, 4)), w_o=np.zeros((4, 4)))

    def test_initialize_is_deterministic(self):
        a = AttentionParams.initialize(Rng(1), 8, 4, 2)
        b = AttentionParams.initialize(Rng(1), 8, 4, 2)
        np.testing.assert_array_equal(a.w_o, b.w_o)


class TestAttentionMap:
    def test_rejects_non_stochastic_rows(self):
        with pytest.raises(DimensionError):
            AttentionMap(np.full((1, 1, 2, 2), 0.6))

    def test_mean_map(self):
        weights = np.stack([np.eye(2), np.full((2, 2), 0.5)])[:, None]
        np.testing.assert_allclose(AttentionMap(weights).mean_map(), [[0.75, 0.25], [0.25, 0.75]])


class TestTemporalAttention:
    def test_single_frame(self, small_params):
        x = Rng(6).gaussian((5, 1, 8))
        output, attention = temporal_attention(x, small_params)
        np.testing.assert_array_equal(attention.weights, np.ones((5, 2, 1, 1)))
        np.testing.assert_allclose(output, x @ small_params.w_v @ small_params.w_o, atol=1e-12)

    def test_identical_frames_uniform(self, small_params):
        frame = Rng(6).gaussian((1, 1, 8))
        x = np.repeat(frame, 4, axis=1)
        _, attention = temporal_attention(x, small_params)
        np.testing.assert_allclose(attention.weights, 0.25, atol=1e-12)

    def test_matches_loop_oracle(self, small_params):
        x = Rng(10).gaussian((3, 3, 8))
        _, attention = temporal_attention(x, small_params)
        np.testing.assert_allclose(attention.weights, loop_attention_map(x, small_params, 2.0), atol=1e-10, rtol=0)

    def test_scale_override(self, small_params):
        x = Rng(10).gaussian((2, 3, 8))
        _, attention = temporal_attention(x, small_params, scale_override=5.0)
        np.testing.assert_allclose(attention.weights, loop_attention_map(x, small_params, 5.0), atol=1e-10, rtol=0)

    def test_wrong_width(self, small_params):
        with pytest.raises(DimensionError):
            temporal_attention(np.zeros((2, 3, 5)), small_params)

    def test_spatial_permutation_equivariance(self, small_params):
        x = Rng(12).gaussian((6, 4, 8))
        order = np.array([3, 0, 5, 1, 4, 2])
        _, base = temporal_attention(x, small_params)
        _, shuffled = temporal_attention(x[order], small_params)
        np.testing.assert_allclose(shuffled.weights, base.weights[order], atol=1e-12)


class TestSubview3d:
    def test_single_frame_maps_are_one(self, small_params):
        tokens = Rng(1).gaussian((1, 4, 8))
        attention = temporal_subview_3d(tokens, small_params, frames=1, height=2, width=2)
        np.testing.assert_array_equal(attention.weights, np.ones((4, 2, 1, 1)))

    def test_unit_spatial_equals_temporal(self, small_params):
        tokens = Rng(1).gaussian((1, 3, 8))
        subview = temporal_subview_3d(tokens, small_params, frames=3, height=1, width=1)
        _, temporal = temporal_attention(tokens, small_params)
        np.testing.assert_allclose(subview.weights, temporal.weights, atol=1e-15)

    def test_matches_per_site_slicing(self, small_params):
        frames, height, width = 2, 2, 2
        tokens = Rng(21).gaussian((1, frames * height * width, 8))
        subview = temporal_subview_3d(tokens, small_params, frames, height, width)
        for h in range(height):
            for w in range(width):
                site = tokens[:, [f * height * width + h * width + w for f in range(frames)], :]
                expected = loop_attention_map(site, small_params, 2.0)
                np.testing.assert_allclose(subview.weights[h * width + w], expected[0], atol=1e-10, rtol=0)

    def test_full_attention_is_token_square(self, small_params):
        tokens = Rng(4).gaussian((2, 12, 8))
        output, attention = full_attention_3d(tokens, small_params)
        assert output.shape == (2, 12, 8)
        assert attention.weights.shape == (2, 2, 12, 12)


class TestRowStochasticity:
    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2 ** 32), st.integers(1, 6), st.sampled_from([1e-3, 1.0, 30.0, 1e3]))
    def test_rows_sum_to_one_at_any_logit_scale(self, seed, frames, magnitude):
        rng = Rng(seed)
        params = AttentionParams.initialize(rng, 8, 4, 2)
        x = rng.gaussian((3, frames, 8)) * magnitude
        _, attention = temporal_attention(x, params)
        np.testing.assert_allclose(attention.weights.sum(axis=-1), 1.0, atol=1e-9)
        assert attention.weights.min() >= 0.0
