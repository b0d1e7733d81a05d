"""Forward semantics of the op set against independent oracles."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from amel import ops
from amel.autodiff import Tensor
from amel.errors import ShapeMismatchError, UninitializedStatsError


def t64(a, requires_grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=requires_grad)


def conv2d_naive(x, w, b, padding=0, stride=1):
    """Quintuple-loop cross-correlation oracle."""
    B, Cin, H, W = x.shape
    Cout, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    out = np.zeros((B, Cout, Ho, Wo), dtype=x.dtype)
    for n in range(B):
        for co in range(Cout):
            for ci in range(Cin):
                for i in range(Ho):
                    for j in range(Wo):
                        patch = xp[n, ci, i * stride : i * stride + kh, j * stride : j * stride + kw]
                        out[n, co, i, j] += (patch * w[co, ci]).sum()
            out[n, co] += b[co]
    return out


class TestConv2d:
    def test_identity_1x1_kernel(self, rng):
        x = t64(rng.normal(size=(2, 3, 5, 5)))
        w = t64(np.eye(3).reshape(3, 3, 1, 1))
        b = t64(np.zeros(3))
        out = ops.conv2d(x, w, b)
        np.testing.assert_array_equal(out.data, x.data)

    def test_zero_kernel_and_bias(self, rng):
        x = t64(rng.normal(size=(1, 2, 4, 4)))
        out = ops.conv2d(x, t64(np.zeros((3, 2, 3, 3))), t64(np.zeros(3)), padding=1)
        np.testing.assert_array_equal(out.data, np.zeros((1, 3, 4, 4)))

    def test_center_element_all_ones_kernel(self):
        x = t64(np.arange(1.0, 10.0).reshape(1, 1, 3, 3))
        w = t64(np.ones((1, 1, 3, 3)))
        out = ops.conv2d(x, w, t64(np.zeros(1)), padding=1)
        oracle = conv2d_naive(x.data, w.data, np.zeros(1), padding=1)
        np.testing.assert_array_equal(out.data, oracle)
        assert out.data[0, 0, 1, 1] == 45.0

    def test_matches_naive_oracle_bit_exact_small_ints(self, rng):
        # Integer-valued inputs bounded by 8 keep every partial sum exact in
        # float64, so any summation order gives identical results.
        for _ in range(5):
            x = rng.integers(-8, 9, size=(2, 4, 8, 8)).astype(np.float64)
            w = rng.integers(-4, 5, size=(3, 4, 3, 3)).astype(np.float64)
            b = rng.integers(-4, 5, size=3).astype(np.float64)
            out = ops.conv2d(t64(x), t64(w), t64(b), padding=1)
            np.testing.assert_array_equal(out.data, conv2d_naive(x, w, b, padding=1))

    def test_strided_matches_oracle(self, rng):
        x = rng.integers(-8, 9, size=(2, 3, 8, 8)).astype(np.float64)
        w = rng.integers(-4, 5, size=(4, 3, 3, 3)).astype(np.float64)
        b = rng.integers(-4, 5, size=4).astype(np.float64)
        out = ops.conv2d(t64(x), t64(w), t64(b), padding=1, stride=2)
        assert out.shape == (2, 4, 4, 4)
        np.testing.assert_array_equal(out.data, conv2d_naive(x, w, b, padding=1, stride=2))

    def test_channel_mismatch_names_dimension(self, rng):
        x = t64(rng.normal(size=(1, 3, 4, 4)))
        with pytest.raises(ShapeMismatchError, match="kernel input channels"):
            ops.conv2d(x, t64(np.zeros((2, 4, 1, 1))), t64(np.zeros(2)))

    def test_even_kernel_rejected(self, rng):
        x = t64(rng.normal(size=(1, 3, 4, 4)))
        with pytest.raises(ShapeMismatchError, match="odd"):
            ops.conv2d(x, t64(np.zeros((2, 3, 2, 2))), t64(np.zeros(2)))


class TestInstanceNorm:
    def test_constant_slice_maps_to_zero(self):
        x = t64(np.full((2, 3, 4, 4), 5.0))
        out = ops.instance_norm(x, epsilon=1e-5)
        np.testing.assert_array_equal(out.data, np.zeros_like(x.data))

    def test_two_value_slice_closed_form(self):
        x = t64(np.array([1.0, 3.0]).reshape(1, 1, 1, 2))
        out = ops.instance_norm(x, epsilon=1e-12)
        np.testing.assert_allclose(out.data.ravel(), [-1.0, 1.0], atol=1e-5)

    def test_affine_shift_invariance(self, rng):
        x = rng.normal(size=(2, 3, 6, 6))
        a, b = 2.5, -1.3
        y1 = ops.instance_norm(t64(x), epsilon=1e-10).data
        y2 = ops.instance_norm(t64(a * x + b), epsilon=1e-10).data
        np.testing.assert_allclose(y1, y2, atol=1e-6)


class TestBatchNorm:
    def test_constant_input_train_gives_zero(self):
        st_ = ops.BatchNormState(3, dtype=np.float64)
        x = t64(np.full((4, 3, 2, 2), 7.0))
        out = ops.batch_norm(x, t64(np.ones(3)), t64(np.zeros(3)), st_, "train")
        np.testing.assert_array_equal(out.data, np.zeros_like(x.data))

    def test_standardized_input_affine(self, rng):
        x = rng.normal(size=(64, 2, 4, 4))
        x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
        st_ = ops.BatchNormState(2, dtype=np.float64)
        out = ops.batch_norm(t64(x), t64(2 * np.ones(2)), t64(np.ones(2)), st_, "train")
        np.testing.assert_allclose(out.data, 2 * x + 1, atol=1e-4)

    def test_two_sample_closed_form(self):
        x = t64(np.array([0.0, 2.0]).reshape(2, 1, 1, 1))
        st_ = ops.BatchNormState(1, epsilon=1e-12, dtype=np.float64)
        out = ops.batch_norm(x, t64(np.ones(1)), t64(np.zeros(1)), st_, "train")
        np.testing.assert_allclose(out.data.ravel(), [-1.0, 1.0], atol=1e-5)

    def test_eval_before_train_errors(self):
        st_ = ops.BatchNormState(1)
        with pytest.raises(UninitializedStatsError, match="uninitialized running statistics"):
            ops.batch_norm(
                t64(np.zeros((1, 1, 2, 2))), t64(np.ones(1)), t64(np.zeros(1)), st_, "eval"
            )

    def test_eval_after_seed_works(self):
        st_ = ops.BatchNormState(1, dtype=np.float64)
        st_.seed(np.zeros(1), np.ones(1))
        x = t64(np.ones((1, 1, 2, 2)))
        out = ops.batch_norm(x, t64(np.ones(1)), t64(np.zeros(1)), st_, "eval")
        np.testing.assert_allclose(out.data, x.data, atol=1e-4)

    def test_running_stats_update_and_eval_reads_only(self, rng):
        st_ = ops.BatchNormState(2, momentum=0.9, dtype=np.float64)
        x = rng.normal(size=(8, 2, 3, 3))
        ops.batch_norm(t64(x), t64(np.ones(2)), t64(np.zeros(2)), st_, "train")
        np.testing.assert_allclose(st_.running_mean, x.mean(axis=(0, 2, 3)))
        assert st_.updates_seen == 1
        snap = st_.snapshot()
        ops.batch_norm(t64(x), t64(np.ones(2)), t64(np.zeros(2)), st_, "eval")
        np.testing.assert_array_equal(st_.running_mean, snap[0])
        assert st_.updates_seen == 1

    def test_train_needs_two_elements(self):
        st_ = ops.BatchNormState(1)
        with pytest.raises(ShapeMismatchError, match="elements per channel"):
            ops.batch_norm(
                t64(np.zeros((1, 1, 1, 1))), t64(np.ones(1)), t64(np.zeros(1)), st_, "train"
            )


class TestMaskedSoftmax:
    def test_equal_scores_uniform(self):
        scores = t64(np.zeros((1, 3)))
        out = ops.masked_softmax(scores, np.ones((1, 3), dtype=bool))
        np.testing.assert_allclose(out.data, np.full((1, 3), 1.0 / 3.0), atol=1e-12)

    def test_spiked_scores_scalar_oracle(self):
        s = np.array([[10.0, 0.0, 0.0]])
        out = ops.masked_softmax(t64(s), np.ones((1, 3), dtype=bool))
        e = np.exp(s[0] - s[0].max())
        np.testing.assert_allclose(out.data[0], e / e.sum(), atol=1e-12)
        np.testing.assert_allclose(out.data[0], [0.99991, 4.54e-5, 4.54e-5], rtol=1e-3)

    def test_masked_positions_exactly_zero(self, rng):
        s = rng.normal(size=(3, 6))
        mask = rng.random((3, 6)) > 0.4
        mask[:, 0] = True
        out = ops.masked_softmax(t64(s), mask)
        assert (out.data[~mask] == 0.0).all()
        np.testing.assert_allclose(out.data.sum(axis=1), np.ones(3), atol=1e-6)

    def test_all_masked_row_errors(self):
        with pytest.raises(ValueError, match="at least one unmasked"):
            ops.masked_softmax(t64(np.zeros((2, 3))), np.zeros((2, 3), dtype=bool))

    @settings(max_examples=40, deadline=None)
    @given(
        b=st.integers(1, 4),
        k=st.integers(1, 4),
        seed=st.integers(0, 10_000),
    )
    def test_row_stochastic_on_unmasked_support(self, b, k, seed):
        r = np.random.default_rng(seed)
        scores = r.normal(scale=4.0, size=(b, k * b))
        mask = ops.expert_mask(b, k)
        out = ops.masked_softmax(t64(scores), mask)
        assert (out.data[~mask] == 0.0).all()
        assert (out.data >= 0.0).all()
        np.testing.assert_allclose(out.data.sum(axis=1), np.ones(b), atol=1e-6)


class TestStructuralOps:
    def test_relu(self):
        out = ops.relu(t64([-1.0, 0.0, 2.0]))
        np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])

    def test_global_avg_pool_constant(self):
        x = t64(np.full((2, 3, 4, 4), 2.5))
        out = ops.global_avg_pool(x)
        np.testing.assert_allclose(out.data, np.full((2, 3), 2.5), atol=1e-12)

    def test_concat_batch_order_and_roundtrip(self, rng):
        a = t64(rng.normal(size=(2, 1, 2, 2)))
        b = t64(rng.normal(size=(2, 1, 2, 2)))
        out = ops.concat_batch([a, b])
        assert out.shape == (4, 1, 2, 2)
        # row k*B + i is input k's row i
        np.testing.assert_array_equal(out.data[0], a.data[0])
        np.testing.assert_array_equal(out.data[1], a.data[1])
        np.testing.assert_array_equal(out.data[2], b.data[0])
        np.testing.assert_array_equal(out.data[3], b.data[1])
        np.testing.assert_array_equal(out.data[0:2], a.data)
        np.testing.assert_array_equal(out.data[2:4], b.data)

    @settings(max_examples=25, deadline=None)
    @given(k=st.integers(1, 4), b=st.integers(1, 3), seed=st.integers(0, 99999))
    def test_concat_slice_roundtrip_bit_exact(self, k, b, seed):
        r = np.random.default_rng(seed)
        tensors = [t64(r.normal(size=(b, 2, 3, 3))) for _ in range(k)]
        out = ops.concat_batch(tensors)
        for i, t in enumerate(tensors):
            np.testing.assert_array_equal(out.data[i * b : (i + 1) * b], t.data)

    def test_upsample_nearest(self):
        x = t64(np.arange(4.0).reshape(1, 1, 2, 2))
        out = ops.upsample_nearest(x, 2)
        expected = np.array(
            [[0.0, 0.0, 1.0, 1.0], [0.0, 0.0, 1.0, 1.0], [2.0, 2.0, 3.0, 3.0], [2.0, 2.0, 3.0, 3.0]]
        )
        np.testing.assert_array_equal(out.data[0, 0], expected)

    def test_linear(self, rng):
        x, w, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2)), rng.normal(size=2)
        out = ops.linear(t64(x), t64(w), t64(b))
        np.testing.assert_allclose(out.data, x @ w + b, atol=1e-12)

    def test_take_expert_weights(self):
        w = np.arange(12.0).reshape(2, 6)  # B=2, K=3: row i reads columns k*B+i
        out = ops.take_expert_weights(t64(w), 3)
        np.testing.assert_array_equal(out.data, [[0.0, 2.0, 4.0], [7.0, 9.0, 11.0]])

    def test_weighted_expert_sum(self, rng):
        feats = [t64(rng.normal(size=(2, 1, 2, 2))) for _ in range(3)]
        w = rng.random((2, 3))
        out = ops.weighted_expert_sum(t64(w), feats)
        expected = sum(w[:, k, None, None, None] * feats[k].data for k in range(3))
        np.testing.assert_allclose(out.data, expected, atol=1e-12)

    def test_log_softmax_matches_manual(self, rng):
        x = rng.normal(size=(4, 2)) * 5
        out = ops.log_softmax(t64(x))
        manual = x - np.log(np.exp(x).sum(axis=1, keepdims=True))
        np.testing.assert_allclose(out.data, manual, atol=1e-10)
