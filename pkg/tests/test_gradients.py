"""Gradient correctness: per-op finite-difference checks, tape invariants,
and a corrupted-rule negative control."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from amel import ops
from amel.autodiff import Tape, Tensor, apply_op, recording
from amel.errors import GradientError
from amel.gradcheck import finite_difference_check

pytestmark = pytest.mark.usefixtures("f64")


def param(rng, shape, scale=1.0):
    return Tensor(rng.normal(scale=scale, size=shape), requires_grad=True, dtype=np.float64)


class TestTape:
    def test_sum_gradient_is_ones(self, rng):
        x = param(rng, (3, 4))
        tape = Tape()
        with recording(tape):
            loss = ops.sum_all(x)
        tape.backward(loss)
        np.testing.assert_array_equal(tape.grad(x), np.ones((3, 4)))

    def test_sum_of_squares_gradient(self):
        x = Tensor(np.array([1.0, -2.0]), requires_grad=True, dtype=np.float64)
        tape = Tape()
        with recording(tape):
            loss = ops.sum_all(ops.mul(x, x))
        tape.backward(loss)
        np.testing.assert_allclose(tape.grad(x), [2.0, -4.0], atol=1e-12)

    def test_fanout_accumulates_additively(self, rng):
        x = param(rng, (4,))
        tape = Tape()
        with recording(tape):
            y = ops.add(x, x)  # y = 2x, both slots feed from x
            loss = ops.sum_all(y)
        tape.backward(loss)
        np.testing.assert_array_equal(tape.grad(x), 2 * np.ones(4))

    def test_non_scalar_loss_rejected(self, rng):
        x = param(rng, (3,))
        tape = Tape()
        with recording(tape):
            y = ops.mul(x, x)
        with pytest.raises(GradientError, match="scalar"):
            tape.backward(y)

    def test_off_tape_loss_rejected(self, rng):
        x = param(rng, (3,))
        tape = Tape()
        with recording(tape):
            _ = ops.sum_all(x)
        other = Tensor(np.array(1.0), requires_grad=True)
        with pytest.raises(GradientError, match="not recorded"):
            tape.backward(other)

    def test_no_grad_tensor_never_receives_gradient(self, rng):
        x = param(rng, (3,))
        c = Tensor(rng.normal(size=3), requires_grad=False, dtype=np.float64)
        tape = Tape()
        with recording(tape):
            loss = ops.sum_all(ops.mul(x, c))
        tape.backward(loss)
        assert tape.grad(c) is None
        np.testing.assert_array_equal(tape.grad(x), c.data)

    def test_gradient_shape_matches_value_shape(self, rng):
        x = param(rng, (2, 3, 4, 4))
        tape = Tape()
        with recording(tape):
            loss = ops.sum_all(ops.global_avg_pool(ops.relu(x)))
        tape.backward(loss)
        assert tape.grad(x).shape == x.shape

    def test_determinism_bit_identical(self, rng):
        x_data = rng.normal(size=(2, 3, 4, 4))
        w_data = rng.normal(size=(2, 3, 3, 3))
        grads = []
        for _ in range(2):
            x = Tensor(x_data.copy(), requires_grad=True, dtype=np.float64)
            w = Tensor(w_data.copy(), requires_grad=True, dtype=np.float64)
            b = Tensor(np.zeros(2), requires_grad=True, dtype=np.float64)
            tape = Tape()
            with recording(tape):
                loss = ops.sum_all(ops.relu(ops.conv2d(x, w, b, padding=1)))
            tape.backward(loss)
            grads.append((tape.grad(x).copy(), tape.grad(w).copy(), tape.grad(b).copy()))
        for a, b_ in zip(*grads):
            np.testing.assert_array_equal(a, b_)

    def test_nested_tapes_rejected(self):
        with recording(Tape()):
            with pytest.raises(GradientError, match="already active"):
                with recording(Tape()):
                    pass


class TestFiniteDifferenceUtility:
    def test_quadratic_scalar(self):
        w = Tensor(np.array(3.0), requires_grad=True, dtype=np.float64)
        err = finite_difference_check(lambda: ops.mul(w, w), [w])
        assert err < 1e-8

    def test_nonfinite_loss_errors(self):
        w = Tensor(np.array(1e300), requires_grad=True, dtype=np.float64)
        with np.errstate(over="ignore"):
            with pytest.raises(GradientError, match="not finite"):
                finite_difference_check(lambda: ops.mul(ops.mul(w, w), ops.mul(w, w)), [w])

    def test_bad_step_rejected(self):
        w = Tensor(np.array(1.0), requires_grad=True, dtype=np.float64)
        with pytest.raises(ValueError, match="step"):
            finite_difference_check(lambda: ops.mul(w, w), [w], step=0.0)

    def test_corrupted_backward_rule_is_detected(self, rng):
        # Negative control: an op whose backward rule is off by a factor must
        # push the relative error well past the pass threshold.
        x = param(rng, (4,))

        def bad_square(t):
            d = t.data
            return apply_op(d * d, (t,), lambda g: (g * d,))  # missing factor 2

        err = finite_difference_check(lambda: ops.sum_all(bad_square(x)), [x])
        assert err > 1e-2


def _single_op_cases(rng):
    x4 = lambda: param(rng, (2, 3, 4, 4))
    cases = {
        "add": lambda: (lambda a=x4(), b=x4(): (lambda: ops.sum_all(ops.mul(ops.add(a, b), ops.add(a, b))), [a, b]))(),
        "sub": lambda: (lambda a=x4(), b=x4(): (lambda: ops.sum_all(ops.mul(ops.sub(a, b), a)), [a, b]))(),
        "mul": lambda: (lambda a=x4(), b=x4(): (lambda: ops.sum_all(ops.mul(a, b)), [a, b]))(),
        "scale": lambda: (lambda a=x4(): (lambda: ops.sum_all(ops.scale(ops.mul(a, a), -1.7)), [a]))(),
        "relu": lambda: (lambda a=x4(): (lambda: ops.sum_all(ops.mul(ops.relu(a), a)), [a]))(),
        "matmul": lambda: (
            lambda a=param(rng, (3, 4)), b=param(rng, (4, 2)): (
                lambda: ops.sum_all(ops.mul(ops.matmul(a, b), ops.matmul(a, b))),
                [a, b],
            )
        )(),
        "matmul_t": lambda: (
            lambda a=param(rng, (3, 4)), b=param(rng, (2, 4)): (
                lambda: ops.sum_all(ops.mul(ops.matmul(a, b, transpose_b=True), ops.matmul(a, b, transpose_b=True))),
                [a, b],
            )
        )(),
        "linear": lambda: (
            lambda x=param(rng, (3, 4)), w=param(rng, (4, 2)), b=param(rng, (2,)): (
                lambda: ops.sum_all(ops.mul(ops.linear(x, w, b), ops.linear(x, w, b))),
                [x, w, b],
            )
        )(),
        "global_avg_pool": lambda: (
            lambda a=x4(): (lambda: ops.sum_all(ops.mul(ops.global_avg_pool(a), ops.global_avg_pool(a))), [a])
        )(),
        "concat_batch": lambda: (
            lambda a=param(rng, (2, 1, 2, 2)), b=param(rng, (2, 1, 2, 2)): (
                lambda: ops.sum_all(ops.mul(ops.concat_batch([a, b]), ops.concat_batch([a, b]))),
                [a, b],
            )
        )(),
        "upsample_nearest": lambda: (
            lambda a=param(rng, (1, 2, 3, 3)): (
                lambda: ops.sum_all(ops.mul(ops.upsample_nearest(a, 2), ops.upsample_nearest(a, 2))),
                [a],
            )
        )(),
        "conv2d": lambda: (
            lambda x=param(rng, (2, 2, 5, 5)), w=param(rng, (3, 2, 3, 3)), b=param(rng, (3,)): (
                lambda: ops.sum_all(ops.mul(ops.conv2d(x, w, b, padding=1), ops.conv2d(x, w, b, padding=1))),
                [x, w, b],
            )
        )(),
        "conv2d_strided": lambda: (
            lambda x=param(rng, (1, 2, 6, 6)), w=param(rng, (2, 2, 3, 3)), b=param(rng, (2,)): (
                lambda: ops.sum_all(ops.conv2d(x, w, b, padding=1, stride=2)),
                [x, w, b],
            )
        )(),
        "instance_norm": lambda: (
            lambda a=x4(): (
                lambda: ops.sum_all(ops.mul(ops.instance_norm(a), param_like_cos(a))),
                [a],
            )
        )(),
        "log_softmax": lambda: (
            lambda a=param(rng, (3, 2), scale=2.0): (
                lambda: ops.sum_all(ops.mul(ops.log_softmax(a), param_like_cos(a))),
                [a],
            )
        )(),
        "masked_softmax": lambda: (
            lambda a=param(rng, (2, 6), scale=2.0): (
                lambda: ops.sum_all(
                    ops.mul(ops.masked_softmax(a, ops.expert_mask(2, 3)), param_like_cos(a))
                ),
                [a],
            )
        )(),
        "take_expert_weights": lambda: (
            lambda a=param(rng, (2, 6)): (
                lambda: ops.sum_all(
                    ops.mul(
                        ops.take_expert_weights(a, 3),
                        Tensor(np.arange(6.0).reshape(2, 3) + 1.0),
                    )
                ),
                [a],
            )
        )(),
        "weighted_expert_sum": lambda: (
            lambda w=param(rng, (2, 3)), f0=param(rng, (2, 1, 2, 2)), f1=param(rng, (2, 1, 2, 2)), f2=param(rng, (2, 1, 2, 2)): (
                lambda: ops.sum_all(
                    ops.mul(
                        ops.weighted_expert_sum(w, [f0, f1, f2]),
                        ops.weighted_expert_sum(w, [f0, f1, f2]),
                    )
                ),
                [w, f0, f1, f2],
            )
        )(),
    }
    return cases


def param_like_cos(t):
    """Fixed non-grad cofactor so gradients of normalized outputs are not
    killed by the sum's invariance to per-slice shifts."""
    flat = np.cos(np.arange(t.data.size, dtype=np.float64)).reshape(t.shape)
    return Tensor(flat)


@pytest.mark.parametrize("name", sorted(_single_op_cases(np.random.default_rng(0)).keys()))
def test_single_op_gradients_fd(name):
    rng = np.random.default_rng(hash(name) % 2**32)
    build = _single_op_cases(rng)[name]
    f, params = build()
    err = finite_difference_check(f, params, step=1e-6)
    assert err < 1e-6, f"{name}: relative fd error {err:.3e}"


def test_batch_norm_train_gradients_fd(rng):
    x = param(rng, (4, 2, 3, 3))
    gamma = Tensor(np.ones(2) + 0.3, requires_grad=True, dtype=np.float64)
    beta = Tensor(np.zeros(2) - 0.1, requires_grad=True, dtype=np.float64)
    state = ops.BatchNormState(2, dtype=np.float64)

    def f():
        snap = state.snapshot()
        try:
            return ops.sum_all(
                ops.mul(ops.batch_norm(x, gamma, beta, state, "train"), param_like_cos(x))
            )
        finally:
            state.restore(snap)

    err = finite_difference_check(f, [x, gamma, beta], step=1e-6)
    assert err < 1e-6


def test_batch_norm_eval_gradients_fd(rng):
    x = param(rng, (2, 2, 3, 3))
    gamma = Tensor(np.ones(2) * 1.2, requires_grad=True, dtype=np.float64)
    beta = Tensor(np.zeros(2) + 0.2, requires_grad=True, dtype=np.float64)
    state = ops.BatchNormState(2, dtype=np.float64)
    state.seed(np.array([0.1, -0.2]), np.array([1.5, 0.7]))
    f = lambda: ops.sum_all(
        ops.mul(ops.batch_norm(x, gamma, beta, state, "eval"), param_like_cos(x))
    )
    err = finite_difference_check(f, [x, gamma, beta], step=1e-6)
    assert err < 1e-6


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), b=st.integers(1, 3), c=st.integers(1, 3))
def test_randomized_composite_gradients(seed, b, c):
    r = np.random.default_rng(seed)
    x = Tensor(r.normal(size=(b, c, 4, 4)), requires_grad=True, dtype=np.float64)
    w = Tensor(r.normal(size=(c, c, 1, 1)), requires_grad=True, dtype=np.float64)
    bias = Tensor(r.normal(size=(c,)), requires_grad=True, dtype=np.float64)

    def f():
        h = ops.relu(ops.conv2d(x, w, bias))
        return ops.sum_all(ops.mul(ops.global_avg_pool(h), ops.global_avg_pool(h)))

    err = finite_difference_check(f, [x, w, bias], step=1e-6)
    assert err < 1e-6
