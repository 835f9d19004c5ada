import math

import numpy as np
import pytest

from arascript import numerics as nm
from arascript.errors import ConfigError, NumericError, ShapeError
from arascript.numerics import Tape, Tensor, backward, grad_check


def test_softmax_uniform_on_zero_row():
    out = nm.row_softmax(nm.tensor(np.zeros((3, 5))))
    assert np.allclose(out.values, 0.2)


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(0)
    out = nm.row_softmax(nm.tensor(rng.standard_normal((8, 11)) * 50))
    assert np.all(np.abs(out.values.sum(axis=-1) - 1.0) <= 1e-12)
    assert np.all(out.values > 0)
    assert np.all(np.isfinite(out.values))


def test_gelu_zero():
    assert nm.gelu(nm.tensor(np.array([0.0]))).values[0] == 0.0


def test_matmul_identity():
    a = np.arange(12.0).reshape(3, 4)
    out = nm.matmul(nm.tensor(np.eye(3)), nm.tensor(a))
    assert np.array_equal(out.values, a)


def test_shape_errors_report_both_shapes():
    with pytest.raises(ShapeError) as err:
        nm.matmul(nm.tensor(np.zeros((2, 3))), nm.tensor(np.zeros((2, 3))))
    assert "(2, 3)" in str(err.value)


def test_backward_requires_scalar_and_tape():
    p = nm.parameter(np.ones(3))
    with Tape():
        vec = nm.scale(p, 2.0)
    with pytest.raises(NumericError):
        backward(vec)
    loss = nm.sum_all(nm.scale(p, 2.0))  # built outside any tape
    with pytest.raises(NumericError):
        backward(loss)


def test_linear_gradient_is_broadcast_input():
    w = nm.parameter(np.ones((3, 2)))
    x = nm.tensor(np.array([[2.0], [5.0]]))
    with Tape():
        loss = nm.sum_all(nm.matmul(w, x))
        backward(loss)
    assert np.allclose(w.grad, np.tile([2.0, 5.0], (3, 1)))


def test_unused_parameter_gets_no_gradient():
    used = nm.parameter(np.ones(2))
    unused = nm.parameter(np.ones(2))
    with Tape():
        loss = nm.sum_all(used)
        backward(loss)
    assert np.allclose(used.grad, 1.0)
    assert unused.grad is None


def test_grad_check_quadratic():
    p = nm.parameter(np.array([1.0, -2.0, 3.0]))

    def f():
        return nm.scale(nm.sum_all(nm.mul(p, p)), 0.5)

    assert grad_check(f, [p], eps=1e-5) <= 1e-8


def test_grad_check_eps_bounds():
    p = nm.parameter(np.ones(2))
    with pytest.raises(ConfigError):
        grad_check(lambda: nm.sum_all(p), [p], eps=0.0)
    with pytest.raises(ConfigError):
        grad_check(lambda: nm.sum_all(p), [p], eps=1.0)


@pytest.mark.parametrize("name,build", [
    ("add_broadcast", lambda p, q: nm.add(p, q)),
    ("sub", lambda p, q: nm.sub(p, nm.reshape(q, (1, 4)))),
    ("mul", lambda p, q: nm.mul(p, nm.reshape(q, (1, 4)))),
    ("softmax_log", lambda p, q: nm.log(nm.row_softmax(p))),
    ("gelu", lambda p, q: nm.gelu(p)),
    ("clamp", lambda p, q: nm.clamp_min(p, 0.1)),
    ("mean", lambda p, q: nm.mean_over_axis(p, 0)),
    ("transpose", lambda p, q: nm.transpose(p)),
    ("reshape", lambda p, q: nm.reshape(p, (4, 3))),
    ("select", lambda p, q: nm.masked_select(p, [0, 2, 2])),
    ("concat", lambda p, q: nm.concat([p, p], axis=1)),
])
def test_op_gradients_match_finite_differences(name, build):
    rng = np.random.default_rng(abs(hash(name)) % 2 ** 31)
    p = nm.parameter(rng.standard_normal((3, 4)) + 1.5)
    q = nm.parameter(rng.standard_normal(4))
    weight = nm.tensor(rng.standard_normal(build(p, q).shape))

    def f():
        return nm.sum_all(nm.mul(build(p, q), weight))

    err = grad_check(f, [p, q], eps=1e-5, samples=16, seed=3)
    assert err <= 1e-6, f"{name}: {err}"


def test_layer_norm_gradients():
    rng = np.random.default_rng(11)
    x = nm.parameter(rng.standard_normal((5, 8)))
    gain = nm.parameter(rng.standard_normal(8))
    bias = nm.parameter(rng.standard_normal(8))
    w = rng.standard_normal((5, 8))

    def f():
        return nm.sum_all(nm.mul(nm.layer_norm(x, gain, bias), nm.tensor(w)))

    assert grad_check(f, [x, gain, bias], eps=1e-5, samples=60, seed=5) <= 1e-6


def test_embedding_and_gather_gradients():
    rng = np.random.default_rng(13)
    table = nm.parameter(rng.standard_normal((6, 4)))
    w = rng.standard_normal((5, 4))

    def f():
        rows = nm.embedding_lookup(table, [0, 3, 3, 5, 1])
        picked = nm.gather_cols(nm.mul(rows, nm.tensor(w)), [1, 0, 3, 2, 2])
        return nm.sum_all(picked)

    assert grad_check(f, [table], eps=1e-5, samples=24, seed=7) <= 1e-6


def test_batched_matmul_gradients():
    rng = np.random.default_rng(17)
    a = nm.parameter(rng.standard_normal((2, 3, 4)))
    b = nm.parameter(rng.standard_normal((2, 4, 5)))
    w = rng.standard_normal((2, 3, 5))

    def f():
        return nm.sum_all(nm.mul(nm.matmul(a, b), nm.tensor(w)))

    assert grad_check(f, [a, b], eps=1e-5, samples=40, seed=9) <= 1e-6


def test_embedding_lookup_range_check():
    table = nm.parameter(np.zeros((4, 2)))
    with pytest.raises(ShapeError):
        nm.embedding_lookup(table, [0, 4])


def test_forward_determinism():
    rng = np.random.default_rng(23)
    x = rng.standard_normal((6, 6))

    def run():
        t = nm.tensor(x)
        return nm.row_softmax(nm.matmul(nm.gelu(t), t)).values

    assert np.array_equal(run(), run())


def test_nested_tapes_rejected():
    with Tape():
        with pytest.raises(NumericError):
            with Tape():
                pass


def test_log_handles_zero_without_nan():
    out = nm.log(nm.tensor(np.array([0.0, 1.0])))
    assert np.all(np.isfinite(out.values))
