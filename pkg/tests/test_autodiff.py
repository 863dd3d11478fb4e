import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from drift import autodiff as ad
from drift.autodiff import (NonFiniteError, ShapeError, StaleTapeError, Tape, backward,
                            finite_difference_gradient, max_relative_error)


def _grad_of(build, *arrays):
    tape = Tape()
    leaves = [tape.leaf(a) for a in arrays]
    backward(build(*leaves))
    return [leaf.adjoint for leaf in leaves]


def _fd(fn, *arrays, step=1e-5):
    """Central differences of a numpy-level function, one argument at a time."""
    out = []
    for k, arr in enumerate(arrays):
        def partial(x, k=k):
            args = list(arrays)
            args[k] = x
            return fn(*args)
        out.append(finite_difference_gradient(partial, np.asarray(arr, float), step).reshape(np.shape(arr)))
    return out


def _value(build):
    def fn(*arrays):
        tape = Tape()
        return float(build(*[tape.constant(a) for a in arrays]).value)
    return fn


def test_add_values():
    tape = Tape()
    out = ad.add(tape.constant([1.0, 2.0]), tape.constant([3.0, 4.0]))
    np.testing.assert_array_equal(out.value, [4.0, 6.0])


def test_tanh_at_origin():
    tape = Tape()
    assert ad.tanh(tape.constant([0.0])).value.tolist() == [0.0]


def test_softmax_symmetric_row():
    tape = Tape()
    np.testing.assert_array_equal(ad.softmax_rows(tape.constant([[0.0, 0.0]])).value, [[0.5, 0.5]])


def test_square_gradient():
    tape = Tape()
    w = tape.leaf([3.0])
    backward(ad.sum(w * w))
    np.testing.assert_array_equal(w.grad, [6.0])


rng = np.random.default_rng(1234)
A = rng.normal(size=(3, 4))
B = rng.normal(size=(4, 2))
P = rng.uniform(0.1, 2.0, size=(3, 4))
V = rng.normal(size=4)
W = rng.normal(size=(3, 4))

OP_CASES = {
    "matmul": (lambda a, b: ad.sum(ad.tanh(ad.matmul(a, b))), (A, B)),
    "add": (lambda a, b: ad.sum(ad.tanh(a + b)), (A, W)),
    "sub": (lambda a, b: ad.sum(ad.tanh(a - b)), (A, W)),
    "mul": (lambda a, b: ad.sum(a * b * a), (A, W)),
    "div": (lambda a, b: ad.sum(a / b), (A, P)),
    "pow_scalar": (lambda p: ad.sum(ad.pow_scalar(p, 2.5)), (P,)),
    "exp": (lambda a: ad.sum(ad.exp(a) * a), (A,)),
    "log": (lambda p: ad.sum(ad.log(p) * p), (P,)),
    "tanh": (lambda a: ad.sum(ad.tanh(a) * a), (A,)),
    "sum_axis0": (lambda a: ad.sum(ad.tanh(ad.sum(a, axis=0))), (A,)),
    "sum_axis1": (lambda a: ad.sum(ad.tanh(ad.sum(a, axis=1))), (A,)),
    "mean": (lambda a: ad.mean(ad.tanh(ad.mean(a, axis=1)) * 3.0), (A,)),
    "softmax_rows": (lambda a, w: ad.sum(ad.softmax_rows(a) * w), (A, W)),
    "max_rows": (lambda a: ad.sum(ad.max_rows(a) * ad.max_rows(a)), (A,)),
    "broadcast_row": (lambda v, w: ad.sum(ad.tanh(ad.broadcast_row(v, 3) * w)), (V, W)),
    "transpose": (lambda a, b: ad.sum(ad.tanh(ad.matmul(ad.transpose(a), b))), (W, A)),
}


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_op_gradients_match_finite_differences(name):
    build, arrays = OP_CASES[name]
    analytic = _grad_of(build, *arrays)
    numeric = _fd(_value(build), *arrays)
    for a, n in zip(analytic, numeric):
        assert max_relative_error(a, n) < 1e-6


def test_forward_op_dispatch():
    tape = Tape()
    out = ad.forward_op("pow_scalar", tape.constant([2.0, 3.0]), 2.0)
    np.testing.assert_allclose(out.value, [4.0, 9.0])
    with pytest.raises(ad.AutodiffError):
        ad.forward_op("conv2d", tape.constant([1.0]))


def test_shape_mismatch_names_op_and_shapes():
    tape = Tape()
    with pytest.raises(ShapeError) as info:
        ad.matmul(tape.constant(np.ones((2, 3))), tape.constant(np.ones((2, 3))))
    assert info.value.op == "matmul"
    assert "(2, 3)" in str(info.value)
    with pytest.raises(ShapeError):
        ad.add(tape.constant(np.ones(3)), tape.constant(np.ones(4)))


def test_non_finite_output_is_an_error():
    tape = Tape()
    with pytest.raises(NonFiniteError) as info:
        ad.exp(tape.constant([1000.0]))
    assert info.value.op == "exp"


def test_log_and_div_are_clamped():
    tape = Tape()
    x = tape.leaf([0.0, 1e-20, 2.0])
    out = ad.log(x)
    np.testing.assert_allclose(out.value, [np.log(1e-12), np.log(1e-12), np.log(2.0)])
    backward(ad.sum(out))
    np.testing.assert_allclose(x.grad, [0.0, 0.0, 0.5])
    # 0 * log 0 -> 0
    z = tape.constant([0.0])
    assert float(ad.sum(z * ad.log(z)).value) == 0.0
    assert np.isfinite(ad.div(tape.constant([1.0]), tape.constant([0.0])).value).all()


def test_non_scalar_root_rejected():
    tape = Tape()
    with pytest.raises(ad.AutodiffError):
        backward(tape.leaf([1.0, 2.0]))


def test_stale_tape_rejected():
    tape = Tape()
    w = tape.leaf([1.0])
    root = ad.sum(w * w)
    tape.clear()
    with pytest.raises(StaleTapeError):
        backward(root)
    with pytest.raises(StaleTapeError):
        ad.tanh(w)


def test_tape_is_topologically_ordered():
    tape = Tape()
    w = tape.leaf(A)
    ad.sum(ad.softmax_rows(ad.tanh(w) * 2.0))
    position = {id(n): i for i, n in enumerate(tape.nodes)}
    for node in tape.nodes:
        assert all(position[id(p)] < position[id(node)] for p in node.parents)


def test_shared_subgraph_accumulates():
    tape = Tape()
    x = tape.leaf([2.0])
    y = tape.leaf([-4.0])
    backward(ad.sum((x + y) * (x + 1.0)))
    assert x.grad.tolist() == [1.0]
    assert y.grad.tolist() == [3.0]


def test_stop_gradient_cuts_path():
    tape = Tape()
    x = tape.leaf([3.0])
    backward(ad.sum(ad.stop_gradient(x) * x))
    assert x.grad.tolist() == [3.0]


def test_unreached_leaf_has_zero_adjoint():
    tape = Tape()
    x = tape.leaf([1.0, 2.0])
    y = tape.leaf([5.0])
    backward(ad.sum(y * y))
    np.testing.assert_array_equal(x.adjoint, [0.0, 0.0])


@settings(max_examples=30, deadline=None)
@given(a=st.floats(-3, 3), b=st.floats(-3, 3), seed=st.integers(0, 2**16))
def test_adjoint_linearity(a, b, seed):
    r = np.random.default_rng(seed)
    x0 = r.normal(size=(3, 2))

    def l1(x):
        return ad.sum(ad.softmax_rows(x) * ad.tanh(x))

    def l2(x):
        return ad.mean(ad.exp(ad.tanh(x)))

    (g1,) = _grad_of(l1, x0)
    (g2,) = _grad_of(l2, x0)
    (g,) = _grad_of(lambda x: l1(x) * a + l2(x) * b, x0)
    np.testing.assert_allclose(g, a * g1 + b * g2, rtol=0, atol=1e-10)


def test_determinism_bitwise():
    def run():
        tape = Tape()
        w = tape.leaf(A)
        root = ad.sum(ad.softmax_rows(ad.matmul(ad.tanh(w), B)))
        backward(root)
        return root.value.copy(), w.grad.copy()
    v1, g1 = run()
    v2, g2 = run()
    assert v1.tobytes() == v2.tobytes()
    assert g1.tobytes() == g2.tobytes()


class TestFiniteDifference:
    def test_quadratic_is_exact(self):
        g = finite_difference_gradient(lambda w: float(w[0] ** 2), np.array([3.0]), 1e-5)
        assert g[0] == pytest.approx(6.0, abs=1e-9)

    def test_constant_loss_gives_zero(self):
        g = finite_difference_gradient(lambda w: 1.5, np.zeros(4), 1e-5)
        np.testing.assert_array_equal(g, np.zeros(4))

    def test_rejects_non_positive_step(self):
        with pytest.raises(ValueError):
            finite_difference_gradient(lambda w: 0.0, np.zeros(1), 0.0)

    def test_non_finite_loss_names_coordinate(self):
        def loss(w):
            return float("inf") if w[1] > 0 else 0.0
        with pytest.raises(NonFiniteError, match="coordinate 1"):
            finite_difference_gradient(loss, np.zeros(2), 1e-5)


def test_relative_error_floor():
    assert max_relative_error([1.0, 0.0], [1.0, 0.0]) == 0.0
    assert max_relative_error([2.0], [1.0]) == pytest.approx(0.5)
