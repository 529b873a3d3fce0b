import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dualguide import numeric as nm
from dualguide.gradcheck import check_op


def test_tensor_is_read_only_copy():
    src = np.ones((2, 2))
    t = nm.Tensor(src)
    src[0, 0] = 5.0
    assert t.data[0, 0] == 1.0
    with pytest.raises(ValueError):
        t.data[0, 0] = 3.0


@pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
def test_tensor_rejects_non_finite(bad):
    with pytest.raises(FloatingPointError):
        nm.Tensor([1.0, bad])


def test_matmul_matches_numpy_and_checks_shapes():
    a, b = np.arange(6.0).reshape(2, 3), np.arange(12.0).reshape(3, 4)
    assert np.array_equal(nm.as_array(nm.matmul(a, b)), a @ b)
    with pytest.raises(nm.DimensionError):
        nm.matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(nm.DimensionError):
        nm.add(np.ones((2, 3)), np.ones((3, 2)))


def test_softmax_known_values():
    out = nm.as_array(nm.softmax_lastdim(np.array([[0.0, np.log(3.0)]])))
    assert np.allclose(out, [[0.25, 0.75]], atol=1e-15)


def test_softmax_gradient_by_hand():
    # d/dx of softmax(x)[0] at x=(0, ln 3) is p0 * (e0 - p) = (0.1875, -0.1875)
    tape = nm.GradTape()
    x = tape.watch([0.0, np.log(3.0)])
    p = nm.softmax_lastdim(x)
    (g,) = tape.gradient(p, [x], seed=[1.0, 0.0])
    assert np.allclose(g, [0.1875, -0.1875], atol=1e-15)


def test_minmax_constant_row_is_zero():
    out = nm.as_array(nm.minmax_lastdim(np.array([[2.0, 2.0, 2.0], [0.0, 1.0, 3.0]])))
    assert np.array_equal(out[0], np.zeros(3))
    assert np.allclose(out[1], [0.0, 1 / 3, 1.0])


def test_unused_leaf_gets_zero_gradient():
    tape = nm.GradTape()
    a, b = tape.watch(np.ones(3)), tape.watch(np.ones(2))
    ga, gb = nm.backward(tape, nm.total(nm.square(a)))
    assert np.array_equal(ga, 2 * np.ones(3)) and np.array_equal(gb, np.zeros(2))


def test_fan_out_accumulates():
    tape = nm.GradTape()
    a = tape.watch([1.0, 2.0])
    y = nm.total(nm.add(nm.mul(a, a), a))
    (g,) = nm.backward(tape, y)
    assert np.allclose(g, [3.0, 5.0])


def test_seed_shape_mismatch():
    tape = nm.GradTape()
    a = tape.watch(np.ones(3))
    with pytest.raises(nm.DimensionError):
        tape.gradient(nm.scale(a, 2.0), [a], seed=np.ones(4))
    with pytest.raises(nm.DimensionError):
        tape.gradient(nm.scale(a, 2.0), [a])


def test_take_repeated_index_adjoint():
    tape = nm.GradTape()
    a = tape.watch(np.arange(4.0))
    (g,) = nm.backward(tape, nm.total(nm.take(a, [1, 1, 3], axis=0)))
    assert np.array_equal(g, [0.0, 2.0, 0.0, 1.0])


def test_fault_injection_changes_adjoint():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 3))
    with nm.inject_adjoint_fault("square", 1.5):
        bad = check_op(nm.square, [x], np.random.default_rng(1))
    good = check_op(nm.square, [x], np.random.default_rng(1))
    assert bad > 0.1 and good < 1e-9


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 5), elements=st.floats(-50, 50)))
def test_softmax_rows_are_distributions(x):
    p = nm.as_array(nm.softmax_lastdim(x))
    assert np.all(p >= 0) and np.allclose(p.sum(axis=-1), 1.0)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (2, 6), elements=st.floats(-1e3, 1e3)))
def test_minmax_range(x):
    y = nm.as_array(nm.minmax_lastdim(x))
    assert np.all(y >= 0) and np.all(y <= 1 + 1e-12)
