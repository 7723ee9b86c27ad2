"""Tape autodiff: frozen forward values, hand-derived gradients, and the
structural guarantees (id ordering, single-visit backward, finite checks)."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from relgat.tensor import (
    KinkError,
    Tape,
    add,
    concat_cols,
    concat_flat,
    concat_rows,
    gather_rows,
    grad_check,
    leaky_relu,
    log,
    matmul,
    mul,
    relu,
    reshape,
    row_softmax,
    rowsum,
    scale_rows,
    segment_reduce,
    segment_softmax,
    slice_rows,
    sub,
    sum_all,
    sum_squares,
    tanh,
)


def test_leaf_ids_strictly_increase():
    tape = Tape()
    ids = [tape.leaf(np.zeros(2)).id for _ in range(5)]
    out = add(tape.leaf(np.ones(2)), 1.0)
    assert ids == sorted(ids) and len(set(ids)) == 5
    assert out.id > ids[-1]


def test_leaf_rejects_non_finite_and_3d():
    tape = Tape()
    with pytest.raises(OverflowError):
        tape.leaf([np.inf, 1.0])
    with pytest.raises(ValueError):
        tape.leaf(np.zeros((2, 2, 2)))


def test_dtype_gate():
    assert Tape(np.float32).dtype == np.float32
    with pytest.raises(ValueError):
        Tape(np.float16)


def test_matmul_forward_and_backward_hand_values():
    tape = Tape()
    a = tape.leaf([[1.0, 2.0], [3.0, 4.0]])
    b = tape.leaf([[5.0, 6.0], [7.0, 8.0]])
    out = matmul(a, b)
    assert np.array_equal(out.data, [[19.0, 22.0], [43.0, 50.0]])
    grads = tape.backward(sum_all(out))
    # d/dA sum(AB) = ones @ B^T, d/dB = A^T @ ones
    assert np.array_equal(grads[a], [[11.0, 15.0], [11.0, 15.0]])
    assert np.array_equal(grads[b], [[4.0, 4.0], [6.0, 6.0]])


def test_bias_broadcast_gradient_sums_rows():
    tape = Tape()
    m = tape.leaf([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
    b = tape.leaf([10.0, 20.0])
    grads = tape.backward(sum_all(add(m, b)))
    assert np.array_equal(grads[b], [3.0, 3.0])
    assert np.array_equal(grads[m], np.ones((3, 2)))


def test_leaky_relu_frozen_value():
    # slope 0.2 on -0.2 gives exactly -0.04
    tape = Tape()
    x = tape.leaf([-0.2, 0.3])
    out = leaky_relu(x, 0.2)
    assert out.data[0] == pytest.approx(-0.04, abs=1e-15)
    assert out.data[1] == 0.3
    grads = tape.backward(sum_all(out))
    assert np.array_equal(grads[x], [0.2, 1.0])


def test_leaky_relu_kink_gap_tracked():
    tape = Tape()
    leaky_relu(tape.leaf([0.5, -0.003]), 0.2)
    assert tape.min_kink_gap() == pytest.approx(0.003)


def test_relu_is_slope_zero():
    tape = Tape()
    out = relu(tape.leaf([-2.0, 3.0]))
    assert np.array_equal(out.data, [0.0, 3.0])


def test_tanh_and_log_gradients():
    tape = Tape()
    x = tape.leaf([0.5, 2.0])
    grads = tape.backward(sum_all(tanh(x)))
    assert np.allclose(grads[x], 1.0 - np.tanh([0.5, 2.0]) ** 2, atol=1e-15)
    tape2 = Tape()
    y = tape2.leaf([0.5, 2.0])
    grads2 = tape2.backward(sum_all(log(y)))
    assert np.allclose(grads2[y], [2.0, 0.5], atol=1e-15)


def test_log_of_zero_raises():
    tape = Tape()
    with pytest.raises(OverflowError):
        log(tape.leaf([0.0, 1.0]))


def test_gather_rows_accumulates_repeats():
    tape = Tape()
    m = tape.leaf([[1.0], [2.0], [3.0]])
    out = gather_rows(m, [2, 0, 2])
    assert np.array_equal(out.data, [[3.0], [1.0], [3.0]])
    grads = tape.backward(sum_all(out))
    assert np.array_equal(grads[m], [[1.0], [0.0], [2.0]])


def test_slice_reshape_concat_roundtrips():
    tape = Tape()
    m = tape.leaf(np.arange(12.0).reshape(3, 4))
    top = slice_rows(m, 0, 1)
    rest = slice_rows(m, 1, 3)
    back = concat_rows([top, rest])
    assert np.array_equal(back.data, m.data)
    flat = reshape(m, (12,))
    again = reshape(flat, (3, 4))
    assert np.array_equal(again.data, m.data)
    left = concat_cols([slice_rows(reshape(m, (3, 4)), 0, 3)])
    assert np.array_equal(left.data, m.data)
    grads = tape.backward(sum_all(back))
    assert np.array_equal(grads[m], np.ones((3, 4)))


def test_concat_flat_backward_splits():
    tape = Tape()
    a = tape.leaf([1.0, 2.0])
    b = tape.leaf([3.0])
    out = concat_flat([a, b])
    assert np.array_equal(out.data, [1.0, 2.0, 3.0])
    grads = tape.backward(sum_all(mul(out, np.array([1.0, 10.0, 100.0]))))
    assert np.array_equal(grads[a], [1.0, 10.0])
    assert np.array_equal(grads[b], [100.0])


def test_reductions_frozen_values():
    tape = Tape()
    m = tape.leaf([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(rowsum(m).data, [3.0, 7.0])
    assert sum_all(m).data == 10.0
    assert sum_squares(m).data == 30.0
    grads = tape.backward(sum_squares(m))
    assert np.array_equal(grads[m], 2.0 * m.data)


def test_scale_rows_tensor_and_const():
    tape = Tape()
    m = tape.leaf([[1.0, 1.0], [2.0, 2.0]])
    v = tape.leaf([3.0, 5.0])
    out = scale_rows(m, v)
    assert np.array_equal(out.data, [[3.0, 3.0], [10.0, 10.0]])
    grads = tape.backward(sum_all(out))
    assert np.array_equal(grads[v], [2.0, 4.0])
    tape2 = Tape()
    m2 = tape2.leaf([[1.0, 1.0], [2.0, 2.0]])
    out2 = scale_rows(m2, np.array([3.0, 5.0]))
    assert np.array_equal(out2.data, [[3.0, 3.0], [10.0, 10.0]])


def test_segment_reduce_sum_mean_empty_segments():
    tape = Tape()
    v = tape.leaf([[1.0], [2.0], [10.0]])
    segs = [0, 0, 2]
    total = segment_reduce(v, segs, 4, "sum")
    assert np.array_equal(total.data, [[3.0], [0.0], [10.0], [0.0]])
    mean = segment_reduce(v, segs, 4, "mean")
    assert np.array_equal(mean.data, [[1.5], [0.0], [10.0], [0.0]])
    grads = tape.backward(sum_all(mean))
    assert np.array_equal(grads[v], [[0.5], [0.5], [1.0]])


def test_segment_reduce_max_routes_gradient_to_first_winner():
    tape = Tape()
    v = tape.leaf([[1.0], [5.0], [5.0], [2.0]])
    out = segment_reduce(v, [0, 0, 0, 1], 2, "max")
    assert np.array_equal(out.data, [[5.0], [2.0]])
    grads = tape.backward(sum_all(out))
    # ties break to the earliest row
    assert np.array_equal(grads[v], [[0.0], [1.0], [0.0], [1.0]])


def test_segment_reduce_max_empty_segment_is_zero():
    tape = Tape()
    v = tape.leaf([[3.0]])
    out = segment_reduce(v, [1], 3, "max")
    assert np.array_equal(out.data, [[0.0], [3.0], [0.0]])


def test_segment_softmax_frozen():
    tape = Tape()
    logits = tape.leaf([np.log(2.0), 0.0, 1.0])
    out = segment_softmax(logits, [0, 0, 1])
    assert out.data[0] == pytest.approx(2.0 / 3.0, abs=1e-15)
    assert out.data[1] == pytest.approx(1.0 / 3.0, abs=1e-15)
    assert out.data[2] == 1.0


def test_segment_softmax_gradient_matches_finite_differences():
    def f(tape, leaves):
        y = segment_softmax(leaves["x"], [0, 0, 1, 1, 1])
        return sum_all(mul(y, np.array([1.0, 2.0, -1.0, 0.5, 3.0])))

    err = grad_check(f, {"x": np.array([0.3, -0.2, 0.7, 0.1, -0.5])})
    assert err < 1e-7


@settings(deadline=None, max_examples=50)
@given(
    st.lists(st.floats(-30, 30), min_size=1, max_size=40),
    st.data(),
)
def test_segment_softmax_sums_to_one_and_shift_invariant(values, data):
    segs = data.draw(
        st.lists(st.integers(0, 5), min_size=len(values), max_size=len(values))
    )
    tape = Tape()
    x = np.array(values)
    y = segment_softmax(tape.leaf(x), segs).data
    seg_arr = np.array(segs)
    for s in np.unique(seg_arr):
        assert y[seg_arr == s].sum() == pytest.approx(1.0, abs=1e-12)
    shifted = segment_softmax(Tape().leaf(x + 7.5), segs).data
    assert np.allclose(y, shifted, atol=1e-12)


@settings(deadline=None, max_examples=50)
@given(st.data())
def test_segment_sum_is_permutation_invariant_bitwise(data):
    n = data.draw(st.integers(2, 30))
    values = np.array(
        data.draw(st.lists(st.floats(-1e3, 1e3), min_size=n, max_size=n))
    )
    segs = np.array(data.draw(st.lists(st.integers(0, 4), min_size=n, max_size=n)))
    perm = np.array(data.draw(st.permutations(range(n))))
    a = segment_reduce(Tape().leaf(values[:, None]), segs, 5, "sum").data
    b = segment_reduce(Tape().leaf(values[perm][:, None]), segs[perm], 5, "sum").data
    assert np.array_equal(a, b)


def test_row_softmax_rows_sum_to_one():
    tape = Tape()
    out = row_softmax(tape.leaf([[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]]))
    assert np.allclose(out.data.sum(axis=1), 1.0, atol=1e-15)
    assert np.allclose(out.data[1], [1 / 3, 1 / 3, 1 / 3], atol=1e-15)


def test_untouched_leaf_gets_zero_gradient():
    tape = Tape()
    used = tape.leaf([2.0])
    unused = tape.leaf(np.ones((2, 2)))
    grads = tape.backward(sum_all(mul(used, used)))
    assert np.array_equal(grads[unused], np.zeros((2, 2)))
    assert np.array_equal(grads[used], [4.0])


def test_backward_requires_scalar_and_same_tape():
    tape = Tape()
    vec = tape.leaf([1.0, 2.0])
    with pytest.raises(ValueError, match="scalar"):
        tape.backward(vec)
    other = Tape()
    loss = sum_all(other.leaf([1.0]))
    with pytest.raises(ValueError, match="different tape"):
        tape.backward(loss)


def test_cross_tape_ops_rejected():
    a = Tape().leaf([1.0])
    b = Tape().leaf([1.0])
    with pytest.raises(ValueError):
        add(a, b)


@pytest.mark.filterwarnings("ignore:overflow")
def test_op_overflow_raises():
    tape = Tape()
    big = tape.leaf([1e308])
    with pytest.raises(OverflowError):
        mul(big, 1e10)


def test_backward_visits_each_op_once():
    tape = Tape()
    x = tape.leaf([1.0])
    y = add(x, x)  # diamond: x used twice by one op
    z = mul(y, y)  # y used twice
    grads = tape.backward(sum_all(z))
    # d/dx (2x)^2 = 8x = 8
    assert np.array_equal(grads[x], [8.0])


def test_grad_check_passes_on_smooth_composite():
    def f(tape, leaves):
        h = tanh(matmul(leaves["x"], leaves["w"]))
        return sum_squares(add(h, leaves["b"]))

    rng = np.random.default_rng(0)
    err = grad_check(
        f,
        {
            "x": rng.normal(size=(3, 2)),
            "w": rng.normal(size=(2, 4)),
            "b": rng.normal(size=4),
        },
    )
    assert err < 1e-6


def test_grad_check_shifts_off_kink_once():
    # one parameter starts exactly on the relu kink; the +1e-3 shift fixes it
    def f(tape, leaves):
        return sum_all(relu(leaves["x"]))

    err = grad_check(f, {"x": np.array([0.0, 1.0])})
    assert err < 1e-8


def test_grad_check_raises_on_persistent_kink():
    # a - b stays zero under any uniform shift of all parameters
    def f(tape, leaves):
        return sum_all(relu(sub(leaves["a"], leaves["b"])))

    with pytest.raises(KinkError):
        grad_check(f, {"a": np.array([1.0]), "b": np.array([1.0])})


def test_float32_tape_runs():
    tape = Tape(np.float32)
    x = tape.leaf([1.0, 2.0])
    out = mul(x, 2.0)
    assert out.data.dtype == np.float32
    grads = tape.backward(sum_all(out))
    assert grads[x].dtype == np.float32
