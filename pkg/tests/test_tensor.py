import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gridcast import tensor as T
from gridcast.errors import ConfigError, ContractError, DimensionError, NonFiniteError
from gridcast.gradcheck import check_gradients
from oracles import naive_conv2d_same


def rnd(shape, rng, lo=-2.0, hi=2.0):
    return rng.uniform(lo, hi, size=shape)


# ---------------------------------------------------------------------------
# matmul


def test_matmul_identity():
    eye = T.tensor(np.eye(2))
    a = T.tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(T.matmul(eye, a).data, a.data)


def test_matmul_dot_product():
    # hand oracle: 1*3 + 2*4 = 11
    a = T.tensor([[1.0, 2.0]])
    b = T.tensor([[3.0], [4.0]])
    assert T.matmul(a, b).data.tolist() == [[11.0]]


def test_matmul_zero_annihilator():
    z = T.zeros((2, 3))
    b = T.tensor(np.random.default_rng(0).normal(size=(3, 4)).astype(np.float32))
    out = T.matmul(z, b)
    assert out.shape == (2, 4)
    assert not out.data.any()


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 4\)"):
        T.matmul(T.zeros((2, 3)), T.zeros((2, 4)))


# ---------------------------------------------------------------------------
# conv2d / conv1x1


def test_conv2d_identity_kernel():
    rng = np.random.default_rng(1)
    x = T.tensor(rnd((1, 4, 5), rng))
    k = T.tensor(np.ones((1, 1, 1, 1)))
    assert np.allclose(T.conv2d(x, k).data, x.data)


def test_conv2d_ones_kernel_counts_window():
    x = T.tensor(np.ones((1, 3, 3)))
    k = T.tensor(np.ones((1, 1, 3, 3)))
    out = T.conv2d(x, k).data[0]
    expected = np.array([[4.0, 6.0, 4.0], [6.0, 9.0, 6.0], [4.0, 6.0, 4.0]])
    assert np.array_equal(out, expected)
    # same values from the brute-force oracle
    assert np.array_equal(out, naive_conv2d_same(x.data, k.data)[0])


def test_conv2d_zero_kernel():
    rng = np.random.default_rng(2)
    x = T.tensor(rnd((2, 4, 4), rng))
    k = T.zeros((3, 2, 3, 3), dtype=np.float64)
    assert not T.conv2d(x, k).data.any()


@pytest.mark.parametrize("c_in,c_out,h,w", [(1, 1, 3, 3), (2, 3, 5, 4), (4, 2, 8, 8), (3, 4, 6, 8)])
def test_conv2d_matches_naive_oracle(c_in, c_out, h, w):
    rng = np.random.default_rng(c_in * 100 + c_out)
    x = rnd((c_in, h, w), rng)
    k = rnd((c_out, c_in, 3, 3), rng)
    ours = T.conv2d(T.tensor(x), T.tensor(k)).data
    theirs = naive_conv2d_same(x, k)
    assert np.allclose(ours, theirs, rtol=0, atol=1e-12)


def test_conv2d_even_kernel_rejected():
    with pytest.raises(ConfigError, match="odd"):
        T.conv2d(T.zeros((1, 4, 4)), T.zeros((1, 1, 2, 2)))


def test_conv2d_channel_mismatch_rejected():
    with pytest.raises(DimensionError):
        T.conv2d(T.zeros((2, 4, 4)), T.zeros((1, 3, 3, 3)))


def test_conv1x1_identity_and_linearity():
    rng = np.random.default_rng(3)
    a, b = rnd((1, 3, 3), rng), rnd((1, 3, 3), rng)
    w1 = T.tensor(np.ones((1, 1, 1, 1)))
    assert np.allclose(T.conv1x1(T.tensor(a), w1).data, a)
    x = T.tensor(np.concatenate([a, b]))
    w11 = T.tensor(np.ones((1, 2, 1, 1)))
    assert np.allclose(T.conv1x1(x, w11).data[0], a[0] + b[0])


def test_conv1x1_weighted_channels():
    x = T.tensor(np.stack([np.full((2, 2), 3.0), np.full((2, 2), 4.0)]))
    w = T.tensor(np.array([2.0, -1.0]).reshape(1, 2, 1, 1))
    assert np.allclose(T.conv1x1(x, w).data, 2.0)  # 2*3 - 1*4


def test_conv1x1_rejects_wide_kernel():
    with pytest.raises(ConfigError):
        T.conv1x1(T.zeros((2, 4, 4)), T.zeros((1, 2, 3, 3)))


def test_conv_transpose_is_adjoint_of_conv():
    # <conv(x, k), y> == <x, conv_transpose(y, k)> for the same kernel
    rng = np.random.default_rng(4)
    x, y = rnd((2, 5, 5), rng), rnd((3, 5, 5), rng)
    k = rnd((3, 2, 3, 3), rng)
    lhs = float((T.conv2d(T.tensor(x), T.tensor(k)).data * y).sum())
    rhs = float((T.conv_transpose2d(T.tensor(y), T.tensor(k)).data * x).sum())
    assert lhs == pytest.approx(rhs, rel=1e-10)


def test_conv_transpose_preserves_shape():
    out = T.conv_transpose2d(T.zeros((4, 6, 7)), T.zeros((4, 2, 3, 3)))
    assert out.shape == (2, 6, 7)


# ---------------------------------------------------------------------------
# element-wise ops


def test_sigmoid_tanh_at_zero():
    assert T.sigmoid(T.zeros((1,))).data[0] == pytest.approx(0.5)
    assert T.tanh(T.zeros((1,))).data[0] == 0.0


def test_hadamard_values():
    out = T.hadamard(T.tensor([1.0, 2.0, 3.0]), T.tensor([4.0, 5.0, 6.0]))
    assert out.data.tolist() == [4.0, 10.0, 18.0]


def test_binary_ops_reject_shape_mismatch():
    for op in (T.add, T.sub, T.hadamard):
        with pytest.raises(DimensionError):
            op(T.zeros((2, 3)), T.zeros((3, 2)))


def test_binary_ops_reject_dtype_mismatch():
    with pytest.raises(ContractError):
        T.add(T.zeros((2,), dtype=np.float32), T.zeros((2,), dtype=np.float64))


@settings(max_examples=40)
@given(arrays(np.float64, (7,), elements=st.floats(-50, 50)))
def test_sigmoid_tanh_ranges(vals):
    s = T.sigmoid(T.tensor(vals)).data
    t = T.tanh(T.tensor(vals)).data
    assert ((s > 0) & (s < 1)).all()
    assert ((t > -1) & (t < 1)).all()


@settings(max_examples=40)
@given(st.floats(-20, 20), st.floats(0, 5))
def test_sigmoid_tanh_monotone(x, delta):
    lo = T.tensor(np.array([x], dtype=np.float64))
    hi = T.tensor(np.array([x + delta], dtype=np.float64))
    assert T.sigmoid(hi).data[0] >= T.sigmoid(lo).data[0]
    assert T.tanh(hi).data[0] >= T.tanh(lo).data[0]


# ---------------------------------------------------------------------------
# tape / backward


def test_backward_sum_gives_ones():
    x = T.tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    tape = T.Tape()
    with tape:
        loss = T.sum_all(x)
    tape.backward(loss)
    assert np.array_equal(x.grad, np.ones((2, 3)))


def test_backward_square():
    x = T.tensor([1.0, 2.0], requires_grad=True)
    tape = T.Tape()
    with tape:
        loss = T.sum_all(T.hadamard(x, x))
    tape.backward(loss)
    assert np.allclose(x.grad, [2.0, 4.0])


def test_backward_requires_scalar_loss():
    x = T.tensor([1.0, 2.0], requires_grad=True)
    tape = T.Tape()
    with tape:
        y = T.hadamard(x, x)
    with pytest.raises(ContractError):
        tape.backward(y)


def test_backward_unreachable_leaf_gets_zero_grad():
    x = T.tensor([1.0, 2.0], requires_grad=True)
    y = T.tensor([3.0, 4.0], requires_grad=True)
    tape = T.Tape()
    with tape:
        _ = T.add(y, y)  # y participates but never reaches the loss
        loss = T.sum_all(x)
    tape.backward(loss)
    assert np.array_equal(y.grad, np.zeros(2))
    assert np.array_equal(x.grad, np.ones(2))


def test_backward_twice_is_deterministic():
    rng = np.random.default_rng(5)
    x = T.tensor(rnd((3, 3), rng), requires_grad=True)
    k = T.tensor(rnd((2, 3, 1, 1), rng), requires_grad=True)
    tape = T.Tape()
    with tape:
        loss = T.sum_all(T.tanh(T.conv2d(T.tensor(rnd((3, 4, 4), rng)), k)))
    tape.backward(loss)
    first = k.grad.copy()
    k.zero_grad()
    x.zero_grad()
    tape.backward(loss)
    assert np.array_equal(k.grad, first)


def test_composite_gradient_matches_finite_differences():
    rng = np.random.default_rng(6)

    def build(x, k, w):
        h = T.tanh(T.conv2d(x, k))
        pooled = T.conv1x1(h, w)
        return T.sum_all(T.hadamard(pooled, pooled))

    err = check_gradients(build, [rnd((2, 4, 4), rng), rnd((3, 2, 3, 3), rng),
                                  rnd((1, 3, 1, 1), rng)])
    assert err < 1e-4


OP_CASES = {
    "add": lambda a, b: T.sum_all(T.tanh(T.add(a, b))),
    "sub": lambda a, b: T.sum_all(T.tanh(T.sub(a, b))),
    "hadamard": lambda a, b: T.sum_all(T.hadamard(a, b)),
    "sigmoid": lambda a, b: T.sum_all(T.sigmoid(T.hadamard(a, b))),
    "tanh": lambda a, b: T.sum_all(T.tanh(T.hadamard(a, b))),
}


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_elementwise_gradients(name):
    rng = np.random.default_rng(abs(hash(name)) % 2**32)
    for trial in range(3):
        err = check_gradients(OP_CASES[name], [rnd((3, 4), rng), rnd((3, 4), rng)])
        assert err < 1e-4, f"{name} trial {trial}: {err}"


def test_structural_gradients():
    rng = np.random.default_rng(7)

    def build(a, b):
        joined = T.concat([a, b], axis=0)
        flat = T.reshape(joined, (joined.size,))
        head = T.crop(flat, [(1, 7)])
        return T.sum_all(T.hadamard(head, head))

    assert check_gradients(build, [rnd((2, 3), rng), rnd((2, 3), rng)]) < 1e-4


def test_bias_add_gradients_and_expansion():
    rng = np.random.default_rng(8)
    out = T.bias_add(T.tensor(np.zeros((2, 3, 3))), T.tensor([1.0, -1.0]))
    assert np.allclose(out.data[0], 1.0) and np.allclose(out.data[1], -1.0)

    def build_chw(x, b):
        return T.sum_all(T.tanh(T.bias_add(x, b)))

    def build_mat(x, b):
        return T.sum_all(T.sigmoid(T.bias_add(x, b)))

    assert check_gradients(build_chw, [rnd((2, 3, 3), rng), rnd((2,), rng)]) < 1e-4
    assert check_gradients(build_mat, [rnd((4, 3), rng), rnd((3,), rng)]) < 1e-4


def test_matmul_transpose_gradients():
    rng = np.random.default_rng(9)

    def build(a, b):
        return T.sum_all(T.tanh(T.matmul(T.transpose2d(a), b)))

    assert check_gradients(build, [rnd((3, 2), rng), rnd((3, 4), rng)]) < 1e-4


def test_ops_do_not_record_without_tape():
    x = T.tensor([1.0], requires_grad=True)
    out = T.sigmoid(x)
    assert out.requires_grad  # flag propagates even when nothing records
    tape = T.Tape()
    assert tape.records == []


def test_assert_finite():
    T.assert_finite(T.tensor([1.0, 2.0]))
    with pytest.raises(NonFiniteError, match="frob"):
        T.assert_finite(T.tensor([np.nan], name="frob"), context="unit test")


def test_item_contract():
    with pytest.raises(ContractError):
        T.tensor([1.0, 2.0]).item()
