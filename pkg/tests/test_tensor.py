import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wxvae import tensor as T
from wxvae.gradcheck import check_gradients
from wxvae.optim import AdamState, NonFiniteGradient, adam_step
from wxvae.tensor import GradientError, ShapeError, Tensor

from oracles import conv3_loops, conv3_transpose_loops


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


# ---------------------------------------------------------------- conv3

def test_conv3_identity_kernel():
    x = np.random.default_rng(0).normal(size=(2, 1, 4, 5, 3)).astype(np.float32)
    y = T.conv3(Tensor(x), Tensor(np.ones((1, 1, 1, 1, 1), np.float32)), Tensor(np.zeros(1, np.float32)))
    np.testing.assert_array_equal(y.data, x)


def test_conv3_all_ones_2cube():
    out = T.conv3(Tensor(np.ones((1, 1, 2, 2, 2))), Tensor(np.ones((1, 1, 2, 2, 2))), Tensor(np.zeros(1)))
    # nested-loop oracle gives the same single value
    ref = conv3_loops(np.ones((1, 1, 2, 2, 2)), np.ones((1, 1, 2, 2, 2)), np.zeros(1), 1, 0)
    assert out.shape == (1, 1, 1, 1, 1)
    assert out.data.item() == ref.item() == 8.0


def test_conv3_stride2_shape():
    y = T.conv3(Tensor(np.zeros((1, 1, 32, 32, 32))), Tensor(np.zeros((2, 1, 3, 3, 3))), Tensor(np.zeros(2)), 2, 1)
    assert y.shape == (1, 2, 16, 16, 16)


@pytest.mark.parametrize("stride,padding,k", [(1, 0, 2), (2, 1, 3), (3, 1, 3), (2, 0, 2), (1, 2, 3)])
def test_conv3_matches_loops(stride, padding, k):
    rng = np.random.default_rng(stride * 10 + padding)
    x = rng.normal(size=(2, 3, 5, 4, 6))
    w = rng.normal(size=(4, 3, k, k, k))
    b = rng.normal(size=4)
    y = T.conv3(Tensor(x), Tensor(w), Tensor(b), stride, padding).data
    np.testing.assert_allclose(y, conv3_loops(x, w, b, stride, padding), rtol=1e-12, atol=1e-12)


def test_conv3_channel_mismatch():
    with pytest.raises(ShapeError, match="channels"):
        T.conv3(Tensor(np.zeros((1, 2, 4, 4, 4))), Tensor(np.zeros((1, 3, 3, 3, 3))), Tensor(np.zeros(1)))


def test_conv3_kernel_too_large():
    with pytest.raises(ShapeError):
        T.conv3(Tensor(np.zeros((1, 1, 2, 2, 2))), Tensor(np.zeros((1, 1, 3, 3, 3))), Tensor(np.zeros(1)))


# ---------------------------------------------------------------- conv3_transpose

def test_conv3_transpose_scalar_kernel():
    x = np.random.default_rng(1).normal(size=(1, 1, 3, 4, 2))
    y = T.conv3_transpose(Tensor(x), Tensor(np.full((1, 1, 1, 1, 1), 2.5)), Tensor(np.zeros(1)))
    np.testing.assert_allclose(y.data, 2.5 * x)


def test_conv3_transpose_shapes():
    x = Tensor(np.zeros((1, 2, 8, 8, 8)))
    w = Tensor(np.zeros((2, 1, 3, 3, 3)))
    b = Tensor(np.zeros(1))
    assert T.conv3_transpose(x, w, b, 2, 1).shape[2:] == (15, 15, 15)
    assert T.conv3_transpose(x, w, b, 2, 1, output_padding=1).shape[2:] == (16, 16, 16)


@pytest.mark.parametrize("stride,padding,op", [(1, 1, 0), (2, 1, 1), (2, 1, 0), (3, 1, 2), (2, 0, 1)])
def test_conv3_transpose_matches_loops(stride, padding, op):
    rng = np.random.default_rng(stride + 7 * op)
    y = rng.normal(size=(2, 3, 3, 2, 4))
    w = rng.normal(size=(3, 2, 3, 3, 3))
    b = rng.normal(size=2)
    out = T.conv3_transpose(Tensor(y), Tensor(w), Tensor(b), stride, padding, op).data
    ref = conv3_transpose_loops(y, w, b, stride, padding, out.shape[2:])
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


def test_adjoint_identity_small():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(1, 1, 3, 3, 3))
    w = rng.normal(size=(1, 1, 3, 3, 3))
    zero = Tensor(np.zeros(1))
    y = rng.normal(size=T.conv3(Tensor(x), Tensor(w), zero, 1, 1).shape)
    lhs = np.vdot(conv3_loops(x, w, np.zeros(1), 1, 1), y)
    rhs = np.vdot(x, T.conv3_transpose(Tensor(y), Tensor(w), zero, 1, 1).data)
    assert abs(lhs - rhs) <= 1e-6 * abs(lhs)


@settings(max_examples=100, deadline=None)
@given(
    cin=st.integers(1, 3),
    cout=st.integers(1, 3),
    size=st.tuples(st.integers(3, 7), st.integers(3, 7), st.integers(3, 7)),
    k=st.integers(1, 3),
    stride=st.integers(1, 3),
    padding=st.integers(0, 1),
    seed=st.integers(0, 2**31),
)
def test_adjoint_identity_property(cin, cout, size, k, stride, padding, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, cin, *size))
    w = rng.normal(size=(cout, cin, k, k, k))
    fwd = T.conv3(Tensor(x), Tensor(w), Tensor(np.zeros(cout)), stride, padding).data
    y = rng.normal(size=fwd.shape)
    out_sp = fwd.shape[2:]
    # output_padding chosen so the transpose lands back on x's extent
    ops = {s - T.conv_transpose_out_extent(o, k, stride, padding) for s, o in zip(size, out_sp)}
    back = T._conv3t_raw(y, w, stride, padding, size)
    lhs, rhs = np.vdot(fwd, y), np.vdot(x, back)
    assert abs(lhs - rhs) <= 1e-6 * max(abs(lhs), 1e-12) + 1e-9
    if len(ops) == 1 and 0 <= (op := ops.pop()) < stride:
        via_op = T.conv3_transpose(Tensor(y), Tensor(w), Tensor(np.zeros(cin)), stride, padding, op).data
        np.testing.assert_allclose(via_op, back, rtol=1e-12, atol=1e-12)


def test_model_geometry_round_trips():
    for n in (8, 12, 16, 32):
        down = T.conv_out_extent(T.conv_out_extent(n, 3, 2, 1), 3, 2, 1)
        assert down == n // 4
        up = T.conv_transpose_out_extent(T.conv_transpose_out_extent(down, 3, 2, 1, 1), 3, 2, 1, 1)
        assert up == n


# ---------------------------------------------------------------- dense / relu

def test_dense_identity():
    x = np.random.default_rng(0).normal(size=(3, 4))
    y = T.dense(Tensor(x), Tensor(np.eye(4)), Tensor(np.zeros(4)))
    np.testing.assert_array_equal(y.data, x)


def test_dense_hand_example():
    y = T.dense(Tensor(np.array([[1.0, 2.0]])), Tensor(np.array([[1.0, 1.0], [1.0, -1.0]])), Tensor(np.zeros(2)))
    np.testing.assert_array_equal(y.data, [[3.0, -1.0]])


def test_dense_bias_only():
    b = np.array([0.5, -2.0, 3.0])
    y = T.dense(Tensor(np.ones((4, 2))), Tensor(np.zeros((3, 2))), Tensor(b))
    np.testing.assert_array_equal(y.data, np.tile(b, (4, 1)))


def test_dense_mismatch_names_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        T.dense(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))), Tensor(np.zeros(4)))


def test_relu_values():
    np.testing.assert_array_equal(T.relu(Tensor(np.array([-1.0, 0.0, 2.0]))).data, [0, 0, 2])
    assert not T.relu(Tensor(-np.abs(np.random.default_rng(0).normal(size=10)) - 0.1)).data.any()


def test_relu_gradient_matches_fd():
    x = leaf([-1.0, 2.0])
    report = check_gradients(lambda: T.tsum(T.relu(x)), [x])
    assert report.passed
    T.backward(T.tsum(T.relu(x)))
    np.testing.assert_array_equal(x.grad, [0.0, 1.0])


def test_relu_subgradient_at_zero():
    x = leaf([0.0])
    T.backward(T.tsum(T.relu(x)))
    assert x.grad[0] == 0.0


# ---------------------------------------------------------------- backward

def test_backward_sum_gives_ones():
    x = leaf(np.random.default_rng(0).normal(size=(2, 3, 4)))
    T.backward(T.tsum(x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))


def test_backward_square():
    x = leaf([3.0])
    T.backward(T.tsum(T.mul(x, x)))
    np.testing.assert_array_equal(x.grad, [6.0])


def test_backward_requires_scalar():
    x = leaf([1.0, 2.0])
    with pytest.raises(GradientError, match="scalar"):
        T.backward(T.mul(x, 2.0))


def test_backward_twice_without_reset_errors():
    x = leaf([1.0, 2.0])
    T.backward(T.tsum(x))
    with pytest.raises(GradientError, match="zero_grad"):
        T.backward(T.tsum(x))
    x.zero_grad()
    T.backward(T.tsum(x))


def test_shared_subexpression_accumulates_within_one_pass():
    x = leaf([2.0])
    y = T.mul(x, 3.0)
    T.backward(T.tsum(T.add(y, y)))
    np.testing.assert_array_equal(x.grad, [6.0])


OPS = {
    "add": lambda a, b: T.add(a, b),
    "sub": lambda a, b: T.sub(a, b),
    "mul": lambda a, b: T.mul(a, b),
    "square": lambda a, b: T.square(a),
    "exp": lambda a, b: T.exp(a),
    "softplus": lambda a, b: T.softplus(a),
    "relu": lambda a, b: T.relu(a),
    "clamp": lambda a, b: T.clamp(a, -1.0, 1.0),
    "mean": lambda a, b: T.mean(a),
    "sum_rows": lambda a, b: T.sum_rows(a),
    "reshape": lambda a, b: T.reshape(a, (-1,)),
}


@pytest.mark.parametrize("op", sorted(OPS))
@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_elementwise_gradients_match_fd(op, seed):
    rng = np.random.default_rng(seed)
    a = leaf(rng.uniform(-2, 2, (3, 4)))
    b = leaf(rng.uniform(-2, 2, (3, 4)))
    r = rng.normal(size=OPS[op](a, b).shape)

    def f():
        return T.tsum(T.mul(OPS[op](a, b), r))

    report = check_gradients(f, [a, b])
    assert report.max_rel_error <= 1e-3, report.lines()


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**31), stride=st.integers(1, 2))
def test_conv_gradients_match_fd(seed, stride):
    rng = np.random.default_rng(seed)
    x = leaf(rng.uniform(-2, 2, (1, 2, 4, 3, 4)))
    w = leaf(rng.uniform(-2, 2, (2, 2, 3, 3, 3)))
    b = leaf(rng.uniform(-2, 2, 2))
    r = rng.normal(size=T.conv3(x, w, b, stride, 1).shape)
    assert check_gradients(lambda: T.tsum(T.mul(T.conv3(x, w, b, stride, 1), r)), [x, w, b]).passed
    wt = leaf(rng.uniform(-2, 2, (2, 3, 3, 3, 3)))
    bt = leaf(rng.uniform(-2, 2, 3))
    op = stride - 1
    r2 = rng.normal(size=T.conv3_transpose(x, wt, bt, stride, 1, op).shape)
    f = lambda: T.tsum(T.mul(T.conv3_transpose(x, wt, bt, stride, 1, op), r2))  # noqa: E731
    assert check_gradients(f, [x, wt, bt]).passed


def test_dense_gradients_match_fd():
    rng = np.random.default_rng(5)
    x, w, b = leaf(rng.uniform(-2, 2, (3, 4))), leaf(rng.uniform(-2, 2, (5, 4))), leaf(rng.uniform(-2, 2, 5))
    r = rng.normal(size=(3, 5))
    assert check_gradients(lambda: T.tsum(T.mul(T.dense(x, w, b), r)), [x, w, b]).passed


def test_ops_are_bitwise_deterministic():
    rng = np.random.default_rng(9)
    x = rng.normal(size=(2, 3, 6, 6, 6)).astype(np.float32)
    w = rng.normal(size=(4, 3, 3, 3, 3)).astype(np.float32)
    b = np.zeros(4, np.float32)
    a1 = T.conv3(Tensor(x), Tensor(w), Tensor(b), 2, 1).data
    a2 = T.conv3(Tensor(x), Tensor(w), Tensor(b), 2, 1).data
    assert a1.tobytes() == a2.tobytes()


def test_float32_is_default_storage():
    assert Tensor([1, 2, 3]).dtype == np.float32
    y = T.conv3(Tensor(np.ones((1, 1, 4, 4, 4), np.float32)), Tensor(np.ones((1, 1, 3, 3, 3), np.float32)), Tensor(np.zeros(1, np.float32)))
    assert y.dtype == np.float32


# ---------------------------------------------------------------- adam

def test_adam_zero_gradient_leaves_params():
    p = {"w": np.array([1.5, -2.0])}
    state = adam_step(p, {"w": np.zeros(2)}, AdamState())
    np.testing.assert_array_equal(p["w"], [1.5, -2.0])
    np.testing.assert_array_equal(state.first_moment["w"], 0)
    np.testing.assert_array_equal(state.second_moment["w"], 0)
    assert state.step_count == 1


def test_adam_first_step_hand_value():
    p = {"w": np.array([0.0])}
    adam_step(p, {"w": np.array([1.0])}, AdamState(), lr=0.001, eps=1e-8)
    # m_hat = 1, v_hat = 1 after bias correction -> step = lr * 1 / (1 + eps)
    assert p["w"][0] == pytest.approx(-0.001 / (1 + 1e-8), rel=1e-12)


def test_adam_constant_gradient_moves_monotonically():
    p = {"w": np.array([0.0])}
    state = AdamState()
    trace = [0.0]
    for _ in range(2):
        adam_step(p, {"w": np.array([0.5])}, state)
        trace.append(p["w"][0])
    # scalar simulation of the same recurrence
    m = v = x = 0.0
    ref = [0.0]
    for t in (1, 2):
        m = 0.9 * m + 0.1 * 0.5
        v = 0.999 * v + 0.001 * 0.25
        x -= 0.001 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
        ref.append(x)
    np.testing.assert_allclose(trace, ref, rtol=1e-12)
    assert trace[0] > trace[1] > trace[2]
    assert state.step_count == 2


def test_adam_rejects_nonfinite_gradient():
    with pytest.raises(NonFiniteGradient, match="bias"):
        adam_step({"bias": np.zeros(2)}, {"bias": np.array([0.0, np.inf])}, AdamState())
