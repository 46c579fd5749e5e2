import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from canet import ops
from canet.nn import BNBank
from canet.tensor import Tape, Tensor, precision


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def double():
    with precision(np.float64):
        yield


def T(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def vjp(fn, x, g):
    """x^T-side of the adjoint identity: gradient of <fn(x), g> wrt x."""
    x = T(x, grad=True)
    with Tape() as tape:
        loss = ops.sum(ops.mul(fn(x), T(g)))
    tape.backward(loss, [x])
    return x.grad


# -- conv2d -------------------------------------------------------------------


def test_conv2d_scalar_scaling():
    out = ops.conv2d(T(np.ones((1, 1, 3, 3))), T(np.full((1, 1, 1, 1), 2.0)))
    np.testing.assert_array_equal(out.data, np.full((1, 1, 3, 3), 2.0))


def test_conv2d_identity_kernel(rng):
    x = rng.standard_normal((1, 1, 5, 5))
    k = np.zeros((1, 1, 3, 3))
    k[0, 0, 1, 1] = 1
    np.testing.assert_array_equal(ops.conv2d(T(x), T(k), padding=1).data, x)


def test_conv2d_matches_nested_loops(rng):
    x, w, b = rng.standard_normal((2, 3, 6, 6)), rng.standard_normal((4, 3, 3, 3)), rng.standard_normal(4)
    out = ops.conv2d(T(x), T(w), T(b), stride=2, padding=1)
    assert out.shape == (2, 4, 3, 3)
    assert oracles.rel_err(out.data, oracles.conv2d(x, w, b, 2, 1)) < 1e-12


def test_conv2d_errors():
    with pytest.raises(ValueError, match="channels"):
        ops.conv2d(T(np.ones((1, 2, 4, 4))), T(np.ones((1, 3, 3, 3))))
    with pytest.raises(ValueError, match="non-positive"):
        ops.conv2d(T(np.ones((1, 1, 2, 2))), T(np.ones((1, 1, 3, 3))))


def test_conv2d_adjoint_identity(rng):
    x, w = rng.standard_normal((2, 3, 7, 7)), rng.standard_normal((4, 3, 3, 3))
    f = lambda t: ops.conv2d(t, T(w), stride=2, padding=1)  # noqa: E731
    y = rng.standard_normal(f(T(x)).shape)
    lhs = np.vdot(f(T(x)).data, y)
    rhs = np.vdot(x, vjp(f, x, y))
    assert abs(lhs - rhs) <= 1e-10 * abs(lhs)


def test_depthwise_conv_matches_grouped_loops(rng):
    x, w = rng.standard_normal((2, 3, 5, 5)), rng.standard_normal((3, 1, 3, 3))
    out = ops.depthwise_conv2d(T(x), T(w), padding=1)
    for ch in range(3):
        ref = oracles.conv2d(x[:, ch : ch + 1], w[ch : ch + 1], None, 1, 1)
        assert oracles.rel_err(out.data[:, ch : ch + 1], ref) < 1e-12


# -- transposed conv -----------------------------------------------------------


def test_conv_transpose_block_pattern():
    x = T(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
    out = ops.conv_transpose2d(x, T(np.ones((1, 1, 2, 2))), stride=2)
    expected = np.kron([[1, 2], [3, 4]], np.ones((2, 2)))
    np.testing.assert_array_equal(out.data[0, 0], expected)


def test_conv_transpose_zero_input(rng):
    out = ops.conv_transpose2d(T(np.zeros((1, 2, 3, 3))), T(rng.standard_normal((2, 3, 3, 3))), stride=2)
    assert out.shape == (1, 3, 7, 7)
    assert not out.data.any()


def test_conv_transpose_matches_scatter_oracle(rng):
    x, w = rng.standard_normal((2, 3, 3, 4)), rng.standard_normal((3, 2, 3, 3))
    out = ops.conv_transpose2d(T(x), T(w), stride=2)
    assert oracles.rel_err(out.data, oracles.conv_transpose2d(x, w, 2)) < 1e-12


@pytest.mark.parametrize("k,stride", [(2, 2), (3, 2), (3, 1)])
def test_conv_transpose_is_adjoint_of_conv(rng, k, stride):
    # <conv(x), y> == <x, conv^T(y)> with the kernel read as (c_out, c_in) for conv
    w = rng.standard_normal((4, 3, k, k))
    x = rng.standard_normal((2, 3, 2 * stride + k, 2 * stride + k))
    cx = ops.conv2d(T(x), T(w), stride=stride).data
    y = rng.standard_normal(cx.shape)
    cty = ops.conv_transpose2d(T(y), T(w), stride=stride).data
    assert cty.shape == x.shape
    lhs, rhs = np.vdot(cx, y), np.vdot(x, cty)
    assert abs(lhs - rhs) <= 1e-10 * abs(lhs)


def test_conv_transpose_channel_mismatch():
    with pytest.raises(ValueError, match="channels"):
        ops.conv_transpose2d(T(np.ones((1, 2, 2, 2))), T(np.ones((3, 1, 2, 2))), 2)


# -- pooling -----------------------------------------------------------------------


def test_pool_trivial():
    x = T(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
    assert ops.maxpool2d(x, 2, 2).data.item() == 4.0
    assert ops.avgpool2d(x, 2, 2).data.item() == 2.5


@pytest.mark.parametrize("kind", ["max", "avg"])
def test_pool_matches_window_scan(rng, kind):
    x = rng.standard_normal((1, 2, 6, 6))
    fn = ops.maxpool2d if kind == "max" else ops.avgpool2d
    out = fn(T(x), 3, 1, 1)
    assert oracles.rel_err(out.data, oracles.pool2d(x, 3, 1, 1, kind)) < 1e-12


def test_maxpool_gradient_goes_to_first_maximum():
    x = T(np.array([[5.0, 5.0], [5.0, 1.0]]).reshape(1, 1, 2, 2), grad=True)
    with Tape() as tape:
        loss = ops.sum(ops.maxpool2d(x, 2, 2))
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad[0, 0], [[1, 0], [0, 0]])


def test_avgpool_gradient_is_uniform():
    x = T(np.arange(4.0).reshape(1, 1, 2, 2), grad=True)
    with Tape() as tape:
        loss = ops.sum(ops.avgpool2d(x, 2, 2))
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, 0.25)


def test_avgpool_adjoint_identity(rng):
    x = rng.standard_normal((2, 3, 6, 6))
    f = lambda t: ops.avgpool2d(t, 3, 2, 1)  # noqa: E731
    y = rng.standard_normal(f(T(x)).shape)
    lhs, rhs = np.vdot(f(T(x)).data, y), np.vdot(x, vjp(f, x, y))
    assert abs(lhs - rhs) <= 1e-10 * abs(lhs)


def test_pool_non_positive_output():
    with pytest.raises(ValueError):
        ops.maxpool2d(T(np.ones((1, 1, 2, 2))), 3, 1)


def test_global_pools(rng):
    x = rng.standard_normal((2, 3, 4, 5))
    np.testing.assert_allclose(ops.global_avg_pool(T(x)).data[..., 0, 0], x.mean(axis=(2, 3)))
    np.testing.assert_array_equal(ops.global_max_pool(T(x)).data[..., 0, 0], x.max(axis=(2, 3)))


# -- channel reductions and concat --------------------------------------------


def test_channel_reduce_duplicate_and_pair():
    a = np.arange(4.0).reshape(1, 1, 2, 2)
    dup = T(np.concatenate([a, a], axis=1))
    np.testing.assert_array_equal(ops.channel_reduce_max(dup).data, a)
    np.testing.assert_array_equal(ops.channel_reduce_mean(dup).data, a)
    pair = T(np.array([1.0, 3.0]).reshape(1, 2, 1, 1))
    assert ops.channel_reduce_max(pair).data.item() == 3.0
    assert ops.channel_reduce_mean(pair).data.item() == 2.0


def test_channel_reduce_matches_loops(rng):
    x = rng.standard_normal((2, 5, 4, 4))
    assert oracles.rel_err(ops.channel_reduce_max(T(x)).data, oracles.channel_reduce(x, "max")) < 1e-12
    assert oracles.rel_err(ops.channel_reduce_mean(T(x)).data, oracles.channel_reduce(x, "mean")) < 1e-12


def test_concat_shapes_and_identity(rng):
    h, w = 3, 4
    parts = [T(rng.standard_normal((1, c, h, w))) for c in (2, 1, 1)]
    assert ops.concat_channels(parts).shape == (1, 4, h, w)
    single = parts[0]
    assert np.array_equal(ops.concat_channels([single]).data, single.data)
    with pytest.raises(ValueError, match="mismatch"):
        ops.concat_channels([T(np.ones((1, 1, 2, 2))), T(np.ones((1, 1, 3, 2)))])


def test_concat_backward_splits_gradient(rng):
    a, b = T(rng.standard_normal((1, 2, 2, 2)), True), T(rng.standard_normal((1, 3, 2, 2)), True)
    g = rng.standard_normal((1, 5, 2, 2))
    with Tape() as tape:
        loss = ops.sum(ops.mul(ops.concat_channels([a, b]), T(g)))
    tape.backward(loss)
    np.testing.assert_array_equal(a.grad, g[:, :2])
    np.testing.assert_array_equal(b.grad, g[:, 2:])


# -- batch norm ----------------------------------------------------------------


def test_batchnorm_constant_input_gives_beta():
    bank = BNBank(2, ["a"])
    bank.entry("a").beta.data[:] = [0.5, -1.5]
    x = np.empty((2, 2, 3, 3))
    x[:, 0], x[:, 1] = 4.0, -7.0
    out = ops.batchnorm2d(T(x), bank, "a", "train")
    np.testing.assert_allclose(out.data[:, 0], 0.5)
    np.testing.assert_allclose(out.data[:, 1], -1.5)


def test_batchnorm_standardized_input_is_near_identity(rng):
    x = rng.standard_normal((4, 3, 5, 5))
    x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
    out = ops.batchnorm2d(T(x), BNBank(3, ["a"]), "a", "train").data
    np.testing.assert_allclose(out, x / math.sqrt(1 + 1e-5), rtol=1e-12)


def test_batchnorm_routes_by_dataset_id_by_hand():
    bank = BNBank(1, ["a", "b"])
    ea, eb = bank.entry("a"), bank.entry("b")
    ea.running_mean, ea.running_var = np.array([1.0]), np.array([4.0])
    eb.running_mean, eb.running_var = np.array([-2.0]), np.array([0.25])
    eb.gamma.data[:] = 2.0
    eb.beta.data[:] = 1.0
    x = np.array([[1.0, 2.0], [3.0, 5.0]]).reshape(1, 1, 2, 2)
    out_a = ops.batchnorm2d(T(x), bank, "a", "eval").data
    out_b = ops.batchnorm2d(T(x), bank, "b", "eval").data
    np.testing.assert_allclose(out_a[0, 0], (x[0, 0] - 1) / math.sqrt(4 + 1e-5))
    np.testing.assert_allclose(out_b[0, 0], 2 * (x[0, 0] + 2) / math.sqrt(0.25 + 1e-5) + 1)
    assert np.array_equal(ops.batchnorm2d(T(x), bank, "a", "eval").data, out_a)


def test_batchnorm_running_stats_update():
    bank = BNBank(1, ["a"])
    x = np.array([1.0, 2.0, 3.0, 6.0]).reshape(1, 1, 2, 2)
    ops.batchnorm2d(T(x), bank, "a", "train")
    e = bank.entry("a")
    np.testing.assert_allclose(e.running_mean, 0.1 * 3.0)
    np.testing.assert_allclose(e.running_var, 0.9 + 0.1 * np.var(x, ddof=1))


def test_batchnorm_errors():
    bank = BNBank(1, ["a"])
    with pytest.raises(KeyError):
        ops.batchnorm2d(T(np.ones((1, 1, 2, 2))), bank, "zzz", "train")
    with pytest.raises(RuntimeError, match="running statistics"):
        ops.batchnorm2d(T(np.ones((1, 1, 2, 2))), bank, "a", "eval")
    with pytest.raises(ValueError, match="at least 2"):
        ops.batchnorm2d(T(np.ones((1, 1, 1, 1))), bank, "a", "train")


# -- elementwise -----------------------------------------------------------------


def test_elementwise_trivial():
    assert ops.sigmoid(T(np.zeros((1, 1, 1, 1)))).data.item() == 0.5
    x = np.linspace(0.1, 3, 6).reshape(1, 1, 2, 3)
    assert not ops.relu(T(-x)).data.any()


def test_elementwise_match_scalar_loops(rng):
    x = rng.standard_normal((2, 3, 4, 4)) * 4
    sig = ops.sigmoid(T(x)).data
    relu6 = ops.relu6(T(x + 4)).data
    for idx in np.ndindex(x.shape):
        v = x[idx]
        assert abs(sig[idx] - oracles.sigmoid(v)) < 1e-15
        assert relu6[idx] == min(max(v + 4, 0.0), 6.0)


def test_sigmoid_extreme_inputs_stay_open_interval():
    for dt in (np.float32, np.float64):
        with precision(dt):
            s = ops.sigmoid(Tensor(np.array([-1e4, -50, 50, 1e4]).reshape(1, 1, 1, 4))).data
        assert (s > 0).all() and (s < 1).all()


def test_linear_trivial_and_oracle(rng):
    x = rng.standard_normal((3, 8))
    np.testing.assert_array_equal(ops.linear(T(x), T(np.eye(8)), T(np.zeros(8))).data, x)
    b = rng.standard_normal(5)
    np.testing.assert_array_equal(ops.linear(T(x), T(np.zeros((5, 8))), T(b)).data, np.tile(b, (3, 1)))
    w = rng.standard_normal((5, 8))
    assert oracles.rel_err(ops.linear(T(x), T(w), T(b)).data, oracles.linear(x, w, b)) < 1e-12
    with pytest.raises(ValueError, match="features"):
        ops.linear(T(x), T(np.ones((2, 7))))


# -- loss ----------------------------------------------------------------------------


def test_cross_entropy_trivial():
    t = np.array([[[0, 1], [1, 0]]])
    loss = ops.softmax_cross_entropy(T(np.zeros((1, 2, 2, 2))), t).data.item()
    assert abs(loss - math.log(2)) < 1e-15
    z = np.zeros((1, 2, 2, 2))
    z[0, 1][t[0] == 1] = 50
    z[0, 0][t[0] == 0] = 50
    assert ops.softmax_cross_entropy(T(z), t).data.item() < 1e-6


def test_cross_entropy_matches_oracle(rng):
    z = rng.standard_normal((2, 2, 3, 3)) * 3
    t = rng.integers(0, 2, (2, 3, 3))
    assert oracles.rel_err(ops.softmax_cross_entropy(T(z), t).data, oracles.softmax_cross_entropy(z, t)) < 1e-12


def test_cross_entropy_rejects_bad_targets():
    with pytest.raises(ValueError, match="0 or 1"):
        ops.softmax_cross_entropy(T(np.zeros((1, 2, 1, 1))), np.array([[[2]]]))
    with pytest.raises(ValueError, match="2 channels"):
        ops.softmax_cross_entropy(T(np.zeros((1, 3, 1, 1))), np.array([[[0]]]))


# -- properties ----------------------------------------------------------------------

finite = st.floats(-1e3, 1e3, allow_nan=False)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (2, 3, 4, 4), elements=finite))
def test_activation_ranges(x):
    s = ops.sigmoid(T(x)).data
    assert ((s > 0) & (s < 1)).all()
    assert (ops.relu(T(x)).data >= 0).all()
    r6 = ops.relu6(T(x)).data
    assert ((r6 >= 0) & (r6 <= 6)).all()


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (2, 2, 3, 3), elements=st.floats(-60, 60)))
def test_softmax_pair_sums_to_one(z):
    # the loss gradient times m is softmax minus one-hot; adding the one-hot back gives the softmax
    x = T(z, grad=True)
    t = np.zeros((2, 3, 3), int)
    with Tape() as tape:
        loss = ops.softmax_cross_entropy(x, t)
    tape.backward(loss)
    probs = x.grad * t.size
    probs[:, 0] += 1
    assert np.abs(probs.sum(axis=1) - 1).max() < 1e-6
    assert (probs >= 0).all()


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_conv_determinism(seed):
    r = np.random.default_rng(seed)
    x, w = T(r.standard_normal((1, 2, 5, 5))), T(r.standard_normal((3, 2, 3, 3)))
    assert ops.conv2d(x, w, padding=1).data.tobytes() == ops.conv2d(x, w, padding=1).data.tobytes()
