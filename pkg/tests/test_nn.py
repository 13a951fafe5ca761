import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from spiopt import nn
from spiopt.nn import GradientError, ParameterSet, ShapeError, Tensor, serialize

from gradcheck import Composite, compare, numeric_grad


def naive_conv2d(x, w, pad):
    b, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.zeros((b, c, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad : pad + h, pad : pad + wd] = x
    ho, wo = h + 2 * pad - k + 1, wd + 2 * pad - k + 1
    out = np.zeros((b, o, ho, wo))
    for n in range(b):
        for oc in range(o):
            for i in range(ho):
                for j in range(wo):
                    out[n, oc, i, j] = np.sum(xp[n, :, i : i + k, j : j + k] * w[oc])
    return out


def naive_conv_transpose2d(x, w, stride, pad):
    """Scatter every input pixel times the kernel into the output grid."""
    b, c, h, wd = x.shape
    _, o, k, _ = w.shape
    full = np.zeros((b, o, (h - 1) * stride + k, (wd - 1) * stride + k))
    for n in range(b):
        for ic in range(c):
            for i in range(h):
                for j in range(wd):
                    full[n, :, i * stride : i * stride + k, j * stride : j * stride + k] += x[n, ic, i, j] * w[ic]
    return full[:, :, pad : full.shape[2] - pad, pad : full.shape[3] - pad]


def test_relu_values():
    np.testing.assert_array_equal(nn.relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])


def test_sigmoid_of_zero_is_exactly_half():
    assert nn.sigmoid(Tensor([0.0, 0.0])).data.tolist() == [0.5, 0.5]


def test_sigmoid_saturates_without_overflow():
    s = nn.sigmoid(Tensor([-1000.0, 1000.0])).data
    assert np.all(np.isfinite(s))
    assert 0.0 < s[0] < 1e-12 and 1 - 1e-12 < s[1] < 1.0


@pytest.mark.parametrize("size_in, kernel, stride, pad", [(7, 4, 2, 1), (14, 4, 2, 1), (3, 3, 2, 0)])
def test_transposed_conv_output_size(size_in, kernel, stride, pad):
    expected = (size_in - 1) * stride - 2 * pad + kernel
    x = Tensor(np.ones((1, 1, size_in, size_in)))
    w = Tensor(np.ones((1, 1, kernel, kernel)))
    assert nn.conv_transpose2d(x, w, stride=stride, padding=pad).shape == (1, 1, expected, expected)


def test_transposed_conv_7_to_14():
    y = nn.conv_transpose2d(Tensor(np.zeros((1, 2, 7, 7))), Tensor(np.zeros((2, 3, 4, 4))))
    assert y.shape[2:] == (14, 14)


def test_conv2d_matches_loops():
    rng = np.random.default_rng(3)
    x, w = rng.normal(size=(2, 3, 6, 5)), rng.normal(size=(4, 3, 3, 3))
    for pad in (0, 1, 2):
        np.testing.assert_allclose(nn.conv2d(Tensor(x), Tensor(w), padding=pad).data, naive_conv2d(x, w, pad), atol=1e-12)


def test_conv_transpose2d_matches_scatter_loops():
    rng = np.random.default_rng(4)
    x, w = rng.normal(size=(2, 3, 5, 4)), rng.normal(size=(3, 2, 4, 4))
    got = nn.conv_transpose2d(Tensor(x), Tensor(w), stride=2, padding=1).data
    np.testing.assert_allclose(got, naive_conv_transpose2d(x, w, 2, 1), atol=1e-12)


def test_max_pool_values():
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    np.testing.assert_array_equal(nn.max_pool2d(Tensor(x)).data[0, 0], [[5, 7], [13, 15]])


def test_softmax_cross_entropy_matches_direct_formula():
    rng = np.random.default_rng(5)
    z = rng.normal(size=(4, 10))
    labels = np.array([0, 3, 9, 2])
    p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    expected = -np.mean(np.log(p[np.arange(4), labels]))
    assert float(nn.softmax_cross_entropy(Tensor(z), labels).data) == pytest.approx(expected, rel=1e-12)


@pytest.mark.parametrize(
    "call",
    [
        lambda: nn.dense(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5)))),
        lambda: nn.mul(Tensor(np.ones(3)), Tensor(np.ones(4))),
        lambda: nn.conv2d(Tensor(np.ones((1, 2, 5, 5))), Tensor(np.ones((1, 3, 3, 3)))),
        lambda: nn.mse(Tensor(np.ones(3)), Tensor(np.ones(2))),
        lambda: nn.reshape(Tensor(np.ones(6)), (4,)),
    ],
)
def test_shape_mismatch_names_primitive(call):
    with pytest.raises(ShapeError, match=r"\w+: incompatible shapes|reshape"):
        call()


def test_mse_of_equal_inputs_has_zero_gradient():
    params = ParameterSet()
    x = params.add("x", np.random.default_rng(0).normal(size=(3, 4)))
    loss = nn.mse(x, x)
    nn.backward(loss, params.tensors())
    assert float(loss.data) == 0.0
    np.testing.assert_array_equal(x.grad, 0.0)


def test_bilinear_gradient_is_other_factor():
    rng = np.random.default_rng(1)
    params = ParameterSet()
    w = params.add("w", rng.normal(size=5))
    y = rng.normal(size=5)
    nn.backward(nn.sum_all(nn.mul(w, Tensor(y))), params.tensors())
    np.testing.assert_array_equal(w.grad, y)


def test_unreachable_parameter_gets_exact_zero():
    params = ParameterSet()
    a = params.add("a", [1.0, 2.0])
    b = params.add("b", [3.0])
    nn.backward(nn.sum_all(nn.mul(a, a)), params.tensors())
    np.testing.assert_array_equal(a.grad, [2.0, 4.0])
    np.testing.assert_array_equal(b.grad, [0.0])


def test_backward_twice_is_an_error():
    params = ParameterSet()
    a = params.add("a", [1.0, 2.0])
    loss = nn.sum_all(a)
    nn.backward(loss, params.tensors())
    with pytest.raises(GradientError):
        nn.backward(loss, params.tensors())


def test_second_graph_does_not_silently_accumulate():
    params = ParameterSet()
    a = params.add("a", [1.0, 2.0])
    nn.backward(nn.sum_all(a), params.tensors())
    with pytest.raises(GradientError, match="already populated"):
        nn.backward(nn.sum_all(a), params.tensors())
    nn.backward(nn.sum_all(a), params.tensors(), accumulate=True)
    np.testing.assert_array_equal(a.grad, [2.0, 2.0])


def test_backward_requires_scalar():
    params = ParameterSet()
    a = params.add("a", [1.0, 2.0])
    with pytest.raises(GradientError):
        nn.backward(nn.relu(a))


def test_record_is_topological():
    params = ParameterSet()
    w = params.add("w", np.ones((3, 2)))
    x = Tensor(np.ones((4, 2)))
    loss = nn.mse(nn.sigmoid(nn.dense(x, w)), Tensor(np.zeros((4, 3))))
    order = nn.record(loss)
    pos = {id(t): i for i, t in enumerate(order)}
    assert order[-1] is loss
    for t in order:
        for p in t._parents:
            if p.requires_grad:
                assert pos[id(p)] < pos[id(t)]


@pytest.mark.parametrize("seed", range(5))
def test_gradient_check_random_composites(seed):
    assert Composite(seed).check() < 1e-4


def test_gradient_check_through_channel_weighting():
    """Finite differences through relu/sigmoid excitation and an elementwise weighting."""
    rng = np.random.default_rng(11)
    params = ParameterSet()
    a1 = params.add("a1", rng.normal(size=(2, 6)))
    a2 = params.add("a2", rng.normal(size=(6, 2)))
    dec = params.add("dec", rng.normal(size=(3, 6)))
    y = Tensor(rng.normal(size=(4, 6)))
    target = rng.normal(size=(4, 3))

    def loss():
        w = nn.sigmoid(nn.dense(nn.relu(nn.dense(y, a1)), a2))
        return nn.mse(nn.dense(nn.mul(y, w), dec), Tensor(target))

    nn.backward(loss(), params.tensors())
    for _, t in params.items():
        assert compare(t.grad, numeric_grad(lambda: float(loss().data), t)) < 1e-4


# ---------------------------------------------------------------------- Adam


def test_adam_zero_gradient_leaves_parameters():
    params = ParameterSet()
    p = params.add("p", [0.3, -1.2])
    p.grad = np.zeros(2)
    nn.adam_step(params, 0.1)
    np.testing.assert_array_equal(p.data, [0.3, -1.2])
    assert params.step == 1 and p.grad is None


def test_adam_first_step_by_hand():
    g = np.array([0.5, -2.0, 1e-3])
    lr = 0.01
    # t = 1: m_hat = g, v_hat = g^2, update = lr * g / (|g| + eps)
    expected = -lr * g / (np.abs(g) + 1e-8)
    params = ParameterSet()
    p = params.add("p", np.zeros(3))
    p.grad = g.copy()
    nn.adam_step(params, lr)
    np.testing.assert_allclose(p.data, expected, rtol=1e-12)
    np.testing.assert_allclose(p.data, -lr * np.sign(g), rtol=1e-5)


def test_adam_rejects_non_finite_gradient():
    params = ParameterSet()
    params.add("good", [1.0])
    bad = params.add("bad", [1.0])
    bad.grad = np.array([np.nan])
    with pytest.raises(FloatingPointError, match="bad"):
        nn.adam_step(params, 0.1)


def test_training_is_bit_reproducible():
    def run():
        rng = np.random.default_rng(42)
        params = ParameterSet()
        w = params.add("w", nn.dense_init(rng, 3, 5))
        b = params.add("b", np.zeros(3))
        x = rng.normal(size=(8, 5))
        labels = rng.integers(0, 3, size=8)
        for _ in range(5):
            nn.backward(nn.softmax_cross_entropy(nn.dense(Tensor(x), w, b), labels), params.tensors())
            nn.adam_step(params, 0.05)
        return params.arrays()

    a, b = run(), run()
    for k in a:
        assert a[k].tobytes() == b[k].tobytes()


def test_glorot_bounds():
    rng = np.random.default_rng(0)
    w = nn.dense_init(rng, 30, 50)
    assert np.abs(w).max() <= np.sqrt(6 / 80)


# ------------------------------------------------------------- serialization


@settings(max_examples=30, deadline=None)
@given(
    st.dictionaries(
        st.text(min_size=1, max_size=12),
        arrays(np.float64, st.lists(st.integers(0, 4), min_size=0, max_size=3).map(tuple), elements=st.floats(allow_nan=False, allow_infinity=False)),
        max_size=4,
    )
)
def test_container_round_trip(arrs):
    back = serialize.loads(serialize.dumps(arrs))
    assert list(back) == list(arrs)
    for k in arrs:
        assert back[k].shape == arrs[k].shape
        assert back[k].tobytes() == np.ascontiguousarray(arrs[k]).tobytes()


def test_container_layout_is_documented_byte_for_byte():
    buf = serialize.dumps({"ab": np.array([[1.0, 2.0]])})
    expected = (
        b"SPIOPT1\0"
        + (2).to_bytes(8, "little")
        + b"ab"
        + (2).to_bytes(8, "little")
        + (1).to_bytes(8, "little")
        + (2).to_bytes(8, "little")
        + np.array([1.0, 2.0], dtype="<f8").tobytes()
    )
    assert buf == expected


def test_container_rejects_bad_magic_and_truncation():
    with pytest.raises(serialize.ContainerError):
        serialize.loads(b"NOTMAGIC")
    buf = serialize.dumps({"w": np.ones(4)})
    with pytest.raises(serialize.ContainerError):
        serialize.loads(buf[:-3])
