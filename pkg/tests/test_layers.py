import numpy as np
import pytest

from dadjscc.layers import (Conv2d, Conv2dSpec, Linear, Parameter, activation, channel_mean,
                            compute_memory_mb, conv2d, count_params, fully_connected,
                            global_avg_pool, init_params, transposed_conv2d)
from dadjscc.tensor import Tensor, matmul, mul, reduce

from gradcheck import check_gradients, leaf


def conv_oracle(x, w, b, stride, pad):
    cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    xp = np.zeros((cin, h + 2 * pad, wd + 2 * pad))
    xp[:, pad:pad + h, pad:pad + wd] = x
    out = np.zeros((cout, ho, wo))
    for o in range(cout):
        for i in range(ho):
            for j in range(wo):
                acc = b[o]
                for c in range(cin):
                    for u in range(k):
                        for v in range(k):
                            acc += w[o, c, u, v] * xp[c, i * stride + u, j * stride + v]
                out[o, i, j] = acc
    return out


def tconv_oracle(x, w, b, stride, pad, out_pad):
    # direct definition: every input pixel scatters a scaled kernel
    cin, h, wd = x.shape
    _, cout, k, _ = w.shape
    ho = (h - 1) * stride - 2 * pad + k + out_pad
    wo = (wd - 1) * stride - 2 * pad + k + out_pad
    full = np.zeros((cout, (h - 1) * stride + k + out_pad, (wd - 1) * stride + k + out_pad))
    for c in range(cin):
        for i in range(h):
            for j in range(wd):
                for o in range(cout):
                    for u in range(k):
                        for v in range(k):
                            full[o, i * stride + u, j * stride + v] += x[c, i, j] * w[c, o, u, v]
    return full[:, pad:pad + ho, pad:pad + wo] + b[:, None, None]


def test_conv_first_encoder_layer_halves():
    spec = Conv2dSpec(3, 16, 2)
    layer = Conv2d(spec, np.random.default_rng(0))
    assert layer(Tensor(np.zeros((3, 32, 32), np.float32))).shape == (16, 16, 16)


def test_conv_all_ones_center():
    spec = Conv2dSpec(1, 1, 1)
    out = conv2d(Tensor(np.ones((1, 5, 5))), spec, Tensor(np.ones((1, 1, 5, 5))))
    assert out.data[0, 2, 2] == 25.0


@pytest.mark.parametrize("stride", [1, 2])
def test_conv_vs_nested_loop(stride):
    rng = np.random.default_rng(stride)
    x = rng.standard_normal((3, 8, 8))
    w = rng.standard_normal((4, 3, 5, 5))
    b = rng.standard_normal(4)
    out = conv2d(Tensor(x), Conv2dSpec(3, 4, stride), Tensor(w), Tensor(b))
    assert np.max(np.abs(out.data - conv_oracle(x, w, b, stride, 2))) < 1e-10


@pytest.mark.parametrize("stride", [1, 2])
def test_tconv_vs_nested_loop(stride):
    rng = np.random.default_rng(10 + stride)
    x = rng.standard_normal((3, 4, 4))
    w = rng.standard_normal((3, 2, 5, 5))
    b = rng.standard_normal(2)
    spec = Conv2dSpec.transposed_for(3, 2, stride)
    out = transposed_conv2d(Tensor(x), spec, Tensor(w), Tensor(b))
    ref = tconv_oracle(x, w, b, stride, 2, spec.output_padding)
    assert out.shape == ref.shape
    assert np.max(np.abs(out.data - ref)) < 1e-10


def test_tconv_sizes():
    up = Conv2dSpec.transposed_for(32, 16, 2)
    assert up.output_padding == 1
    assert up.output_hw(8, 8) == (16, 16)
    same = Conv2dSpec.transposed_for(32, 32, 1)
    assert same.output_padding == 0
    assert same.output_hw(8, 8) == (8, 8)
    w = Tensor(np.zeros(up.weight_shape()))
    assert transposed_conv2d(Tensor(np.zeros((32, 8, 8))), up, w).shape == (16, 16, 16)


@pytest.mark.parametrize("stride", [1, 2])
def test_adjoint_identity(stride):
    rng = np.random.default_rng(20 + stride)
    fwd = Conv2dSpec(3, 4, stride)
    x = rng.standard_normal((3, 8, 8))
    w = rng.standard_normal(fwd.weight_shape())
    y_shape = (4,) + fwd.output_hw(8, 8)
    y = rng.standard_normal(y_shape)
    # the transposed layer maps 4 -> 3 channels with the same kernel tensor
    tspec = Conv2dSpec.transposed_for(4, 3, stride)
    assert tspec.output_hw(*y_shape[1:]) == (8, 8)
    lhs = np.sum(conv2d(Tensor(x), fwd, Tensor(w)).data * y)
    rhs = np.sum(x * transposed_conv2d(Tensor(y), tspec, Tensor(w)).data)
    assert abs(lhs - rhs) / abs(lhs) < 1e-10


def test_conv_errors():
    spec = Conv2dSpec(3, 4, 1)
    with pytest.raises(ValueError):
        conv2d(Tensor(np.ones((2, 8, 8))), spec, Tensor(np.ones(spec.weight_shape())))
    with pytest.raises(ValueError):
        conv2d(Tensor(np.ones((3, 1, 1))), Conv2dSpec(3, 4, 2, padding=0),
               Tensor(np.ones(spec.weight_shape())))
    with pytest.raises(ValueError):
        Conv2dSpec(3, 4, 3)


def test_fully_connected_examples():
    x = Tensor([1.0, -2.0, 3.0])
    np.testing.assert_array_equal(fully_connected(x, Tensor(np.eye(3)), Tensor(np.zeros(3))).data,
                                  x.data)
    out = fully_connected(Tensor([1.0, 1.0]), Tensor([[1.0], [1.0]]), Tensor([1.0]))
    np.testing.assert_array_equal(out.data, [3.0])
    rng = np.random.default_rng(4)
    xb, w, b = rng.standard_normal((5, 6)), rng.standard_normal((6, 3)), rng.standard_normal(3)
    ref = matmul(Tensor(xb), Tensor(w)).data + b
    np.testing.assert_allclose(fully_connected(Tensor(xb), Tensor(w), Tensor(b)).data, ref,
                               atol=1e-12)
    with pytest.raises(ValueError):
        fully_connected(Tensor(np.ones(4)), Tensor(np.ones((3, 2))))


def test_activations():
    assert activation("sigmoid", Tensor([0.0])).item() == 0.5
    assert activation("prelu", Tensor([-2.0]), Tensor([0.25])).item() == -0.5
    np.testing.assert_array_equal(activation("relu", Tensor([-1.0, 3.0])).data, [0, 3])
    with pytest.raises(ValueError):
        activation("prelu", Tensor([1.0]))


def test_sigmoid_extremes_finite():
    out = activation("sigmoid", Tensor(np.array([-1000.0, 1000.0], np.float32))).data
    assert np.all(np.isfinite(out))
    np.testing.assert_array_equal(out, [0.0, 1.0])


def test_global_avg_pool():
    f = np.full((3, 4, 4), 2.5)
    np.testing.assert_array_equal(global_avg_pool(Tensor(f)).data, [2.5] * 3)
    g = np.zeros((2, 2, 2))
    g[0] = [[0, 2], [4, 6]]
    assert global_avg_pool(Tensor(g)).data[0] == 3.0
    r = np.random.default_rng(0).standard_normal((5, 3, 4))
    ref = [sum(r[c, i, j] for i in range(3) for j in range(4)) / 12 for c in range(5)]
    np.testing.assert_allclose(global_avg_pool(Tensor(r)).data, ref, atol=1e-12)


def test_channel_mean():
    f = np.array([[[1.0]], [[3.0]]])
    np.testing.assert_array_equal(channel_mean(Tensor(f)).data, [[2.0]])
    one = np.random.default_rng(1).standard_normal((1, 3, 3))
    np.testing.assert_array_equal(channel_mean(Tensor(one)).data, one[0])
    r = np.random.default_rng(2).standard_normal((4, 3, 3))
    ref = (r[0] + r[1] + r[2] + r[3]) / 4
    np.testing.assert_allclose(channel_mean(Tensor(r)).data, ref, atol=1e-12)


def test_init_determinism_and_stats():
    spec = Conv2dSpec(32, 32, 1)
    a = init_params(spec, np.random.default_rng(9))
    b = init_params(spec, np.random.default_rng(9))
    assert a.weight.data.tobytes() == b.weight.data.tobytes()
    assert np.all(a.bias.data == 0)
    w = a.weight.data.astype(np.float64).reshape(-1)[:10_000]
    limit = np.sqrt(6 / (32 * 25 + 32 * 25))
    assert np.abs(w).max() <= limit
    sigma = limit / np.sqrt(3)
    assert abs(w.mean()) < 3 * sigma / np.sqrt(w.size)
    fc = init_params((4, 3), np.random.default_rng(0))
    assert isinstance(fc, Linear) and fc.weight.shape == (4, 3)


def test_prelu_slope_init():
    from dadjscc.layers import PReLU
    assert PReLU().slope.data[0] == np.float32(0.25)


def test_count_params_additive_and_value_invariant():
    layer = Conv2d(Conv2dSpec(3, 16, 2), np.random.default_rng(0))
    assert count_params(layer) == 16 * 3 * 25 + 16
    layer.weight.data = layer.weight.data * 0 + 7
    assert count_params(layer) == 16 * 3 * 25 + 16
    fc = Linear(10, 4, np.random.default_rng(0))
    assert count_params([*layer.parameters(), *fc.parameters()]) == count_params(layer) + 44
    assert compute_memory_mb(layer) == count_params(layer) * 4 / 2**20


def _weighted(out_fn, rng, shape):
    w = Tensor(rng.standard_normal(shape))
    return lambda *xs: reduce("sum", mul(out_fn(*xs), w))


@pytest.mark.parametrize("stride", [1, 2])
def test_conv_gradcheck(stride):
    rng = np.random.default_rng(30 + stride)
    spec = Conv2dSpec(2, 3, stride)
    for _ in range(20):
        x, w, b = leaf(rng, 2, 2, 6, 6), leaf(rng, *spec.weight_shape()), leaf(rng, 3)
        out_shape = (2, 3) + spec.output_hw(6, 6)
        fn = _weighted(lambda x, w, b: conv2d(x, spec, w, b), rng, out_shape)
        check_gradients(fn, [x, w, b], max_elems=12, rng=rng)


@pytest.mark.parametrize("stride", [1, 2])
def test_tconv_gradcheck(stride):
    rng = np.random.default_rng(40 + stride)
    spec = Conv2dSpec.transposed_for(2, 3, stride)
    for _ in range(20):
        x, w, b = leaf(rng, 2, 2, 3, 3), leaf(rng, *spec.weight_shape()), leaf(rng, 3)
        out_shape = (2, 3) + spec.output_hw(3, 3)
        fn = _weighted(lambda x, w, b: transposed_conv2d(x, spec, w, b), rng, out_shape)
        check_gradients(fn, [x, w, b], max_elems=12, rng=rng)


def test_fc_and_activation_gradcheck():
    rng = np.random.default_rng(50)
    for _ in range(20):
        x, w, b = leaf(rng, 4, 5), leaf(rng, 5, 3), leaf(rng, 3)
        check_gradients(_weighted(fully_connected, rng, (4, 3)), [x, w, b])
        x = leaf(rng, 3, 4, 4)
        x.data += np.sign(x.data) * 0.01
        a = leaf(rng, 1)
        check_gradients(_weighted(lambda x, a: activation("prelu", x, a), rng, x.shape), [x, a])
        check_gradients(_weighted(lambda x: activation("sigmoid", x), rng, x.shape), [x])
        check_gradients(_weighted(lambda x: activation("relu", x), rng, x.shape), [x])
        check_gradients(_weighted(global_avg_pool, rng, (3,)), [x])
        check_gradients(_weighted(channel_mean, rng, (4, 4)), [x])


def test_parameter_has_grad_slot():
    p = Parameter(np.zeros(3), name="w")
    assert p.requires_grad and p.grad is None and p.name == "w"
