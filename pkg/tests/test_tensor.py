import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gradcheck import check_op
from specsep.tensor import (
    NonFiniteError,
    Tensor,
    batch_norm,
    bn_relu_conv,
    concat,
    concat_channels,
    conv2d,
    matmul,
    no_grad,
    pad_reflect_end,
    pool2d,
    relu,
    upsample2d,
)


def naive_conv(x, k, b, stride, pad):
    B, C, H, W = x.shape
    Co, _, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    out = np.zeros((B, Co, Ho, Wo))
    for n in range(B):
        for o in range(Co):
            for i in range(Ho):
                for j in range(Wo):
                    acc = b[o]
                    for c in range(C):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[n, c, i * stride + u, j * stride + v] * k[o, c, u, v]
                    out[n, o, i, j] = acc
    return out


# -- conv2d --------------------------------------------------------------------

def test_conv_scalar_product():
    y = conv2d(Tensor([[[[2.0]]]]), Tensor([[[[3.0]]]]), Tensor([0.0]))
    assert y.data.item() == 6.0


def test_conv_sum_of_entries():
    y = conv2d(Tensor([[[[1.0, 2.0], [3.0, 4.0]]]]), Tensor(np.ones((1, 1, 2, 2))), Tensor([0.0]))
    assert y.data.tolist() == [[[[10.0]]]]


@pytest.mark.parametrize("stride,pad,ksize", [(1, 0, 3), (1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 2), (1, 2, 5)])
def test_conv_matches_naive_oracle(stride, pad, ksize):
    rng = np.random.default_rng(stride * 10 + pad + ksize)
    x = rng.standard_normal((2, 3, 8, 8))
    k = rng.standard_normal((4, 3, ksize, ksize))
    b = rng.standard_normal(4)
    y = conv2d(Tensor(x), Tensor(k), Tensor(b), stride=stride, padding=pad)
    np.testing.assert_allclose(y.data, naive_conv(x, k, b, stride, pad), rtol=0, atol=1e-12)


def test_conv_shape_mismatch_names_shapes():
    with pytest.raises(ValueError, match=r"\(1, 3, 4, 4\).*\(2, 2, 3, 3\)|\(2, 2, 3, 3\).*\(1, 3, 4, 4\)"):
        conv2d(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((2, 2, 3, 3))))


def test_conv_kernel_larger_than_input():
    with pytest.raises(ValueError):
        conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))


# -- relu / pooling ------------------------------------------------------------

def test_relu_values_and_subgradient():
    x = Tensor([-1.0, 0.0, 2.0], requires_grad=True)
    y = relu(x)
    assert y.data.tolist() == [0.0, 0.0, 2.0]
    y.sum().backward()
    assert x.grad.tolist() == [0.0, 0.0, 1.0]
    assert not relu(Tensor(-np.ones((3, 3)))).data.any()


def test_pool_examples():
    x = Tensor([[[[1.0, 2.0], [3.0, 4.0]]]])
    assert pool2d(x, "max", 2).data.item() == 4.0
    assert pool2d(x, "average", 2).data.item() == 2.5


def test_max_pool_tie_goes_to_first():
    x = Tensor([[[[5.0, 5.0], [0.0, 0.0]]]], requires_grad=True)
    pool2d(x, "max", 2).sum().backward()
    assert x.grad[0, 0].tolist() == [[1.0, 0.0], [0.0, 0.0]]


def test_pool_window_too_large():
    with pytest.raises(ValueError):
        pool2d(Tensor(np.zeros((1, 1, 1, 4))), "max", 2)


# -- batch norm ----------------------------------------------------------------

def test_batch_norm_matches_two_pass_oracle():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((4, 3, 5, 6)) * 3 + 7
    gamma, beta = rng.standard_normal(3), rng.standard_normal(3)
    rm, rv = np.zeros(3), np.ones(3)
    y = batch_norm(Tensor(x), Tensor(gamma), Tensor(beta), rm, rv, training=True)
    mean = x.mean(axis=(0, 2, 3))
    var = ((x - mean[None, :, None, None]) ** 2).mean(axis=(0, 2, 3))
    ref = (x - mean[None, :, None, None]) / np.sqrt(var[None, :, None, None] + 1e-5)
    ref = ref * gamma[None, :, None, None] + beta[None, :, None, None]
    np.testing.assert_allclose(y.data, ref, rtol=0, atol=1e-12)
    n = x.size / 3
    np.testing.assert_allclose(rm, 0.1 * mean, atol=1e-12)
    np.testing.assert_allclose(rv, 0.9 + 0.1 * var * n / (n - 1), atol=1e-12)


def test_batch_norm_constant_channel_and_zero_gamma():
    x = Tensor(np.full((2, 1, 3, 3), 4.0))
    y = batch_norm(x, Tensor([1.0]), Tensor([0.0]), np.zeros(1), np.ones(1), training=True)
    assert np.all(y.data == 0.0)
    rng = np.random.default_rng(0)
    y = batch_norm(Tensor(rng.standard_normal((2, 2, 3, 3))), Tensor([0.0, 0.0]), Tensor([0.5, -1.0]),
                   np.zeros(2), np.ones(2), training=True)
    assert np.all(y.data[:, 0] == 0.5) and np.all(y.data[:, 1] == -1.0)


def test_batch_norm_inference_uses_running_stats():
    x = np.arange(8.0).reshape(1, 2, 2, 2)
    y = batch_norm(Tensor(x), Tensor([1.0, 2.0]), Tensor([0.0, 1.0]), np.array([1.0, 2.0]), np.array([4.0, 9.0]), training=False)
    ref = (x - np.array([1.0, 2.0])[None, :, None, None]) / np.sqrt(np.array([4.0, 9.0]) + 1e-5)[None, :, None, None]
    ref = ref * np.array([1.0, 2.0])[None, :, None, None] + np.array([0.0, 1.0])[None, :, None, None]
    np.testing.assert_allclose(y.data, ref, atol=1e-12)


def test_fused_bn_relu_conv_matches_chain():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((2, 3, 6, 5)) + 1.0
    g, b = rng.standard_normal(3), rng.standard_normal(3)
    k, kb = rng.standard_normal((4, 3, 3, 3)), rng.standard_normal(4)
    chain = conv2d(relu(batch_norm(Tensor(x), Tensor(g), Tensor(b), np.zeros(3), np.ones(3), True)), Tensor(k), Tensor(kb), padding=1)
    fused = bn_relu_conv(Tensor(x), Tensor(g), Tensor(b), np.zeros(3), np.ones(3), Tensor(k), Tensor(kb), True, padding=1)
    np.testing.assert_allclose(fused.data, chain.data, atol=1e-12)


# -- structural ops --------------------------------------------------------------

def test_concat_channels():
    a, b = Tensor(np.ones((2, 3, 4, 4)), requires_grad=True), Tensor(np.zeros((2, 5, 4, 4)), requires_grad=True)
    y = concat_channels(a, b)
    assert y.shape == (2, 8, 4, 4)
    assert np.all(y.data[:, :3] == 1) and np.all(y.data[:, 3:] == 0)
    g = np.random.default_rng(0).standard_normal(y.shape)
    (y * Tensor(g)).sum().backward()
    np.testing.assert_array_equal(a.grad, g[:, :3])
    np.testing.assert_array_equal(b.grad, g[:, 3:])
    empty = Tensor(np.zeros((2, 0, 4, 4)))
    np.testing.assert_array_equal(concat_channels(a, empty).data, a.data)
    with pytest.raises(ValueError):
        concat_channels(a, Tensor(np.zeros((2, 1, 4, 5))))


def test_upsample():
    assert upsample2d(Tensor([[[[1.0]]]]), 2).data.tolist() == [[[[1.0, 1.0], [1.0, 1.0]]]]
    x = Tensor(np.random.default_rng(0).standard_normal((1, 2, 3, 4)))
    assert upsample2d(x, 1) is x
    np.testing.assert_allclose(upsample2d(x, 3).data.sum(), 9 * x.data.sum())


def test_backward_examples():
    x = Tensor(3.0, requires_grad=True)
    (x * x).backward()
    assert x.grad == 6.0
    x = Tensor(1.0, requires_grad=True)
    (x + x).backward()
    assert x.grad == 2.0


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        (x * 2.0).backward()


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = (x * 2.0).sum()
    assert not y.requires_grad


def test_nonfinite_detected():
    x = Tensor(np.array([1.0, np.nan]), requires_grad=True)
    with pytest.raises(NonFiniteError):
        (x * 1.0).sum().backward()
    with pytest.raises(NonFiniteError):
        Tensor(np.array([np.inf])).check_finite()


def test_determinism_bit_identical():
    rng = np.random.default_rng(9)
    x = rng.standard_normal((2, 3, 8, 8))
    k = rng.standard_normal((4, 3, 3, 3))

    def run():
        xt, kt = Tensor(x, requires_grad=True), Tensor(k, requires_grad=True)
        y = pool2d(relu(conv2d(xt, kt, padding=1)), "max", 2)
        y.square().sum().backward()
        return y.data, xt.grad, kt.grad

    for a, b in zip(run(), run()):
        assert a.tobytes() == b.tobytes()


# -- finite-difference gradients (double precision, < 1e-4) -----------------------

RNG_SEEDS = range(10)


@pytest.mark.parametrize("seed", RNG_SEEDS)
def test_grad_conv2d(seed):
    stride, pad = [(1, 1), (2, 1), (1, 0)][seed % 3]
    err = check_op(lambda x, k, b: conv2d(x, k, b, stride=stride, padding=pad), [(2, 3, 6, 5), (4, 3, 3, 3), (4,)], seed)
    assert err < 1e-4


@pytest.mark.parametrize("seed", RNG_SEEDS)
def test_grad_pointwise_conv(seed):
    assert check_op(lambda x, k, b: conv2d(x, k, b), [(2, 5, 3, 4), (3, 5, 1, 1), (3,)], seed) < 1e-4


@pytest.mark.parametrize("seed", RNG_SEEDS)
def test_grad_relu(seed):
    assert check_op(relu, [(3, 4, 5)], seed) < 1e-4


@pytest.mark.parametrize("seed", RNG_SEEDS)
@pytest.mark.parametrize("mode", ["max", "average"])
def test_grad_pool(seed, mode):
    assert check_op(lambda x: pool2d(x, mode, 2), [(2, 2, 6, 4)], seed) < 1e-4


@pytest.mark.parametrize("seed", RNG_SEEDS)
def test_grad_batch_norm(seed):
    op = lambda x, g, b: batch_norm(x, g, b, np.zeros(3), np.ones(3), training=True)
    assert check_op(op, [(3, 3, 4, 2), (3,), (3,)], seed) < 1e-4


@pytest.mark.parametrize("seed", RNG_SEEDS)
def test_grad_bn_relu_conv(seed):
    op = lambda x, g, b, k, kb: bn_relu_conv(x, g, b, np.zeros(3), np.ones(3), k, kb, True, padding=1)
    assert check_op(op, [(2, 3, 4, 5), (3,), (3,), (2, 3, 3, 3), (2,)], seed) < 1e-4


@pytest.mark.parametrize("seed", RNG_SEEDS)
def test_grad_upsample_and_pad(seed):
    assert check_op(lambda x: upsample2d(x, 2), [(1, 2, 3, 3)], seed) < 1e-4
    assert check_op(lambda x: pad_reflect_end(x, 2, 1), [(1, 2, 3, 4)], seed) < 1e-4


@pytest.mark.parametrize("seed", RNG_SEEDS)
def test_grad_concat_and_matmul(seed):
    assert check_op(lambda a, b: concat([a, b], axis=1), [(2, 3, 4), (2, 1, 4)], seed) < 1e-4
    assert check_op(matmul, [(2, 3, 4), (2, 4, 5)], seed) < 1e-4


@pytest.mark.parametrize("seed", RNG_SEEDS)
def test_grad_arithmetic_with_broadcast(seed):
    assert check_op(lambda a, b: a * b + a / (b * b + 1.0) - b, [(3, 4), (1, 4)], seed) < 1e-4
    assert check_op(lambda a: a.square().mean(axis=1, keepdims=True) + a[:, 1:3].sum(), [(3, 4)], seed) < 1e-4
    assert check_op(lambda a: a.reshape(4, 3).transpose(1, 0), [(3, 4)], seed) < 1e-4


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 4))
def test_linear_ops_conserve_gradient_mass(b, c1, c2):
    rng = np.random.default_rng(b * 100 + c1 * 10 + c2)
    xs = [Tensor(rng.standard_normal((b, c, 2, 3)), requires_grad=True) for c in (c1, c2)]
    y = concat_channels(xs[0], xs[1]) + 0.0
    g = rng.standard_normal(y.shape)
    (y * Tensor(g)).sum().backward()
    assert np.isclose(sum(x.grad.sum() for x in xs), g.sum(), atol=1e-12)
