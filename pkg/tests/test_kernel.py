import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from collabdm import kernel
from collabdm.errors import DimensionError, InputError
from collabdm.kernel import RngStream, _backend
from collabdm.kernel import _pykernels

from helpers import SplitMixOracle, bilinear_loops, conv2d_loops, directional_check


# counter-based generator

def test_bits_match_textbook_splitmix():
    for seed in [0, 1, 42, 2**63 + 5, 2**64 - 1]:
        oracle = SplitMixOracle(seed)
        expected = [oracle.next() for _ in range(50)]
        assert [int(v) for v in RngStream(seed).bits(50)] == expected


def test_known_splitmix_vector():
    # first outputs of SplitMix64 seeded with 0, as published with the reference code
    assert [int(v) for v in RngStream(0).bits(3)] == [
        0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4, 0x06C45D188009454F]


def test_stream_is_counter_addressable():
    a = RngStream(7)
    first = a.bits(10)
    b = RngStream(7, counter=4)
    assert np.array_equal(b.bits(6), first[4:])
    assert a.counter == 10


def test_uniform_uses_top_53_bits():
    x = int(RngStream(3).bits(1)[0])
    assert RngStream(3).random() == (x >> 11) * 2.0 ** -53


def test_normal_box_muller_oracle():
    oracle = SplitMixOracle(11)
    expected = []
    for _ in range(4):
        u1 = 1.0 - oracle.uniform()
        u2 = oracle.uniform()
        r = math.sqrt(-2.0 * math.log(u1))
        expected += [r * math.cos(2 * math.pi * u2), r * math.sin(2 * math.pi * u2)]
    got = RngStream(11).normal(7)
    np.testing.assert_array_equal(got, expected[:7])


def test_normal_prefix_property():
    assert np.array_equal(RngStream(5).normal(9), RngStream(5).normal(12)[:9])


def test_backends_bit_identical():
    if _backend.compiled is None:
        pytest.skip("compiled kernels not built")
    bits = _pykernels.splitmix_fill(99, 0, 20001)
    assert np.array_equal(bits, _backend.compiled.splitmix_fill(99, 0, 20001))
    assert np.array_equal(_pykernels.box_muller(bits[:20000], 19999),
                          _backend.compiled.box_muller(bits[:20000], 19999))


def test_substreams_differ_and_are_stable():
    root = RngStream(1)
    a, b = root.substream("client", 0), root.substream("client", 1)
    assert a != b
    assert a == RngStream(1).substream("client", 0)
    assert root.counter == 0
    assert not np.array_equal(a.bits(4), b.bits(4))


def test_substream_rejects_large_int_tag():
    with pytest.raises(ValueError):
        RngStream(1).substream(2**32)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**64 - 1), st.integers(1, 40), st.data())
def test_sample_is_fisher_yates_prefix(seed, n, data):
    from helpers import fisher_yates_prefix
    m = data.draw(st.integers(0, n))
    got = RngStream(seed).sample(n, m)
    assert list(got) == fisher_yates_prefix(SplitMixOracle(seed), n, m)
    assert len(set(got.tolist())) == m


def test_uniform_moments():
    u = RngStream(2024).uniform(200_000)
    assert abs(u.mean() - 0.5) < 0.005
    assert abs(u.var() - 1 / 12) < 0.002


def test_normal_moments():
    z = RngStream(77).normal(200_000)
    assert abs(z.mean()) < 0.01
    assert abs(z.std() - 1) < 0.01


@pytest.mark.parametrize("shape", [0.1, 0.5, 1.0, 3.5])
def test_gamma_mean_and_variance(shape):
    r = RngStream(8).substream("gamma", int(shape * 10))
    g = np.array([r.gamma(shape) for _ in range(20000)])
    assert abs(g.mean() - shape) < 0.05 * max(shape, 1)
    assert abs(g.var() - shape) < 0.1 * max(shape, 1)


def test_dirichlet_on_simplex():
    r = RngStream(3)
    for beta in [0.01, 0.1, 1.0, 10.0]:
        p = r.dirichlet(beta, 6)
        assert p.shape == (6,) and np.all(p >= 0)
        assert abs(p.sum() - 1) < 1e-12


# convolution

CONV_CASES = [
    ((2, 3, 7, 6), (4, 3, 3, 3), 1, 1),
    ((1, 1, 8, 8), (2, 1, 3, 3), 2, 1),
    ((3, 2, 5, 5), (3, 2, 1, 1), 1, 0),
    ((2, 4, 9, 7), (5, 4, 5, 5), 1, 2),
    ((1, 2, 6, 6), (3, 2, 3, 3), 1, 0),
    ((2, 3, 10, 9), (2, 3, 3, 3), 3, 2),
    ((2, 16, 8, 8), (16, 16, 3, 3), 1, 1),
]


@pytest.mark.parametrize("xs,ws,stride,pad", CONV_CASES)
@pytest.mark.parametrize("dtype,tol", [(np.float64, 1e-12), (np.float32, 1e-4)])
def test_conv2d_matches_loops(xs, ws, stride, pad, dtype, tol, rng):
    x = rng.standard_normal(xs)
    w = rng.standard_normal(ws)
    got = kernel.conv2d(x.astype(dtype), w.astype(dtype), stride, pad)
    assert got.dtype == dtype
    np.testing.assert_allclose(got, conv2d_loops(x, w, stride, pad), atol=tol * 10, rtol=tol)


@pytest.mark.parametrize("xs,ws,stride,pad", CONV_CASES)
def test_conv2d_adjoint_identities(xs, ws, stride, pad, rng):
    x = rng.standard_normal(xs)
    w = rng.standard_normal(ws)
    y = kernel.conv2d(x, w, stride, pad)
    g = rng.standard_normal(y.shape)
    gx = kernel.conv2d_input_grad(g, w, x.shape, stride, pad)
    gw = kernel.conv2d_weight_grad(x, g, ws[2], stride, pad)
    # <conv(x), g> = <x, conv^T(g)> = <w, dW>
    lhs = np.sum(y * g)
    assert np.isclose(lhs, np.sum(x * gx), rtol=1e-10)
    assert np.isclose(lhs, np.sum(w * gw), rtol=1e-10)


@pytest.mark.parametrize("xs,ws,stride,pad", CONV_CASES[:4])
def test_conv2d_backends_agree(xs, ws, stride, pad, rng):
    if _backend.compiled is None:
        pytest.skip("compiled kernels not built")
    c, p = _backend.compiled, _pykernels
    x = rng.standard_normal(xs)
    w = rng.standard_normal(ws)
    y = p.conv2d_forward(x, w, stride, pad)
    np.testing.assert_allclose(c.conv2d_forward(x, w, stride, pad), y, atol=1e-12)
    g = rng.standard_normal(y.shape)
    np.testing.assert_allclose(c.conv2d_backward_input(g, w, xs[2], xs[3], stride, pad),
                               p.conv2d_backward_input(g, w, xs[2], xs[3], stride, pad),
                               atol=1e-12)
    np.testing.assert_allclose(c.conv2d_backward_weight(x, g, ws[2], stride, pad),
                               p.conv2d_backward_weight(x, g, ws[2], stride, pad), atol=1e-11)


def test_conv2d_names_bad_axis():
    with pytest.raises(DimensionError, match="axis 1"):
        kernel.conv2d(np.zeros((1, 3, 5, 5)), np.zeros((2, 2, 3, 3)))
    with pytest.raises(DimensionError):
        kernel.conv2d(np.zeros((3, 5, 5)), np.zeros((2, 3, 3, 3)))


def test_conv_identity_kernel():
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1
    np.testing.assert_array_equal(kernel.conv2d(x, w, 1, 1), x)


# remaining layers

def test_instance_norm_standardizes(rng):
    x = rng.standard_normal((3, 4, 6, 6)) * 5 + 2
    y = kernel.instance_norm(x)
    np.testing.assert_allclose(y.mean(axis=(2, 3)), 0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=(2, 3)), 1, atol=1e-5)


def test_instance_norm_constant_slice_is_zero():
    y = kernel.instance_norm(np.full((1, 1, 4, 4), 3.0))
    assert np.all(y == 0) and np.all(np.isfinite(y))


def test_relu_and_pool():
    x = np.array([[[[-1.0, 2.0], [3.0, -4.0]]]])
    np.testing.assert_array_equal(kernel.relu(x), [[[[0, 2], [3, 0]]]])
    np.testing.assert_array_equal(kernel.avg_pool2(x), [[[[0.0]]]])
    with pytest.raises(DimensionError):
        kernel.avg_pool2(np.zeros((1, 1, 3, 4)))


@pytest.mark.parametrize("size_in,size_out", [(2, 4), (3, 6), (4, 16), (5, 5), (8, 16)])
def test_bilinear_matches_scalar_oracle(size_in, size_out, rng):
    x = rng.standard_normal((2, 1, size_in, size_in))
    np.testing.assert_allclose(kernel.bilinear_upsample(x, (size_out, size_out)),
                               bilinear_loops(x, size_out, size_out), atol=1e-12)


def test_bilinear_2_to_4_known_values():
    # half-pixel sampling: output 0 clamps to input 0, output 1 is 0.75/0.25
    m = kernel.bilinear_matrix(2, 4)
    np.testing.assert_allclose(m, [[1, 0], [0.75, 0.25], [0.25, 0.75], [0, 1]])


def test_bilinear_preserves_global_mean(rng):
    x = rng.standard_normal((1, 1, 2, 2))
    up = kernel.bilinear_upsample(x, (4, 4))
    assert np.isclose(up.mean(), x.mean())


def test_bilinear_same_size_is_identity(rng):
    x = rng.standard_normal((1, 2, 5, 5))
    np.testing.assert_allclose(kernel.bilinear_upsample(x, (5, 5)), x, atol=1e-15)


def test_bilinear_adjoint(rng):
    x = rng.standard_normal((2, 3, 4, 4))
    g = rng.standard_normal((2, 3, 16, 16))
    lhs = np.sum(kernel.bilinear_upsample(x, (16, 16)) * g)
    rhs = np.sum(x * kernel.bilinear_upsample_backward(g, (4, 4)))
    assert np.isclose(lhs, rhs, rtol=1e-12)


def test_softmax_cross_entropy_values():
    loss, grad = kernel.softmax_cross_entropy(np.zeros((2, 4)), [1, 3])
    assert np.isclose(loss, math.log(4))
    np.testing.assert_allclose(grad.sum(axis=1), 0, atol=1e-15)
    with pytest.raises(InputError):
        kernel.softmax_cross_entropy(np.zeros((1, 3)), [3])


def test_softmax_cross_entropy_is_stable():
    loss, grad = kernel.softmax_cross_entropy(np.array([[1000.0, 0.0]]), [0])
    assert np.isfinite(loss) and loss < 1e-12 and np.all(np.isfinite(grad))


def test_linear_shapes(rng):
    x, w, b = rng.standard_normal((5, 3)), rng.standard_normal((2, 3)), rng.standard_normal(2)
    np.testing.assert_allclose(kernel.linear(x, w, b), x @ w.T + b)
    with pytest.raises(DimensionError):
        kernel.linear(x, rng.standard_normal((2, 4)))


# finite differences on each layer

def _layer_cases(rng):
    """(name, scalar function of x, analytic gradient) for a random instance."""
    x = rng.standard_normal((2, 3, 6, 6))
    w = rng.standard_normal((4, 3, 3, 3))
    proj = rng.standard_normal((2, 4, 6, 6))

    def conv_x(v):
        return np.sum(kernel.conv2d(v, w, 1, 1) * proj)

    def conv_w(v):
        return np.sum(kernel.conv2d(x, v, 1, 1) * proj)

    p_in = rng.standard_normal((2, 3, 6, 6))

    def inorm(v):
        return np.sum(kernel.instance_norm(v) * p_in)

    y, inv = kernel.instance_norm(x, return_inv_std=True)
    # keep inputs away from the kink
    xr = np.sign(x) * (np.abs(x) + 0.05)
    p_pool = rng.standard_normal((2, 3, 3, 3))
    p_up = rng.standard_normal((2, 3, 12, 12))
    lw, lb = rng.standard_normal((5, 3 * 36)), rng.standard_normal(5)
    p_lin = rng.standard_normal((2, 5))
    labels = rng.integers(0, 5, size=2)
    logits = rng.standard_normal((2, 5))
    return [
        ("conv_input", conv_x, x, kernel.conv2d_input_grad(proj, w, x.shape, 1, 1)),
        ("conv_weight", conv_w, w, kernel.conv2d_weight_grad(x, proj, 3, 1, 1)),
        ("instance_norm", inorm, x, kernel.instance_norm_backward(p_in, y, inv)),
        ("relu", lambda v: np.sum(kernel.relu(v) * p_in), xr, kernel.relu_backward(p_in, xr)),
        ("avg_pool", lambda v: np.sum(kernel.avg_pool2(v) * p_pool), x,
         kernel.avg_pool2_backward(p_pool)),
        ("bilinear", lambda v: np.sum(kernel.bilinear_upsample(v, (12, 12)) * p_up), x,
         kernel.bilinear_upsample_backward(p_up, (6, 6))),
        ("linear", lambda v: np.sum(kernel.linear(v.reshape(2, -1), lw, lb) * p_lin), x,
         kernel.linear_backward(p_lin, x.reshape(2, -1), lw)[0].reshape(x.shape)),
        ("cross_entropy", lambda v: kernel.softmax_cross_entropy(v, labels)[0], logits,
         kernel.softmax_cross_entropy(logits, labels)[1]),
    ]


@pytest.mark.parametrize("case", range(8))
def test_layer_gradients_finite_difference(case):
    rng = np.random.default_rng(100 + case)
    worst = 0.0
    for trial in range(10):
        name, f, x, g = _layer_cases(np.random.default_rng(trial * 31 + case))[case]
        d = rng.standard_normal(x.shape)
        worst = max(worst, directional_check(f, x, g, d))
    assert worst < 1e-4, name


def test_dispatch_uses_numpy_weight_gradient():
    assert _backend.impl.conv2d_backward_weight is _pykernels.conv2d_backward_weight
    if _backend.compiled is not None:
        assert _backend.impl.conv2d_forward is _backend.compiled.conv2d_forward
