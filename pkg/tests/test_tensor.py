import math
from decimal import Decimal, getcontext

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from iicnet.tensor import (
    ComplexGrid,
    GraphConsumedError,
    NonFiniteError,
    Tensor,
    centered_sigmoid,
    channel_mix,
    chunk_channels,
    clamp,
    concat_channels,
    conv2d,
    dft2_onesided,
    elementwise,
    gradcheck,
    leaky_relu,
    mean,
    no_grad,
    split_channels,
    square,
    total,
    triangular_inverse,
)


def naive_conv(x, w, b):
    cout, cin, k, _ = w.shape
    _, h, wd = x.shape
    p = k // 2
    out = np.zeros((cout, h, wd))
    for o in range(cout):
        for y in range(h):
            for xx in range(wd):
                acc = b[o]
                for c in range(cin):
                    for i in range(k):
                        for j in range(k):
                            yy, xc = y + i - p, xx + j - p
                            if 0 <= yy < h and 0 <= xc < wd:
                                acc += w[o, c, i, j] * x[c, yy, xc]
                out[o, y, xx] = acc
    return out


def naive_dft(x):
    h, w = x.shape
    out = np.zeros((h, w), dtype=complex)
    for u in range(h):
        for v in range(w):
            s = 0j
            for m in range(h):
                for n in range(w):
                    s += x[m, n] * complex(math.cos(-2 * math.pi * (u * m / h + v * n / w)),
                                           math.sin(-2 * math.pi * (u * m / h + v * n / w)))
            out[u, v] = s
    return out


# ---- elementwise

def test_elementwise_examples():
    assert np.array_equal(elementwise("mul", Tensor([2.0, 3.0]), Tensor([4.0, 5.0])).data, [8, 15])
    assert np.array_equal(elementwise("exp", Tensor([0.0, 0.0])).data, [1, 1])
    x = Tensor(np.random.default_rng(0).normal(size=7))
    assert np.array_equal(elementwise("add", x, elementwise("neg", x)).data, np.zeros(7))


def test_elementwise_rejects_unknown_op_and_shape_mismatch():
    with pytest.raises(ValueError):
        elementwise("div", Tensor([1.0]), Tensor([1.0]))
    with pytest.raises(ValueError):
        elementwise("add", Tensor([1.0, 2.0]), Tensor([1.0]))


def test_nonfinite_detected():
    with pytest.raises(NonFiniteError):
        elementwise("exp", Tensor([1000.0]))
    with pytest.raises(NonFiniteError):
        Tensor([np.nan])


def test_centered_sigmoid_values():
    assert centered_sigmoid(Tensor([0.0])).data[0] == 0.0
    big = centered_sigmoid(Tensor([800.0, -800.0])).data
    assert big[0] == pytest.approx(1.0) and big[1] == pytest.approx(-1.0)
    getcontext().prec = 40
    oracle = Decimal(2) / (1 + Decimal(-1).exp()) - 1
    assert abs(centered_sigmoid(Tensor([1.0])).data[0] - float(oracle)) < 1e-15
    assert float(oracle) == pytest.approx(0.46211716, abs=1e-8)


@given(arrays(np.float64, 6, elements=st.floats(-50, 50)))
def test_centered_sigmoid_bounded_and_odd(x):
    y = centered_sigmoid(Tensor(x)).data
    assert np.all(np.abs(y) <= 1.0)
    assert np.allclose(centered_sigmoid(Tensor(-x)).data, -y, atol=1e-15)


# ---- backward

def test_backward_simple_rules():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    total(x).backward()
    assert np.array_equal(x.grad, np.ones((2, 3)))
    x = Tensor(np.arange(6.0), requires_grad=True)
    total(x * x).backward()
    assert np.array_equal(x.grad, 2 * np.arange(6.0))


def test_graph_single_use_and_leaf_accumulation():
    x = Tensor([1.0, 2.0], requires_grad=True)
    loss = total(x * x)
    loss.backward()
    with pytest.raises(GraphConsumedError):
        loss.backward()
    total(x).backward()
    assert np.array_equal(x.grad, [3.0, 5.0])


def test_backward_requires_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ValueError):
        (x * x).backward()


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with no_grad():
        y = x * x
    assert not y.requires_grad
    z = x * x
    assert z.requires_grad


def test_shared_subexpression_gradient():
    # y used twice: grad must sum both paths
    x = Tensor([1.5], requires_grad=True)
    y = x * x
    total(y + y * y).backward()
    assert x.grad[0] == pytest.approx(2 * 1.5 + 4 * 1.5**3)


# ---- convolution

def test_conv_identity_and_bias():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(3, 5, 6))
    w = np.zeros((3, 3, 1, 1))
    w[np.arange(3), np.arange(3)] = 1.0
    assert np.array_equal(conv2d(Tensor(x), Tensor(w), Tensor(np.zeros(3))).data, x)
    out = conv2d(Tensor(x), Tensor(np.zeros((2, 3, 3, 3))), Tensor([0.7, -2.0])).data
    assert np.all(out[0] == 0.7) and np.all(out[1] == -2.0)


@pytest.mark.parametrize("k", [1, 3, 5])
def test_conv_matches_loop_oracle(k):
    rng = np.random.default_rng(k)
    x, w, b = rng.normal(size=(2, 5, 7)), rng.normal(size=(3, 2, k, k)), rng.normal(size=3)
    got = conv2d(Tensor(x), Tensor(w), Tensor(b)).data
    assert np.allclose(got, naive_conv(x, w, b), atol=1e-12)


def test_conv_batched_matches_per_sample():
    rng = np.random.default_rng(2)
    x, w = rng.normal(size=(2, 3, 4, 4)), rng.normal(size=(2, 3, 3, 3))
    got = conv2d(Tensor(x), Tensor(w)).data
    for i in range(2):
        assert np.allclose(got[i], naive_conv(x[i], w, np.zeros(2)), atol=1e-12)


def test_conv_rejects_bad_kernels():
    with pytest.raises(ValueError):
        conv2d(Tensor(np.zeros((2, 4, 4))), Tensor(np.zeros((1, 2, 2, 2))))
    with pytest.raises(ValueError):
        conv2d(Tensor(np.zeros((2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))


def test_conv_gradients():
    rng = np.random.default_rng(3)
    x = Tensor(rng.normal(size=(2, 2, 5, 4)), requires_grad=True)
    w = Tensor(rng.normal(size=(3, 2, 3, 3)), requires_grad=True)
    b = Tensor(rng.normal(size=3), requires_grad=True)
    c = rng.normal(size=(2, 3, 5, 4))
    errs = gradcheck(lambda: total(conv2d(x, w, b) * Tensor(c)), [x, w, b], directions=2, coords=4)
    assert max(errs.values()) < 1e-7


# ---- channel plumbing

def test_concat_split_examples():
    rng = np.random.default_rng(4)
    a, b = rng.normal(size=(2, 3, 3)), rng.normal(size=(5, 3, 3))
    top, bottom = split_channels(concat_channels([Tensor(a), Tensor(b)]), 2)
    assert np.array_equal(top.data, a) and np.array_equal(bottom.data, b)
    ones = [Tensor(np.ones((1, 2, 2))) for _ in range(4)]
    assert concat_channels(ones).shape == (4, 2, 2)
    t, btm = split_channels(Tensor(np.zeros((12, 2, 2))), 3)
    assert t.shape == (3, 2, 2) and btm.shape == (9, 2, 2)
    with pytest.raises(ValueError):
        split_channels(Tensor(np.zeros((4, 2, 2))), 0)


@given(st.integers(1, 4), st.integers(1, 4))
def test_chunk_concat_roundtrip(parts, per):
    x = np.random.default_rng(parts * 10 + per).normal(size=(parts * per, 2, 3))
    back = concat_channels(chunk_channels(Tensor(x), parts)).data
    assert np.array_equal(back, x)


def test_channel_ops_gradients():
    rng = np.random.default_rng(5)
    a = Tensor(rng.normal(size=(3, 2, 2)), requires_grad=True)
    b = Tensor(rng.normal(size=(2, 2, 2)), requires_grad=True)
    w = Tensor(rng.normal(size=(5, 5)), requires_grad=True)
    c = rng.normal(size=(5, 2, 2))

    def fn():
        top, bottom = split_channels(channel_mix(w, concat_channels([a, b])), 1)
        return total(concat_channels([bottom, top]) * Tensor(c))

    assert max(gradcheck(fn, [a, b, w], directions=2).values()) < 1e-7


def test_triangular_inverse_and_gradient():
    rng = np.random.default_rng(6)
    low = np.tril(rng.normal(size=(4, 4)), -1) + np.eye(4)
    t = Tensor(low, requires_grad=True)
    assert np.allclose(triangular_inverse(t, lower=True, unit_diagonal=True).data @ low, np.eye(4), atol=1e-12)
    c = rng.normal(size=(4, 4))
    errs = gradcheck(lambda: total(triangular_inverse(t, True, True) * Tensor(c)), [t], directions=3, coords=0)
    assert errs[0] < 1e-7


def test_smooth_and_piecewise_gradients():
    rng = np.random.default_rng(7)
    # keep entries clear of the kinks at 0, 0.2 and 0.8
    x = Tensor(rng.choice([-1, 1], size=10) * rng.uniform(0.3, 0.7, size=10), requires_grad=True)

    def fn():
        y = leaky_relu(x, 0.2) + centered_sigmoid(x) + clamp(x, -0.8, 0.2) * x
        return mean(square(y).exp())

    assert max(gradcheck(fn, [x], directions=2, coords=5).values()) < 1e-7


# ---- DFT

def test_dft_examples():
    g = dft2_onesided(Tensor(np.ones((1, 2, 2))))
    assert g.shape == (1, 2, 2)
    assert np.allclose(g.to_numpy()[0], [[4, 0], [0, 0]], atol=1e-14)
    z = dft2_onesided(Tensor(np.zeros((2, 4, 4))))
    assert not np.any(z.real.data) and not np.any(z.imag.data)
    delta = np.zeros((1, 4, 6))
    delta[0, 0, 0] = 0.37
    d = dft2_onesided(Tensor(delta)).to_numpy()
    assert d.shape == (1, 4, 4)
    assert np.allclose(d, 0.37, atol=1e-15)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**32 - 1))
def test_dft_matches_double_sum(h, w, seed):
    x = np.random.default_rng(seed).normal(size=(1, h, w))
    got = dft2_onesided(Tensor(x)).to_numpy()[0]
    want = naive_dft(x[0])[:, : w // 2 + 1]
    assert np.allclose(got, want, rtol=1e-10, atol=1e-10 * np.abs(want).max())


def test_dft_gradient():
    rng = np.random.default_rng(8)
    x = Tensor(rng.normal(size=(2, 5, 6)), requires_grad=True)

    def fn():
        g = dft2_onesided(x)
        return mean(square(g.real)) + mean(g.imag * Tensor(rng_c))

    rng_c = rng.normal(size=(2, 5, 4))
    assert gradcheck(fn, [x], directions=3, coords=5)[0] < 1e-7


def test_complex_grid_shape_check():
    with pytest.raises(ValueError):
        ComplexGrid(Tensor(np.zeros((1, 2, 2))), Tensor(np.zeros((1, 2, 3))))
