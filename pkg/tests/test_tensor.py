"""Forward-value and API contract tests for the tensor engine."""

import numpy as np
import pytest

from handmesh import tensor as hm
from handmesh.tensor import (
    DimensionError,
    NumericError,
    Tensor,
    UsageError,
    avg_pool2d,
    concat,
    conv2d,
    layer_norm,
    matmul,
    no_grad,
    pointwise_linear,
    precision,
    sigmoid,
    softmax_rows,
    upsample_nearest2x,
)


def test_construction_and_invariants():
    t = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert t.shape == (2, 2)
    assert t.dtype == np.float64
    assert t.data.size == int(np.prod(t.shape))
    with pytest.raises(NumericError):
        Tensor([1.0, np.nan])
    with pytest.raises(NumericError):
        Tensor([np.inf])


def test_default_dtype_config():
    assert hm.get_default_dtype() is np.float64
    with precision(np.float32):
        assert Tensor([1.0]).dtype == np.float32
    assert Tensor([1.0]).dtype == np.float64
    with pytest.raises(UsageError):
        hm.set_default_dtype(np.int32)


def test_matmul_identity():
    eye = Tensor(np.eye(2))
    d = Tensor([[2.0, 0.0], [0.0, 3.0]])
    assert np.array_equal(matmul(eye, d).data, d.data)


def test_matmul_by_hand():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    b = Tensor([[5.0, 6.0], [7.0, 8.0]])
    assert np.array_equal((a @ b).data, [[19.0, 22.0], [43.0, 50.0]])


def test_matmul_zeros_and_errors():
    a = Tensor(np.random.default_rng(0).normal(size=(3, 4)))
    z = Tensor(np.zeros((4, 2)))
    assert np.all((a @ z).data == 0.0)
    with pytest.raises(DimensionError):
        matmul(a, Tensor(np.zeros((3, 2))))
    with pytest.raises(DimensionError):
        matmul(a, Tensor(np.zeros(4)))


def test_softmax_symmetry_and_analytic():
    out = softmax_rows(Tensor([[0.0, 0.0]]))
    assert np.allclose(out.data, [[0.5, 0.5]], atol=1e-15)
    out = softmax_rows(Tensor([[np.log(2.0), 0.0]]))
    assert np.allclose(out.data, [[2.0 / 3.0, 1.0 / 3.0]], atol=1e-12)


def test_softmax_rows_sum_and_scalar_oracle():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(4, 4)) * 3.0
    y = softmax_rows(Tensor(x)).data
    assert np.all(np.abs(y.sum(axis=1) - 1.0) < 1e-9)
    # independent scalar evaluation, no stabilization tricks
    for i in range(4):
        row = [float(np.exp(v)) for v in x[i]]
        s = sum(row)
        for j in range(4):
            assert abs(y[i, j] - row[j] / s) < 1e-12


def test_softmax_shift_invariance():
    rng = np.random.default_rng(11)
    x = rng.normal(size=(3, 5))
    base = softmax_rows(Tensor(x)).data
    shifted = softmax_rows(Tensor(x + 2.0)).data
    assert np.allclose(base, shifted, atol=1e-12)


def test_softmax_rejects_nan():
    t = Tensor(np.zeros((2, 2)))
    t.data[0, 0] = np.nan  # bypass constructor check to exercise the op's guard
    with pytest.raises(NumericError):
        softmax_rows(t)


def test_sigmoid_values_and_range():
    assert sigmoid(Tensor([0.0])).data[0] == 0.5
    assert abs(sigmoid(Tensor([-5.0])).data[0] - 0.006692850924284856) < 1e-12
    assert abs(sigmoid(Tensor([5.0])).data[0] - 0.9933071490757153) < 1e-12
    # strict open interval even at hard saturation
    big = sigmoid(Tensor([-800.0, 800.0])).data
    assert 0.0 < big[0] < big[1] < 1.0


def test_layer_norm_examples():
    g = Tensor(np.ones(3))
    b = Tensor(np.zeros(3))
    out = layer_norm(Tensor([[1.0, 1.0, 1.0]]), g, b, eps=1e-5)
    assert np.allclose(out.data, 0.0, atol=1e-9)
    g2 = Tensor(np.ones(2))
    b2 = Tensor(np.zeros(2))
    out = layer_norm(Tensor([[-1.0, 1.0]]), g2, b2, eps=1e-5)
    assert np.allclose(out.data, [[-1.0, 1.0]], atol=1e-4)
    rng = np.random.default_rng(3)
    x = rng.normal(size=(6, 8))
    g8, b8 = Tensor(np.ones(8)), Tensor(np.zeros(8))
    y = layer_norm(Tensor(x), g8, b8).data
    assert np.all(np.abs(y.mean(axis=1)) < 1e-12)


def test_reshape_roundtrip_exact():
    rng = np.random.default_rng(5)
    x = Tensor(rng.normal(size=(4, 4, 8)))
    flat = x.reshape(16, 8)
    back = flat.reshape(4, 4, 8)
    assert np.array_equal(back.data, x.data)


def test_elementwise_broadcasting():
    a = Tensor(np.arange(6.0).reshape(2, 3))
    col = Tensor([[10.0], [20.0]])
    out = (a * col).data
    assert np.array_equal(out, np.arange(6.0).reshape(2, 3) * [[10.0], [20.0]])
    out = (a + 1.0).data
    assert np.array_equal(out, np.arange(6.0).reshape(2, 3) + 1.0)
    with pytest.raises(NumericError):
        a / Tensor(np.zeros((2, 3)))


def test_conv2d_shapes_and_known_kernel():
    x = Tensor(np.arange(16.0).reshape(4, 4, 1))
    # identity kernel: center tap 1
    w = np.zeros((3, 3, 1, 1))
    w[1, 1, 0, 0] = 1.0
    out = conv2d(x, Tensor(w))
    assert np.array_equal(out.data, x.data)
    # stride 2 halves the grid
    out2 = conv2d(x, Tensor(w), stride=2)
    assert out2.shape == (2, 2, 1)
    assert np.array_equal(out2.data.ravel(), x.data[::2, ::2, 0].ravel())
    # all-ones kernel at a border position sums the padded 3x3 window
    w1 = Tensor(np.ones((3, 3, 1, 1)))
    out3 = conv2d(x, w1)
    assert out3.data[0, 0, 0] == x.data[:2, :2, 0].sum()


def test_pointwise_linear_matches_matmul():
    rng = np.random.default_rng(9)
    x = rng.normal(size=(4, 4, 8))
    w = rng.normal(size=(8, 3))
    b = rng.normal(size=3)
    out = pointwise_linear(Tensor(x), Tensor(w), Tensor(b)).data
    ref = x.reshape(16, 8) @ w + b
    assert np.allclose(out, ref.reshape(4, 4, 3), atol=1e-12)


def test_avg_pool_and_upsample():
    x = Tensor(np.arange(16.0).reshape(4, 4, 1))
    p = avg_pool2d(x, 2)
    assert p.shape == (2, 2, 1)
    assert p.data[0, 0, 0] == (0 + 1 + 4 + 5) / 4.0
    with pytest.raises(DimensionError):
        avg_pool2d(Tensor(np.zeros((3, 4, 1))), 2)
    u = upsample_nearest2x(p)
    assert u.shape == (4, 4, 1)
    assert np.array_equal(u.data[:2, :2, 0], np.full((2, 2), p.data[0, 0, 0]))


def test_concat_and_slice():
    a = Tensor(np.ones((2, 3)))
    b = Tensor(np.zeros((2, 3)))
    c = concat([a, b], axis=1)
    assert c.shape == (2, 6)
    assert np.array_equal(c.data[:, :3], a.data)
    s = c[:, 4:]
    assert s.shape == (2, 2)
    assert np.all(s.data == 0.0)


def test_backward_requires_scalar():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    y = x * 2.0
    with pytest.raises(UsageError):
        y.backward()


def test_no_grad_skips_tape():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = (x * 2.0).sum()
    assert not y.requires_grad
    y2 = (x * 2.0).sum()
    y2.backward()
    assert np.array_equal(x.grad, np.full(3, 2.0))


def test_forward_determinism():
    rng = np.random.default_rng(21)
    x = rng.normal(size=(4, 4, 3))
    w = rng.normal(size=(3, 3, 3, 5))
    a = conv2d(Tensor(x), Tensor(w)).data
    b = conv2d(Tensor(x), Tensor(w)).data
    assert np.array_equal(a, b)


def test_detach_and_item():
    x = Tensor([2.0], requires_grad=True)
    d = x.detach()
    assert not d.requires_grad
    assert d.item() == 2.0
    with pytest.raises(UsageError):
        Tensor(np.zeros(3)).item()
