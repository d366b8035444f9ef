import numpy as np
import pytest

from src.audiofuse import autodiff as ad
from src.audiofuse.errors import RankError, ShapeError


def leaf(values, dtype=np.float64):
    return ad.Tensor(np.asarray(values, dtype=dtype), requires_grad=True, dtype=dtype)


# Forward values


def test_softmax_of_equal_logits():
    out = ad.softmax(ad.Tensor([0.0, 0.0]))
    np.testing.assert_allclose(out.data, [0.5, 0.5])


def test_softmax_rows_sum_to_one():
    x = ad.Tensor(np.random.default_rng(0).standard_normal((4, 7)) * 30, dtype=np.float64)
    np.testing.assert_allclose(ad.softmax(x).data.sum(axis=-1), 1.0)


def test_matmul_with_identity():
    a = np.random.default_rng(1).standard_normal((3, 3))
    out = ad.matmul(ad.Tensor(np.eye(3)), ad.Tensor(a, dtype=np.float64))
    np.testing.assert_allclose(out.data, a)


def test_activation_anchor_points():
    zero = ad.Tensor([0.0])
    assert ad.sigmoid(zero).data[0] == 0.5
    assert ad.gelu(zero).data[0] == 0.0
    assert ad.relu(ad.Tensor([-2.0, 3.0])).data.tolist() == [0.0, 3.0]


def test_sigmoid_is_stable_for_large_inputs():
    out = ad.sigmoid(ad.Tensor([-1000.0, 1000.0], dtype=np.float64)).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [0.0, 1.0])


def test_default_dtype_is_float32_and_precision_scope():
    assert ad.Tensor([1.0]).dtype == np.float32
    with ad.precision(np.float64):
        assert ad.Tensor([1.0]).dtype == np.float64
    assert ad.default_dtype() == np.float32


# Gradients


def test_square_gradient():
    x = leaf([3.0])
    (x * x).sum().backward()
    np.testing.assert_allclose(x.grad, [6.0])


def test_matmul_gradients():
    rng = np.random.default_rng(2)
    a, b = leaf(rng.standard_normal((2, 3))), leaf(rng.standard_normal((3, 4)))
    ad.matmul(a, b).sum().backward()
    np.testing.assert_allclose(a.grad, np.ones((2, 4)) @ b.data.T)
    np.testing.assert_allclose(b.grad, a.data.T @ np.ones((2, 4)))


def test_gradient_accumulates_over_shared_nodes():
    x = leaf([2.0])
    y = x * 3.0
    (y + y * y).sum().backward()
    # d/dx (3x + 9x^2) = 3 + 18x
    np.testing.assert_allclose(x.grad, [39.0])


def test_broadcast_gradient_is_reduced():
    x = leaf(np.ones((4, 3)))
    bias = leaf([1.0, 2.0, 3.0])
    (x + bias).sum().backward()
    np.testing.assert_allclose(bias.grad, [4.0, 4.0, 4.0])


def test_max_gradient_goes_to_first_maximum():
    x = leaf([[1.0, 5.0, 5.0]])
    ad.max_(x, axis=1).sum().backward()
    np.testing.assert_allclose(x.grad, [[0.0, 1.0, 0.0]])


def test_clip_forward_and_gradient():
    x = leaf([-1.0, 0.5, 2.0])
    out = ad.clip(x, 0.0, 1.0)
    np.testing.assert_allclose(out.data, [0.0, 0.5, 1.0])
    out.sum().backward()
    np.testing.assert_allclose(x.grad, [0.0, 1.0, 0.0])


def test_unfold_windows_and_gradient():
    x = leaf(np.arange(6.0).reshape(1, 6, 1))
    windows = ad.unfold(x, size=3, step=2)
    assert windows.shape == (1, 2, 3, 1)
    np.testing.assert_array_equal(windows.data[0, :, :, 0], [[0, 1, 2], [2, 3, 4]])
    windows.sum().backward()
    np.testing.assert_allclose(x.grad[0, :, 0], [1, 1, 2, 1, 1, 0])


def test_fancy_index_gradient_scatters_with_repeats():
    x = leaf([1.0, 2.0, 3.0])
    x[np.array([0, 0, 2])].sum().backward()
    np.testing.assert_allclose(x.grad, [2.0, 0.0, 1.0])


def test_constants_receive_no_gradient():
    x = leaf([1.0])
    c = ad.Tensor([5.0], dtype=np.float64)
    (x * c).sum().backward()
    assert c.grad is None


# Errors


def test_backward_needs_scalar():
    x = leaf([1.0, 2.0])
    with pytest.raises(RankError):
        (x * 2.0).backward()


def test_incompatible_broadcast():
    with pytest.raises(ShapeError):
        ad.add(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((4,))))


def test_double_sided_broadcast_is_rejected():
    with pytest.raises(ShapeError):
        ad.add(ad.Tensor(np.ones((2, 1))), ad.Tensor(np.ones((1, 3))))


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        ad.matmul(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((2, 3))))


# no_grad


def test_no_grad_records_nothing():
    x = leaf([1.0, 2.0])
    with ad.no_grad():
        y = ad.exp(x) * 2.0
    assert not y.requires_grad
    assert y._parents == ()
    assert ad.is_grad_enabled()


def test_no_grad_nests():
    with ad.no_grad():
        with ad.no_grad():
            assert not ad.is_grad_enabled()
        assert not ad.is_grad_enabled()
    assert ad.is_grad_enabled()


def test_no_grad_forward_is_bitwise_identical():
    rng = np.random.default_rng(3)
    x = leaf(rng.standard_normal((5, 8)))
    w = leaf(rng.standard_normal((8, 2)))

    def forward():
        return ad.softmax(ad.gelu(ad.matmul(x, w)))

    recorded = forward().data
    np.testing.assert_array_equal(ad.no_grad_scope(forward).data, recorded)
