"""Autodiff core and differentiable ops: values, shapes and gradient checks."""

import math

import numpy as np
import pytest

from aseg import GradientError, ShapeError, Tensor, TrainingError, backward, grad_check, no_grad
from aseg import ops
from aseg.ops import RunningStats

TOL = 1e-6


def _t(rng, *shape):
    return Tensor(rng.standard_normal(shape))


def _away_from_zero(rng, *shape):
    return Tensor(rng.uniform(0.1, 1.0, shape) * rng.choice([-1.0, 1.0], shape))


def _naive_conv(x, w, stride, dilation, pad):
    n, c, h, wd = x.shape
    cout, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    span = (k - 1) * dilation + 1
    ho = (h + 2 * pad - span) // stride + 1
    wo = (wd + 2 * pad - span) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for i in range(ho):
        for j in range(wo):
            for a in range(k):
                for b in range(k):
                    patch = xp[:, :, i * stride + a * dilation, j * stride + b * dilation]
                    out[:, :, i, j] += patch @ w[:, :, a, b].T
    return out


# ======================================================
# Tape behaviour
# ======================================================

@pytest.mark.unit
def test_backward_accumulates_over_shared_inputs():
    x = Tensor(np.array([[[[2.0]]]]), requires_grad=True)
    loss = ops.total(ops.add(ops.hadamard(x, x), x))
    backward(loss)
    assert x.grad[0, 0, 0, 0] == pytest.approx(5.0)


@pytest.mark.unit
def test_backward_requires_scalar_loss(rng):
    x = Tensor(rng.standard_normal((1, 2, 2, 2)), requires_grad=True)
    with pytest.raises(GradientError):
        backward(ops.relu(x))


@pytest.mark.unit
def test_no_grad_records_nothing(rng):
    x = Tensor(rng.standard_normal((1, 2, 3, 3)), requires_grad=True)
    with no_grad():
        y = ops.relu(x)
    assert not y.requires_grad
    assert y._record is None


@pytest.mark.unit
def test_unreached_params_get_zero_grad(rng):
    from aseg import Parameter

    used = Parameter(rng.standard_normal((1, 1, 2, 2)))
    unused = Parameter(rng.standard_normal(3))
    backward(ops.total(used), [used, unused])
    np.testing.assert_array_equal(unused.grad, np.zeros(3))
    np.testing.assert_array_equal(used.grad, np.ones((1, 1, 2, 2)))


# ======================================================
# Convolutions
# ======================================================

@pytest.mark.unit
@pytest.mark.parametrize("stride,dilation", [(1, 1), (1, 2), (2, 1), (1, 3)])
def test_conv2d_matches_direct_sum(rng, stride, dilation):
    x = rng.standard_normal((2, 3, 7, 6))
    w = rng.standard_normal((4, 3, 3, 3))
    out = ops.conv2d(Tensor(x), Tensor(w), stride=stride, dilation=dilation)
    np.testing.assert_allclose(out.data, _naive_conv(x, w, stride, dilation, dilation), atol=1e-12)


@pytest.mark.unit
def test_conv2d_same_padding_keeps_resolution(rng):
    out = ops.conv2d(_t(rng, 1, 2, 5, 9), _t(rng, 3, 2, 3, 3), dilation=4)
    assert out.shape == (1, 3, 5, 9)


@pytest.mark.unit
def test_same_padding_rejects_odd_span():
    with pytest.raises(ShapeError):
        ops.same_padding(2, 1)


@pytest.mark.unit
def test_conv2d_channel_mismatch(rng):
    with pytest.raises(ShapeError):
        ops.conv2d(_t(rng, 1, 3, 4, 4), _t(rng, 2, 2, 1, 1))


@pytest.mark.unit
@pytest.mark.parametrize("stride,dilation", [(1, 1), (1, 2), (2, 1)])
def test_conv2d_gradients(rng, stride, dilation):
    err = grad_check(lambda x, w, b: ops.conv2d(x, w, b, stride, dilation),
                     [_t(rng, 2, 2, 6, 6), _t(rng, 3, 2, 3, 3), _t(rng, 3)])
    assert err < TOL


@pytest.mark.unit
@pytest.mark.parametrize("stride", [2, 4])
def test_conv_transpose2d_upsamples_exactly(rng, stride):
    out = ops.conv_transpose2d(_t(rng, 1, 2, 3, 5), _t(rng, 2, 4, 2 * stride, 2 * stride), stride=stride)
    assert out.shape == (1, 4, 3 * stride, 5 * stride)


@pytest.mark.unit
def test_conv_transpose2d_rejects_other_strides(rng):
    with pytest.raises(ShapeError):
        ops.conv_transpose2d(_t(rng, 1, 2, 3, 3), _t(rng, 2, 2, 6, 6), stride=3)


@pytest.mark.unit
@pytest.mark.parametrize("stride", [2, 4])
def test_conv_transpose2d_gradients(rng, stride):
    k = 2 * stride
    err = grad_check(lambda x, w, b: ops.conv_transpose2d(x, w, b, stride),
                     [_t(rng, 1, 2, 3, 3), _t(rng, 2, 3, k, k), _t(rng, 3)])
    assert err < TOL


# ======================================================
# Normalisation and activations
# ======================================================

@pytest.mark.unit
def test_batch_norm_training_normalises(rng):
    x = Tensor(3.0 + 2.0 * rng.standard_normal((4, 3, 5, 5)))
    stats = RunningStats(3)
    y = ops.batch_norm(x, Tensor(np.ones(3)), Tensor(np.zeros(3)), stats, training=True)
    np.testing.assert_allclose(y.data.mean(axis=(0, 2, 3)), 0.0, atol=1e-10)
    np.testing.assert_allclose(y.data.var(axis=(0, 2, 3)), 1.0, atol=1e-3)
    assert np.all(stats.mean != 0.0)


@pytest.mark.unit
@pytest.mark.parametrize("training", [True, False])
def test_batch_norm_gradients(rng, training):
    stats = RunningStats(3)
    stats.mean = rng.standard_normal(3)
    stats.var = rng.uniform(0.5, 2.0, 3)
    err = grad_check(lambda x, g, b: ops.batch_norm(x, g, b, stats, training),
                     [_t(rng, 2, 3, 3, 3), Tensor(rng.uniform(0.5, 1.5, 3)), _t(rng, 3)])
    assert err < TOL


@pytest.mark.unit
@pytest.mark.parametrize("op", [ops.relu, ops.sigmoid, ops.softmax_channels, ops.global_avg_pool])
def test_pointwise_gradients(rng, op):
    assert grad_check(op, [_away_from_zero(rng, 2, 3, 4, 4)]) < TOL


@pytest.mark.unit
def test_softmax_channels_sums_to_one(rng):
    y = ops.softmax_channels(_t(rng, 2, 5, 3, 3))
    np.testing.assert_allclose(y.data.sum(axis=1), 1.0)


# ======================================================
# Resizing and channel plumbing
# ======================================================

@pytest.mark.unit
def test_interpolation_rows_sum_to_one():
    mat = ops.interpolation_matrix(5, 12)
    np.testing.assert_allclose(mat.sum(axis=1), 1.0)


@pytest.mark.unit
def test_bilinear_upsample_preserves_constants():
    x = Tensor(np.full((1, 2, 3, 4), 0.7))
    y = ops.bilinear_upsample(x, 4)
    assert y.shape == (1, 2, 12, 16)
    np.testing.assert_allclose(y.data, 0.7)
    assert ops.bilinear_upsample(x, 1) is x


@pytest.mark.unit
def test_bilinear_resize_gradients(rng):
    assert grad_check(lambda x: ops.bilinear_resize(x, (5, 7)), [_t(rng, 1, 2, 3, 4)]) < TOL


@pytest.mark.unit
def test_binary_op_gradients(rng):
    assert grad_check(ops.concat_channels, [_t(rng, 2, 2, 3, 3), _t(rng, 2, 3, 3, 3)]) < TOL
    assert grad_check(ops.hadamard, [_t(rng, 2, 2, 3, 3), _t(rng, 2, 2, 3, 3)]) < TOL
    assert grad_check(ops.channel_scale, [_t(rng, 2, 3, 4, 4), _t(rng, 2, 3, 1, 1)]) < TOL


@pytest.mark.unit
def test_add_rejects_shape_mismatch(rng):
    with pytest.raises(ShapeError):
        ops.add(_t(rng, 1, 2, 3, 3), _t(rng, 1, 3, 3, 3))


@pytest.mark.unit
def test_expand_channels_scatters_zeros(rng):
    x = _t(rng, 1, 2, 3, 3)
    y = ops.expand_channels(x, np.array([0, 3]), 4)
    np.testing.assert_array_equal(y.data[:, [0, 3]], x.data)
    np.testing.assert_array_equal(y.data[:, [1, 2]], 0.0)
    assert grad_check(lambda t: ops.expand_channels(t, np.array([0, 3]), 4), [x]) < TOL


@pytest.mark.unit
def test_channel_mask_zeroes_channels(rng):
    y = ops.channel_mask(_t(rng, 1, 3, 2, 2), np.array([1.0, 0.0, 1.0]))
    assert not y.data[:, 1].any()


@pytest.mark.unit
def test_dropout_is_identity_in_eval(rng):
    x = _t(rng, 1, 2, 3, 3)
    assert ops.dropout(x, 0.5, None, training=False) is x
    with pytest.raises(ShapeError):
        ops.dropout(x, 0.5, None, training=True)


# ======================================================
# Losses
# ======================================================

@pytest.mark.unit
def test_cross_entropy_uniform_logits_is_log_classes():
    logits = Tensor(np.zeros((2, 4, 3, 3)))
    labels = np.zeros((2, 3, 3), dtype=np.int64)
    assert ops.cross_entropy(logits, labels).item() == pytest.approx(math.log(4))


@pytest.mark.unit
def test_cross_entropy_gradient_is_softmax_minus_onehot(rng):
    logits = Tensor(rng.standard_normal((2, 3, 2, 2)), requires_grad=True)
    labels = rng.integers(0, 3, (2, 2, 2))
    labels[0, 0, 0] = 255
    backward(ops.cross_entropy(logits, labels))
    expected = ops.softmax_channels(Tensor(logits.data)).data
    onehot = np.zeros_like(expected)
    valid = labels != 255
    for n, i, j in zip(*np.nonzero(valid)):
        onehot[n, labels[n, i, j], i, j] = 1.0
    expected = (expected - onehot) * valid[:, None] / valid.sum()
    np.testing.assert_allclose(logits.grad, expected, atol=1e-12)


@pytest.mark.unit
def test_cross_entropy_all_ignored():
    with pytest.raises(TrainingError):
        ops.cross_entropy(Tensor(np.zeros((1, 2, 2, 2))), np.full((1, 2, 2), 255))


@pytest.mark.unit
def test_combine_weights_terms():
    a = Tensor(np.asarray(1.0), requires_grad=True)
    b = Tensor(np.asarray(2.0), requires_grad=True)
    out = ops.combine([(1.0, a), (0.5, b)])
    assert out.item() == pytest.approx(2.0)
    backward(out)
    assert float(a.grad) == pytest.approx(1.0)
    assert float(b.grad) == pytest.approx(0.5)
