"""
Differentiable operations on N×C×H×W tensors.

Exactly the ops the segmentation networks need: dilated convolution,
stride-matched transposed convolution, batch normalisation, the three
activations, global pooling, bilinear resizing, channel concatenation,
elementwise products/sums, dropout, channel scatter for masked pruning,
and the softmax cross-entropy loss.

Convolutions use an im2col view built with ``as_strided`` and a single
``tensordot``; gradients scatter back with a k×k loop (col2im).
"""

from typing import Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import as_strided
from scipy import special

from .exceptions import ShapeError, TrainingError, shape_mismatch
from .tensor import Tensor, record_op

BN_EPS = 1e-5
BN_MOMENTUM = 0.9
IGNORE_INDEX = 255


def _check4(op: str, x: Tensor) -> Tuple[int, int, int, int]:
    if x.ndim != 4:
        raise shape_mismatch(op, "an N×C×H×W tensor", x.shape)
    return x.shape  # type: ignore[return-value]


def same_padding(kernel: int, dilation: int) -> int:
    """Per-side zero padding that keeps stride-1 convolutions resolution-preserving."""
    span = (kernel - 1) * dilation
    if span % 2:
        raise ShapeError(f"'same' padding needs an even tap span, got kernel {kernel} dilation {dilation}")
    return span // 2


def conv_output_size(size: int, kernel: int, stride: int, dilation: int, pad: int) -> int:
    span = (kernel - 1) * dilation + 1
    return (size + 2 * pad - span) // stride + 1


def _patches(xp: np.ndarray, k: int, stride: int, dilation: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    sn, sc, sh, sw = xp.strides
    return as_strided(
        xp,
        shape=(n, c, k, k, ho, wo),
        strides=(sn, sc, dilation * sh, dilation * sw, stride * sh, stride * sw),
        writeable=False,
    )


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1,
           dilation: int = 1, padding: str = "same") -> Tensor:
    """2-D convolution with square ``Cout×Cin×k×k`` kernels and atrous rate ``dilation``."""
    n, c, h, w = _check4("conv2d", x)
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise shape_mismatch("conv2d weight", "Cout×Cin×k×k", weight.shape)
    cout, cin, k, _ = weight.shape
    if cin != c:
        raise ShapeError(f"conv2d: input has {c} channels but weight {weight.shape} expects {cin}")
    if dilation < 1 or stride < 1:
        raise ShapeError(f"conv2d: stride {stride} and dilation {dilation} must be >= 1")
    if bias is not None and bias.shape != (cout,):
        raise shape_mismatch("conv2d bias", (cout,), bias.shape)
    if padding == "same":
        pad = same_padding(k, dilation)
    elif padding == "valid":
        pad = 0
    else:
        raise ShapeError(f"conv2d: padding must be 'same' or 'valid', got {padding!r}")

    ho = conv_output_size(h, k, stride, dilation, pad)
    wo = conv_output_size(w, k, stride, dilation, pad)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: input {x.shape} too small for kernel {k} dilation {dilation}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _patches(xp, k, stride, dilation, ho, wo)
    wd = weight.data
    out = np.tensordot(cols, wd, axes=([1, 2, 3], [1, 2, 3])).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def backward(g: np.ndarray):
        gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 4, 5]))
        gcols = np.tensordot(g, wd, axes=([1], [0]))  # n, ho, wo, c, k, k
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        hi = stride * (ho - 1) + 1
        wi = stride * (wo - 1) + 1
        for a in range(k):
            for b in range(k):
                gxp[:, :, a * dilation:a * dilation + hi:stride,
                    b * dilation:b * dilation + wi:stride] += gcols[:, :, :, :, a, b].transpose(0, 3, 1, 2)
        gx = gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return gx, gw, gb

    inputs = [x, weight] + ([bias] if bias is not None else [])
    return record_op("conv2d", out, inputs, backward)


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
                     stride: int = 2) -> Tensor:
    """Learned upsampling by exactly ``stride`` (kernel 2·stride, padding stride/2)."""
    n, c, h, w = _check4("conv_transpose2d", x)
    if stride not in (2, 4):
        raise ShapeError(f"conv_transpose2d: stride must be 2 or 4, got {stride}")
    k = 2 * stride
    if weight.ndim != 4 or weight.shape[0] != c or weight.shape[2:] != (k, k):
        raise shape_mismatch("conv_transpose2d weight", f"{c}×Cout×{k}×{k}", weight.shape)
    cout = weight.shape[1]
    if bias is not None and bias.shape != (cout,):
        raise shape_mismatch("conv_transpose2d bias", (cout,), bias.shape)
    pad = stride // 2
    full_h = (h - 1) * stride + k
    full_w = (w - 1) * stride + k
    hi = stride * (h - 1) + 1
    wi = stride * (w - 1) + 1

    wd = weight.data
    cols = np.tensordot(x.data, wd, axes=([1], [0]))  # n, h, w, cout, k, k
    full = np.zeros((n, cout, full_h, full_w), dtype=x.dtype)
    for a in range(k):
        for b in range(k):
            full[:, :, a:a + hi:stride, b:b + wi:stride] += cols[:, :, :, :, a, b].transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(full[:, :, pad:pad + h * stride, pad:pad + w * stride])
    if bias is not None:
        out += bias.data[None, :, None, None]

    def backward(g: np.ndarray):
        gfull = np.zeros((n, cout, full_h, full_w), dtype=g.dtype)
        gfull[:, :, pad:pad + h * stride, pad:pad + w * stride] = g
        patches = _patches(gfull, k, stride, 1, h, w)
        gx = np.tensordot(patches, wd, axes=([1, 2, 3], [1, 2, 3])).transpose(0, 3, 1, 2)
        gw = np.tensordot(x.data, patches, axes=([0, 2, 3], [0, 4, 5]))
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return np.ascontiguousarray(gx), gw, gb

    inputs = [x, weight] + ([bias] if bias is not None else [])
    return record_op("conv_transpose2d", out, inputs, backward)


class RunningStats:
    """Per-channel running mean/variance of a batch-norm layer."""

    def __init__(self, channels: int, dtype=np.float64, momentum: float = BN_MOMENTUM):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)
        self.momentum = momentum

    def update(self, mean: np.ndarray, var: np.ndarray, count: int) -> None:
        unbiased = var * count / (count - 1) if count > 1 else var
        m = self.momentum
        self.mean = m * self.mean + (1.0 - m) * mean
        self.var = m * self.var + (1.0 - m) * unbiased


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running: RunningStats,
               training: bool, eps: float = BN_EPS) -> Tensor:
    """Batch normalisation over (N, H, W) per channel."""
    n, c, h, w = _check4("batch_norm", x)
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm: input has {c} channels, gamma {gamma.shape}, beta {beta.shape}")
    if running.mean.shape != (c,):
        raise ShapeError(f"batch_norm: running stats have {running.mean.shape[0]} channels, input {c}")

    axes = (0, 2, 3)
    bc = (None, slice(None), None, None)
    gd = gamma.data

    if training:
        count = n * h * w
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu[bc]) * inv[bc]
        running.update(mu, var, count)

        def backward(g: np.ndarray):
            dgamma = (g * xhat).sum(axis=axes)
            dbeta = g.sum(axis=axes)
            dxhat = g * gd[bc]
            dx = (inv[bc] / count) * (count * dxhat - dxhat.sum(axis=axes)[bc]
                                      - xhat * (dxhat * xhat).sum(axis=axes)[bc])
            return dx, dgamma, dbeta
    else:
        inv = 1.0 / np.sqrt(running.var + eps)
        xhat = (x.data - running.mean[bc]) * inv[bc]

        def backward(g: np.ndarray):
            return g * (gd * inv)[bc], (g * xhat).sum(axis=axes), g.sum(axis=axes)

    out = gd[bc] * xhat + beta.data[bc]
    return record_op("batch_norm", out.astype(x.dtype, copy=False), [x, gamma, beta], backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return record_op("relu", x.data * mask, [x], lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    y = special.expit(x.data)
    return record_op("sigmoid", y, [x], lambda g: (g * y * (1.0 - y),))


def softmax_channels(x: Tensor) -> Tensor:
    """Per-pixel softmax over the channel axis (max-subtracted)."""
    _check4("softmax_channels", x)
    y = special.softmax(x.data, axis=1)

    def backward(g: np.ndarray):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return record_op("softmax_channels", y, [x], backward)


def global_avg_pool(x: Tensor) -> Tensor:
    n, c, h, w = _check4("global_avg_pool", x)
    out = x.data.mean(axis=(2, 3), keepdims=True)
    area = float(h * w)
    return record_op("global_avg_pool", out, [x],
                     lambda g: (np.broadcast_to(g / area, (n, c, h, w)).copy(),))


def interpolation_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Linear interpolation weights (align_corners=False), shape n_out × n_in."""
    dst = np.arange(n_out, dtype=np.float64)
    src = np.maximum((dst + 0.5) * (n_in / n_out) - 0.5, 0.0)
    i0 = np.minimum(np.floor(src).astype(int), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    lam = src - i0
    mat = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    np.add.at(mat, (rows, i0), 1.0 - lam)
    np.add.at(mat, (rows, i1), lam)
    return mat.astype(dtype)


def bilinear_resize(x: Tensor, size: Tuple[int, int]) -> Tensor:
    n, c, h, w = _check4("bilinear_resize", x)
    ho, wo = size
    if ho < 1 or wo < 1:
        raise ShapeError(f"bilinear_resize: invalid output size {size}")
    ah = interpolation_matrix(h, ho, x.dtype)
    aw = interpolation_matrix(w, wo, x.dtype)
    out = np.matmul(np.matmul(ah, x.data), aw.T)

    def backward(g: np.ndarray):
        return (np.matmul(ah.T, np.matmul(g, aw)),)

    return record_op("bilinear_resize", out, [x], backward)


def bilinear_upsample(x: Tensor, factor: int) -> Tensor:
    """Bilinear upsampling by an integer factor, align_corners=False."""
    if factor < 1:
        raise ShapeError(f"bilinear_upsample: factor must be >= 1, got {factor}")
    if factor == 1:
        return x
    _, _, h, w = _check4("bilinear_upsample", x)
    return bilinear_resize(x, (h * factor, w * factor))


def concat_channels(*tensors: Tensor) -> Tensor:
    if len(tensors) < 2:
        raise ShapeError("concat_channels needs at least two tensors")
    ref = _check4("concat_channels", tensors[0])
    for t in tensors[1:]:
        shape = _check4("concat_channels", t)
        if (shape[0], shape[2], shape[3]) != (ref[0], ref[2], ref[3]):
            raise ShapeError(f"concat_channels: N,H,W mismatch {tensors[0].shape} vs {t.shape}")
    widths = [t.shape[1] for t in tensors]
    bounds = np.cumsum([0] + widths)
    out = np.concatenate([t.data for t in tensors], axis=1)

    def backward(g: np.ndarray):
        return [g[:, bounds[i]:bounds[i + 1]] for i in range(len(tensors))]

    return record_op("concat_channels", out, tensors, backward)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("hadamard", a, b)
    ad, bd = a.data, b.data
    return record_op("hadamard", ad * bd, [a, b], lambda g: (g * bd, g * ad))


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return record_op("add", a.data + b.data, [a, b], lambda g: (g, g))


def scale(x: Tensor, factor: float) -> Tensor:
    return record_op("scale", x.data * factor, [x], lambda g: (g * factor,))


def channel_scale(x: Tensor, z: Tensor) -> Tensor:
    """Multiply each channel map of ``x`` (N×C×H×W) by ``z`` (N×C×1×1)."""
    n, c, _, _ = _check4("channel_scale", x)
    if z.shape != (n, c, 1, 1):
        raise shape_mismatch("channel_scale weights", (n, c, 1, 1), z.shape)
    xd, zd = x.data, z.data
    return record_op("channel_scale", xd * zd, [x, z],
                     lambda g: (g * zd, (g * xd).sum(axis=(2, 3), keepdims=True)))


def channel_mask(x: Tensor, keep: np.ndarray) -> Tensor:
    """Multiply channel ``c`` by the constant ``keep[c]`` (0 forces it to zero)."""
    _, c, _, _ = _check4("channel_mask", x)
    if keep.shape != (c,):
        raise shape_mismatch("channel_mask", (c,), keep.shape)
    m = keep.astype(x.dtype)[None, :, None, None]
    return record_op("channel_mask", x.data * m, [x], lambda g: (g * m,))


def expand_channels(x: Tensor, index: np.ndarray, width: int) -> Tensor:
    """Scatter the channels of ``x`` to positions ``index`` of a zero tensor of ``width`` channels."""
    n, c, h, w = _check4("expand_channels", x)
    if len(index) != c or (len(index) and (index.max() >= width or index.min() < 0)):
        raise ShapeError(f"expand_channels: {c} channels cannot scatter to {list(index)} within {width}")
    out = np.zeros((n, width, h, w), dtype=x.dtype)
    out[:, index] = x.data
    return record_op("expand_channels", out, [x], lambda g: (g[:, index],))


def flip_width(x: Tensor) -> Tensor:
    return record_op("flip_width", x.data[..., ::-1].copy(), [x], lambda g: (g[..., ::-1].copy(),))


def dropout(x: Tensor, p: float, rng: Optional[np.random.Generator], training: bool) -> Tensor:
    if not training or p <= 0.0:
        return x
    if rng is None:
        raise ShapeError("dropout in training mode needs a random generator")
    mask = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return record_op("dropout", x.data * mask, [x], lambda g: (g * mask,))


def total(x: Tensor) -> Tensor:
    """Sum of all elements as a 0-d tensor."""
    shape = x.shape
    return record_op("total", np.asarray(x.data.sum()), [x],
                     lambda g: (np.broadcast_to(g, shape).copy(),))


def weighted_sum(x: Tensor, weights: np.ndarray) -> Tensor:
    """sum(weights ∘ x) with constant weights, as a 0-d tensor."""
    if weights.shape != x.shape:
        raise shape_mismatch("weighted_sum", x.shape, weights.shape)
    return record_op("weighted_sum", np.asarray((x.data * weights).sum()), [x],
                     lambda g: (g * weights,))


def combine(terms: Sequence[Tuple[float, Tensor]]) -> Tensor:
    """Weighted sum of scalar tensors: sum(w_i * t_i)."""
    for _, t in terms:
        if t.data.size != 1:
            raise shape_mismatch("combine", "scalar terms", t.shape)
    value = sum(w * float(t.data) for w, t in terms)
    weights = [w for w, _ in terms]
    tensors = [t for _, t in terms]

    def backward(g: np.ndarray):
        return [np.asarray(g * w).reshape(t.shape) for w, t in zip(weights, tensors)]

    return record_op("combine", np.asarray(value), tensors, backward)


def cross_entropy(logits: Tensor, labels: np.ndarray, ignore_index: int = IGNORE_INDEX) -> Tensor:
    """Mean of -log softmax(logits)[label] over pixels whose label is not ignored."""
    n, c, h, w = _check4("cross_entropy", logits)
    if labels.shape != (n, h, w):
        raise shape_mismatch("cross_entropy labels", (n, h, w), labels.shape)
    valid = labels != ignore_index
    count = int(valid.sum())
    if count == 0:
        raise TrainingError("cross_entropy: every pixel in the batch is ignored")
    bad = labels[valid]
    if bad.size and (bad.min() < 0 or bad.max() >= c):
        raise ShapeError(f"cross_entropy: labels must lie in 0..{c - 1} or be {ignore_index}")

    safe = np.where(valid, labels, 0).astype(np.int64)
    logp = special.log_softmax(logits.data, axis=1)
    picked = np.take_along_axis(logp, safe[:, None], axis=1)[:, 0]
    loss = -(picked * valid).sum() / count

    def backward(g: np.ndarray):
        grad = np.exp(logp)
        np.put_along_axis(grad, safe[:, None],
                          np.take_along_axis(grad, safe[:, None], axis=1) - 1.0, axis=1)
        grad *= valid[:, None] * (float(g) / count)
        return (grad,)

    return record_op("cross_entropy", np.asarray(loss, dtype=logits.dtype), [logits], backward)
