"""
Differentiable operations over :class:`Tensor` values.

Spatial tensors are laid out ``(N, C, D, H, W)``. Every operation computes
its forward value with numpy and registers an exact backward function that
is only evaluated for parents requiring a gradient.
"""
import logging
from typing import List, Optional, Sequence, Tuple

import numpy as np

from fusenet.exceptions import BadLabel, ShapeMismatch
from fusenet.gradnet.tensor import Tensor, as_tensor


LOG = logging.getLogger(__name__)


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _check_spatial(x: Tensor, what: str) -> None:
    if x.ndim != 5:
        raise ShapeMismatch("{} expects an (N, C, D, H, W) tensor, given "
                            "shape {}".format(what, x.shape))


#
# Elementwise
#

def add(a: Tensor, b: Tensor) -> Tensor:
    """ Broadcasting sum. """
    try:
        out = a.data + b.data
    except ValueError as ex:
        raise ShapeMismatch(str(ex))

    def backward(g: np.ndarray) -> List[Optional[np.ndarray]]:
        return [_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None]
    return Tensor._from_op(out, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """ Broadcasting elementwise product. """
    try:
        out = a.data * b.data
    except ValueError as ex:
        raise ShapeMismatch(str(ex))

    def backward(g: np.ndarray) -> List[Optional[np.ndarray]]:
        return [_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None]
    return Tensor._from_op(out, (a, b), backward)


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(), dtype=x.dtype)

    def backward(g: np.ndarray) -> List[Optional[np.ndarray]]:
        return [np.broadcast_to(g, x.shape).astype(x.dtype)]
    return Tensor._from_op(out, (x,), backward)


def relu(x: Tensor) -> Tensor:
    """
    >>> relu(Tensor([-1., 0., 2.])).data.tolist()
    [0.0, 0.0, 2.0]
    """
    pos = x.data > 0
    out = np.where(pos, x.data, 0).astype(x.dtype)

    def backward(g: np.ndarray) -> List[Optional[np.ndarray]]:
        return [g * pos]
    return Tensor._from_op(out, (x,), backward)


#
# Convolution
#

def _conv_out(s: int, k: int, stride: int, padding: int) -> int:
    return (s + 2 * padding - k) // stride + 1


def conv3d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """
    3D cross-correlation.

    Output spatial size per axis is ``(S + 2 * padding - k) // stride + 1``.

    :param x: Input of shape ``(N, C_in, D, H, W)``.
    :param weight: Kernel of shape ``(C_out, C_in, k, k, k)``.
    :param bias: Optional bias of shape ``(C_out,)``.
    :param stride: 1 or 2.
    :param padding: Zero padding added to every spatial side.

    :raises ShapeMismatch: Incompatible input, kernel or bias shapes, or an
        input too small for the kernel.
    """
    _check_spatial(x, "conv3d")
    if weight.ndim != 5 or len(set(weight.shape[2:])) != 1:
        raise ShapeMismatch("Kernel must be (C_out, C_in, k, k, k), given {}"
                            .format(weight.shape))
    c_out, c_in, k = weight.shape[0], weight.shape[1], weight.shape[2]
    if x.shape[1] != c_in:
        raise ShapeMismatch("Input has {} channels, kernel expects {}"
                            .format(x.shape[1], c_in))
    if bias is not None and bias.shape != (c_out,):
        raise ShapeMismatch("Bias shape {} does not match {} output channels"
                            .format(bias.shape, c_out))
    if stride not in (1, 2):
        raise ShapeMismatch("Stride must be 1 or 2, given {}".format(stride))
    n = x.shape[0]
    out_sp = tuple(_conv_out(s, k, stride, padding) for s in x.shape[2:])
    if min(out_sp) < 1:
        raise ShapeMismatch("Input spatial size {} too small for kernel {} "
                            "with padding {}".format(x.shape[2:], k, padding))
    p = padding
    # Channel-major views keep tensordot outputs in (C, N, ...) order.
    xp_t = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p), (p, p))).transpose(1, 0, 2, 3, 4)
    od, oh, ow = out_sp
    w = weight.data

    def window(a: int, b: int, c: int) -> Tuple[slice, ...]:
        return (slice(None), slice(None),
                slice(a, a + stride * (od - 1) + 1, stride),
                slice(b, b + stride * (oh - 1) + 1, stride),
                slice(c, c + stride * (ow - 1) + 1, stride))

    offsets = [(a, b, c) for a in range(k) for b in range(k) for c in range(k)]
    out_t = np.zeros((c_out, n) + out_sp, dtype=np.result_type(x.data, w))
    for a, b, c in offsets:
        out_t += np.tensordot(w[:, :, a, b, c], xp_t[window(a, b, c)], axes=([1], [0]))
    if bias is not None:
        out_t += bias.data.reshape(-1, 1, 1, 1, 1)
    out = np.ascontiguousarray(out_t.transpose(1, 0, 2, 3, 4))

    def backward(g: np.ndarray) -> List[Optional[np.ndarray]]:
        g_t = g.transpose(1, 0, 2, 3, 4)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = np.zeros_like(w)
            for a, b, c in offsets:
                gw[:, :, a, b, c] = np.tensordot(
                    g_t, xp_t[window(a, b, c)], axes=([1, 2, 3, 4], [1, 2, 3, 4])
                )
        if x.requires_grad:
            gxp_t = np.zeros(xp_t.shape, dtype=np.result_type(g, w))
            for a, b, c in offsets:
                gxp_t[window(a, b, c)] += np.tensordot(
                    w[:, :, a, b, c], g_t, axes=([0], [0])
                )
            sp = tuple(slice(p, s - p) for s in gxp_t.shape[2:])
            gx = np.ascontiguousarray(
                gxp_t[(slice(None), slice(None)) + sp].transpose(1, 0, 2, 3, 4)
            ).astype(x.dtype)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3, 4)).astype(bias.dtype)
        return [gx, gw, gb]

    parents: Tuple[Tensor, ...] = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, backward)


def conv1x1x1(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """
    Per-voxel linear combination over channels.

    :raises ShapeMismatch: Kernel is not ``(C_out, C_in, 1, 1, 1)``.
    """
    if weight.ndim != 5 or weight.shape[2:] != (1, 1, 1):
        raise ShapeMismatch("Pointwise kernel must be (C_out, C_in, 1, 1, 1), "
                            "given {}".format(weight.shape))
    return conv3d(x, weight, bias, stride=1, padding=0)


#
# Normalization and pooling
#

def batch_norm(x: Tensor, scale: Tensor, shift: Tensor,
               running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.9,
               eps: float = 1e-5) -> Tensor:
    """
    Per-channel batch normalization over all axes except axis 1.

    In training mode batch statistics normalize the input (biased variance)
    and the running statistics are updated in place as
    ``running = momentum * running + (1 - momentum) * batch`` using the
    unbiased variance. Evaluation mode normalizes with the running
    statistics.

    :raises ShapeMismatch: Parameter shapes disagree with the channel count,
        or fewer than two values per channel are available in training mode.
    """
    if x.ndim < 2:
        raise ShapeMismatch("batch_norm expects (N, C, ...) input")
    c = x.shape[1]
    if scale.shape != (c,) or shift.shape != (c,) \
            or running_mean.shape != (c,) or running_var.shape != (c,):
        raise ShapeMismatch("Normalization parameters must have shape ({},)"
                            .format(c))
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, c) + (1,) * (x.ndim - 2)
    m = x.data.size // c
    if training:
        if m < 2:
            raise ShapeMismatch("Training mode batch_norm needs at least two "
                                "values per channel, given {}".format(m))
        mu = x.data.mean(axis=axes, dtype=np.float64)
        var = x.data.var(axis=axes, dtype=np.float64)
        running_mean *= momentum
        running_mean += (1. - momentum) * mu
        running_var *= momentum
        running_var += (1. - momentum) * var * m / (m - 1)
    else:
        mu = running_mean.astype(np.float64)
        var = running_var.astype(np.float64)
    dt = x.dtype
    inv_std = (1. / np.sqrt(var + eps)).astype(dt).reshape(bshape)
    xhat = (x.data - mu.astype(dt).reshape(bshape)) * inv_std
    out = xhat * scale.data.reshape(bshape) + shift.data.reshape(bshape)

    def backward(g: np.ndarray) -> List[Optional[np.ndarray]]:
        gx = gs = gt = None
        if scale.requires_grad:
            gs = (g * xhat).sum(axis=axes).astype(scale.dtype)
        if shift.requires_grad:
            gt = g.sum(axis=axes).astype(shift.dtype)
        if x.requires_grad:
            gxhat = g * scale.data.reshape(bshape)
            if training:
                gx = inv_std / m * (
                    m * gxhat
                    - gxhat.sum(axis=axes, keepdims=True)
                    - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True)
                )
            else:
                gx = gxhat * inv_std
            gx = gx.astype(x.dtype)
        return [gx, gs, gt]
    return Tensor._from_op(out.astype(dt), (x, scale, shift), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """ Mean over all spatial axes: ``(N, C, ...) -> (N, C)``. """
    if x.ndim < 3:
        raise ShapeMismatch("global_avg_pool expects spatial axes")
    axes = tuple(range(2, x.ndim))
    count = int(np.prod(x.shape[2:]))
    out = x.data.mean(axis=axes)

    def backward(g: np.ndarray) -> List[Optional[np.ndarray]]:
        gx = np.broadcast_to(g.reshape(g.shape + (1,) * len(axes)), x.shape) / count
        return [gx.astype(x.dtype)]
    return Tensor._from_op(out, (x,), backward)


def fully_connected(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """
    ``x @ weight.T + bias`` for ``x`` of shape ``(N, F)`` and ``weight`` of
    shape ``(O, F)``.
    """
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeMismatch("Cannot apply weight {} to features {}"
                            .format(weight.shape, x.shape))
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeMismatch("Bias shape {} does not match {} outputs"
                            .format(bias.shape, weight.shape[0]))
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def backward(g: np.ndarray) -> List[Optional[np.ndarray]]:
        gx = (g @ weight.data).astype(x.dtype) if x.requires_grad else None
        gw = (g.T @ x.data).astype(weight.dtype) if weight.requires_grad else None
        gb = None
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=0).astype(bias.dtype)
        return [gx, gw, gb]
    parents: Tuple[Tensor, ...] = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, backward)


#
# Resampling
#

def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """
    Linear interpolation weights mapping ``n_in`` samples onto ``n_out``
    samples with aligned outer edges (half-pixel centers), clamped at the
    borders.
    """
    m = np.zeros((n_out, n_in), dtype=np.float64)
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w1 = src - i0
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1. - w1)
    np.add.at(m, (rows, i1), w1)
    return m


def _apply_axis(a: np.ndarray, m: np.ndarray, axis: int) -> np.ndarray:
    return np.moveaxis(np.tensordot(m, a, axes=([1], [axis])), 0, axis)


def resize_trilinear(x: Tensor, size: Sequence[int]) -> Tensor:
    """
    Separable trilinear resize of the spatial axes to ``size``.
    """
    _check_spatial(x, "resize_trilinear")
    size = tuple(int(s) for s in size)
    if len(size) != 3 or min(size) < 1:
        raise ShapeMismatch("Resize target must be three positive sizes, "
                            "given {}".format(size))
    mats = [_interp_matrix(s_in, s_out).astype(x.dtype)
            for s_in, s_out in zip(x.shape[2:], size)]
    out = x.data
    for i, m in enumerate(mats):
        if m.shape[0] != m.shape[1]:
            out = _apply_axis(out, m, 2 + i)
    out = np.ascontiguousarray(out)

    def backward(g: np.ndarray) -> List[Optional[np.ndarray]]:
        gx = g
        for i, m in enumerate(mats):
            if m.shape[0] != m.shape[1]:
                gx = _apply_axis(gx, m.T, 2 + i)
        return [np.ascontiguousarray(gx)]
    return Tensor._from_op(out, (x,), backward)


def upsample_trilinear(x: Tensor, factor: int) -> Tensor:
    """
    Trilinear upsampling by an integer factor with the half-pixel-center
    convention.
    """
    if factor not in (1, 2, 4, 8):
        raise ShapeMismatch("Upsample factor must be 1, 2, 4 or 8, given {}"
                            .format(factor))
    _check_spatial(x, "upsample_trilinear")
    return resize_trilinear(x, tuple(s * factor for s in x.shape[2:]))


#
# Structural
#

def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    """ Concatenate along ``axis`` (channels by default). """
    if not tensors:
        raise ShapeMismatch("Nothing to concatenate")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as ex:
        raise ShapeMismatch(str(ex))
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g: np.ndarray) -> List[Optional[np.ndarray]]:
        res: List[Optional[np.ndarray]] = []
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(int(lo), int(hi))
                res.append(g[tuple(sl)])
            else:
                res.append(None)
        return res
    return Tensor._from_op(out, tuple(tensors), backward)


def crop_box(x: Tensor, start: Sequence[int], size: Sequence[int]) -> Tensor:
    """
    Extract the spatial box ``[start, start + size)`` from ``x``. Box parts
    falling outside of the input are zero-filled.
    """
    _check_spatial(x, "crop_box")
    start = tuple(int(s) for s in start)
    size = tuple(int(s) for s in size)
    src_sl = []
    dst_sl = []
    for st, sz, dim in zip(start, size, x.shape[2:]):
        lo = max(st, 0)
        hi = min(st + sz, dim)
        if hi <= lo:
            src_sl.append(slice(0, 0))
            dst_sl.append(slice(0, 0))
            continue
        src_sl.append(slice(lo, hi))
        dst_sl.append(slice(lo - st, hi - st))
    src = (slice(None), slice(None)) + tuple(src_sl)
    dst = (slice(None), slice(None)) + tuple(dst_sl)
    out = np.zeros(x.shape[:2] + size, dtype=x.dtype)
    out[dst] = x.data[src]

    def backward(g: np.ndarray) -> List[Optional[np.ndarray]]:
        gx = np.zeros(x.shape, dtype=x.dtype)
        gx[src] = g[dst]
        return [gx]
    return Tensor._from_op(out, (x,), backward)


def channel_mean(x: Tensor) -> Tensor:
    """ Mean over axis 1, keeping it: ``(N, C, ...) -> (N, 1, ...)``. """
    c = x.shape[1]
    out = x.data.mean(axis=1, keepdims=True)

    def backward(g: np.ndarray) -> List[Optional[np.ndarray]]:
        return [np.broadcast_to(g / c, x.shape).astype(x.dtype)]
    return Tensor._from_op(out, (x,), backward)


#
# Loss
#

def log_softmax_array(logits: np.ndarray, axis: int = 1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """
    Mean negative log-likelihood of ``labels`` under the softmax of
    ``logits`` over axis 1.

    Logits are ``(N, C)`` for classification or ``(N, C, D, H, W)`` for
    voxelwise segmentation with labels shaped like the logits minus axis 1.

    >>> round(softmax_cross_entropy(Tensor([[0., 0.]]), np.array([0])).item(), 4)
    0.6931

    :raises BadLabel: A label lies outside ``[0, C)``.
    :raises ShapeMismatch: Label shape does not match the logits.
    """
    labels = np.asarray(labels)
    c = logits.shape[1]
    expected = logits.shape[:1] + logits.shape[2:]
    if labels.shape != expected:
        raise ShapeMismatch("Labels shape {} does not match logits {}"
                            .format(labels.shape, logits.shape))
    if not np.issubdtype(labels.dtype, np.integer):
        if not np.all(np.mod(labels, 1) == 0):
            raise BadLabel("Labels must be integral class indices")
        labels = labels.astype(np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise BadLabel("Labels must lie in [0, {}), found range [{}, {}]"
                       .format(c, labels.min(), labels.max()))
    # Move classes last and flatten the rest.
    lg = np.moveaxis(logits.data, 1, -1).reshape(-1, c)
    lab = labels.reshape(-1)
    count = lab.size
    logp = log_softmax_array(lg, axis=1)
    rows = np.arange(count)
    out = np.asarray(-logp[rows, lab].sum() / count, dtype=logits.dtype)

    def backward(g: np.ndarray) -> List[Optional[np.ndarray]]:
        d = np.exp(logp)
        d[rows, lab] -= 1.
        d *= g / count
        moved = d.reshape(expected + (c,))
        return [np.ascontiguousarray(np.moveaxis(moved, -1, 1)).astype(logits.dtype)]
    return Tensor._from_op(out, (logits,), backward)


def softmax_array(logits: np.ndarray, axis: int = 1) -> np.ndarray:
    return np.exp(log_softmax_array(logits, axis))


__all__ = [
    "add", "mul", "sum_all", "relu", "conv3d", "conv1x1x1", "batch_norm",
    "global_avg_pool", "fully_connected", "resize_trilinear",
    "upsample_trilinear", "concat", "crop_box", "channel_mean",
    "softmax_cross_entropy", "log_softmax_array", "softmax_array",
    "as_tensor",
]
