"""Forward and backward kernels for the dense 3D layers.

All volumetric tensors are ``(N, C, D, H, W)`` numpy arrays in C order, so
the last axis is fastest. Convolution is cross-correlation (no kernel flip).
Every ``*_backward`` takes the upstream gradient plus whatever its forward
saved and returns gradients in the same order as the forward inputs.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv3d_output_shape(size, kernel: int, stride: int = 1, padding: int = 0):
    """Spatial output extent ``floor((n + 2p - k) / s) + 1`` per axis."""
    out = tuple((int(n) + 2 * padding - kernel) // stride + 1 for n in size)
    if any(o < 1 for o in out):
        raise ValueError(
            f"conv3d: input spatial size {tuple(size)} too small for "
            f"kernel={kernel}, padding={padding}"
        )
    return out


def _pad(x, padding):
    if padding == 0:
        return x
    p = padding
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p), (p, p)))


def _windows(xp, kernel, stride, out_shape):
    win = sliding_window_view(xp, (kernel, kernel, kernel), axis=(2, 3, 4))
    od, oh, ow = out_shape
    return win[:, :, : od * stride : stride, : oh * stride : stride, : ow * stride : stride]


def _im2col(xp, kernel, stride, out_shape):
    """Column matrix ``(k^3 * C, N * D'H'W')``, rows ordered (offset, channel).

    Built from k^3 strided slice copies, which keeps memory access local.
    """
    n, c = xp.shape[:2]
    od, oh, ow = out_shape
    s = stride
    cols = np.empty((kernel ** 3, c, n, od, oh, ow), dtype=xp.dtype)
    i = 0
    for a in range(kernel):
        for b in range(kernel):
            for cc in range(kernel):
                sl = xp[:, :, a : a + od * s : s, b : b + oh * s : s, cc : cc + ow * s : s]
                cols[i] = sl.transpose(1, 0, 2, 3, 4)
                i += 1
    return cols.reshape(kernel ** 3 * c, n * od * oh * ow)


def _weight_matrix(weight):
    k_out, c = weight.shape[:2]
    # (K, C, k, k, k) -> (K, k^3 * C) matching the im2col row order
    return weight.reshape(k_out, c, -1).transpose(0, 2, 1).reshape(k_out, -1)


def conv3d_forward(x, weight, bias=None, stride: int = 1, padding: int = 0, return_cols=False):
    """3D cross-correlation.

    ``x`` is ``(N, C, D, H, W)``, ``weight`` is ``(K, C, k, k, k)`` and
    ``bias`` is ``(K,)`` or None. Returns ``(N, K, D', H', W')``; with
    ``return_cols`` also the im2col matrix, which the backward can reuse.
    """
    if x.ndim != 5 or weight.ndim != 5:
        raise ValueError("conv3d expects 5-D input and weight")
    if x.shape[1] != weight.shape[1]:
        raise ValueError(
            f"conv3d: input has {x.shape[1]} channels, weight expects {weight.shape[1]}"
        )
    k = weight.shape[2]
    if weight.shape[2:] != (k, k, k):
        raise ValueError("conv3d: kernel must be cubic")
    out_shape = conv3d_output_shape(x.shape[2:], k, stride, padding)
    cols = _im2col(_pad(x, padding), k, stride, out_shape)
    y = _weight_matrix(weight) @ cols
    if bias is not None:
        y += bias.reshape(-1, 1)
    y = y.reshape((weight.shape[0], x.shape[0]) + out_shape).transpose(1, 0, 2, 3, 4)
    y = np.ascontiguousarray(y, dtype=np.result_type(x, weight))
    return (y, cols) if return_cols else y


def conv3d_backward(grad_out, x, weight, stride: int = 1, padding: int = 0,
                    has_bias: bool = True, need_input_grad: bool = True, cols=None):
    """Gradients of :func:`conv3d_forward` w.r.t. input, weight and bias.

    ``x`` is the saved forward input (its shape is all that is used when
    ``cols`` from the forward is supplied). ``grad_input`` is None when
    ``need_input_grad`` is false.
    """
    k_out, c, k = weight.shape[0], weight.shape[1], weight.shape[2]
    n = x.shape[0]
    out_shape = conv3d_output_shape(x.shape[2:], k, stride, padding)
    if grad_out.shape != (n, k_out) + out_shape:
        raise ValueError(
            f"conv3d_backward: grad_out shape {grad_out.shape} does not match "
            f"forward output {(n, k_out) + out_shape}"
        )
    grad_bias = grad_out.sum(axis=(0, 2, 3, 4)) if has_bias else None
    if cols is None:
        cols = _im2col(_pad(x, padding), k, stride, out_shape)
    gy = np.ascontiguousarray(grad_out.transpose(1, 0, 2, 3, 4)).reshape(k_out, -1)
    gw = gy @ cols.T
    grad_weight = gw.reshape(k_out, k ** 3, c).transpose(0, 2, 1).reshape(weight.shape)
    grad_weight = np.ascontiguousarray(grad_weight)

    grad_input = None
    if need_input_grad:
        gcols = (_weight_matrix(weight).T @ gy).reshape((k ** 3, c, n) + out_shape)
        p = padding
        d, h, w = x.shape[2:]
        gxp = np.zeros((c, n, d + 2 * p, h + 2 * p, w + 2 * p), dtype=gcols.dtype)
        od, oh, ow = out_shape
        s = stride
        # fixed offset order keeps accumulation deterministic
        i = 0
        for a in range(k):
            for b in range(k):
                for cc in range(k):
                    gxp[:, :, a : a + od * s : s, b : b + oh * s : s, cc : cc + ow * s : s] += gcols[i]
                    i += 1
        if p:
            gxp = gxp[:, :, p:-p, p:-p, p:-p]
        grad_input = np.ascontiguousarray(gxp.transpose(1, 0, 2, 3, 4))
    return grad_input, grad_weight, grad_bias


def batchnorm3d_forward(x, gamma, beta, running_mean, running_var, train: bool,
                        eps: float = 1e-5, momentum: float = 0.1):
    """Per-channel batch normalization.

    In train mode the running statistics are updated in place (unbiased
    variance, as in common frameworks). Returns ``(y, cache)``; the cache is
    None in eval mode, whose backward is a per-channel affine map.
    """
    shape = (1, -1, 1, 1, 1)
    if train:
        count = x.shape[0] * x.shape[2] * x.shape[3] * x.shape[4]
        if count < 2:
            raise ValueError("batchnorm3d: train mode needs at least 2 values per channel")
        mean = x.mean(axis=(0, 2, 3, 4))
        xc = x - mean.reshape(shape)
        var = (xc * xc).mean(axis=(0, 2, 3, 4))
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv_std.reshape(shape)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var * count / (count - 1)
        y = xhat * gamma.reshape(shape) + beta.reshape(shape)
        return y.astype(x.dtype, copy=False), (xhat, inv_std)
    inv_std = 1.0 / np.sqrt(running_var + eps)
    y = (x - running_mean.reshape(shape)) * (inv_std * gamma).reshape(shape) + beta.reshape(shape)
    return y.astype(x.dtype, copy=False), inv_std


def batchnorm3d_backward(grad_out, cache, gamma, train: bool = True):
    """Returns ``(grad_input, grad_gamma, grad_beta)``."""
    shape = (1, -1, 1, 1, 1)
    axes = (0, 2, 3, 4)
    grad_beta = grad_out.sum(axis=axes)
    if not train:
        inv_std = cache
        # gamma-gradient needs xhat, which eval mode does not keep
        return grad_out * (gamma * inv_std).reshape(shape), None, grad_beta
    xhat, inv_std = cache
    grad_gamma = (grad_out * xhat).sum(axis=axes)
    count = grad_out.size // grad_out.shape[1]
    g = grad_out - (grad_beta / count).reshape(shape) - xhat * (grad_gamma / count).reshape(shape)
    grad_input = g * (gamma * inv_std).reshape(shape)
    return grad_input.astype(grad_out.dtype, copy=False), grad_gamma, grad_beta


def relu_forward(x):
    return np.maximum(x, 0)


def relu_backward(grad_out, x):
    return grad_out * (x > 0)


def _blocks(x, k):
    """``(N, C, D, H, W) -> (N, C, D/k, H/k, W/k, k^3)`` non-overlapping windows."""
    n, c, d, h, w = x.shape
    b = x.reshape(n, c, d // k, k, h // k, k, w // k, k).transpose(0, 1, 2, 4, 6, 3, 5, 7)
    return b.reshape(n, c, d // k, h // k, w // k, k ** 3)


def maxpool3d_forward(x, kernel: int = 2, stride: int = 2):
    """Non-overlapping max pooling; returns ``(y, argmax)``.

    ``argmax`` is the flat (d, h, w) index inside each window. Ties go to
    the lowest such index, which is also the lowest linear voxel index.
    """
    if kernel != stride:
        raise ValueError("maxpool3d supports kernel == stride only")
    d, h, w = x.shape[2:]
    if d % kernel or h % kernel or w % kernel:
        raise ValueError(f"maxpool3d: spatial size {(d, h, w)} not divisible by {kernel}")
    win = _blocks(x, kernel)
    idx = np.argmax(win, axis=-1)
    y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(y), idx


def maxpool3d_backward(grad_out, argmax, input_shape, kernel: int = 2, stride: int = 2):
    n, c, d, h, w = input_shape
    k = kernel
    onehot = argmax[..., None] == np.arange(k ** 3)
    g = (onehot * grad_out[..., None]).astype(grad_out.dtype)
    g = g.reshape(n, c, d // k, h // k, w // k, k, k, k).transpose(0, 1, 2, 5, 3, 6, 4, 7)
    return np.ascontiguousarray(g).reshape(input_shape)


def avgpool3d_forward(x, kernel: int = 2):
    """Non-overlapping average pooling (stride equals kernel)."""
    n, c, d, h, w = x.shape
    k = kernel
    if d % k or h % k or w % k:
        raise ValueError(f"avgpool3d: spatial size {(d, h, w)} not divisible by {k}")
    y = x.reshape(n, c, d // k, k, h // k, k, w // k, k).mean(axis=(3, 5, 7))
    return y.astype(x.dtype, copy=False)


def avgpool3d_backward(grad_out, kernel: int = 2):
    k = kernel
    g = grad_out / (k ** 3)
    g = np.repeat(np.repeat(np.repeat(g, k, axis=2), k, axis=3), k, axis=4)
    return g.astype(grad_out.dtype, copy=False)


def global_avg_pool_forward(x):
    """``(N, C, D, H, W) -> (N, C)``."""
    return x.mean(axis=(2, 3, 4))


def global_avg_pool_backward(grad_out, input_shape):
    n, c, d, h, w = input_shape
    g = grad_out / float(d * h * w)
    return np.broadcast_to(g[:, :, None, None, None], input_shape).astype(grad_out.dtype)


def linear_forward(x, weight, bias=None):
    """``x @ weight.T + bias`` with ``weight`` shaped ``(out, in)``."""
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(f"linear: input features {x.shape[-1]} != weight in-features {weight.shape[1]}")
    y = x @ weight.T
    if bias is not None:
        y = y + bias
    return y


def linear_backward(grad_out, x, weight, has_bias: bool = True):
    grad_input = grad_out @ weight
    grad_weight = grad_out.T @ x
    grad_bias = grad_out.sum(axis=0) if has_bias else None
    return grad_input, grad_weight, grad_bias


def sigmoid(z):
    """Numerically stable logistic function."""
    z = np.asarray(z)
    out = np.empty_like(z, dtype=np.result_type(z, np.float32))
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid_backward(grad_out, y):
    """Backward through sigmoid given its output ``y``."""
    return grad_out * y * (1.0 - y)


def channel_concat(tensors):
    return np.concatenate(tensors, axis=1)


def channel_concat_backward(grad_out, channels):
    """Split ``grad_out`` along axis 1 into pieces of the given channel counts."""
    bounds = np.cumsum(channels)[:-1]
    return np.split(grad_out, bounds, axis=1)


def residual_add(a, b):
    return a + b


def residual_add_backward(grad_out):
    return grad_out, grad_out
