"""Differentiable primitives.

Every primitive computes its forward value with numpy, checks it for
non-finite entries and, when a tape is active and an input requires a
gradient, records a backward closure ``backward(g, needs) -> grads``.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .tensor import Tensor, as_tensor, emit

LOG_FLOOR = 1e-12
LEAKY_SLOPE = 0.2


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g, needs):
        return (
            _unbroadcast(g, a.shape) if needs[0] else None,
            _unbroadcast(g, b.shape) if needs[1] else None,
        )

    return emit("add", a.data + b.data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g, needs):
        return (
            _unbroadcast(g, a.shape) if needs[0] else None,
            _unbroadcast(-g, b.shape) if needs[1] else None,
        )

    return emit("sub", a.data - b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g, needs):
        return (
            _unbroadcast(g * b.data, a.shape) if needs[0] else None,
            _unbroadcast(g * a.data, b.shape) if needs[1] else None,
        )

    return emit("mul", a.data * b.data, (a, b), backward)


def add_scalar(x: Tensor, c: float) -> Tensor:
    return emit("add_scalar", x.data + c, (x,), lambda g, needs: (g,))


def scalar_mul(x: Tensor, c: float) -> Tensor:
    return emit("scalar_mul", x.data * c, (x,), lambda g, needs: (g * c,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return emit("relu", np.where(mask, x.data, 0.0), (x,), lambda g, needs: (g * mask,))


def leaky_relu(x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    scale = np.where(x.data > 0, 1.0, slope)
    return emit("leaky_relu", x.data * scale, (x,), lambda g, needs: (g * scale,))


def sigmoid(x: Tensor) -> Tensor:
    y = expit(x.data)
    return emit("sigmoid", y, (x,), lambda g, needs: (g * y * (1.0 - y),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return emit("tanh", y, (x,), lambda g, needs: (g * (1.0 - y * y),))


def log(x: Tensor) -> Tensor:
    """Natural log with the input clamped from below at ``LOG_FLOOR``."""
    inside = x.data >= LOG_FLOOR
    safe = np.where(inside, x.data, LOG_FLOOR)
    return emit("log", np.log(safe), (x,), lambda g, needs: (np.where(inside, g / safe, 0.0),))


def clamp(x: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    y = np.clip(x.data, lo, hi)
    inside = y == x.data
    return emit("clamp", y, (x,), lambda g, needs: (g * inside,))


# ------------------------------------------------------------ shape & reduce


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    src = x.shape
    return emit("reshape", x.data.reshape(shape), (x,), lambda g, needs: (g.reshape(src),))


def channel_concat(tensors: list[Tensor]) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    bounds = np.cumsum([0] + [t.shape[1] for t in tensors])

    def backward(g, needs):
        return tuple(
            g[:, bounds[i] : bounds[i + 1]] if needs[i] else None for i in range(len(tensors))
        )

    return emit("channel_concat", np.concatenate([t.data for t in tensors], axis=1), tuple(tensors), backward)


def mean(x: Tensor) -> Tensor:
    n = x.size
    shape = x.shape
    return emit("mean", np.asarray(x.data.mean()), (x,), lambda g, needs: (np.full(shape, g / n),))


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return emit("sum", np.asarray(x.data.sum()), (x,), lambda g, needs: (np.full(shape, g * 1.0),))


def abs_mean(x: Tensor) -> Tensor:
    """Mean absolute value; the L1 reduction used by the image losses."""
    n = x.size
    sign = np.sign(x.data)
    return emit("abs_mean", np.asarray(np.abs(x.data).mean()), (x,), lambda g, needs: (sign * (g / n),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    def backward(g, needs):
        return (g @ b.data.T if needs[0] else None, a.data.T @ g if needs[1] else None)

    return emit("matmul", a.data @ b.data, (a, b), backward)


def log_softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy of ``logits[B, n_classes]`` against integer labels."""
    labels = np.asarray(labels)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(len(labels))
    loss = -logp[rows, labels].mean()

    def backward(g, needs):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        return (d * (g / len(labels)),)

    return emit("cross_entropy", np.asarray(loss), (logits,), backward)


# -------------------------------------------------------------- convolution


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    span = size + 2 * padding - kernel
    if span < 0 or span % stride:
        raise ValueError(
            f"non-integral conv output: size={size} kernel={kernel} stride={stride} padding={padding}"
        )
    return span // stride + 1


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """[B, C, Hp, Wp] -> strided view [B, C, Ho, Wo, kh, kw]."""
    return sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """[B, C, Hp, Wp] -> column matrix [C * kh * kw, B * Ho * Wo]."""
    b, c = xp.shape[:2]
    cols = np.empty((c, kh, kw, b, ho, wo))
    xt = xp.transpose(1, 0, 2, 3)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xt[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols.reshape(c * kh * kw, b * ho * wo)


def _col2im(cols: np.ndarray, c: int, kh: int, kw: int, b: int, ho: int, wo: int, hp: int, wp: int, stride: int) -> np.ndarray:
    """Scatter-add a [C * kh * kw, B * Ho * Wo] column matrix into [B, C, Hp, Wp]."""
    cols = cols.reshape(c, kh, kw, b, ho, wo)
    out = np.zeros((c, b, hp, wp))
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[:, i, j]
    return out.transpose(1, 0, 2, 3)


def _to_rows(x: np.ndarray) -> np.ndarray:
    """[B, C, H, W] -> [C, B * H * W]."""
    return x.transpose(1, 0, 2, 3).reshape(x.shape[1], -1)


def _from_rows(m: np.ndarray, b: int, h: int, w: int) -> np.ndarray:
    """[C, B * H * W] -> contiguous [B, C, H, W]."""
    return np.ascontiguousarray(m.reshape(-1, b, h, w).transpose(1, 0, 2, 3))


def _conv_forward_loops(xp, kernel, stride, ho, wo):
    f, _, kh, kw = kernel.shape
    out = np.zeros((xp.shape[0], f, ho, wo))
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
            out += np.einsum("bchw,fc->bfhw", patch, kernel[:, :, i, j])
    return out


def _pad(x: np.ndarray, padding: int) -> np.ndarray:
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0, method: str = "im2col") -> Tensor:
    """Cross-correlation of ``x[B, C, H, W]`` with ``kernel[F, C, kH, kW]``.

    ``method="loops"`` accumulates one kernel tap at a time; it is the
    reference path for the default im2col matrix product.
    """
    b, c, h, w = x.shape
    f, kc, kh, kw = kernel.shape
    if kc != c:
        raise ValueError(f"conv2d channel mismatch: input has {c}, kernel expects {kc}")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    xp = _pad(x.data, padding)
    cols = None
    if method == "im2col":
        cols = _im2col(xp, kh, kw, stride, ho, wo)
        out = _from_rows(kernel.data.reshape(f, -1) @ cols, b, ho, wo)
    elif method == "loops":
        out = _conv_forward_loops(xp, kernel.data, stride, ho, wo)
    else:
        raise ValueError(f"unknown conv method {method!r}")

    def backward(g, needs):
        nonlocal cols
        dx = dk = None
        gm = _to_rows(g)
        if needs[1]:
            if cols is None:
                cols = _im2col(xp, kh, kw, stride, ho, wo)
            dk = (gm @ cols.T).reshape(kernel.shape)
        if needs[0]:
            dcols = kernel.data.reshape(f, -1).T @ gm
            dxp = _col2im(dcols, c, kh, kw, b, ho, wo, xp.shape[2], xp.shape[3], stride)
            dx = dxp[:, :, padding : padding + h, padding : padding + w] if padding else dxp
        return dx, dk

    return emit("conv2d", out, (x, kernel), backward)


def conv_transpose2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed convolution of ``x[B, Cin, H, W]`` with ``kernel[Cin, F, kH, kW]``.

    Output extent is ``(H - 1) * stride - 2 * padding + kH``; this is the
    adjoint of :func:`conv2d` with the same kernel, stride and padding.
    """
    b, c, h, w = x.shape
    kc, f, kh, kw = kernel.shape
    if kc != c:
        raise ValueError(f"conv_transpose2d channel mismatch: input has {c}, kernel expects {kc}")
    ho = (h - 1) * stride - 2 * padding + kh
    wo = (w - 1) * stride - 2 * padding + kw
    if ho < 1 or wo < 1:
        raise ValueError("conv_transpose2d output would be empty")
    xm = _to_rows(x.data)
    kmat = kernel.data.reshape(c, -1)
    outp = _col2im(kmat.T @ xm, f, kh, kw, b, h, w, ho + 2 * padding, wo + 2 * padding, stride)
    out = outp[:, :, padding : padding + ho, padding : padding + wo] if padding else outp

    def backward(g, needs):
        gcols = _im2col(_pad(g, padding), kh, kw, stride, h, w)
        dx = dk = None
        if needs[0]:
            dx = _from_rows(kmat @ gcols, b, h, w)
        if needs[1]:
            dk = (xm @ gcols.T).reshape(kernel.shape)
        return dx, dk

    return emit("conv_transpose2d", np.ascontiguousarray(out), (x, kernel), backward)


def max_pool2d(x: Tensor, kernel: int = 2, stride: int | None = None) -> Tensor:
    stride = stride or kernel
    b, c, h, w = x.shape
    ho = conv_output_size(h, kernel, stride, 0)
    wo = conv_output_size(w, kernel, stride, 0)
    win = _windows(x.data, kernel, kernel, stride).reshape(b, c, ho, wo, kernel * kernel)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward(g, needs):
        dx = np.zeros(x.shape)
        for tap in range(kernel * kernel):
            i, j = divmod(tap, kernel)
            dx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += np.where(arg == tap, g, 0.0)
        return (dx,)

    return emit("max_pool2d", out, (x,), backward)


def batch_norm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization of ``x[B, C, H, W]``.

    In training mode the batch statistics are used and the running buffers
    are updated in place; otherwise the running buffers are used.
    """
    axes = (0, 2, 3)
    shape = (1, -1, 1, 1)
    if training:
        n = x.size // x.shape[1]
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * (n / max(n - 1, 1))
    else:
        mu, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(shape)) * inv_std.reshape(shape)
    out = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)

    def backward(g, needs):
        dx = dgamma = dbeta = None
        if needs[1]:
            dgamma = (g * xhat).sum(axis=axes)
        if needs[2]:
            dbeta = g.sum(axis=axes)
        if needs[0]:
            dxhat = g * gamma.data.reshape(shape)
            if training:
                m1 = dxhat.mean(axis=axes, keepdims=True)
                m2 = (dxhat * xhat).mean(axis=axes, keepdims=True)
                dx = (dxhat - m1 - xhat * m2) * inv_std.reshape(shape)
            else:
                dx = dxhat * inv_std.reshape(shape)
        return dx, dgamma, dbeta

    return emit("batch_norm2d", out, (x, gamma, beta), backward)
