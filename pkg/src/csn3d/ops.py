"""Forward and backward kernels for the layers of a 3D ResNet / CSN.

All kernels are dtype-generic: they compute in whatever float type the input
carries, so the same code runs in float32 for training and float64 for
finite-difference checks.

Convolution is correlation (no kernel flip) with zero padding. Grouped
convolution is computed as ``G`` independent matrix products over an
im2col buffer; output channel ``o`` reads only input channels of group
``o // (c_out / G)``.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, check5


def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, int):
        return (v, v, v)
    t = tuple(int(i) for i in v)
    if len(t) != 3:
        raise ValueError(f"expected 3 values, got {v}")
    return t


@dataclass(frozen=True)
class ConvSpec:
    c_in: int
    c_out: int
    groups: int = 1
    kernel: tuple[int, int, int] = (3, 3, 3)
    stride: tuple[int, int, int] = (1, 1, 1)
    padding: tuple[int, int, int] = (0, 0, 0)
    bias: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kernel", _triple(self.kernel))
        object.__setattr__(self, "stride", _triple(self.stride))
        object.__setattr__(self, "padding", _triple(self.padding))
        if min(self.c_in, self.c_out, self.groups) < 1:
            raise ValueError(f"channel and group counts must be positive: {self}")
        if self.c_in % self.groups or self.c_out % self.groups:
            raise ValueError(
                f"groups={self.groups} must divide c_in={self.c_in} and c_out={self.c_out}"
            )
        if min(self.kernel) < 1 or min(self.stride) < 1 or min(self.padding) < 0:
            raise ValueError(f"invalid kernel/stride/padding: {self}")

    @property
    def depthwise(self) -> bool:
        return self.groups == self.c_in == self.c_out

    @property
    def weight_shape(self) -> tuple[int, int, int, int, int]:
        return (self.c_out, self.c_in // self.groups, *self.kernel)

    def output_extents(self, t: int, h: int, w: int) -> tuple[int, int, int]:
        out = tuple(
            (size + 2 * p - k) // s + 1
            for size, k, s, p in zip((t, h, w), self.kernel, self.stride, self.padding)
        )
        if min(out) < 1 or any(
            size + 2 * p < k for size, k, p in zip((t, h, w), self.kernel, self.padding)
        ):
            raise ShapeError(f"non-positive output extent for input {(t, h, w)} with {self}")
        return out


def same_padding(kernel) -> tuple[int, int, int]:
    return tuple((k - 1) // 2 for k in _triple(kernel))


def _pad(x, padding):
    pt, ph, pw = padding
    if not (pt or ph or pw):
        return x
    return np.pad(x, ((0, 0), (0, 0), (pt, pt), (ph, ph), (pw, pw)))


def _im2col(x, spec: ConvSpec):
    """(n, G, c_in/G * k, L) columns. Rows ordered (channel, kt, kh, kw)."""
    n, c, t, h, w = x.shape
    g = spec.groups
    to, ho, wo = spec.output_extents(t, h, w)
    if spec.kernel == (1, 1, 1) and spec.padding == (0, 0, 0):
        st, sh, sw = spec.stride
        xs = x[:, :, ::st, ::sh, ::sw]
        return np.ascontiguousarray(xs).reshape(n, g, c // g, to * ho * wo)
    win = sliding_window_view(_pad(x, spec.padding), spec.kernel, axis=(2, 3, 4))
    st, sh, sw = spec.stride
    win = win[:, :, : st * to : st, : sh * ho : sh, : sw * wo : sw]
    # (n, c, to, ho, wo, kt, kh, kw) -> (n, c, kt, kh, kw, to, ho, wo)
    cols = win.transpose(0, 1, 5, 6, 7, 2, 3, 4)
    k = spec.kernel[0] * spec.kernel[1] * spec.kernel[2]
    return np.ascontiguousarray(cols).reshape(n, g, (c // g) * k, to * ho * wo)


def _check_conv(x, weight, spec: ConvSpec):
    s = check5(x)
    if s.c != spec.c_in:
        raise ShapeError(f"input has {s.c} channels, conv expects c_in={spec.c_in}")
    if weight.shape != spec.weight_shape:
        raise ShapeError(f"weight shape {weight.shape} != {spec.weight_shape}")
    return s


def _chunks(n: int, workers: int):
    bounds = np.linspace(0, n, min(workers, n) + 1).astype(int)
    return [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]


def _run_batched(fn, n: int, workers: int, *arrays):
    """Apply ``fn`` to batch slices of ``arrays``, concatenating on axis 0.

    Each sample's output is produced by exactly one call with the same inner
    arithmetic, so the result does not depend on ``workers``.
    """
    if workers <= 1 or n == 1:
        return fn(*arrays)
    parts = _chunks(n, workers)
    with ThreadPoolExecutor(max_workers=len(parts)) as pool:
        outs = list(pool.map(lambda sl: fn(*(a[sl] for a in arrays)), parts))
    return np.concatenate(outs, axis=0)


def conv3d_forward(x, weight, spec: ConvSpec, bias=None, workers: int = 1):
    s = _check_conv(x, weight, spec)
    g = spec.groups
    to, ho, wo = spec.output_extents(s.t, s.h, s.w)
    wm = weight.reshape(g, spec.c_out // g, -1)

    def kernel(xb):
        cols = _im2col(xb, spec)
        return np.matmul(wm, cols)

    out = _run_batched(kernel, s.n, workers, x)
    out = out.reshape(s.n, spec.c_out, to, ho, wo)
    if bias is not None:
        out = out + bias.reshape(1, -1, 1, 1, 1)
    return out


def _col2im(gcols, x_shape, spec: ConvSpec, out_ext):
    n, c, t, h, w = x_shape
    pt, ph, pw = spec.padding
    kt, kh, kw = spec.kernel
    st, sh, sw = spec.stride
    to, ho, wo = out_ext
    gc = gcols.reshape(n, c, kt, kh, kw, to, ho, wo)
    gx = np.zeros((n, c, t + 2 * pt, h + 2 * ph, w + 2 * pw), dtype=gcols.dtype)
    for a in range(kt):
        for b in range(kh):
            for d in range(kw):
                gx[:, :, a : a + st * to : st, b : b + sh * ho : sh, d : d + sw * wo : sw] += gc[
                    :, :, a, b, d
                ]
    return gx[:, :, pt : pt + t, ph : ph + h, pw : pw + w]


def conv3d_backward(x, weight, grad_out, spec: ConvSpec, workers: int = 1):
    """Return ``(grad_input, grad_weight, grad_bias)``."""
    s = _check_conv(x, weight, spec)
    g = spec.groups
    to, ho, wo = spec.output_extents(s.t, s.h, s.w)
    expected = (s.n, spec.c_out, to, ho, wo)
    if grad_out.shape != expected:
        raise ShapeError(f"grad_output shape {grad_out.shape} != forward output {expected}")
    wm = weight.reshape(g, spec.c_out // g, -1)
    wt = wm.transpose(0, 2, 1)
    L = to * ho * wo

    def kernel(xb, gb):
        nb = xb.shape[0]
        cols = _im2col(xb, spec)
        go = gb.reshape(nb, g, spec.c_out // g, L)
        gw = np.matmul(go, cols.transpose(0, 1, 3, 2))
        gcols = np.matmul(wt, go)
        gx = _col2im(gcols, xb.shape, spec, (to, ho, wo))
        # pack per-sample weight grads alongside so batching stays per-sample
        return gx, gw

    if workers <= 1 or s.n == 1:
        gx, gw = kernel(x, grad_out)
    else:
        parts = _chunks(s.n, workers)
        with ThreadPoolExecutor(max_workers=len(parts)) as pool:
            outs = list(pool.map(lambda sl: kernel(x[sl], grad_out[sl]), parts))
        gx = np.concatenate([o[0] for o in outs], axis=0)
        gw = np.concatenate([o[1] for o in outs], axis=0)
    grad_w = gw.sum(axis=0).reshape(spec.weight_shape)
    grad_b = grad_out.sum(axis=(0, 2, 3, 4)) if spec.bias else None
    return gx, grad_w, grad_b


def conv3d_direct(x, weight, spec: ConvSpec, bias=None):
    """Direct-loop reference convolution, used as an oracle in tests."""
    s = _check_conv(x, weight, spec)
    to, ho, wo = spec.output_extents(s.t, s.h, s.w)
    xp = _pad(x, spec.padding)
    cg_in = spec.c_in // spec.groups
    cg_out = spec.c_out // spec.groups
    kt, kh, kw = spec.kernel
    st, sh, sw = spec.stride
    out = np.zeros((s.n, spec.c_out, to, ho, wo), dtype=x.dtype)
    for o in range(spec.c_out):
        grp = o // cg_out
        chans = slice(grp * cg_in, (grp + 1) * cg_in)
        for i in range(to):
            for j in range(ho):
                for k in range(wo):
                    patch = xp[:, chans, i * st : i * st + kt, j * sh : j * sh + kh, k * sw : k * sw + kw]
                    out[:, o, i, j, k] = np.sum(patch * weight[o], axis=(1, 2, 3, 4))
    if bias is not None:
        out += bias.reshape(1, -1, 1, 1, 1)
    return out


def block_diagonal_weight(weight, spec: ConvSpec):
    """Expand a grouped weight to the equivalent dense (G=1) weight."""
    cg_in = spec.c_in // spec.groups
    cg_out = spec.c_out // spec.groups
    dense = np.zeros((spec.c_out, spec.c_in, *spec.kernel), dtype=weight.dtype)
    for grp in range(spec.groups):
        rows = slice(grp * cg_out, (grp + 1) * cg_out)
        dense[rows, grp * cg_in : (grp + 1) * cg_in] = weight[rows]
    return dense


# ----------------------------------------------------------------------------
# Batch normalization


@dataclass
class BatchNormSpec:
    channels: int
    epsilon: float = 1e-5
    running_momentum: float = 0.9

    def __post_init__(self):
        if self.channels < 1:
            raise ValueError("channels must be positive")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")


@dataclass
class BatchNormCache:
    x_hat: np.ndarray
    inv_std: np.ndarray
    gamma: np.ndarray


class DegenerateVarianceError(ValueError):
    pass


_BN_AXES = (0, 2, 3, 4)


def _bcast(v):
    return v.reshape(1, -1, 1, 1, 1)


def batchnorm_forward(x, gamma, beta, running_mean, running_var, spec: BatchNormSpec, train: bool):
    """Return ``(y, cache)``. In train mode the running stats are updated in place.

    Running variance tracks the biased batch variance.
    """
    s = check5(x)
    if s.c != spec.channels:
        raise ShapeError(f"input has {s.c} channels, batch norm expects {spec.channels}")
    if train:
        if s.n * s.t * s.h * s.w < 2:
            raise DegenerateVarianceError(
                "batch norm in train mode needs more than one value per channel"
            )
        mean = x.mean(axis=_BN_AXES)
        var = x.var(axis=_BN_AXES)
        m = spec.running_momentum
        running_mean *= m
        running_mean += (1 - m) * mean.astype(running_mean.dtype)
        running_var *= m
        running_var += (1 - m) * var.astype(running_var.dtype)
    else:
        mean = running_mean.astype(x.dtype)
        var = running_var.astype(x.dtype)
    inv_std = 1.0 / np.sqrt(var + spec.epsilon)
    x_hat = (x - _bcast(mean)) * _bcast(inv_std)
    y = x_hat * _bcast(gamma) + _bcast(beta)
    return y.astype(x.dtype, copy=False), BatchNormCache(x_hat, inv_std, gamma)


def batchnorm_backward(grad_out, cache: BatchNormCache, train: bool = True):
    """Return ``(grad_input, grad_gamma, grad_beta)``."""
    g_beta = grad_out.sum(axis=_BN_AXES)
    g_gamma = (grad_out * cache.x_hat).sum(axis=_BN_AXES)
    g_xhat = grad_out * _bcast(cache.gamma)
    if not train:
        return g_xhat * _bcast(cache.inv_std), g_gamma, g_beta
    m = grad_out.size // grad_out.shape[1]
    gx = (
        _bcast(cache.inv_std / m)
        * (m * g_xhat - _bcast(g_xhat.sum(axis=_BN_AXES)) - cache.x_hat * _bcast((g_xhat * cache.x_hat).sum(axis=_BN_AXES)))
    )
    return gx.astype(grad_out.dtype, copy=False), g_gamma, g_beta


# ----------------------------------------------------------------------------
# Pooling


@dataclass(frozen=True)
class PoolSpec:
    kernel: tuple[int, int, int] = (1, 3, 3)
    stride: tuple[int, int, int] = (1, 2, 2)
    padding: tuple[int, int, int] = (0, 1, 1)

    def __post_init__(self):
        object.__setattr__(self, "kernel", _triple(self.kernel))
        object.__setattr__(self, "stride", _triple(self.stride))
        object.__setattr__(self, "padding", _triple(self.padding))

    def output_extents(self, t, h, w):
        sizes = (t, h, w)
        for size, k, p in zip(sizes, self.kernel, self.padding):
            if size + 2 * p < k:
                raise ShapeError(f"pool window {self.kernel} larger than padded input {sizes}")
            if p > k // 2:
                # a window could then lie entirely in padding
                raise ShapeError(f"pool padding {self.padding} too large for window {self.kernel}")
        return tuple(
            (size + 2 * p - k) // s + 1
            for size, k, s, p in zip(sizes, self.kernel, self.stride, self.padding)
        )


def maxpool3d_forward(x, spec: PoolSpec):
    """Return ``(y, argmax)`` where ``argmax`` is the winning window offset.

    Ties resolve to the first window position in row-major order, which is
    the lowest flat input index.
    """
    s = check5(x)
    to, ho, wo = spec.output_extents(s.t, s.h, s.w)
    pt, ph, pw = spec.padding
    xp = x
    if pt or ph or pw:
        xp = np.pad(x, ((0, 0), (0, 0), (pt, pt), (ph, ph), (pw, pw)), constant_values=-np.inf)
    st, sh, sw = spec.stride
    win = sliding_window_view(xp, spec.kernel, axis=(2, 3, 4))
    win = win[:, :, : st * to : st, : sh * ho : sh, : sw * wo : sw]
    flat = win.reshape(*win.shape[:5], -1)
    arg = flat.argmax(axis=-1)
    y = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return y, arg


def maxpool3d_backward(grad_out, argmax, x_shape, spec: PoolSpec):
    n, c, t, h, w = x_shape
    pt, ph, pw = spec.padding
    kt, kh, kw = spec.kernel
    st, sh, sw = spec.stride
    to, ho, wo = grad_out.shape[2:]
    gx = np.zeros((n, c, t + 2 * pt, h + 2 * ph, w + 2 * pw), dtype=grad_out.dtype)
    k = 0
    for a in range(kt):
        for b in range(kh):
            for d in range(kw):
                gx[:, :, a : a + st * to : st, b : b + sh * ho : sh, d : d + sw * wo : sw] += np.where(
                    argmax == k, grad_out, 0
                )
                k += 1
    return gx[:, :, pt : pt + t, ph : ph + h, pw : pw + w]


def global_avgpool_forward(x):
    check5(x)
    return x.mean(axis=(2, 3, 4), keepdims=True)


def global_avgpool_backward(grad_out, x_shape):
    n, c, t, h, w = x_shape
    return np.broadcast_to(grad_out / (t * h * w), x_shape).astype(grad_out.dtype)


# ----------------------------------------------------------------------------
# Classifier head


def linear_forward(x, weight, bias):
    """Features ``(n, c, 1, 1, 1)`` to logits ``(n, classes)``; weight is ``(classes, c)``."""
    s = check5(x)
    if (s.t, s.h, s.w) != (1, 1, 1):
        raise ShapeError(f"linear expects pooled input (n, c, 1, 1, 1), got {x.shape}")
    if weight.ndim != 2 or weight.shape[1] != s.c:
        raise ShapeError(f"weight {weight.shape} does not match {s.c} features")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"bias {bias.shape} does not match {weight.shape[0]} outputs")
    return x.reshape(s.n, s.c) @ weight.T + bias


def linear_backward(grad_out, x, weight):
    feats = x.reshape(x.shape[0], -1)
    gx = (grad_out @ weight).reshape(x.shape)
    return gx, grad_out.T @ feats, grad_out.sum(axis=0)


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_xent(logits, labels):
    """Mean cross-entropy and its gradient w.r.t. ``logits``."""
    logits = np.asarray(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} != ({n},)")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise ValueError(f"labels must lie in [0, {k})")
    z = logits - logits.max(axis=1, keepdims=True)
    log_p = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -log_p[np.arange(n), labels].mean()
    grad = np.exp(log_p)
    grad[np.arange(n), labels] -= 1
    return float(loss), grad / n
