"""Dense array helpers and the strided convolution kernels.

Tensors are plain numpy arrays laid out channels-first, ``(C, H, W)``,
optionally with a leading batch axis ``(N, C, H, W)``.  Convolution is
cross-correlation everywhere (kernels are never flipped) and always
"valid": callers pad first.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class DimensionError(ValueError):
    """Raised when array shapes do not satisfy a convolution precondition."""


def output_size(n, k, stride):
    """Length of a valid strided convolution along one axis."""
    if n < k:
        raise DimensionError(f"input size {n} smaller than kernel size {k}")
    if (n - k) % stride:
        raise DimensionError(
            f"(size - kernel) = {n - k} not divisible by stride {stride}; pad the input first"
        )
    return (n - k) // stride + 1


def _as_batch(x):
    x = np.asarray(x)
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise DimensionError(f"expected (C,H,W) or (N,C,H,W) array, got shape {x.shape}")


def _check_kernels(kernels, in_ch, groups):
    if kernels.ndim != 4 or kernels.shape[2] != kernels.shape[3]:
        raise DimensionError(f"kernels must be (out, in, k, k), got {kernels.shape}")
    if groups == 1:
        if kernels.shape[1] != in_ch:
            raise DimensionError(
                f"kernels expect {kernels.shape[1]} input channels, input has {in_ch}"
            )
    elif groups == in_ch:
        if kernels.shape[0] != in_ch or kernels.shape[1] != 1:
            raise DimensionError(
                f"depthwise kernels must be ({in_ch}, 1, k, k), got {kernels.shape}"
            )
    else:
        raise ValueError("groups must be 1 or equal to the number of input channels")


def windows(x, k, stride):
    """Strided view of all k x k windows: ``(N, C, Ho, Wo, k, k)``.

    No data is copied; the view aliases ``x``.
    """
    xb, _ = _as_batch(x)
    output_size(xb.shape[2], k, stride)
    output_size(xb.shape[3], k, stride)
    view = sliding_window_view(xb, (k, k), axis=(2, 3))
    return view[:, :, ::stride, ::stride]


def _flatten_channels(xb, k):
    """``(C, N*H*W + tail)`` copy of a batch; the zero tail absorbs tap offsets."""
    N, C, H, W = xb.shape
    tail = (k - 1) * W + k - 1
    xf = np.zeros((C, N * H * W + tail), dtype=xb.dtype)
    xf[:, :N * H * W] = xb.transpose(1, 0, 2, 3).reshape(C, -1)
    return xf


def _use_shifted(C, k, stride, groups):
    # shifted GEMM wins once the channel dimension fills a BLAS call
    return stride == 1 and groups == 1 and C * k * k >= 128


def conv2d_valid(x, kernels, stride=1, groups=1):
    """Valid strided cross-correlation.

    Parameters
    ----------
    x : ndarray
        ``(C, H, W)`` or ``(N, C, H, W)``.
    kernels : ndarray
        ``(O, C, k, k)``, or ``(C, 1, k, k)`` when ``groups == C`` (depthwise).
    stride : int
        Step between windows; ``(H - k)`` and ``(W - k)`` must be multiples of it.

    Returns
    -------
    ndarray
        ``(O, Ho, Wo)`` (or batched), ``Ho = (H - k) // stride + 1``.
    """
    if stride < 1:
        raise ValueError("stride must be positive")
    xb, squeeze = _as_batch(x)
    kernels = np.asarray(kernels)
    _check_kernels(kernels, xb.shape[1], groups)
    N, C, H, W = xb.shape
    O, _, k, _ = kernels.shape
    ho, wo = output_size(H, k, stride), output_size(W, k, stride)
    if _use_shifted(C, k, stride, groups):
        xf = _flatten_channels(xb, k)
        taps = np.ascontiguousarray(kernels.transpose(2, 3, 0, 1))
        n = N * H * W
        acc = np.zeros((O, n), dtype=np.result_type(xb, kernels))
        for a in range(k):
            for b in range(k):
                off = a * W + b
                acc += taps[a, b] @ xf[:, off:off + n]
        out = acc.reshape(O, N, H, W)[:, :, :ho, :wo].transpose(1, 0, 2, 3)
    elif groups == 1:
        cols = windows(xb, k, stride).transpose(1, 4, 5, 0, 2, 3).reshape(C * k * k, -1)
        out = (kernels.reshape(O, -1) @ cols).reshape(O, N, ho, wo).transpose(1, 0, 2, 3)
    else:
        out = np.einsum("nchwab,cab->nchw", windows(xb, k, stride), kernels[:, 0], optimize=True)
    out = np.ascontiguousarray(out)
    return out[0] if squeeze else out


def conv2d_transposed(y, kernels, stride, out_shape, groups=1):
    """Adjoint of :func:`conv2d_valid` for the same kernels and stride.

    ``out_shape`` is the spatial ``(H, W)`` of the forward input.
    """
    yb, squeeze = _as_batch(y)
    kernels = np.asarray(kernels)
    H, W = out_shape
    k = kernels.shape[2]
    ho, wo = output_size(H, k, stride), output_size(W, k, stride)
    if yb.shape[2:] != (ho, wo):
        raise DimensionError(
            f"input spatial shape {yb.shape[2:]} inconsistent with out_shape {tuple(out_shape)} "
            f"for k={k}, stride={stride} (expected {(ho, wo)})"
        )
    N = yb.shape[0]
    dtype = np.result_type(yb, kernels)
    if groups == 1:
        if yb.shape[1] != kernels.shape[0]:
            raise DimensionError("channel count does not match kernel output channels")
        O, C = kernels.shape[:2]
        if _use_shifted(C, k, stride, groups):
            n = N * H * W
            g = np.zeros((O, N, H, W), dtype=dtype)
            g[:, :, :ho, :wo] = yb.transpose(1, 0, 2, 3)
            g = g.reshape(O, n)
            taps = np.ascontiguousarray(kernels.transpose(2, 3, 1, 0))
            outf = np.zeros((C, n + (k - 1) * W + k - 1), dtype=dtype)
            for a in range(k):
                for b in range(k):
                    off = a * W + b
                    outf[:, off:off + n] += taps[a, b] @ g
            out = np.ascontiguousarray(outf[:, :n].reshape(C, N, H, W).transpose(1, 0, 2, 3))
            return out[0] if squeeze else out
        # (C*k*k, N*Ho*Wo) columns, then col2im
        cols = (kernels.reshape(O, -1).T @ yb.transpose(1, 0, 2, 3).reshape(O, -1))
        cols = cols.reshape(C, k, k, N, ho, wo).transpose(3, 0, 4, 5, 1, 2)
    else:
        _check_kernels(kernels, yb.shape[1], groups)
        C = yb.shape[1]
        cols = np.einsum("nchw,cab->nchwab", yb, kernels[:, 0], optimize=True)
    out = np.zeros((N, C, H, W), dtype=dtype)
    span_h = stride * (ho - 1) + 1
    span_w = stride * (wo - 1) + 1
    for a in range(k):
        for b in range(k):
            out[:, :, a:a + span_h:stride, b:b + span_w:stride] += cols[..., a, b]
    return out[0] if squeeze else out


def conv2d_kernel_grad(x, grad_out, k, stride, groups=1):
    """Gradient of ``<conv2d_valid(x, K), grad_out>`` with respect to ``K``."""
    xb, _ = _as_batch(x)
    gb, _ = _as_batch(grad_out)
    N, C, H, W = xb.shape
    if _use_shifted(C, k, stride, groups):
        O = gb.shape[1]
        n = N * H * W
        g = np.zeros((O, N, H, W), dtype=np.result_type(xb, gb))
        g[:, :, :gb.shape[2], :gb.shape[3]] = gb.transpose(1, 0, 2, 3)
        g = g.reshape(O, n)
        xf = _flatten_channels(xb, k)
        dk = np.empty((k, k, O, C), dtype=g.dtype)
        for a in range(k):
            for b in range(k):
                off = a * W + b
                dk[a, b] = g @ xf[:, off:off + n].T
        return np.ascontiguousarray(dk.transpose(2, 3, 0, 1))
    cols = windows(xb, k, stride)
    if groups == 1:
        O = gb.shape[1]
        cols = cols.transpose(1, 4, 5, 0, 2, 3).reshape(C * k * k, -1)
        g = gb.transpose(1, 0, 2, 3).reshape(O, -1)
        return (g @ cols.T).reshape(O, C, k, k)
    return np.einsum("nchw,nchwab->cab", gb, cols, optimize=True)[:, None]


def conv2d_naive(x, kernels, stride=1):
    """Quadruple-loop reference for :func:`conv2d_valid` (groups=1 only)."""
    x = np.asarray(x)
    if x.ndim == 4:
        return np.stack([conv2d_naive(xi, kernels, stride) for xi in x])
    O, C, k, _ = kernels.shape
    _, H, W = x.shape
    ho, wo = output_size(H, k, stride), output_size(W, k, stride)
    out = np.zeros((O, ho, wo), dtype=np.result_type(x, kernels))
    for o in range(O):
        for i in range(ho):
            for j in range(wo):
                acc = 0.0
                for c in range(C):
                    for a in range(k):
                        for b in range(k):
                            acc += kernels[o, c, a, b] * x[c, i * stride + a, j * stride + b]
                out[o, i, j] = acc
    return out


def reflect_pad_amounts(size, target):
    """Split ``target - size`` into (before, after), extra pixel after."""
    extra = target - size
    if extra < 0:
        raise DimensionError(f"target {target} smaller than input {size}")
    return extra // 2, extra - extra // 2


def pad_reflect(x, target=None, pads=None):
    """Mirror-pad the last two axes (edge pixel not repeated).

    Either give the spatial ``target`` ``(H, W)`` (input is centred, any odd
    pixel goes to the bottom/right), or explicit ``pads`` as
    ``(top, bottom, left, right)``.
    """
    x = np.asarray(x)
    H, W = x.shape[-2:]
    if pads is None:
        if target is None:
            raise ValueError("give either target or pads")
        top, bottom = reflect_pad_amounts(H, target[0])
        left, right = reflect_pad_amounts(W, target[1])
    else:
        top, bottom, left, right = pads
    if max(top, bottom) >= H or max(left, right) >= W:
        raise DimensionError(
            f"reflect padding {(top, bottom, left, right)} too large for a {H}x{W} input"
        )
    width = [(0, 0)] * (x.ndim - 2) + [(top, bottom), (left, right)]
    return np.pad(x, width, mode="reflect")


def reflect_pad_adjoint(g, pads):
    """Adjoint of :func:`pad_reflect` with explicit pads: fold borders back."""
    top, bottom, left, right = pads
    g = np.array(g, copy=True)
    Hp, Wp = g.shape[-2:]
    H, W = Hp - top - bottom, Wp - left - right
    # fold rows
    for r in range(top):
        g[..., 2 * top - r, :] += g[..., r, :]
    for r in range(bottom):
        src = top + H + r
        g[..., top + H - 2 - r, :] += g[..., src, :]
    g = g[..., top:top + H, :]
    for c in range(left):
        g[..., :, 2 * left - c] += g[..., :, c]
    for c in range(right):
        src = left + W + c
        g[..., :, left + W - 2 - c] += g[..., :, src]
    return np.ascontiguousarray(g[..., :, left:left + W])


def crop(x, pads):
    """Remove ``(top, bottom, left, right)`` pixels from the last two axes."""
    top, bottom, left, right = pads
    H, W = x.shape[-2:]
    return x[..., top:H - bottom, left:W - right]


def same_pads(k):
    """Reflect pads that keep spatial size under a stride-1 k x k conv."""
    return ((k - 1) // 2, k // 2, (k - 1) // 2, k // 2)
