"""Numpy implementations of the hot kernels.

These are the portable fallback for the compiled extension in _convext.pyx.
Both backends implement the same contracts and are cross-checked by
tests/test_kernels.py; the compiled one is only a speedup.

All arrays are C-contiguous float64. Shape validation lives one level up in
trunkshare.tensor; kernels assume consistent inputs.
"""

import numpy as np


def _windows(xp, stride, kh, kw, ho, wo):
    # read-only strided view (N, C, Ho, Wo, kh, kw) over the padded input
    n, c = xp.shape[:2]
    s = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp,
        (n, c, ho, wo, kh, kw),
        (s[0], s[1], s[2] * stride, s[3] * stride, s[2], s[3]),
        writeable=False,
    )


def conv_forward(x, w, stride, pad):
    """Cross-correlation of x[N,Cin,H,W] with w[Cout,Cin,kh,kw] (no bias)."""
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = _windows(xp, stride, kh, kw, ho, wo)
    return np.einsum("ncijkl,ockl->noij", win, w, optimize=True)


def conv_backward_weight(x, gy, stride, pad, kh, kw):
    """Gradient of conv_forward w.r.t. the weight."""
    ho, wo = gy.shape[2], gy.shape[3]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = _windows(xp, stride, kh, kw, ho, wo)
    return np.einsum("ncijkl,noij->ockl", win, gy, optimize=True)


def conv_backward_input(gy, w, stride, pad, h, wd):
    """Gradient of conv_forward w.r.t. the input (transposed correlation)."""
    n, cout, ho, wo = gy.shape
    _, cin, kh, kw = w.shape
    if stride > 1:  # dilate gy with stride-1 zeros
        gyd = np.zeros((n, cout, (ho - 1) * stride + 1, (wo - 1) * stride + 1))
        gyd[:, :, ::stride, ::stride] = gy
    else:
        gyd = gy
    # full correlation with the flipped kernel, then trim the forward padding
    ph, pw = kh - 1, kw - 1
    gyp = np.pad(gyd, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    wf = w[:, :, ::-1, ::-1]
    hh = gyp.shape[2] - kh + 1
    ww = gyp.shape[3] - kw + 1
    win = _windows(gyp, 1, kh, kw, hh, ww)
    gx = np.einsum("noijkl,ockl->ncij", win, wf, optimize=True)
    return np.ascontiguousarray(gx[:, :, pad:pad + h, pad:pad + wd])


def maxpool2x2_forward(x):
    """2x2/stride-2 max pool; also returns the within-window argmax.

    Window positions are ordered (0,0),(0,1),(1,0),(1,1) so np.argmax's
    first-max rule picks the lowest linear index on ties.
    """
    n, c, h, w = x.shape
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=4)
    out = np.take_along_axis(win, idx[..., None], axis=4)[..., 0]
    return np.ascontiguousarray(out), idx.astype(np.int8)


def maxpool2x2_backward(gy, idx, h, w):
    """Routes gy back to the argmax positions recorded by the forward."""
    n, c, ho, wo = gy.shape
    gwin = np.zeros((n, c, ho, wo, 4))
    np.put_along_axis(gwin, idx[..., None].astype(np.int64), gy[..., None], axis=4)
    gx = gwin.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return np.ascontiguousarray(gx.reshape(n, c, h, w))


def bilinear_plan(size, factor):
    """Per-axis interpolation plan for half-pixel-center bilinear upsampling.

    Returns (i0, i1, w1) so that out[k] = (1-w1[k])*x[i0[k]] + w1[k]*x[i1[k]].
    Source coordinates are clamped to [0, size-1] (edge clamp).
    """
    dst = np.arange(size * factor, dtype=np.float64)
    src = np.clip((dst + 0.5) / factor - 0.5, 0.0, size - 1.0)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, size - 1)
    return i0, i1, src - i0


def bilinear_forward(x, factor):
    n, c, h, w = x.shape
    y0, y1, fy = bilinear_plan(h, factor)
    x0, x1, fx = bilinear_plan(w, factor)
    fy = fy[:, None]
    fx = fx[None, :]
    top = x[:, :, y0][:, :, :, x0] * (1 - fx) + x[:, :, y0][:, :, :, x1] * fx
    bot = x[:, :, y1][:, :, :, x0] * (1 - fx) + x[:, :, y1][:, :, :, x1] * fx
    return np.ascontiguousarray(top * (1 - fy) + bot * fy)


def bilinear_backward(gy, factor, h, w):
    """Transpose of bilinear_forward: scatter-add the four corner weights."""
    n, c = gy.shape[:2]
    y0, y1, fy = bilinear_plan(h, factor)
    x0, x1, fx = bilinear_plan(w, factor)
    fy = fy[:, None]
    fx = fx[None, :]
    gx = np.zeros((n, c, h, w))
    yy0 = np.broadcast_to(y0[:, None], (h * factor, w * factor))
    yy1 = np.broadcast_to(y1[:, None], (h * factor, w * factor))
    xx0 = np.broadcast_to(x0[None, :], (h * factor, w * factor))
    xx1 = np.broadcast_to(x1[None, :], (h * factor, w * factor))
    np.add.at(gx, (slice(None), slice(None), yy0, xx0), gy * (1 - fy) * (1 - fx))
    np.add.at(gx, (slice(None), slice(None), yy0, xx1), gy * (1 - fy) * fx)
    np.add.at(gx, (slice(None), slice(None), yy1, xx0), gy * fy * (1 - fx))
    np.add.at(gx, (slice(None), slice(None), yy1, xx1), gy * fy * fx)
    return gx
