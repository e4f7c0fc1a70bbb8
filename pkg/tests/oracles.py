"""Slow reference implementations used as test oracles.

Plain loops over numpy scalars; nothing here imports the package under test.
"""
import numpy as np


def classic_conv2d(x, w, b=None, stride=1, pad=(0, 0, 0, 0), dilation=1):
    """Cross-correlation by explicit loops over output pixels and taps. pad = (top, bottom, left, right)."""
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    top, bottom, left, right = pad
    xp = np.zeros((n, cin, h + top + bottom, wd + left + right), dtype=x.dtype)
    xp[:, :, top:top + h, left:left + wd] = x
    ho = (xp.shape[2] - (kh - 1) * dilation - 1) // stride + 1
    wo = (xp.shape[3] - (kw - 1) * dilation - 1) // stride + 1
    out = np.zeros((n, cout, ho, wo), dtype=x.dtype)
    for bi in range(n):
        for o in range(cout):
            for y in range(ho):
                for z in range(wo):
                    acc = x.dtype.type(0)
                    for c in range(cin):
                        for i in range(kh):
                            for j in range(kw):
                                acc += xp[bi, c, y * stride + i * dilation, z * stride + j * dilation] * w[o, c, i, j]
                    out[bi, o, y, z] = acc + (b[o] if b is not None else 0)
    return out


def dilate_kernel(w, d):
    """Insert d-1 zeros between kernel taps."""
    cout, cin, kh, kw = w.shape
    out = np.zeros((cout, cin, (kh - 1) * d + 1, (kw - 1) * d + 1), dtype=w.dtype)
    out[:, :, ::d, ::d] = w
    return out


def dilated_conv2d(x, w, b=None, stride=1, dilation=1, pad=(0, 0, 0, 0)):
    """Dilated conv as an undilated conv with a zero-inserted kernel; slow for large rates."""
    return classic_conv2d(x, dilate_kernel(w, dilation), b, stride, pad)


def maxpool2d(x, k, s, pad=0):
    n, c, h, w = x.shape
    xp = np.full((n, c, h + 2 * pad, w + 2 * pad), -np.inf)
    xp[:, :, pad:pad + h, pad:pad + w] = x
    ho, wo = (h + 2 * pad - k) // s + 1, (w + 2 * pad - k) // s + 1
    out = np.zeros((n, c, ho, wo))
    for y in range(ho):
        for z in range(wo):
            out[:, :, y, z] = xp[:, :, y * s:y * s + k, z * s:z * s + k].max(axis=(2, 3))
    return out


def rf_chain(layers):
    """Receptive field of a (kernel, stride, dilation) chain."""
    rf, jump = 1, 1
    for k, s, d in layers:
        rf += (k - 1) * d * jump
        jump *= s
    return rf
