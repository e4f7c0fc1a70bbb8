"""Layer primitives: convolution, pooling, upsampling, normalization, loss."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import Tensor, make_result

IGNORE = 255
PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class Conv2dSpec:
    in_channels: int
    out_channels: int
    kernel_h: int
    kernel_w: int
    stride: int = 1
    dilation: int = 1
    padding: tuple = (0, 0)

    def __post_init__(self):
        for name in ("in_channels", "out_channels", "kernel_h", "kernel_w", "stride", "dilation"):
            if getattr(self, name) < 1:
                raise ValueError(f"Conv2dSpec.{name} must be positive, got {getattr(self, name)}")
        object.__setattr__(self, "padding", tuple(int(p) for p in self.padding))
        if len(self.padding) != 2 or min(self.padding) < 0:
            raise ValueError(f"padding must be two non-negative ints, got {self.padding}")

    @classmethod
    def same(cls, in_channels: int, out_channels: int, kernel_h: int, kernel_w: int | None = None,
             dilation: int = 1) -> "Conv2dSpec":
        """Stride-1 spec whose output keeps the input's spatial size."""
        kernel_w = kernel_h if kernel_w is None else kernel_w
        if kernel_h % 2 == 0 or kernel_w % 2 == 0:
            raise ValueError("same padding needs odd kernel sizes")
        pad = (dilation * (kernel_h - 1) // 2, dilation * (kernel_w - 1) // 2)
        return cls(in_channels, out_channels, kernel_h, kernel_w, 1, dilation, pad)

    def output_size(self, h: int, w: int) -> tuple[int, int]:
        ho = conv_output_length(h, self.kernel_h, self.stride, self.dilation, self.padding[0])
        wo = conv_output_length(w, self.kernel_w, self.stride, self.dilation, self.padding[1])
        if ho < 1 or wo < 1:
            raise ValueError(f"conv output size ({ho}, {wo}) is not positive for input ({h}, {w}) and {self}")
        return ho, wo

    @property
    def weight_shape(self) -> tuple:
        return (self.out_channels, self.in_channels, self.kernel_h, self.kernel_w)

    @property
    def num_params(self) -> int:
        return self.kernel_h * self.kernel_w * self.in_channels * self.out_channels + self.out_channels


def conv_output_length(n: int, k: int, stride: int, dilation: int, pad: int) -> int:
    return (n + 2 * pad - dilation * (k - 1) - 1) // stride + 1


def _tap(arr: np.ndarray, i: int, j: int, d: int, s: int, ho: int, wo: int) -> np.ndarray:
    return arr[:, :, i * d: i * d + s * (ho - 1) + 1: s, j * d: j * d + s * (wo - 1) + 1: s]


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None, spec: Conv2dSpec) -> Tensor:
    """Cross-correlation with stride, dilation and zero padding.

    Computed tap by tap: the strided, dilated input window for kernel offset
    (i, j) is contracted with ``weight[:, :, i, j]``, so memory stays at one
    input-sized copy whatever the kernel size.
    """
    if x.data.ndim != 4:
        raise ValueError(f"conv2d expects NCHW input, got shape {x.shape}")
    n, c, h, w = x.shape
    if c != spec.in_channels:
        raise ValueError(f"conv2d: input has {c} channels, spec expects {spec.in_channels}")
    if weight.shape != spec.weight_shape:
        raise ValueError(f"conv2d: weight shape {weight.shape} does not match spec {spec.weight_shape}")
    if bias is not None and bias.shape != (spec.out_channels,):
        raise ValueError(f"conv2d: bias shape {bias.shape} != ({spec.out_channels},)")
    ho, wo = spec.output_size(h, w)
    ph, pw = spec.padding
    s, d = spec.stride, spec.dilation
    taps = [(i, j) for i in range(spec.kernel_h) for j in range(spec.kernel_w)]
    W = weight.data

    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    # accumulate as (N, Ho, Wo, O) so each tap is a plain matmul
    acc = np.zeros((n, ho, wo, spec.out_channels), dtype=x.dtype)
    for i, j in taps:
        acc += np.tensordot(_tap(xp, i, j, d, s, ho, wo), W[:, :, i, j], axes=([1], [1]))
    if bias is not None:
        acc += bias.data
    out = np.ascontiguousarray(acc.transpose(0, 3, 1, 2))

    def grad_fn(g):
        g_nhwo = g.transpose(0, 2, 3, 1)
        gw = np.empty_like(W) if weight.requires_grad else None
        gxp = np.zeros_like(xp) if x.requires_grad else None
        for i, j in taps:
            if gw is not None:
                gw[:, :, i, j] = np.tensordot(g_nhwo, _tap(xp, i, j, d, s, ho, wo), axes=([0, 1, 2], [0, 2, 3]))
            if gxp is not None:
                _tap(gxp, i, j, d, s, ho, wo)[...] += np.tensordot(
                    g_nhwo, W[:, :, i, j], axes=([3], [0])).transpose(0, 3, 1, 2)
        gx = None
        if gxp is not None:
            gx = gxp[:, :, ph: ph + h, pw: pw + w] if (ph or pw) else gxp
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return make_result(out, "conv2d", inputs, grad_fn)


def maxpool2d(x: Tensor, kernel: int = 2, stride: int = 2, padding: int = 0) -> Tensor:
    """Max over each window; ties resolve to the first tap in row-major order."""
    n, c, h, w = x.shape
    if h + 2 * padding < kernel or w + 2 * padding < kernel:
        raise ValueError(f"maxpool2d: input {h}x{w} smaller than kernel {kernel}")
    ho = conv_output_length(h, kernel, stride, 1, padding)
    wo = conv_output_length(w, kernel, stride, 1, padding)
    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=-np.inf)
    windows = np.stack([_tap(xp, i, j, 1, stride, ho, wo) for i in range(kernel) for j in range(kernel)])
    arg = windows.argmax(axis=0)
    out = np.take_along_axis(windows, arg[None], axis=0)[0]

    def grad_fn(g):
        gxp = np.zeros(xp.shape, dtype=x.dtype)
        for t in range(kernel * kernel):
            i, j = divmod(t, kernel)
            _tap(gxp, i, j, 1, stride, ho, wo)[...] += np.where(arg == t, g, 0)
        if padding:
            gxp = gxp[:, :, padding: padding + h, padding: padding + w]
        return (gxp,)

    return make_result(np.ascontiguousarray(out), "maxpool2d", (x,), grad_fn)


def upsample_nearest2x(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)
    return make_result(out, "upsample_nearest2x", (x,),
                       lambda g: (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),))


@dataclass
class BatchNormState:
    """Learned affine pair plus running moments for one BN layer.

    Running moments follow ``r <- (1 - momentum) * r + momentum * batch``,
    with the unbiased batch variance.
    """

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5
    mode: str = "train"

    @classmethod
    def create(cls, channels: int, dtype=np.float32, momentum: float = 0.1, eps: float = 1e-5) -> "BatchNormState":
        if not 0 < momentum < 1:
            raise ValueError(f"momentum must be in (0, 1), got {momentum}")
        return cls(Tensor(np.ones(channels, dtype=dtype), requires_grad=True),
                   Tensor(np.zeros(channels, dtype=dtype), requires_grad=True),
                   np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype),
                   momentum, eps)


def batchnorm2d(x: Tensor, state: BatchNormState, mode: str | None = None) -> Tensor:
    mode = mode or state.mode
    n, c, h, w = x.shape
    gamma, beta = state.gamma, state.beta
    shape = (1, c, 1, 1)
    if mode == "eval":
        inv = 1.0 / np.sqrt(state.running_var.astype(x.dtype) + x.dtype.type(state.eps))
        xhat = (x.data - state.running_mean.reshape(shape).astype(x.dtype)) * inv.reshape(shape)
        out = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)

        def grad_eval(g):
            return (g * (gamma.data * inv).reshape(shape),
                    (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3)))

        return make_result(out, "batchnorm2d", (x, gamma, beta), grad_eval)
    if mode != "train":
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")

    m = n * h * w
    if m < 2:
        raise ValueError("batchnorm2d in train mode needs at least two values per channel")
    mean = x.data.mean(axis=(0, 2, 3))
    centered = x.data - mean.reshape(shape)
    var = (centered * centered).mean(axis=(0, 2, 3))
    inv = 1.0 / np.sqrt(var + x.dtype.type(state.eps))
    xhat = centered * inv.reshape(shape)
    out = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)

    mom = state.momentum
    state.running_mean = ((1 - mom) * state.running_mean + mom * mean).astype(state.running_mean.dtype)
    state.running_var = ((1 - mom) * state.running_var + mom * var * m / (m - 1)).astype(state.running_var.dtype)

    def grad_train(g):
        gbeta = g.sum(axis=(0, 2, 3))
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gxhat = g * gamma.data.reshape(shape)
        gx = (inv.reshape(shape) / m) * (
            m * gxhat
            - gxhat.sum(axis=(0, 2, 3)).reshape(shape)
            - xhat * (gxhat * xhat).sum(axis=(0, 2, 3)).reshape(shape))
        return gx, ggamma, gbeta

    return make_result(out, "batchnorm2d", (x, gamma, beta), grad_train)


def dropout(x: Tensor, rate: float, mode: str, rng) -> Tensor:
    """Inverted dropout: survivors scaled by 1/(1-rate), eval is identity."""
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if mode == "eval" or rate == 0:
        return x
    if mode != "train":
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    scale = x.dtype.type(1.0 / (1.0 - rate))
    mask = (rng.random(x.shape) >= rate).astype(x.dtype) * scale
    return make_result(x.data * mask, "dropout", (x,), lambda g: (g * mask,))


def concat_channels(inputs: Sequence[Tensor]) -> Tensor:
    inputs = list(inputs)
    if not inputs:
        raise ValueError("concat_channels needs at least one input")
    if len(inputs) == 1:
        return inputs[0]
    ref = inputs[0].shape
    for t in inputs[1:]:
        if t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ValueError(f"concat_channels: shape mismatch {ref} vs {t.shape}")
    bounds = np.cumsum([t.shape[1] for t in inputs])[:-1]
    out = np.concatenate([t.data for t in inputs], axis=1)
    return make_result(out, "concat_channels", inputs, lambda g: tuple(np.split(g, bounds, axis=1)))


def softmax_channels(x: Tensor) -> Tensor:
    if x.shape[1] < 2:
        raise ValueError("softmax_channels needs at least two channels")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    return make_result(p, "softmax_channels", (x,),
                       lambda g: (p * (g - (g * p).sum(axis=1, keepdims=True)),))


def weighted_cross_entropy(probs: Tensor, target: np.ndarray, weight_map) -> Tensor:
    """Weight-normalized pixel cross-entropy.

    ``target`` is an integer map [N, H, W] holding class ids or IGNORE;
    ``weight_map`` is [N, 1, H, W] (Tensor or array). Ignored pixels drop out
    of both the weighted sum and the normalizer.
    """
    n, k, h, w = probs.shape
    target = np.asarray(target)
    if target.shape != (n, h, w):
        raise ValueError(f"target shape {target.shape} != {(n, h, w)}")
    wmap = weight_map.data if isinstance(weight_map, Tensor) else np.asarray(weight_map)
    wmap = wmap.reshape(n, h, w).astype(np.float64)
    if np.any(wmap < 0):
        raise ValueError("weight_map must be non-negative")
    valid = target != IGNORE
    if np.any(target[valid] >= k) or np.any(target[valid] < 0):
        raise ValueError(f"target contains class ids outside 0..{k - 1}")
    wmap = np.where(valid, wmap, 0.0)
    total = wmap.sum()
    if not total > 0:
        raise ValueError("weighted_cross_entropy: no pixel carries positive weight")

    tgt = np.where(valid, target, 0).astype(np.intp)
    p_t = np.take_along_axis(probs.data, tgt[:, None], axis=1)[:, 0].astype(np.float64)
    clamped = np.maximum(p_t, PROB_FLOOR)
    loss = float((wmap * -np.log(clamped)).sum() / total)

    def grad_fn(g):
        coef = np.where(p_t > PROB_FLOOR, -wmap / (clamped * total), 0.0) * float(np.asarray(g).reshape(-1)[0])
        gp = np.zeros(probs.shape, dtype=probs.dtype)
        np.put_along_axis(gp, tgt[:, None], coef[:, None].astype(probs.dtype), axis=1)
        return (gp,)

    return make_result(np.asarray(loss, dtype=probs.dtype), "weighted_cross_entropy", (probs,), grad_fn)
