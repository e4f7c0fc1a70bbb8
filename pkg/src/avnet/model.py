"""Unet-style artery/vein network: Inception encoder, cascaded dilated bottleneck.

Layout for the default config (input 3 x H x W)::

    stem 3x3 conv -> 32
    enc0  inception 32->32  [skip0]  down 32->32   (H/2)
    enc1  inception 32->32  [skip1]  down 32->64   (H/4)
    enc2  inception 64->64  [skip2]  down 64->128  (H/8)
    enc3  inception 128->128
    cdc   3x3 convs, dilation 2, 4, 8, 12
    dec0  up, conv->128, cat skip2, conv, conv
    dec1  up, conv->64,  cat skip1, conv, conv
    dec2  up, conv->32,  cat skip0, conv, conv
    head  1x1 conv -> num_classes, softmax over channels
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import ops
from .ops import BatchNormState, Conv2dSpec
from .tensor import Tensor, relu


@dataclass
class InceptionBlockConfig:
    in_channels: int
    out_channels: int
    dropout_rate: float = 0.2

    def __post_init__(self):
        if self.out_channels % 4:
            raise ValueError(f"inception out_channels must be divisible by 4, got {self.out_channels}")


@dataclass
class CDCConfig:
    channels: int = 128
    dilation_rates: list = field(default_factory=lambda: [2, 4, 8, 12])
    kernel: int = 3
    batchnorm: bool = True

    def __post_init__(self):
        if not self.dilation_rates or any(int(r) < 1 for r in self.dilation_rates):
            raise ValueError(f"dilation rates must be positive, got {self.dilation_rates}")

    @property
    def receptive_field(self) -> int:
        return 1 + sum((self.kernel - 1) * r for r in self.dilation_rates)


@dataclass
class ModelConfig:
    input_channels: int = 3
    encoder_channels: list = field(default_factory=lambda: [32, 32, 64, 128])
    decoder_channels: list = field(default_factory=lambda: [128, 64, 32])
    num_classes: int = 4
    dropout_rate: float = 0.2
    cdc: CDCConfig = field(default_factory=CDCConfig)

    def validate(self) -> None:
        enc, dec = self.encoder_channels, self.decoder_channels
        if len(enc) < 2:
            raise ValueError("encoder_channels needs at least two stages")
        if len(dec) != len(enc) - 1:
            raise ValueError(f"decoder_channels must have {len(enc) - 1} entries, got {len(dec)}")
        for c in enc:
            if c < 4 or c % 4:
                raise ValueError(f"encoder channels must be positive multiples of 4, got {c}")
        if any(c < 1 for c in dec):
            raise ValueError("decoder channels must be positive")
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        if self.input_channels < 1:
            raise ValueError("input_channels must be positive")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError("dropout_rate must be in [0, 1)")
        if self.cdc.channels != enc[-1]:
            raise ValueError(f"cdc.channels ({self.cdc.channels}) must equal the last encoder width ({enc[-1]})")

    @property
    def downsamplings(self) -> int:
        return len(self.encoder_channels) - 1

    def to_dict(self) -> dict:
        return {
            "input_channels": self.input_channels,
            "encoder_channels": list(self.encoder_channels),
            "decoder_channels": list(self.decoder_channels),
            "num_classes": self.num_classes,
            "dropout_rate": self.dropout_rate,
            "cdc": {"channels": self.cdc.channels, "dilation_rates": list(self.cdc.dilation_rates),
                    "kernel": self.cdc.kernel, "batchnorm": self.cdc.batchnorm},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        cdc = CDCConfig(**d.pop("cdc", {}))
        return cls(cdc=cdc, **d)


@dataclass
class ForwardContext:
    mode: str = "eval"
    rng: np.random.Generator | None = None

    def __post_init__(self):
        if self.mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {self.mode!r}")
        if self.rng is None:
            self.rng = np.random.default_rng(0)


@dataclass
class Trace:
    """Shape and receptive-field state threaded through :meth:`Block.trace`.

    ``rf_h``/``rf_w`` are in input pixels; ``jump`` is the input-pixel distance
    between adjacent positions of the current feature map.
    """

    channels: int
    h: int
    w: int
    rf_h: float = 1
    rf_w: float = 1
    jump: float = 1
    rows: list = field(default_factory=list)

    def fork(self) -> "Trace":
        return Trace(self.channels, self.h, self.w, self.rf_h, self.rf_w, self.jump, self.rows)

    @property
    def shape(self) -> list:
        return [self.channels, self.h, self.w]

    def record(self, name: str, kind: str, params: int) -> None:
        self.rows.append({"name": name, "kind": kind, "out_shape": self.shape, "params": params,
                          "rf": [_num(self.rf_h), _num(self.rf_w)]})


def _num(v: float):
    return int(v) if float(v).is_integer() else float(v)


class Block:
    """Container with named parameters and BN buffers, walked in build order."""

    name: str

    def children(self) -> list:
        return []

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for child in self.children():
            yield from child.named_parameters()

    def batchnorms(self) -> Iterator[tuple[str, BatchNormState]]:
        for child in self.children():
            yield from child.batchnorms()

    def num_params(self) -> int:
        return sum(t.size for _, t in self.named_parameters())


def he_normal(rng: np.random.Generator, shape: tuple, dtype) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class ConvUnit(Block):
    """conv -> [BN] -> [ReLU] -> [dropout]."""

    def __init__(self, name: str, spec: Conv2dSpec, rng: np.random.Generator, dtype=np.float32,
                 batchnorm: bool = True, activation: bool = True, dropout_rate: float = 0.0):
        self.name = name
        self.spec = spec
        self.weight = Tensor(he_normal(rng, spec.weight_shape, dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(spec.out_channels, dtype=dtype), requires_grad=True)
        self.bn = BatchNormState.create(spec.out_channels, dtype=dtype) if batchnorm else None
        self.activation = activation
        self.dropout_rate = dropout_rate

    def named_parameters(self):
        yield f"{self.name}.weight", self.weight
        yield f"{self.name}.bias", self.bias
        if self.bn is not None:
            yield f"{self.name}.bn.gamma", self.bn.gamma
            yield f"{self.name}.bn.beta", self.bn.beta

    def batchnorms(self):
        if self.bn is not None:
            yield f"{self.name}.bn", self.bn

    def forward(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        y = ops.conv2d(x, self.weight, self.bias, self.spec)
        if self.bn is not None:
            y = ops.batchnorm2d(y, self.bn, ctx.mode)
        if self.activation:
            y = relu(y)
        if self.dropout_rate:
            y = ops.dropout(y, self.dropout_rate, ctx.mode, ctx.rng)
        return y

    def trace(self, t: Trace) -> Trace:
        s = self.spec
        if t.channels != s.in_channels:
            raise ValueError(f"{self.name}: expects {s.in_channels} channels, got {t.channels}")
        out = t.fork()
        out.h, out.w = s.output_size(t.h, t.w)
        out.channels = s.out_channels
        out.rf_h += (s.kernel_h - 1) * s.dilation * t.jump
        out.rf_w += (s.kernel_w - 1) * s.dilation * t.jump
        out.jump = t.jump * s.stride
        params = s.num_params + (2 * s.out_channels if self.bn is not None else 0)
        out.record(self.name, f"conv{s.kernel_h}x{s.kernel_w}/s{s.stride}/d{s.dilation}", params)
        return out


class MaxPool(Block):
    def __init__(self, name: str, kernel: int, stride: int, padding: int = 0):
        self.name, self.kernel, self.stride, self.padding = name, kernel, stride, padding

    def forward(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        return ops.maxpool2d(x, self.kernel, self.stride, self.padding)

    def trace(self, t: Trace) -> Trace:
        out = t.fork()
        out.h = ops.conv_output_length(t.h, self.kernel, self.stride, 1, self.padding)
        out.w = ops.conv_output_length(t.w, self.kernel, self.stride, 1, self.padding)
        out.rf_h += (self.kernel - 1) * t.jump
        out.rf_w += (self.kernel - 1) * t.jump
        out.jump = t.jump * self.stride
        out.record(self.name, f"maxpool{self.kernel}/s{self.stride}", 0)
        return out


def _merge(name: str, kind: str, branches: list) -> Trace:
    first = branches[0]
    for b in branches[1:]:
        if (b.h, b.w) != (first.h, first.w):
            raise ValueError(f"{name}: branch spatial sizes differ")
    out = first.fork()
    out.channels = sum(b.channels for b in branches)
    out.rf_h = max(b.rf_h for b in branches)
    out.rf_w = max(b.rf_w for b in branches)
    out.record(name, kind, 0)
    return out


def _run(units, x, ctx):
    for u in units:
        x = u.forward(x, ctx)
    return x


def _trace(units, t):
    for u in units:
        t = u.trace(t)
    return t


class InceptionBlock(Block):
    """Four parallel branches of out/4 channels each, concatenated.

    a: 1x1;  b: 1x1 -> 3x3;  c: 1x1 -> 1x7 -> 7x1;  d: 3x3 max-pool (stride 1) -> 1x1.
    """

    def __init__(self, cfg: InceptionBlockConfig, name: str = "inception",
                 rng: np.random.Generator | None = None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.name, self.cfg = name, cfg
        cin, q, p = cfg.in_channels, cfg.out_channels // 4, cfg.dropout_rate

        def unit(tag, spec):
            return ConvUnit(f"{name}.{tag}", spec, rng, dtype, dropout_rate=p)

        self.branches = [
            [unit("a_1x1", Conv2dSpec.same(cin, q, 1))],
            [unit("b_1x1", Conv2dSpec.same(cin, q, 1)), unit("b_3x3", Conv2dSpec.same(q, q, 3))],
            [unit("c_1x1", Conv2dSpec.same(cin, q, 1)), unit("c_1x7", Conv2dSpec.same(q, q, 1, 7)),
             unit("c_7x1", Conv2dSpec.same(q, q, 7, 1))],
            [MaxPool(f"{name}.d_pool", 3, 1, 1), unit("d_1x1", Conv2dSpec.same(cin, q, 1))],
        ]

    def children(self):
        return [u for branch in self.branches for u in branch]

    def forward(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        return ops.concat_channels([_run(b, x, ctx) for b in self.branches])

    def trace(self, t: Trace) -> Trace:
        return _merge(f"{self.name}.concat", "concat", [_trace(b, t) for b in self.branches])


class DownsampleBlock(Block):
    """concat(2x2 max-pool, 3x3 stride-2 conv) -> 1x1 conv; halves H and W."""

    def __init__(self, in_channels: int, out_channels: int, name: str = "down",
                 rng: np.random.Generator | None = None, dtype=np.float32, dropout_rate: float = 0.2):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.name = name
        self.pool = MaxPool(f"{name}.pool", 2, 2)
        self.strided = ConvUnit(f"{name}.conv_s2", Conv2dSpec(in_channels, in_channels, 3, 3, 2, 1, (1, 1)),
                                rng, dtype, dropout_rate=dropout_rate)
        self.merge = ConvUnit(f"{name}.merge_1x1", Conv2dSpec.same(2 * in_channels, out_channels, 1),
                              rng, dtype, dropout_rate=dropout_rate)

    def children(self):
        return [self.pool, self.strided, self.merge]

    def forward(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        h, w = x.shape[2:]
        if h % 2 or w % 2:
            raise ValueError(f"{self.name}: spatial size {h}x{w} must be even")
        y = ops.concat_channels([self.pool.forward(x, ctx), self.strided.forward(x, ctx)])
        return self.merge.forward(y, ctx)

    def trace(self, t: Trace) -> Trace:
        if t.h % 2 or t.w % 2:
            raise ValueError(f"{self.name}: spatial size {t.h}x{t.w} must be even")
        both = _merge(f"{self.name}.concat", "concat", [self.pool.trace(t), self.strided.trace(t)])
        return self.merge.trace(both)


class CDCBlock(Block):
    """Sequential 3x3 convs with growing dilation, same padding throughout."""

    def __init__(self, cfg: CDCConfig, name: str = "cdc", rng: np.random.Generator | None = None,
                 dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.name, self.cfg = name, cfg
        c, k = cfg.channels, cfg.kernel
        self.layers = [ConvUnit(f"{name}.d{r}", Conv2dSpec.same(c, c, k, dilation=int(r)), rng, dtype,
                                batchnorm=cfg.batchnorm)
                       for r in cfg.dilation_rates]

    def children(self):
        return list(self.layers)

    def forward(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        return _run(self.layers, x, ctx)

    def trace(self, t: Trace) -> Trace:
        return _trace(self.layers, t)


class Upsample(Block):
    def __init__(self, name: str):
        self.name = name

    def forward(self, x, ctx):
        return ops.upsample_nearest2x(x)

    def trace(self, t: Trace) -> Trace:
        out = t.fork()
        out.h, out.w, out.jump = 2 * t.h, 2 * t.w, t.jump / 2
        out.record(self.name, "upsample2x", 0)
        return out


class DecoderStage(Block):
    def __init__(self, name: str, in_channels: int, skip_channels: int, out_channels: int,
                 rng: np.random.Generator, dtype=np.float32):
        self.name = name
        self.up = Upsample(f"{name}.up")
        self.up_conv = ConvUnit(f"{name}.up_conv", Conv2dSpec.same(in_channels, out_channels, 3), rng, dtype)
        self.convs = [
            ConvUnit(f"{name}.conv1", Conv2dSpec.same(out_channels + skip_channels, out_channels, 3), rng, dtype),
            ConvUnit(f"{name}.conv2", Conv2dSpec.same(out_channels, out_channels, 3), rng, dtype),
        ]

    def children(self):
        return [self.up, self.up_conv, *self.convs]

    def forward(self, x: Tensor, skip: Tensor, ctx: ForwardContext) -> Tensor:
        y = self.up_conv.forward(self.up.forward(x, ctx), ctx)
        if y.shape[2:] != skip.shape[2:]:
            raise ValueError(f"{self.name}: skip size {skip.shape[2:]} != upsampled size {y.shape[2:]}")
        return _run(self.convs, ops.concat_channels([y, skip]), ctx)

    def trace(self, t: Trace, skip: Trace) -> Trace:
        y = self.up_conv.trace(self.up.trace(t))
        if (y.h, y.w) != (skip.h, skip.w):
            raise ValueError(f"{self.name}: skip size {(skip.h, skip.w)} != upsampled size {(y.h, y.w)}")
        return _trace(self.convs, _merge(f"{self.name}.concat_skip", "concat", [y, skip]))


def build_inception_block(cfg: InceptionBlockConfig, name: str = "inception", rng=None,
                          dtype=np.float32) -> InceptionBlock:
    return InceptionBlock(cfg, name, rng, dtype)


def build_downsample_block(in_channels: int, out_channels: int, name: str = "down", rng=None,
                           dtype=np.float32, dropout_rate: float = 0.2) -> DownsampleBlock:
    return DownsampleBlock(in_channels, out_channels, name, rng, dtype, dropout_rate)


def build_cdc(cfg: CDCConfig, name: str = "cdc", rng=None, dtype=np.float32) -> CDCBlock:
    return CDCBlock(cfg, name, rng, dtype)


class LayerGraph(Block):
    """The assembled network.

    ``skips`` lists (encoder stage, decoder stage) pairs joined by channel
    concatenation. Parameter names are derived from block names and are the
    checkpoint keys.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        cfg.validate()
        self.name = "model"
        self.config = cfg
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        enc, dec, p = cfg.encoder_channels, cfg.decoder_channels, cfg.dropout_rate

        self.stem = ConvUnit("stem", Conv2dSpec.same(cfg.input_channels, enc[0], 3), rng, dtype, dropout_rate=p)
        self.encoder = []
        prev = enc[0]
        for i, c in enumerate(enc):
            inc = build_inception_block(InceptionBlockConfig(prev, c, p), f"enc{i}.inception", rng, dtype)
            down = None
            if i < len(enc) - 1:
                down = build_downsample_block(c, enc[i + 1], f"enc{i}.down", rng, dtype, p)
                prev = enc[i + 1]
            self.encoder.append((inc, down))
        self.cdc = build_cdc(cfg.cdc, "cdc", rng, dtype)
        self.decoder = []
        self.skips = []
        prev = enc[-1]
        for j, c in enumerate(dec):
            skip_stage = len(enc) - 2 - j
            self.decoder.append(DecoderStage(f"dec{j}", prev, enc[skip_stage], c, rng, dtype))
            self.skips.append((f"enc{skip_stage}", f"dec{j}"))
            prev = c
        self.head = ConvUnit("head", Conv2dSpec.same(prev, cfg.num_classes, 1), rng, dtype,
                             batchnorm=False, activation=False)

    def children(self):
        out = [self.stem]
        for inc, down in self.encoder:
            out.append(inc)
            if down is not None:
                out.append(down)
        return out + [self.cdc, *self.decoder, self.head]

    def parameters(self) -> dict:
        return dict(self.named_parameters())

    def forward(self, x: Tensor, mode: str = "eval", rng: np.random.Generator | None = None,
                return_features: bool = False):
        ctx = ForwardContext(mode, rng)
        if x.data.ndim != 4 or x.shape[1] != self.config.input_channels:
            raise ValueError(f"expected input [N,{self.config.input_channels},H,W], got {list(x.shape)}")
        factor = 2 ** self.config.downsamplings
        if x.shape[2] % factor or x.shape[3] % factor:
            raise ValueError(f"input height and width must be multiples of {factor}, got {x.shape[2:]}")
        if x.dtype != self.dtype:
            x = Tensor(x.data, dtype=self.dtype)
        feats = {}
        y = self.stem.forward(x, ctx)
        skips = []
        for i, (inc, down) in enumerate(self.encoder):
            y = inc.forward(y, ctx)
            feats[f"enc{i}"] = y
            if down is not None:
                skips.append(y)
                y = down.forward(y, ctx)
        y = self.cdc.forward(y, ctx)
        feats["cdc"] = y
        for j, stage in enumerate(self.decoder):
            y = stage.forward(y, skips.pop(), ctx)
            feats[f"dec{j}"] = y
        logits = self.head.forward(y, ctx)
        probs = ops.softmax_channels(logits)
        return (probs, feats) if return_features else probs

    __call__ = forward

    def trace(self, input_size) -> tuple[Trace, list]:
        """Propagate shapes and receptive fields; returns (final trace, stage rows)."""
        h, w = (input_size, input_size) if isinstance(input_size, int) else input_size
        t = Trace(self.config.input_channels, h, w)
        stages = []

        def stage(name, tr, rf_local=None):
            row = {"name": name, "out_shape": tr.shape, "rf": [_num(tr.rf_h), _num(tr.rf_w)]}
            if rf_local is not None:
                row["rf_local"] = rf_local
            stages.append(row)

        t = self.stem.trace(t)
        stage("stem", t)
        skips = []
        for i, (inc, down) in enumerate(self.encoder):
            t = inc.trace(t)
            stage(f"enc{i}", t)
            if down is not None:
                skips.append(t)
                t = down.trace(t)
        rf_before = (t.rf_h, t.jump)
        t = self.cdc.trace(t)
        stage("cdc", t, rf_local=self.config.cdc.receptive_field)
        stages[-1]["rf_before"] = _num(rf_before[0])
        stages[-1]["jump"] = _num(rf_before[1])
        for j, st in enumerate(self.decoder):
            t = st.trace(t, skips.pop())
            stage(f"dec{j}", t)
        t = self.head.trace(t)
        stage("head", t)
        return t, stages


def build_model(cfg: ModelConfig | None = None, seed: int = 0, dtype=np.float32) -> LayerGraph:
    return LayerGraph(cfg or ModelConfig(), seed, dtype)


def forward(model: LayerGraph, x: Tensor, mode: str = "eval", rng=None) -> Tensor:
    return model.forward(x, mode, rng)


def analyze(model: LayerGraph, input_size=512, batch: int = 1) -> dict:
    """Static report: per-layer shapes, parameter counts, receptive fields."""
    final, stages = model.trace(input_size)
    params = model.parameters()
    conv_params = sum(t.size for n, t in params.items() if n.endswith((".weight", ".bias")))
    return {
        "input_shape": [batch, model.config.input_channels, *final.shape[1:]],
        "output_shape": [batch, *final.shape],
        "parameter_count": int(sum(t.size for t in params.values())),
        "conv_parameter_count": int(conv_params),
        "bn_parameter_count": int(sum(t.size for t in params.values()) - conv_params),
        "receptive_field": _num(final.rf_h),
        "cdc_receptive_field": model.config.cdc.receptive_field,
        "stages": stages,
        "layers": final.rows,
        "config": model.config.to_dict(),
    }


def format_report(report: dict) -> str:
    lines = [
        f"input  {report['input_shape']}",
        f"output {report['output_shape']}",
        f"parameters {report['parameter_count']} "
        f"(conv {report['conv_parameter_count']}, bn {report['bn_parameter_count']})",
        f"cdc receptive field (bottleneck scale) {report['cdc_receptive_field']}",
        f"receptive field (input scale) {report['receptive_field']}",
        "",
        f"{'stage':<8} {'out_shape':<18} {'rf':>10} {'rf_local':>9}",
    ]
    for s in report["stages"]:
        rf = "x".join(str(v) for v in s["rf"])
        lines.append(f"{s['name']:<8} {str(s['out_shape']):<18} {rf:>10} {str(s.get('rf_local', '')):>9}")
    lines += ["", f"{'layer':<28} {'kind':<18} {'out_shape':<18} {'params':>8} {'rf':>10}"]
    for r in report["layers"]:
        rf = "x".join(str(v) for v in r["rf"])
        lines.append(f"{r['name']:<28} {r['kind']:<18} {str(r['out_shape']):<18} {r['params']:>8} {rf:>10}")
    return "\n".join(lines)


def report_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True)
