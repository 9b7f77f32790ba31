"""
Architectural units: pre-activation residual units (plain and multiscale),
the ASPP reference head, eASPP, the SSMA fusion block and channel attention.

Every block is a ``Module`` with ``forward`` and an analytic ``cost``.
Channel groups for pruning are declared in ``self.groups`` and wired to
their readers with ``set_layout``/``link``.
"""

import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from . import ops
from .config import require
from .cost import CostReport, Shape, join
from .exceptions import ConfigError, ShapeError
from .graph import ChannelGroup, link, probe, set_layout
from .nn import BatchNorm2d, Conv2d, Module, bn_relu, bn_relu_cost
from .tensor import Tensor


# ======================================================
# Configs
# ======================================================

@dataclass
class UnitConfig:
    in_channels: int
    bottleneck_channels: int
    out_channels: int
    dilations: Tuple[int, int] = (1, 1)
    stride: int = 1
    projection: bool = False
    multiscale: bool = False

    def __post_init__(self) -> None:
        require(min(self.in_channels, self.bottleneck_channels, self.out_channels) > 0,
                f"unit channels must be positive: {self}")
        require(min(self.dilations) >= 1, f"unit dilations must be >= 1, got {self.dilations}")
        require(self.stride in (1, 2), f"unit stride must be 1 or 2, got {self.stride}")
        if self.multiscale:
            require(self.bottleneck_channels % 2 == 0,
                    f"multiscale unit needs an even bottleneck width, got {self.bottleneck_channels}")
        if (self.in_channels != self.out_channels or self.stride != 1) and not self.projection:
            raise ConfigError(f"unit {self.in_channels}->{self.out_channels} stride {self.stride} "
                              "needs a projection shortcut")


@dataclass
class EasppConfig:
    in_channels: Optional[int] = None
    branch_channels: int = 256
    bottleneck_channels: Optional[int] = None
    dilations: List[int] = field(default_factory=lambda: [3, 6, 12])
    dropout: float = 0.5

    def __post_init__(self) -> None:
        require(self.branch_channels > 0, "easpp.branch_channels must be positive")
        require(all(b > a for a, b in zip(self.dilations, self.dilations[1:])),
                f"easpp dilations must be strictly increasing, got {self.dilations}")
        require(len(self.dilations) > 0 and self.dilations[0] >= 1,
                f"easpp dilations must be >= 1, got {self.dilations}")
        require(0.0 <= self.dropout < 1.0, f"easpp.dropout must lie in [0, 1), got {self.dropout}")
        if self.bottleneck_channels is not None:
            require(self.bottleneck_channels > 0 and self.branch_channels % self.bottleneck_channels == 0,
                    f"easpp bottleneck {self.bottleneck_channels} must divide {self.branch_channels}")

    @property
    def bottleneck(self) -> int:
        if self.bottleneck_channels is not None:
            return self.bottleneck_channels
        return max(1, self.branch_channels // 4)


@dataclass
class SsmaConfig:
    channels: int
    eta: int = 16
    kernel_size: int = 3

    def __post_init__(self) -> None:
        require(self.channels > 0, f"ssma channels must be positive, got {self.channels}")
        require(self.eta >= 1, f"ssma eta must be >= 1, got {self.eta}")
        require(self.kernel_size in (1, 3), f"ssma kernel_size must be 1 or 3, got {self.kernel_size}")

    @property
    def bottleneck_channels(self) -> int:
        return max(1, math.ceil(2 * self.channels / self.eta))


@dataclass
class AttentionConfig:
    decoder_channels: int
    skip_channels: int


# ======================================================
# Residual units
# ======================================================

class ResidualUnit(Module):
    """Full pre-activation bottleneck; multiscale when ``cfg.multiscale``.

    The multiscale variant replaces the middle 3×3 by two parallel 3×3
    atrous convolutions (rates r1, r2) with half the bottleneck maps each.
    """

    def __init__(self, cfg: UnitConfig, rng: Optional[np.random.Generator] = None,
                 dtype=np.float64):
        super().__init__()
        self.cfg = cfg
        b = cfg.bottleneck_channels
        r1, r2 = cfg.dilations
        self.bn1 = BatchNorm2d(cfg.in_channels, dtype)
        self.conv1 = Conv2d(cfg.in_channels, b, 1, rng=rng, dtype=dtype)
        self.bn2 = BatchNorm2d(b, dtype)
        g1 = ChannelGroup(self.conv1)
        self.groups = {"conv1": g1}
        if cfg.multiscale:
            self.conv2a = Conv2d(b, b // 2, 3, cfg.stride, r1, rng=rng, dtype=dtype)
            self.conv2b = Conv2d(b, b // 2, 3, cfg.stride, r2, rng=rng, dtype=dtype)
            ga, gb = ChannelGroup(self.conv2a), ChannelGroup(self.conv2b)
            self.groups.update({"conv2a": ga, "conv2b": gb})
            self._mid: List = [ga, gb]
            for reader in (self.conv2a, self.conv2b):
                link(g1, reader)
        else:
            self.conv2 = Conv2d(b, b, 3, cfg.stride, r1, rng=rng, dtype=dtype)
            g2 = ChannelGroup(self.conv2)
            self.groups["conv2"] = g2
            self._mid = [g2]
            link(g1, self.conv2)
        link(g1, self.bn2)
        self.bn3 = BatchNorm2d(b, dtype)
        self.conv3 = Conv2d(b, cfg.out_channels, 1, rng=rng, dtype=dtype)
        set_layout(self.bn3, *self._mid)
        set_layout(self.conv3, *self._mid)
        self.groups["conv3"] = ChannelGroup(self.conv3, masked=True)
        self.proj = (Conv2d(cfg.in_channels, cfg.out_channels, 1, cfg.stride, rng=rng, dtype=dtype)
                     if cfg.projection else None)

    @property
    def shortcut_kind(self) -> str:
        return "projection" if self.proj is not None else "identity"

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.cfg.in_channels:
            raise ShapeError(f"residual unit expects {self.cfg.in_channels} channels, got {x.shape}")
        pre = bn_relu(self.bn1, x)
        h = probe(bn_relu(self.bn2, self.conv1(pre)), [self.groups["conv1"]])
        if self.cfg.multiscale:
            h = ops.concat_channels(self.conv2a(h), self.conv2b(h))
        else:
            h = self.conv2(h)
        h = probe(bn_relu(self.bn3, h), self._mid)
        y = probe(self.conv3(h), [self.groups["conv3"]])
        y = self.conv3.scatter(y)
        shortcut = self.proj(pre) if self.proj is not None else x
        return ops.add(y, shortcut)

    def cost(self, shape: Shape, report: CostReport, name: str = "") -> Shape:
        bn_relu_cost(self.bn1, shape, report, join(name, "bn1"))
        s1 = self.conv1.cost(shape, report, join(name, "conv1"))
        bn_relu_cost(self.bn2, s1, report, join(name, "bn2"))
        if self.cfg.multiscale:
            sa = self.conv2a.cost(s1, report, join(name, "conv2a"))
            sb = self.conv2b.cost(s1, report, join(name, "conv2b"))
            s2 = (sa[0], sa[1] + sb[1], sa[2], sa[3])
        else:
            s2 = self.conv2.cost(s1, report, join(name, "conv2"))
        bn_relu_cost(self.bn3, s2, report, join(name, "bn3"))
        out = self.conv3.cost(s2, report, join(name, "conv3"))
        if self.proj is not None:
            self.proj.cost(shape, report, join(name, "proj"))
        report.elementwise("add", join(name, "add"), out)
        return out


def preact_residual_forward(unit: ResidualUnit, x: Tensor) -> Tensor:
    if unit.cfg.multiscale:
        raise ConfigError("preact_residual_forward needs a plain unit")
    return unit(x)


def multiscale_residual_forward(unit: ResidualUnit, x: Tensor) -> Tensor:
    if not unit.cfg.multiscale:
        raise ConfigError("multiscale_residual_forward needs a multiscale unit")
    return unit(x)


# ======================================================
# ASPP / eASPP
# ======================================================

class ConvBnRelu(Module):
    def __init__(self, cin: int, cout: int, k: int, dilation: int = 1,
                 rng: Optional[np.random.Generator] = None, dtype=np.float64):
        super().__init__()
        self.conv = Conv2d(cin, cout, k, dilation=dilation, rng=rng, dtype=dtype)
        self.bn = BatchNorm2d(cout, dtype)

    def forward(self, x: Tensor) -> Tensor:
        return bn_relu(self.bn, self.conv(x))

    def cost(self, shape: Shape, report: CostReport, name: str = "") -> Shape:
        out = self.conv.cost(shape, report, join(name, "conv"))
        return bn_relu_cost(self.bn, out, report, join(name, "bn"))


class ImagePooling(Module):
    """Global average pool → 1×1 conv → BN → ReLU → bilinear back to H×W."""

    def __init__(self, cin: int, cout: int, rng=None, dtype=np.float64):
        super().__init__()
        self.proj = ConvBnRelu(cin, cout, 1, rng=rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        h, w = x.shape[2:]
        return ops.bilinear_resize(self.proj(ops.global_avg_pool(x)), (h, w))

    def cost(self, shape: Shape, report: CostReport, name: str = "") -> Shape:
        n, c, h, w = shape
        report.elementwise("pool", join(name, "pool"), shape)
        pooled = self.proj.cost((n, c, 1, 1), report, join(name, "proj"))
        out = (n, pooled[1], h, w)
        report.elementwise("bilinear", join(name, "resize"), out)
        return out


class ASPP(Module):
    """Reference ASPP head: 1×1, three 3×3 atrous, image pooling, 1×1 projection."""

    def __init__(self, cfg: EasppConfig, rng: Optional[np.random.Generator] = None,
                 dtype=np.float64):
        super().__init__()
        if cfg.in_channels is None:
            raise ConfigError("ASPP needs in_channels")
        cin, c = cfg.in_channels, cfg.branch_channels
        self.cfg = cfg
        self.branch0 = ConvBnRelu(cin, c, 1, rng=rng, dtype=dtype)
        self.atrous = [ConvBnRelu(cin, c, 3, d, rng=rng, dtype=dtype) for d in cfg.dilations]
        for i, m in enumerate(self.atrous):
            setattr(self, f"atrous{i + 1}", m)
        self.pooling = ImagePooling(cin, c, rng, dtype)
        self.project = ConvBnRelu(c * (len(cfg.dilations) + 2), c, 1, rng=rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        branches = [self.branch0(x)] + [m(x) for m in self.atrous] + [self.pooling(x)]
        return self.project(ops.concat_channels(*branches))

    def cost(self, shape: Shape, report: CostReport, name: str = "") -> Shape:
        outs = [self.branch0.cost(shape, report, join(name, "branch0"))]
        outs += [m.cost(shape, report, join(name, f"atrous{i + 1}")) for i, m in enumerate(self.atrous)]
        outs.append(self.pooling.cost(shape, report, join(name, "pooling")))
        cat = (shape[0], sum(o[1] for o in outs), outs[0][2], outs[0][3])
        return self.project.cost(cat, report, join(name, "project"))


class CascadeBranch(Module):
    """1×1 reduce → two cascaded 3×3 atrous at one rate → 1×1 expand."""

    def __init__(self, cin: int, c: int, bottleneck: int, rate: int, rng=None, dtype=np.float64):
        super().__init__()
        self.rate = rate
        self.reduce = Conv2d(cin, bottleneck, 1, rng=rng, dtype=dtype)
        self.bn_reduce = BatchNorm2d(bottleneck, dtype)
        self.atrous1 = Conv2d(bottleneck, bottleneck, 3, dilation=rate, rng=rng, dtype=dtype)
        self.bn_atrous1 = BatchNorm2d(bottleneck, dtype)
        self.atrous2 = Conv2d(bottleneck, bottleneck, 3, dilation=rate, rng=rng, dtype=dtype)
        self.bn_atrous2 = BatchNorm2d(bottleneck, dtype)
        self.expand = Conv2d(bottleneck, c, 1, rng=rng, dtype=dtype)
        self.bn_expand = BatchNorm2d(c, dtype)
        self.groups = {
            "reduce": ChannelGroup(self.reduce),
            "atrous1": ChannelGroup(self.atrous1),
            "atrous2": ChannelGroup(self.atrous2),
        }
        for key, (bn, nxt) in zip(self.groups, [(self.bn_reduce, self.atrous1),
                                                 (self.bn_atrous1, self.atrous2),
                                                 (self.bn_atrous2, self.expand)]):
            link(self.groups[key], bn)
            link(self.groups[key], nxt)

    def forward(self, x: Tensor) -> Tensor:
        g = self.groups
        h = probe(bn_relu(self.bn_reduce, self.reduce(x)), [g["reduce"]])
        h = probe(bn_relu(self.bn_atrous1, self.atrous1(h)), [g["atrous1"]])
        h = probe(bn_relu(self.bn_atrous2, self.atrous2(h)), [g["atrous2"]])
        return bn_relu(self.bn_expand, self.expand(h))

    def cost(self, shape: Shape, report: CostReport, name: str = "") -> Shape:
        for key in ("reduce", "atrous1", "atrous2", "expand"):
            shape = getattr(self, key).cost(shape, report, join(name, key))
            bn_relu_cost(getattr(self, f"bn_{key}"), shape, report, join(name, f"bn_{key}"))
        return shape


class EASPP(Module):
    """Efficient ASPP: 1×1 branch, cascaded bottleneck atrous branches, image pooling."""

    def __init__(self, cfg: EasppConfig, rng: Optional[np.random.Generator] = None,
                 dtype=np.float64, dropout_rng: Optional[np.random.Generator] = None):
        super().__init__()
        if cfg.in_channels is None:
            raise ConfigError("eASPP needs in_channels")
        cin, c = cfg.in_channels, cfg.branch_channels
        self.cfg = cfg
        self.dropout_rng = dropout_rng
        self.branch0 = ConvBnRelu(cin, c, 1, rng=rng, dtype=dtype)
        self.cascades = [CascadeBranch(cin, c, cfg.bottleneck, d, rng, dtype) for d in cfg.dilations]
        for i, m in enumerate(self.cascades):
            setattr(self, f"cascade{i + 1}", m)
        self.pooling = ImagePooling(cin, c, rng, dtype)
        self.project = ConvBnRelu(c * (len(cfg.dilations) + 2), c, 1, rng=rng, dtype=dtype)

    @property
    def out_channels(self) -> int:
        return self.cfg.branch_channels

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.cfg.in_channels:
            raise ShapeError(f"eASPP expects {self.cfg.in_channels} channels, got {x.shape}")
        branches = [self.branch0(x)] + [m(x) for m in self.cascades] + [self.pooling(x)]
        h = ops.concat_channels(*branches)
        h = ops.dropout(h, self.cfg.dropout, self.dropout_rng, self.training)
        return self.project(h)

    def cost(self, shape: Shape, report: CostReport, name: str = "") -> Shape:
        outs = [self.branch0.cost(shape, report, join(name, "branch0"))]
        outs += [m.cost(shape, report, join(name, f"cascade{i + 1}")) for i, m in enumerate(self.cascades)]
        outs.append(self.pooling.cost(shape, report, join(name, "pooling")))
        cat = (shape[0], sum(o[1] for o in outs), outs[0][2], outs[0][3])
        return self.project.cost(cat, report, join(name, "project"))


def aspp_forward(head: ASPP, x: Tensor) -> Tensor:
    return head(x)


def easpp_forward(head: EASPP, x: Tensor) -> Tensor:
    return head(x)


# ======================================================
# Fusion
# ======================================================

class SSMA(Module):
    """Gated fusion of two modality feature maps.

    gate = sigmoid(W2 * ReLU(W1 * [xa, xb])), fused = BN(W3 * (gate ∘ [xa, xb])).
    """

    def __init__(self, cfg: SsmaConfig, rng: Optional[np.random.Generator] = None,
                 dtype=np.float64):
        super().__init__()
        self.cfg = cfg
        c2, k = 2 * cfg.channels, cfg.kernel_size
        self.gate1 = Conv2d(c2, cfg.bottleneck_channels, k, bias=True, rng=rng, dtype=dtype)
        self.gate2 = Conv2d(cfg.bottleneck_channels, c2, k, bias=True, rng=rng, dtype=dtype)
        self.fuse = Conv2d(c2, cfg.channels, k, rng=rng, dtype=dtype)
        self.bn_fuse = BatchNorm2d(cfg.channels, dtype)
        self.groups = {"gate1": ChannelGroup(self.gate1)}
        link(self.groups["gate1"], self.gate2)

    def gate(self, cat: Tensor) -> Tensor:
        h = probe(ops.relu(self.gate1(cat)), [self.groups["gate1"]])
        return ops.sigmoid(self.gate2(h))

    def forward(self, xa: Tensor, xb: Tensor) -> Tuple[Tensor, Tensor]:
        if xa.shape != xb.shape or xa.shape[1] != self.cfg.channels:
            raise ShapeError(f"SSMA({self.cfg.channels}) got modality shapes {xa.shape} and {xb.shape}")
        cat = ops.concat_channels(xa, xb)
        s = self.gate(cat)
        fused = self.bn_fuse(self.fuse(ops.hadamard(s, cat)))
        return fused, s

    def cost(self, shape: Shape, report: CostReport, name: str = "") -> Shape:
        n, c, h, w = shape
        cat = (n, 2 * c, h, w)
        s1 = self.gate1.cost(cat, report, join(name, "gate1"))
        report.elementwise("relu", join(name, "gate1.relu"), s1)
        s2 = self.gate2.cost(s1, report, join(name, "gate2"))
        report.elementwise("sigmoid", join(name, "gate2.sigmoid"), s2)
        report.elementwise("hadamard", join(name, "recalibrate"), cat)
        out = self.fuse.cost(cat, report, join(name, "fuse"))
        return self.bn_fuse.cost(out, report, join(name, "bn_fuse"))


def ssma_forward(block: SSMA, xa: Tensor, xb: Tensor) -> Tuple[Tensor, Tensor]:
    return block(xa, xb)


class ChannelAttention(Module):
    """Weights fused skip features by reduced global statistics of decoder features."""

    def __init__(self, cfg: AttentionConfig, rng: Optional[np.random.Generator] = None,
                 dtype=np.float64):
        super().__init__()
        self.cfg = cfg
        self.reduce = Conv2d(cfg.decoder_channels, cfg.skip_channels, 1, rng=rng, dtype=dtype)
        self.bn = BatchNorm2d(cfg.skip_channels, dtype)

    def weights(self, decoder: Tensor) -> Tensor:
        return bn_relu(self.bn, self.reduce(ops.global_avg_pool(decoder)))

    def forward(self, decoder: Tensor, skip: Tensor) -> Tensor:
        if decoder.shape[1] != self.reduce.in_channels or skip.shape[1] != self.cfg.skip_channels:
            raise ShapeError(f"channel attention expects decoder {self.reduce.in_channels} and skip "
                             f"{self.cfg.skip_channels} channels, got {decoder.shape} and {skip.shape}")
        return ops.channel_scale(skip, self.weights(decoder))

    def cost(self, shape: Shape, report: CostReport, name: str = "") -> Shape:
        n, c, h, w = shape
        report.elementwise("pool", join(name, "pool"), shape)
        z = self.reduce.cost((n, c, 1, 1), report, join(name, "reduce"))
        bn_relu_cost(self.bn, z, report, join(name, "bn"))
        out = (n, self.cfg.skip_channels, h, w)
        report.elementwise("channel_scale", join(name, "scale"), out)
        return out


def channel_attention_fuse(block: ChannelAttention, decoder: Tensor, skip: Tensor) -> Tensor:
    return block(decoder, skip)
