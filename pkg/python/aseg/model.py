"""
Network assembly: the unimodal segmentation graph and the two-stream
SSMA fusion graph.

Encoder: two stride-2 3×3 stem convolutions, four stages of pre-activation
bottleneck units (stride 2 in stages 1 and 2, output stride 16), dilated and
multiscale units per the dilation schedule, then eASPP.

Decoder: deconv ×2 → [skip1 → two 3×3 → deconv ×2] → [skip2 → two 3×3 →
1×1 classifier → deconv ×4]. Auxiliary heads after both ×2 deconvolutions
supervise training and are skipped in eval mode.

Usage:
    graph = build_unimodal(ModelConfig(num_classes=6), seed=0)
    out = graph(Tensor(images))        # ModelOutput(main, aux1, aux2)
    fusion = build_fusion(FusionConfig(), seed=0)
    transfer_encoder(fusion, graph, "a")
"""

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Literal, Optional, Tuple

import numpy as np

from . import ops
from .blocks import (AttentionConfig, ChannelAttention, EASPP, EasppConfig, ResidualUnit,
                     SSMA, SsmaConfig, UnitConfig)
from .config import require
from .cost import CostReport, Shape, join
from .exceptions import CheckpointError, ConfigError, ShapeError
from .graph import ChannelGroup, LayerGraph, link, probe, set_layout
from .logging import get_logger
from .nn import BatchNorm2d, Conv2d, ConvTranspose2d, Module, Sequential, bn_relu, bn_relu_cost
from .tensor import Tensor

logger = get_logger("aseg.model")

OUTPUT_STRIDE = 16

# Multiscale rates (r1, r2) of the six units of the fourth residual stage and
# the three units of the fifth, in the full-size network.
RES4_RATES = [(1, 1), (1, 1), (1, 2), (1, 4), (1, 8), (1, 16)]
RES5_RATES = [(2, 4), (2, 8), (2, 16)]


def default_dilation_schedule(units: List[int]) -> List[Tuple[int, int, int, int]]:
    """(stage, unit, r1, r2) entries mapping the full-size rates onto ``units``.

    Unit u of n in stage 2 takes the rates of full-size unit floor(6u/n);
    in stage 3 it takes floor(3u/n).
    """
    schedule = []
    n2, n3 = units[2], units[3]
    for u in range(n2):
        r1, r2 = RES4_RATES[(len(RES4_RATES) * u) // n2]
        if (r1, r2) != (1, 1):
            schedule.append((2, u, r1, r2))
    for u in range(n3):
        r1, r2 = RES5_RATES[(len(RES5_RATES) * u) // n3]
        schedule.append((3, u, r1, r2))
    return schedule


@dataclass
class EncoderConfig:
    input_channels: int = 3
    width_multiplier: float = 0.125
    stem_channels: int = 64
    widths: List[int] = field(default_factory=lambda: [256, 512, 1024, 2048])
    units: List[int] = field(default_factory=lambda: [2, 2, 2, 2])
    strides: List[int] = field(default_factory=lambda: [1, 2, 2, 1])
    dilation_schedule: Optional[List[Tuple[int, int, int, int]]] = None

    def __post_init__(self) -> None:
        require(len(self.widths) == 4 and len(self.units) == 4 and len(self.strides) == 4,
                "encoder widths, units and strides need exactly 4 stages")
        require(all(u >= 1 for u in self.units), f"encoder.units must be >= 1, got {self.units}")
        require(self.width_multiplier > 0, "encoder.width_multiplier must be positive")
        require(self.strides[3] == 1, "the last encoder stage must have stride 1")
        require(4 * int(np.prod(self.strides)) == OUTPUT_STRIDE,
                f"encoder strides {self.strides} do not give output stride {OUTPUT_STRIDE}")
        for stage, unit, r1, r2 in self.schedule():
            require(0 <= stage < 4 and 0 <= unit < self.units[stage],
                    f"dilation schedule references missing unit ({stage}, {unit})")
            require(r1 >= 1 and r2 >= 1, f"dilation rates must be >= 1, got ({r1}, {r2})")

    def scaled(self, n: int) -> int:
        return max(1, int(round(n * self.width_multiplier)))

    @property
    def stage_widths(self) -> List[int]:
        return [self.scaled(w) for w in self.widths]

    def schedule(self) -> List[Tuple[int, int, int, int]]:
        if self.dilation_schedule is not None:
            return [tuple(e) for e in self.dilation_schedule]  # type: ignore[misc]
        return default_dilation_schedule(self.units)

    def unit_rates(self) -> Dict[Tuple[int, int], Tuple[int, int]]:
        return {(s, u): (r1, r2) for s, u, r1, r2 in self.schedule()}


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    easpp: EasppConfig = field(default_factory=EasppConfig)
    num_classes: int = 6
    skip_channels: int = 24
    decoder_channels: int = 256
    modality: Literal["a", "b"] = "a"
    dtype: Literal["float64", "float32"] = "float64"

    def __post_init__(self) -> None:
        require(self.num_classes >= 2, f"num_classes must be >= 2, got {self.num_classes}")
        require(self.skip_channels >= 1, "skip_channels must be positive")
        require(self.decoder_channels >= 1, "decoder_channels must be positive")

    @property
    def latent_channels(self) -> int:
        return self.encoder.scaled(self.easpp.branch_channels)

    @property
    def decoder_width(self) -> int:
        return self.encoder.scaled(self.decoder_channels)

    def easpp_config(self) -> EasppConfig:
        c = self.latent_channels
        bottleneck = self.easpp.bottleneck_channels
        if bottleneck is not None:
            bottleneck = self.encoder.scaled(bottleneck)
        return EasppConfig(in_channels=self.encoder.stage_widths[3], branch_channels=c,
                           bottleneck_channels=bottleneck, dilations=list(self.easpp.dilations),
                           dropout=self.easpp.dropout)


@dataclass
class FusionConfig:
    stream_a: ModelConfig = field(default_factory=ModelConfig)
    stream_b: ModelConfig = field(default_factory=lambda: ModelConfig(modality="b"))
    eta_enc: int = 16
    eta_skip: int = 6
    ssma_kernel: int = 3

    def __post_init__(self) -> None:
        a, b = self.stream_a, self.stream_b
        for key in ("num_classes", "skip_channels", "decoder_channels", "dtype"):
            require(getattr(a, key) == getattr(b, key),
                    f"fusion streams disagree on {key}: {getattr(a, key)} vs {getattr(b, key)}")
        require(a.latent_channels == b.latent_channels,
                f"fusion streams have different latent widths {a.latent_channels} vs {b.latent_channels}")
        require(a.encoder.stage_widths[:2] == b.encoder.stage_widths[:2],
                "fusion streams have different skip tap widths")


@dataclass
class ModelOutput:
    main: Tensor
    aux1: Optional[Tensor] = None
    aux2: Optional[Tensor] = None


# ======================================================
# Encoder stream
# ======================================================

class Encoder(Module):
    def __init__(self, cfg: EncoderConfig, rng=None, dtype=np.float64):
        super().__init__()
        self.cfg = cfg
        stem = cfg.scaled(cfg.stem_channels)
        self.stem1 = Conv2d(cfg.input_channels, stem, 3, stride=2, rng=rng, dtype=dtype)
        self.stem_bn = BatchNorm2d(stem, dtype)
        self.stem2 = Conv2d(stem, stem, 3, stride=2, rng=rng, dtype=dtype)
        self.groups = {"stem1": ChannelGroup(self.stem1)}
        link(self.groups["stem1"], self.stem_bn)
        link(self.groups["stem1"], self.stem2)

        rates = cfg.unit_rates()
        width_in = stem
        self.stages: List[Sequential] = []
        for s, (width, n_units, stride) in enumerate(zip(cfg.stage_widths, cfg.units, cfg.strides)):
            stage = Sequential()
            for u in range(n_units):
                r1, r2 = rates.get((s, u), (1, 1))
                first = u == 0
                unit_cfg = UnitConfig(
                    in_channels=width_in if first else width,
                    bottleneck_channels=max(1, width // 4),
                    out_channels=width,
                    dilations=(r1, r2),
                    stride=stride if first else 1,
                    projection=first and (width_in != width or stride != 1),
                    multiscale=r1 != r2,
                )
                stage.append(ResidualUnit(unit_cfg, rng, dtype))
            setattr(self, f"stage{s}", stage)
            self.stages.append(stage)
            width_in = width
        self.final_bn = BatchNorm2d(width_in, dtype)

    def forward(self, x: Tensor) -> Tuple[Tensor, List[Tensor]]:
        h = probe(bn_relu(self.stem_bn, self.stem1(x)), [self.groups["stem1"]])
        h = self.stem2(h)
        stage_outputs = []
        for stage in self.stages:
            h = stage(h)
            stage_outputs.append(h)
        return bn_relu(self.final_bn, h), stage_outputs

    def cost(self, shape: Shape, report: CostReport, name: str = "") -> Shape:
        s = self.stem1.cost(shape, report, join(name, "stem1"))
        bn_relu_cost(self.stem_bn, s, report, join(name, "stem_bn"))
        s = self.stem2.cost(s, report, join(name, "stem2"))
        self.stage_shapes = []
        for i, stage in enumerate(self.stages):
            s = stage.cost(s, report, join(name, f"stage{i}"))
            self.stage_shapes.append(s)
        return bn_relu_cost(self.final_bn, s, report, join(name, "final_bn"))


@dataclass
class StreamOutput:
    latent: Tensor
    skip1: Tensor
    skip2: Tensor


class Stream(Module):
    """Encoder, eASPP and the 1×1 skip reducers of one modality."""

    def __init__(self, cfg: ModelConfig, rng=None, dtype=np.float64, dropout_rng=None):
        super().__init__()
        self.cfg = cfg
        widths = cfg.encoder.stage_widths
        self.encoder = Encoder(cfg.encoder, rng, dtype)
        self.easpp = EASPP(cfg.easpp_config(), rng, dtype, dropout_rng)
        self.skip1_reduce = Conv2d(widths[1], cfg.skip_channels, 1, rng=rng, dtype=dtype)
        self.skip1_bn = BatchNorm2d(cfg.skip_channels, dtype)
        self.skip2_reduce = Conv2d(widths[0], cfg.skip_channels, 1, rng=rng, dtype=dtype)
        self.skip2_bn = BatchNorm2d(cfg.skip_channels, dtype)

    def forward(self, x: Tensor) -> StreamOutput:
        h, stages = self.encoder(x)
        return StreamOutput(
            latent=self.easpp(h),
            skip1=self.skip1_bn(self.skip1_reduce(stages[1])),
            skip2=self.skip2_bn(self.skip2_reduce(stages[0])),
        )

    def cost(self, shape: Shape, report: CostReport, name: str = "") -> Shape:
        s = self.encoder.cost(shape, report, join(name, "encoder"))
        latent = self.easpp.cost(s, report, join(name, "easpp"))
        stage_shapes = self.encoder.stage_shapes
        for key, src in (("skip1", stage_shapes[1]), ("skip2", stage_shapes[0])):
            r = getattr(self, f"{key}_reduce").cost(src, report, join(name, f"{key}_reduce"))
            getattr(self, f"{key}_bn").cost(r, report, join(name, f"{key}_bn"))
        return latent


# ======================================================
# Decoder
# ======================================================

class AuxHead(Module):
    """1×1 conv + BN to class scores, bilinear to input resolution."""

    def __init__(self, cin: int, num_classes: int, rng=None, dtype=np.float64):
        super().__init__()
        self.conv = Conv2d(cin, num_classes, 1, rng=rng, dtype=dtype)
        self.bn = BatchNorm2d(num_classes, dtype)

    def forward(self, x: Tensor, size: Tuple[int, int]) -> Tensor:
        return ops.bilinear_resize(self.bn(self.conv(x)), size)

    def cost(self, shape: Shape, report: CostReport, name: str = "", factor: int = 1) -> Shape:
        s = self.conv.cost(shape, report, join(name, "conv"))
        self.bn.cost(s, report, join(name, "bn"))
        out = (s[0], s[1], s[2] * factor, s[3] * factor)
        report.elementwise("bilinear", join(name, "resize"), out)
        return out


SkipTransform = Callable[[int, Tensor, Tensor], Tensor]


class Decoder(Module):
    def __init__(self, latent_channels: int, width: int, skip_channels: int, num_classes: int,
                 rng=None, dtype=np.float64):
        super().__init__()
        d, s, c = width, skip_channels, num_classes
        self.skip_channels = s
        self.deconv1 = ConvTranspose2d(latent_channels, d, 2, rng=rng, dtype=dtype)
        self.bn_up1 = BatchNorm2d(d, dtype)
        self.aux1 = AuxHead(d, c, rng, dtype)
        self.conv_a = Conv2d(d + s, d, 3, rng=rng, dtype=dtype)
        self.bn_a = BatchNorm2d(d, dtype)
        self.conv_b = Conv2d(d, d, 3, rng=rng, dtype=dtype)
        self.bn_b = BatchNorm2d(d, dtype)
        self.deconv2 = ConvTranspose2d(d, d, 2, rng=rng, dtype=dtype)
        self.bn_up2 = BatchNorm2d(d, dtype)
        self.aux2 = AuxHead(d, c, rng, dtype)
        self.conv_c = Conv2d(d + s, d, 3, rng=rng, dtype=dtype)
        self.bn_c = BatchNorm2d(d, dtype)
        self.conv_d = Conv2d(d, d, 3, rng=rng, dtype=dtype)
        self.bn_d = BatchNorm2d(d, dtype)
        self.classifier = Conv2d(d, c, 1, bias=True, rng=rng, dtype=dtype)
        self.deconv_out = ConvTranspose2d(c, c, 4, rng=rng, dtype=dtype)

        g = {key: ChannelGroup(getattr(self, key))
             for key in ("deconv1", "conv_a", "conv_b", "deconv2", "conv_c", "conv_d")}
        self.groups = g
        for reader in (self.bn_up1, self.aux1.conv):
            link(g["deconv1"], reader)
        set_layout(self.conv_a, g["deconv1"], s)
        link(g["conv_a"], self.bn_a)
        link(g["conv_a"], self.conv_b)
        link(g["conv_b"], self.bn_b)
        link(g["conv_b"], self.deconv2)
        for reader in (self.bn_up2, self.aux2.conv):
            link(g["deconv2"], reader)
        set_layout(self.conv_c, g["deconv2"], s)
        link(g["conv_c"], self.bn_c)
        link(g["conv_c"], self.conv_d)
        link(g["conv_d"], self.bn_d)
        link(g["conv_d"], self.classifier)

    def forward(self, latent: Tensor, skip1: Tensor, skip2: Tensor, size: Tuple[int, int],
                skip_transform: Optional[SkipTransform] = None) -> ModelOutput:
        g = self.groups
        d1 = probe(bn_relu(self.bn_up1, self.deconv1(latent)), [g["deconv1"]])
        aux1 = self.aux1(d1, size) if self.training else None
        if skip_transform is not None:
            skip1 = skip_transform(1, d1, skip1)
        _check_skip(d1, skip1, "skip1")
        h = ops.concat_channels(d1, skip1)
        h = probe(bn_relu(self.bn_a, self.conv_a(h)), [g["conv_a"]])
        h = probe(bn_relu(self.bn_b, self.conv_b(h)), [g["conv_b"]])

        d2 = probe(bn_relu(self.bn_up2, self.deconv2(h)), [g["deconv2"]])
        aux2 = self.aux2(d2, size) if self.training else None
        if skip_transform is not None:
            skip2 = skip_transform(2, d2, skip2)
        _check_skip(d2, skip2, "skip2")
        h = ops.concat_channels(d2, skip2)
        h = probe(bn_relu(self.bn_c, self.conv_c(h)), [g["conv_c"]])
        h = probe(bn_relu(self.bn_d, self.conv_d(h)), [g["conv_d"]])
        logits = self.deconv_out(self.classifier(h))
        return ModelOutput(logits, aux1, aux2)

    def cost(self, shape: Shape, report: CostReport, name: str = "") -> Shape:
        n = shape[0]
        s = self.deconv1.cost(shape, report, join(name, "deconv1"))
        bn_relu_cost(self.bn_up1, s, report, join(name, "bn_up1"))
        self.aux1.cost(s, report, join(name, "aux1"), factor=8)
        s = (n, s[1] + self.skip_channels, s[2], s[3])
        for conv, bn in (("conv_a", "bn_a"), ("conv_b", "bn_b")):
            s = getattr(self, conv).cost(s, report, join(name, conv))
            bn_relu_cost(getattr(self, bn), s, report, join(name, bn))
        s = self.deconv2.cost(s, report, join(name, "deconv2"))
        bn_relu_cost(self.bn_up2, s, report, join(name, "bn_up2"))
        self.aux2.cost(s, report, join(name, "aux2"), factor=4)
        s = (n, s[1] + self.skip_channels, s[2], s[3])
        for conv, bn in (("conv_c", "bn_c"), ("conv_d", "bn_d")):
            s = getattr(self, conv).cost(s, report, join(name, conv))
            bn_relu_cost(getattr(self, bn), s, report, join(name, bn))
        s = self.classifier.cost(s, report, join(name, "classifier"))
        return self.deconv_out.cost(s, report, join(name, "deconv_out"))


def _check_skip(decoder: Tensor, skip: Tensor, tap: str) -> None:
    if decoder.shape[2:] != skip.shape[2:] or decoder.shape[0] != skip.shape[0]:
        raise ShapeError(f"{tap} tap {skip.shape} does not match decoder features {decoder.shape}")


def _check_input(x: Tensor, channels: int) -> Tuple[int, int]:
    if x.ndim != 4 or x.shape[1] != channels:
        raise ShapeError(f"model input must be N×{channels}×H×W, got {x.shape}")
    h, w = x.shape[2:]
    if h % OUTPUT_STRIDE or w % OUTPUT_STRIDE:
        raise ShapeError(f"input size {h}×{w} must be divisible by {OUTPUT_STRIDE}")
    return h, w


# ======================================================
# Graphs
# ======================================================

def _rngs(seed: Optional[int]) -> Tuple[Optional[np.random.Generator], np.random.Generator]:
    init = None if seed is None else np.random.default_rng([seed, 0])
    dropout = np.random.default_rng([0 if seed is None else seed, 1])
    return init, dropout


class UnimodalGraph(LayerGraph):
    def __init__(self, cfg: ModelConfig, seed: Optional[int] = 0):
        super().__init__()
        self.cfg = cfg
        dtype = np.dtype(cfg.dtype)
        rng, dropout_rng = _rngs(seed)
        self.stream = Stream(cfg, rng, dtype, dropout_rng)
        self.decoder = Decoder(cfg.latent_channels, cfg.decoder_width, cfg.skip_channels,
                               cfg.num_classes, rng, dtype)

    def forward(self, x: Tensor) -> ModelOutput:
        size = _check_input(x, self.cfg.encoder.input_channels)
        self.clear_taps()
        feats = self.stream(x)
        for key in ("latent", "skip1", "skip2"):
            self.record_tap(key, getattr(feats, key))
        return self.decoder(feats.latent, feats.skip1, feats.skip2, size)

    def forward_batch(self, batch) -> ModelOutput:
        return self(Tensor(batch.modality(self.cfg.modality), dtype=self.cfg.dtype))

    def cost(self, shape: Shape, report: CostReport, name: str = "") -> Shape:
        latent = self.stream.cost(shape, report, join(name, "stream"))
        return self.decoder.cost(latent, report, join(name, "decoder"))


class FusionGraph(LayerGraph):
    def __init__(self, cfg: FusionConfig, seed: Optional[int] = 0):
        super().__init__()
        self.cfg = cfg
        a = cfg.stream_a
        dtype = np.dtype(a.dtype)
        rng, dropout_rng = _rngs(seed)
        self.stream_a = Stream(cfg.stream_a, rng, dtype, dropout_rng)
        self.stream_b = Stream(cfg.stream_b, rng, dtype, dropout_rng)
        e, s, d = a.latent_channels, a.skip_channels, a.decoder_width
        self.ssma_latent = SSMA(SsmaConfig(e, cfg.eta_enc, cfg.ssma_kernel), rng, dtype)
        self.ssma_skip1 = SSMA(SsmaConfig(s, cfg.eta_skip, cfg.ssma_kernel), rng, dtype)
        self.ssma_skip2 = SSMA(SsmaConfig(s, cfg.eta_skip, cfg.ssma_kernel), rng, dtype)
        self.attention1 = ChannelAttention(AttentionConfig(d, s), rng, dtype)
        self.attention2 = ChannelAttention(AttentionConfig(d, s), rng, dtype)
        self.decoder = Decoder(e, d, s, a.num_classes, rng, dtype)
        link(self.decoder.groups["deconv1"], self.attention1.reduce)
        link(self.decoder.groups["deconv2"], self.attention2.reduce)

    def forward(self, xa: Tensor, xb: Tensor) -> ModelOutput:
        size = _check_input(xa, self.cfg.stream_a.encoder.input_channels)
        if _check_input(xb, self.cfg.stream_b.encoder.input_channels) != size or xa.shape[0] != xb.shape[0]:
            raise ShapeError(f"modalities differ in size: {xa.shape} vs {xb.shape}")
        self.clear_taps()
        fa, fb = self.stream_a(xa), self.stream_b(xb)
        latent, gate0 = self.ssma_latent(fa.latent, fb.latent)
        skip1, gate1 = self.ssma_skip1(fa.skip1, fb.skip1)
        skip2, gate2 = self.ssma_skip2(fa.skip2, fb.skip2)
        for prefix, feats in (("a", fa), ("b", fb)):
            for key in ("latent", "skip1", "skip2"):
                self.record_tap(f"{prefix}.{key}", getattr(feats, key))
        for key, value in (("latent", latent), ("skip1", skip1), ("skip2", skip2),
                           ("gate.latent", gate0), ("gate.skip1", gate1), ("gate.skip2", gate2)):
            self.record_tap(key, value)

        attention = {1: self.attention1, 2: self.attention2}

        def weight_skip(stage: int, decoder: Tensor, skip: Tensor) -> Tensor:
            return attention[stage](decoder, skip)

        return self.decoder(latent, skip1, skip2, size, weight_skip)

    def forward_batch(self, batch) -> ModelOutput:
        dtype = self.cfg.stream_a.dtype
        return self(Tensor(batch.modality("a"), dtype=dtype), Tensor(batch.modality("b"), dtype=dtype))

    def cost(self, shape: Shape, report: CostReport, name: str = "") -> Shape:
        n = shape[0]
        latent = self.stream_a.cost(shape, report, join(name, "stream_a"))
        shape_b = (n, self.cfg.stream_b.encoder.input_channels) + tuple(shape[2:])
        self.stream_b.cost(shape_b, report, join(name, "stream_b"))
        self.ssma_latent.cost(latent, report, join(name, "ssma_latent"))
        s = self.cfg.stream_a.skip_channels
        skip1 = (n, s, latent[2] * 2, latent[3] * 2)
        skip2 = (n, s, latent[2] * 4, latent[3] * 4)
        self.ssma_skip1.cost(skip1, report, join(name, "ssma_skip1"))
        self.ssma_skip2.cost(skip2, report, join(name, "ssma_skip2"))
        d = self.decoder.deconv1.out_channels
        self.attention1.cost((n, d) + skip1[2:], report, join(name, "attention1"))
        self.attention2.cost((n, self.decoder.deconv2.out_channels) + skip2[2:], report,
                             join(name, "attention2"))
        return self.decoder.cost(latent, report, join(name, "decoder"))


def _validate(graph: LayerGraph, input_shape: Shape) -> None:
    try:
        graph.cost(input_shape, CostReport())
    except ShapeError as exc:
        raise ConfigError(f"inconsistent network configuration: {exc.detail}") from exc


def build_unimodal(cfg: ModelConfig, seed: Optional[int] = 0) -> UnimodalGraph:
    """Build and finalize a unimodal graph; ``seed=None`` leaves all weights zero."""
    graph = UnimodalGraph(cfg, seed)
    _validate(graph, (1, cfg.encoder.input_channels, 2 * OUTPUT_STRIDE, 2 * OUTPUT_STRIDE))
    graph.finalize()
    logger.debug("Built unimodal graph", modality=cfg.modality, groups=len(graph.channel_groups()))
    return graph


def build_fusion(cfg: FusionConfig, seed: Optional[int] = 0) -> FusionGraph:
    graph = FusionGraph(cfg, seed)
    _validate(graph, (1, cfg.stream_a.encoder.input_channels, 2 * OUTPUT_STRIDE, 2 * OUTPUT_STRIDE))
    graph.finalize()
    logger.debug("Built fusion graph", groups=len(graph.channel_groups()))
    return graph


def transfer_encoder(fusion: FusionGraph, unimodal: UnimodalGraph, stream: str) -> int:
    """Copy ``stream.*`` weights and running stats of ``unimodal`` into ``stream_<a|b>.*``."""
    if stream not in ("a", "b"):
        raise ConfigError(f"stream must be 'a' or 'b', got {stream!r}")
    src_prefix, dst_prefix = "stream.", f"stream_{stream}."
    source = {k[len(src_prefix):]: v for k, v in unimodal.state().items() if k.startswith(src_prefix)}
    params = {k[len(dst_prefix):]: p for k, p in fusion.named_parameters() if k.startswith(dst_prefix)}
    buffers = {k[len(dst_prefix):] for k, _ in fusion.named_buffers() if k.startswith(dst_prefix)}
    targets = set(params) | buffers

    missing = sorted(dst_prefix + k for k in targets - set(source))
    unexpected = sorted(src_prefix + k for k in set(source) - targets)
    if missing or unexpected:
        raise CheckpointError("encoder transfer: parameter names do not line up",
                              missing=missing, unexpected=unexpected)
    for key, value in source.items():
        if key in params:
            if params[key].shape != value.shape:
                raise CheckpointError(f"{dst_prefix}{key}: shape {params[key].shape} vs {value.shape}")
            params[key].data = value.copy()
        else:
            fusion.set_buffer(dst_prefix + key, value)
    logger.info("Encoder transferred", stream=stream, tensors=len(source))
    return len(source)
