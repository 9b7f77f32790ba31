"""
LayerGraph: the unit of assembly, cost accounting and pruning.

A graph is a ``Module`` tree plus three kinds of metadata:

* taps: named intermediate tensors recorded on every forward
  (``latent``, ``skip1``, ``skip2``, and stream/gate taps in fusion graphs);
* shortcuts: residual units and whether their shortcut is an identity or a
  projection;
* channel groups: the output channels of one conv/deconv, the layers that
  read them, and whether the group sits in front of a residual addition
  (``masked``). Pruning and Taylor ranking work on groups only.

``probe(x, layout)`` marks the activation of a group. Outside a
``ProbeSession`` it returns ``x`` untouched; inside one it can force
channels to zero and record the activation for gradient·activation scores.
"""

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from . import ops
from .cost import CostReport, Shape
from .exceptions import PruneError
from .nn import BatchNorm2d, Module, Segment
from .tensor import Tensor


@dataclass(eq=False)
class ChannelGroup:
    """Output channels of ``producer`` and every layer reading them."""

    producer: Module
    masked: bool = False
    readers: List[Module] = field(default_factory=list)
    name: str = ""

    @property
    def width(self) -> int:
        return self.producer.out_channels  # type: ignore[attr-defined]

    @property
    def original_index(self) -> np.ndarray:
        """Channel positions the current channels occupy at full width."""
        out_index = getattr(self.producer, "out_index", None)
        return np.arange(self.width) if out_index is None else out_index

    def __repr__(self) -> str:
        kind = "masked" if self.masked else "structural"
        return f"ChannelGroup({self.name!r}, width={self.width}, {kind})"


def set_layout(reader: Module, *segments: Segment) -> None:
    """Declare how ``reader``'s input channels are composed."""
    reader.in_layout = list(segments)  # type: ignore[attr-defined]
    for seg in segments:
        if isinstance(seg, ChannelGroup) and reader not in seg.readers:
            seg.readers.append(reader)


def link(group: ChannelGroup, reader: Module) -> None:
    """Add a reader whose whole input is ``group``."""
    set_layout(reader, group)


def segment_width(seg: Segment) -> int:
    return seg.width if isinstance(seg, ChannelGroup) else int(seg)


# ======================================================
# Probes
# ======================================================

class ProbeSession:
    """Channel masks and activation recording for probed group outputs."""

    def __init__(self, masks: Optional[Dict[str, np.ndarray]] = None, record: bool = False):
        self.masks = masks or {}
        self.record = record
        self.activations: Dict[str, List[Tuple[Tensor, int, int]]] = {}

    def clear(self) -> None:
        self.activations = {}


_probe_state = threading.local()


@contextmanager
def probing(session: ProbeSession) -> Iterator[ProbeSession]:
    previous = getattr(_probe_state, "session", None)
    _probe_state.session = session
    try:
        yield session
    finally:
        _probe_state.session = previous


def probe(x: Tensor, layout: Sequence[Segment]) -> Tensor:
    session: Optional[ProbeSession] = getattr(_probe_state, "session", None)
    if session is None:
        return x
    offsets = []
    offset = 0
    for seg in layout:
        offsets.append(offset)
        offset += segment_width(seg)
    if offset != x.shape[1]:
        raise PruneError(f"probe: layout covers {offset} channels, tensor has {x.shape[1]}")

    keep = None
    for seg, start in zip(layout, offsets):
        if isinstance(seg, ChannelGroup) and seg.name in session.masks:
            if keep is None:
                keep = np.ones(x.shape[1], dtype=x.dtype)
            keep[start:start + seg.width] = session.masks[seg.name]
    if keep is not None:
        x = ops.channel_mask(x, keep)

    if session.record:
        for seg, start in zip(layout, offsets):
            if isinstance(seg, ChannelGroup):
                session.activations.setdefault(seg.name, []).append((x, start, seg.width))
    return x


# ======================================================
# Graph
# ======================================================

class LayerGraph(Module):
    """Base class of assembled networks."""

    def __init__(self) -> None:
        super().__init__()
        self.taps: Dict[str, Tensor] = {}
        self._groups: List[ChannelGroup] = []

    def finalize(self) -> "LayerGraph":
        """Assign unique dotted names to parameters and channel groups."""
        for name, p in self.named_parameters():
            p.name = name
        groups = []
        for mname, module in self.named_modules():
            for local, group in getattr(module, "groups", {}).items():
                group.name = f"{mname}.{local}" if mname else local
                groups.append(group)
        self._groups = groups
        return self

    def channel_groups(self) -> List[ChannelGroup]:
        return list(self._groups)

    def group(self, name: str) -> ChannelGroup:
        for g in self._groups:
            if g.name == name:
                return g
        raise PruneError(f"no channel group named {name!r}")

    def shortcuts(self) -> List[Tuple[str, str]]:
        """(unit name, "identity" | "projection") for every residual unit."""
        return [(name, m.shortcut_kind) for name, m in self.named_modules()
                if hasattr(m, "shortcut_kind")]

    def record_tap(self, name: str, value: Tensor) -> None:
        self.taps[name] = value

    def clear_taps(self) -> None:
        self.taps = {}

    def state(self) -> Dict[str, np.ndarray]:
        """Parameters and running statistics by dotted name."""
        out = {name: p.data for name, p in self.named_parameters()}
        out.update(dict(self.named_buffers()))
        return out

    def forward_batch(self, batch):
        raise NotImplementedError

    def cost(self, shape: Shape, report: CostReport, name: str = "") -> Shape:
        raise NotImplementedError


def count_params(graph: Module, include_norm: bool = False) -> int:
    """Learnable scalars of conv/deconv layers (and BN affine with ``include_norm``)."""
    total = 0
    for _, module in graph.named_modules():
        if isinstance(module, BatchNorm2d) and not include_norm:
            continue
        total += sum(p.size for p in module._params.values())
    return total


def cost_report(graph: Module, input_shape: Shape) -> CostReport:
    report = CostReport()
    if len(input_shape) == 3:
        input_shape = (1,) + tuple(input_shape)  # type: ignore[assignment]
    graph.cost(input_shape, report)
    return report


def count_flops(graph: Module, input_shape: Shape) -> int:
    return cost_report(graph, input_shape).total_flops
