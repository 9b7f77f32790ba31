"""
Channel pruning.

Channels are ranked per channel group by the first-order Taylor criterion
|mean(dC/dz · z)| (or brute-force |ΔC|, or filter ℓ1 norms), scores are
ℓ2-normalised per group, and the lowest fraction network-wide is removed.

Groups in front of a residual addition are pruned with a mask: the
convolution loses the filters, and zeros are re-inserted at the removed
positions right before the shortcut is added, so the shortcut path keeps
its full width. The ``standard`` technique leaves those groups alone.

Usage:
    ranking = taylor_rank(graph, batches)
    plan = select_prune_set(ranking, 0.1)
    pruned = apply_prune_with_mask(graph, plan)
"""

import copy
import csv
import itertools
import json
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Literal, Optional, Sequence, Tuple

import numpy as np
from scipy import stats

from . import ops
from .config import require, to_dict
from .data import Batch, SampleSource
from .exceptions import PruneError
from .graph import ChannelGroup, LayerGraph, ProbeSession, count_flops, count_params, probing, segment_width
from .logging import StageTimer, get_logger
from .metrics import miou
from .model import ModelOutput
from .nn import ConvTranspose2d
from .tensor import Tensor, backward, no_grad

logger = get_logger("aseg.pruning")

Technique = Literal["masked", "standard"]
LossFn = Callable[[ModelOutput, Batch], Tensor]


def main_loss(output: ModelOutput, batch: Batch) -> Tensor:
    return ops.cross_entropy(output.main, batch.labels)


# ======================================================
# Ranking
# ======================================================

@dataclass
class Ranking:
    """Per-group channel scores in network order."""

    raw: Dict[str, np.ndarray]
    order: List[str]
    masked: List[str] = field(default_factory=list)
    positions: Dict[str, np.ndarray] = field(default_factory=dict)
    batches: int = 0
    criterion: str = "taylor"

    @property
    def scores(self) -> Dict[str, np.ndarray]:
        """Raw scores with unit ℓ2 norm per group (all-zero groups stay zero)."""
        out = {}
        for name, raw in self.raw.items():
            norm = np.sqrt(np.sum(raw * raw))
            out[name] = raw / norm if norm > 0 else raw.copy()
        return out


def _groups(graph: LayerGraph) -> List[ChannelGroup]:
    groups = graph.channel_groups()
    if not groups:
        raise PruneError("graph has no channel groups; call finalize() first")
    return groups


def _ranking(graph: LayerGraph, raw: Dict[str, np.ndarray], batches: int, criterion: str) -> Ranking:
    groups = _groups(graph)
    return Ranking(raw=raw, order=[g.name for g in groups],
                   masked=[g.name for g in groups if g.masked],
                   positions={g.name: g.original_index.copy() for g in groups if g.masked},
                   batches=batches, criterion=criterion)


def taylor_rank(graph: LayerGraph, batches: Sequence[Batch], loss_fn: Optional[LossFn] = None) -> Ranking:
    """Gradient·activation scores from one backward pass per batch (eval mode)."""
    if not batches:
        raise PruneError("taylor_rank needs at least one batch")
    loss_fn = loss_fn or main_loss
    groups = _groups(graph)
    totals = {g.name: np.zeros(g.width) for g in groups}
    graph.eval()
    for batch in batches:
        session = ProbeSession(record=True)
        graph.zero_grad()
        with probing(session):
            loss = loss_fn(graph.forward_batch(batch), batch)
        backward(loss)
        for g in groups:
            score = np.zeros(g.width)
            for act, start, width in session.activations.get(g.name, []):
                if act.grad is None:
                    continue
                contrib = (act.grad * act.data)[:, start:start + width]
                score += contrib.mean(axis=(0, 2, 3))
            totals[g.name] += np.abs(score)
        session.clear()
    graph.zero_grad()
    graph.clear_taps()
    raw = {name: t / len(batches) for name, t in totals.items()}
    logger.debug("Taylor ranking computed", groups=len(raw), batches=len(batches))
    return _ranking(graph, raw, len(batches), "taylor")


def oracle_rank(graph: LayerGraph, batches: Sequence[Batch], loss_fn: Optional[LossFn] = None) -> Ranking:
    """|C(z) - C(z with channel k zeroed)| for every channel, one forward each."""
    if not batches:
        raise PruneError("oracle_rank needs at least one batch")
    loss_fn = loss_fn or main_loss
    groups = _groups(graph)
    graph.eval()
    raw = {g.name: np.zeros(g.width) for g in groups}
    with no_grad():
        for batch in batches:
            base = loss_fn(graph.forward_batch(batch), batch).item()
            for g in groups:
                for k in range(g.width):
                    mask = np.ones(g.width)
                    mask[k] = 0.0
                    with probing(ProbeSession(masks={g.name: mask})):
                        value = loss_fn(graph.forward_batch(batch), batch).item()
                    raw[g.name][k] += abs(base - value)
    graph.clear_taps()
    return _ranking(graph, {k: v / len(batches) for k, v in raw.items()}, len(batches), "oracle")


def l1_rank(graph: LayerGraph) -> Ranking:
    """Filter ℓ1 norms of each group's producer, the data-free baseline."""
    raw = {}
    for g in _groups(graph):
        w = g.producer.weight.data  # type: ignore[attr-defined]
        axes = (0, 2, 3) if isinstance(g.producer, ConvTranspose2d) else (1, 2, 3)
        raw[g.name] = np.abs(w).sum(axis=axes)
    return _ranking(graph, raw, 0, "l1")


def rank_agreement(first: Ranking, second: Ranking) -> float:
    """Spearman correlation of the normalised scores over every shared channel."""
    if first.order != second.order:
        raise PruneError("rankings cover different channel groups")
    a, b = first.scores, second.scores
    for name in first.order:
        if a[name].shape != b[name].shape:
            raise PruneError(f"rankings disagree on the width of {name!r}")
    x = np.concatenate([a[n] for n in first.order])
    y = np.concatenate([b[n] for n in first.order])
    if x.size < 2 or np.all(x == x[0]) or np.all(y == y[0]):
        raise PruneError("rank agreement needs at least two distinct scores per ranking")
    rho = stats.spearmanr(x, y)[0]
    logger.info("Rank agreement", first=first.criterion, second=second.criterion, spearman=round(float(rho), 4))
    return float(rho)


# ======================================================
# Plans
# ======================================================

@dataclass
class PrunePlan:
    """Kept channel positions per group, plus zero-mask positions for masked groups.

    ``kept`` indexes the group's current channels. ``masks`` holds, for
    masked groups, the full-width positions that become zeros.
    """

    kept: Dict[str, List[int]] = field(default_factory=dict)
    widths: Dict[str, int] = field(default_factory=dict)
    masks: Dict[str, List[int]] = field(default_factory=dict)
    floored: List[str] = field(default_factory=list)
    technique: str = "masked"

    @property
    def is_empty(self) -> bool:
        return all(len(self.kept[n]) == self.widths[n] for n in self.kept)

    @property
    def pruned_channels(self) -> int:
        return sum(self.widths[n] - len(k) for n, k in self.kept.items())

    def to_json(self) -> str:
        return json.dumps(to_dict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "PrunePlan":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise PruneError(f"prune plan is not valid JSON: {exc}")
        unknown = set(data) - {"kept", "widths", "masks", "floored", "technique"}
        if unknown:
            raise PruneError(f"prune plan has unknown keys: {sorted(unknown)}")
        return cls(
            kept={k: [int(i) for i in v] for k, v in data.get("kept", {}).items()},
            widths={k: int(v) for k, v in data.get("widths", {}).items()},
            masks={k: [int(i) for i in v] for k, v in data.get("masks", {}).items()},
            floored=list(data.get("floored", [])),
            technique=data.get("technique", "masked"),
        )


def select_prune_set(ranking: Ranking, fraction: float, technique: Technique = "masked",
                     scope: Optional[Sequence[str]] = None) -> PrunePlan:
    """Drop the lowest-scoring ``fraction`` of candidate channels network-wide.

    Ties break by (group order, channel index). A group that would lose every
    channel keeps its best one and is listed in ``floored``. ``scope``
    restricts candidates to groups whose names start with one of the prefixes.
    """
    if not 0.0 <= fraction < 1.0:
        raise PruneError(f"prune fraction must lie in [0, 1), got {fraction}")
    if technique not in ("masked", "standard"):
        raise PruneError(f"unknown pruning technique {technique!r}")
    scores = ranking.scores
    candidates = [n for n in ranking.order
                  if not (technique == "standard" and n in ranking.masked)
                  and (scope is None or any(n.startswith(p) for p in scope))]
    entries = [(float(scores[n][k]), li, k, n)
               for li, n in enumerate(ranking.order) if n in candidates
               for k in range(len(scores[n]))]
    entries.sort(key=lambda e: (e[0], e[1], e[2]))
    count = int(np.floor(fraction * len(entries)))

    drop: Dict[str, set] = {}
    for _, _, k, n in entries[:count]:
        drop.setdefault(n, set()).add(k)

    plan = PrunePlan(technique=technique)
    for n in ranking.order:
        if n not in drop:
            continue
        width = len(scores[n])
        removed = drop[n]
        if len(removed) == width:
            best = int(np.argmax(scores[n]))
            removed.discard(best)
            plan.floored.append(n)
        plan.widths[n] = width
        plan.kept[n] = [k for k in range(width) if k not in removed]
        if n in ranking.positions:
            plan.masks[n] = sorted(int(ranking.positions[n][k]) for k in removed)
    if plan.floored:
        logger.warning("Groups floored at one channel", groups=plan.floored)
    return plan


def _validate(graph: LayerGraph, plan: PrunePlan) -> Dict[str, ChannelGroup]:
    groups = {g.name: g for g in graph.channel_groups()}
    for name, kept in plan.kept.items():
        g = groups.get(name)
        if g is None:
            raise PruneError(f"plan references unknown channel group {name!r}")
        if plan.widths.get(name, g.width) != g.width:
            raise PruneError(f"plan for {name!r} expects width {plan.widths[name]}, group has {g.width}")
        if not kept:
            raise PruneError(f"plan keeps no channels of {name!r}")
        if kept != sorted(set(kept)) or kept[0] < 0 or kept[-1] >= g.width:
            raise PruneError(f"plan for {name!r} must list sorted unique indices in 0..{g.width - 1}")
        if plan.technique == "standard" and g.masked and len(kept) < g.width:
            raise PruneError(f"standard pruning cannot remove channels of residual-final group {name!r}")
    return groups


def _keep_masks(graph: LayerGraph, plan: PrunePlan) -> Dict[str, np.ndarray]:
    masks = {}
    for name, g in _validate(graph, plan).items():
        if name in plan.kept and len(plan.kept[name]) < g.width:
            keep = np.zeros(g.width)
            keep[plan.kept[name]] = 1.0
            masks[name] = keep
    return masks


@contextmanager
def zero_forced(graph: LayerGraph, plan: PrunePlan) -> Iterator[ProbeSession]:
    """Run ``graph`` with the plan's pruned channels forced to zero."""
    with probing(ProbeSession(masks=_keep_masks(graph, plan))) as session:
        yield session


def _reader_index(reader, kept: Dict[str, np.ndarray]) -> Optional[np.ndarray]:
    parts = []
    offset = 0
    touched = False
    for seg in reader.in_layout:
        width = segment_width(seg)
        if isinstance(seg, ChannelGroup) and seg.name in kept:
            parts.append(offset + kept[seg.name])
            touched = True
        else:
            parts.append(offset + np.arange(width))
        offset += width
    return np.concatenate(parts) if touched else None


def apply_prune_with_mask(graph: LayerGraph, plan: PrunePlan) -> LayerGraph:
    """A pruned copy of ``graph``; the original is left untouched."""
    graph.clear_taps()
    pruned = copy.deepcopy(graph)
    groups = _validate(pruned, plan)
    kept = {n: np.asarray(k, dtype=np.int64) for n, k in plan.kept.items()
            if len(k) < groups[n].width}

    readers = {}
    for name in kept:
        for reader in groups[name].readers:
            readers[id(reader)] = reader
    reader_index = {key: _reader_index(r, kept) for key, r in readers.items()}

    for name, index in kept.items():
        g = groups[name]
        if g.masked and g.producer.out_index is None:  # type: ignore[attr-defined]
            g.producer.out_index = np.arange(g.width)  # type: ignore[attr-defined]
        g.producer.select_out(index)  # type: ignore[attr-defined]
    for key, reader in readers.items():
        if reader_index[key] is not None:
            reader.select_in(reader_index[key])
    pruned.finalize()
    logger.info("Plan applied", technique=plan.technique, channels=plan.pruned_channels,
                groups=len(kept), params=count_params(pruned))
    return pruned


# ======================================================
# Prune / fine-tune loop
# ======================================================

@dataclass
class PruneStage:
    fraction: float
    scope: Optional[List[str]] = None


@dataclass
class PruneConfig:
    stages: List[PruneStage] = field(default_factory=lambda: [PruneStage(0.05), PruneStage(0.1)])
    technique: Technique = "masked"
    criterion: Literal["taylor", "oracle", "l1"] = "taylor"
    rank_batches: int = 2
    batch_size: int = 4
    finetune_iterations: int = 100
    finetune_lr: float = 1e-4

    def __post_init__(self) -> None:
        for s in self.stages:
            require(0.0 <= s.fraction < 1.0, f"prune fraction must lie in [0, 1), got {s.fraction}")
        require(self.rank_batches >= 1, "prune.rank_batches must be >= 1")
        require(self.finetune_iterations >= 0, "prune.finetune_iterations must be >= 0")


@dataclass
class PruneRow:
    technique: str
    miou: float
    params: int
    flops: int
    reduction: float


@dataclass
class PruneReport:
    rows: List[PruneRow] = field(default_factory=list)
    plans: List[PrunePlan] = field(default_factory=list)

    def to_csv(self, path: str) -> None:
        with open(path, "x", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["technique", "mIoU", "params", "FLOPs", "reduction%"])
            for r in self.rows:
                writer.writerow([r.technique, f"{r.miou:.6f}", r.params, r.flops, f"{r.reduction:.4f}"])


def rank(graph: LayerGraph, batches: Sequence[Batch], criterion: str) -> Ranking:
    if criterion == "taylor":
        return taylor_rank(graph, batches)
    if criterion == "oracle":
        return oracle_rank(graph, batches)
    if criterion == "l1":
        return l1_rank(graph)
    raise PruneError(f"unknown ranking criterion {criterion!r}")


def prune_finetune_loop(graph: LayerGraph, source: SampleSource, cfg: PruneConfig,
                        input_shape: Tuple[int, int, int], seed: int = 0
                        ) -> Tuple[List[LayerGraph], PruneReport]:
    """Rank, prune and fine-tune once per stage; the first report row is the input graph."""
    from .data import batch_iterator
    from .training import StageSpec, evaluate, run_stage

    base_params = count_params(graph)
    report = PruneReport()

    def row(g: LayerGraph, label: str) -> PruneRow:
        params = count_params(g)
        return PruneRow(label, miou(evaluate(g, source, "val")), params, count_flops(g, input_shape),
                        100.0 * (1.0 - params / base_params))

    report.rows.append(row(graph, "unpruned"))
    graphs = [graph]
    current = graph
    for i, stage in enumerate(cfg.stages):
        with StageTimer(logger, "prune-stage", index=i, fraction=stage.fraction, technique=cfg.technique):
            batches = list(itertools.islice(batch_iterator(source, "train", cfg.batch_size, seed + i),
                                            cfg.rank_batches))
            ranking = rank(current, batches, cfg.criterion)
            plan = select_prune_set(ranking, stage.fraction, cfg.technique, stage.scope)
            current = apply_prune_with_mask(current, plan)
            if cfg.finetune_iterations and not plan.is_empty:
                run_stage(current, source, StageSpec(cfg.finetune_iterations, cfg.finetune_lr,
                                                     cfg.finetune_lr, cfg.batch_size, f"finetune{i}"),
                          shuffle_seed=seed + i)
            report.rows.append(row(current, cfg.technique))
            report.plans.append(plan)
            graphs.append(current)
        last = report.rows[-1]
        logger.info("Prune stage done", index=i, params=last.params, flops=last.flops,
                    miou=round(last.miou, 4), reduction=round(last.reduction, 2))
    return graphs, report
