"""
Training: losses, Adam, the unimodal schedule and the three-stage fusion
schedule, plus split evaluation and gate statistics.

Usage:
    log = train_unimodal(graph, dataset, TrainSchedule.unimodal(iterations=500))
    log.to_csv("train_log.csv")
    cm = evaluate(graph, dataset, "val", flip=True)
"""

import csv
import dataclasses
import os
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import ops
from .checkpoint import load_weights, save_weights
from .config import require
from .data import Batch, SampleSource, batch_iterator
from .exceptions import TrainingError, shape_mismatch
from .graph import LayerGraph
from .logging import StageTimer, get_logger
from .metrics import ConfusionMatrix
from .model import FusionGraph, ModelOutput, UnimodalGraph, build_unimodal, transfer_encoder
from .tensor import Parameter, Tensor, backward, no_grad

logger = get_logger("aseg.training")

ENCODER_PREFIX = "stream"


# ======================================================
# Losses
# ======================================================

@dataclass
class LossWeights:
    lambda1: float = 0.6
    lambda2: float = 0.5

    def __post_init__(self) -> None:
        for name in ("lambda1", "lambda2"):
            value = getattr(self, name)
            require(0.0 <= value <= 1.0, f"loss.{name} must lie in [0, 1], got {value}")


def cross_entropy_loss(logits: Tensor, labels: np.ndarray, ignore_index: int = ops.IGNORE_INDEX) -> Tensor:
    return ops.cross_entropy(logits, labels, ignore_index)


def total_loss(main: Tensor, aux1: Optional[Tensor], aux2: Optional[Tensor],
               w: LossWeights = LossWeights()) -> Tensor:
    """main + λ1·aux1 + λ2·aux2; missing auxiliary terms are dropped."""
    terms = [(1.0, main)]
    if aux1 is not None:
        terms.append((w.lambda1, aux1))
    if aux2 is not None:
        terms.append((w.lambda2, aux2))
    return ops.combine(terms)


def output_losses(output: ModelOutput, labels: np.ndarray,
                  w: LossWeights) -> Tuple[Tensor, Dict[str, float]]:
    main = cross_entropy_loss(output.main, labels)
    aux1 = cross_entropy_loss(output.aux1, labels) if output.aux1 is not None else None
    aux2 = cross_entropy_loss(output.aux2, labels) if output.aux2 is not None else None
    parts = {
        "loss_main": main.item(),
        "loss_aux1": aux1.item() if aux1 is not None else float("nan"),
        "loss_aux2": aux2.item() if aux2 is not None else float("nan"),
    }
    return total_loss(main, aux1, aux2, w), parts


# ======================================================
# Adam
# ======================================================

@dataclass
class AdamConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-10

    def __post_init__(self) -> None:
        require(0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0, "adam betas must lie in [0, 1)")
        require(self.eps > 0, "adam.eps must be positive")


@dataclass
class AdamState:
    cfg: AdamConfig = field(default_factory=AdamConfig)
    step: int = 0
    m: Dict[int, np.ndarray] = field(default_factory=dict)
    v: Dict[int, np.ndarray] = field(default_factory=dict)


def adam_step(params: Sequence[Parameter], grads: Sequence[Optional[np.ndarray]],
              state: AdamState, lr: Union[float, Sequence[float]]) -> Sequence[Parameter]:
    """One bias-corrected Adam update in place; ``lr`` is shared or per parameter."""
    if len(params) != len(grads):
        raise shape_mismatch("adam_step", f"{len(params)} gradients", len(grads))
    lrs = [lr] * len(params) if isinstance(lr, (int, float)) else list(lr)
    if len(lrs) != len(params):
        raise shape_mismatch("adam_step", f"{len(params)} learning rates", len(lrs))
    cfg = state.cfg
    state.step += 1
    t = state.step
    c1 = 1.0 - cfg.beta1 ** t
    c2 = 1.0 - cfg.beta2 ** t
    for p, g, rate in zip(params, grads, lrs):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise shape_mismatch(f"adam_step({p.name})", p.shape, g.shape)
        key = id(p)
        m = state.m.get(key)
        v = state.v.get(key)
        m = (1.0 - cfg.beta1) * g if m is None else cfg.beta1 * m + (1.0 - cfg.beta1) * g
        v = (1.0 - cfg.beta2) * g * g if v is None else cfg.beta2 * v + (1.0 - cfg.beta2) * g * g
        state.m[key], state.v[key] = m, v
        if rate == 0.0:
            continue
        update = rate * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        p.data = (p.data - update).astype(p.data.dtype)
    return params


# ======================================================
# Schedules
# ======================================================

@dataclass
class StageSpec:
    iterations: int
    encoder_lr: float
    decoder_lr: float
    batch_size: int = 4
    name: str = ""

    def __post_init__(self) -> None:
        require(self.iterations >= 0, f"stage iterations must be >= 0, got {self.iterations}")
        require(self.encoder_lr >= 0 and self.decoder_lr >= 0,
                f"learning rates must be nonnegative, got {self.encoder_lr}, {self.decoder_lr}")
        require(self.batch_size >= 1, f"stage batch_size must be >= 1, got {self.batch_size}")

    @property
    def encoder_frozen(self) -> bool:
        return self.encoder_lr == 0.0


@dataclass
class TrainSchedule:
    stages: List[StageSpec]
    log_every: int = 50
    shuffle_seed: int = 0

    def __post_init__(self) -> None:
        require(len(self.stages) >= 1, "a schedule needs at least one stage")
        require(self.log_every >= 1, "schedule.log_every must be >= 1")

    @classmethod
    def unimodal(cls, iterations: int = 2000, lr: float = 1e-3, batch_size: int = 4) -> "TrainSchedule":
        return cls([StageSpec(iterations, lr, lr, batch_size, "unimodal")])

    @classmethod
    def fusion(cls, scale: float = 1.0, batch_size: int = 4) -> "TrainSchedule":
        """Stage 1 trains the unimodal streams, then transfer (2) and decoder-only (3)."""
        return cls([
            StageSpec(int(2000 * scale), 1e-3, 1e-3, batch_size, "unimodal"),
            StageSpec(int(1000 * scale), 1e-4, 1e-3, batch_size, "transfer"),
            StageSpec(int(500 * scale), 0.0, 1e-5, batch_size, "decoder"),
        ])


@dataclass
class LogRow:
    iteration: int
    loss_main: float
    loss_aux1: float
    loss_aux2: float
    lr: float


@dataclass
class TrainingLog:
    rows: List[LogRow] = field(default_factory=list)
    checkpoints: List[str] = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        if not self.rows:
            raise TrainingError("training log is empty")
        return self.rows[-1].loss_main

    def extend(self, other: "TrainingLog") -> None:
        offset = self.rows[-1].iteration + 1 if self.rows else 0
        self.rows.extend(dataclasses.replace(r, iteration=r.iteration + offset) for r in other.rows)
        self.checkpoints.extend(other.checkpoints)

    def to_csv(self, path: str) -> None:
        with open(path, "x", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iteration", "loss_main", "loss_aux1", "loss_aux2", "lr"])
            for r in self.rows:
                writer.writerow([r.iteration, repr(r.loss_main), repr(r.loss_aux1),
                                 repr(r.loss_aux2), repr(r.lr)])


# ======================================================
# Loops
# ======================================================

def _is_encoder(name: str) -> bool:
    return name.startswith(ENCODER_PREFIX)


@contextmanager
def _frozen(params: Sequence[Parameter]) -> Iterator[None]:
    saved = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
        p.grad = None
    try:
        yield
    finally:
        for p, flag in zip(params, saved):
            p.requires_grad = flag


def _batches(source: SampleSource, batch_size: int, seed: int, augment_cfg) -> Iterator[Batch]:
    if not source.indices("train"):
        raise TrainingError("training split is empty")
    epoch = 0
    while True:
        yield from batch_iterator(source, "train", batch_size, seed, augment_cfg, epoch)
        epoch += 1


def run_stage(graph: LayerGraph, source: SampleSource, stage: StageSpec,
              weights: LossWeights = LossWeights(), adam: AdamConfig = AdamConfig(),
              shuffle_seed: int = 0, augment_cfg=None, log_every: int = 50) -> TrainingLog:
    """Train ``graph`` for one stage; encoder parameters are those under ``stream*``."""
    graph.train()
    named = [(n, p) for n, p in graph.named_parameters() if p.trainable]
    encoder = [p for n, p in named if _is_encoder(n)]
    frozen: List[Parameter] = []
    if stage.encoder_frozen:
        for name, child in graph.children():
            if _is_encoder(name):
                child.eval()
        frozen = encoder
    active = [(n, p) for n, p in named if not (stage.encoder_frozen and _is_encoder(n))]
    params = [p for _, p in active]
    lrs = [stage.encoder_lr if _is_encoder(n) else stage.decoder_lr for n, _ in active]

    state = AdamState(adam)
    log = TrainingLog()
    bound = logger.bind(stage=stage.name or "stage")
    with _frozen(frozen):
        batches = _batches(source, stage.batch_size, shuffle_seed, augment_cfg)
        for it in range(stage.iterations):
            batch = next(batches)
            graph.zero_grad()
            output = graph.forward_batch(batch)
            loss, parts = output_losses(output, batch.labels, weights)
            backward(loss, params)
            adam_step(params, [p.grad for p in params], state, lrs)
            log.rows.append(LogRow(it, parts["loss_main"], parts["loss_aux1"], parts["loss_aux2"],
                                   stage.decoder_lr))
            if it % log_every == 0 or it == stage.iterations - 1:
                bound.info("Training step", iteration=it, total=round(loss.item(), 6),
                           lr=stage.decoder_lr, **{k: round(v, 6) for k, v in parts.items()})
    graph.clear_taps()
    graph.zero_grad()
    return log


def _checkpoint(graph: LayerGraph, checkpoint_dir: Optional[str], name: str, log: TrainingLog) -> None:
    if checkpoint_dir is None:
        return
    path = os.path.join(checkpoint_dir, f"{name}.aseg")
    digest = save_weights(graph, path)
    log.checkpoints.append(path)
    logger.info("Checkpoint written", path=path, sha256=digest)


def train_unimodal(graph: UnimodalGraph, source: SampleSource, schedule: TrainSchedule,
                   weights: LossWeights = LossWeights(), adam: AdamConfig = AdamConfig(),
                   augment_cfg=None, checkpoint_dir: Optional[str] = None) -> TrainingLog:
    log = TrainingLog()
    for i, stage in enumerate(schedule.stages):
        with StageTimer(logger, "train-stage", index=i, name=stage.name, iterations=stage.iterations):
            log.extend(run_stage(graph, source, stage, weights, adam, schedule.shuffle_seed + i,
                                 augment_cfg, schedule.log_every))
        _checkpoint(graph, checkpoint_dir, f"unimodal_{graph.cfg.modality}_stage{i}", log)
    return log


UnimodalSource = Union[UnimodalGraph, str, None]


def _resolve_unimodal(source: UnimodalSource, fusion: FusionGraph, stream: str) -> UnimodalGraph:
    if isinstance(source, UnimodalGraph):
        return source
    if source is None or not os.path.isfile(source):
        raise TrainingError(f"fusion training needs the trained unimodal {stream.upper()} model; "
                            f"checkpoint not found: {source}")
    cfg = fusion.cfg.stream_a if stream == "a" else fusion.cfg.stream_b
    graph = build_unimodal(cfg, seed=None)
    load_weights(graph, source)
    return graph


def train_fusion_multistage(fusion: FusionGraph, unimodal_a: UnimodalSource, unimodal_b: UnimodalSource,
                            source: SampleSource, schedule: TrainSchedule,
                            weights: LossWeights = LossWeights(), adam: AdamConfig = AdamConfig(),
                            augment_cfg=None, checkpoint_dir: Optional[str] = None) -> TrainingLog:
    """Stages 2 and 3 of the fusion schedule; stage 1 artifacts are the unimodal models.

    ``schedule`` may list all three stages (the first is then skipped here,
    it belongs to ``train_unimodal``) or only the last two.
    """
    stages = schedule.stages[1:] if len(schedule.stages) == 3 else schedule.stages
    if len(stages) != 2:
        raise TrainingError(f"fusion schedule needs 2 or 3 stages, got {len(schedule.stages)}")
    graph_a = _resolve_unimodal(unimodal_a, fusion, "a")
    graph_b = _resolve_unimodal(unimodal_b, fusion, "b")
    transfer_encoder(fusion, graph_a, "a")
    transfer_encoder(fusion, graph_b, "b")

    log = TrainingLog()
    for i, stage in enumerate(stages, start=2):
        with StageTimer(logger, "fusion-stage", stage_index=i, name=stage.name,
                        iterations=stage.iterations, encoder_frozen=stage.encoder_frozen):
            log.extend(run_stage(fusion, source, stage, weights, adam, schedule.shuffle_seed + i,
                                 augment_cfg, schedule.log_every))
        _checkpoint(fusion, checkpoint_dir, f"fusion_stage{i}", log)
    return log


# ======================================================
# Evaluation
# ======================================================

def _flipped(batch: Batch) -> Batch:
    return dataclasses.replace(batch, a=batch.a[..., ::-1].copy(), b=batch.b[..., ::-1].copy(),
                               labels=batch.labels[..., ::-1].copy())


def predict_proba(graph: LayerGraph, batch: Batch, flip: bool = False) -> np.ndarray:
    """Class probabilities N×C×H×W; with ``flip`` the mean of plain and mirrored passes."""
    graph.eval()
    with no_grad():
        probs = ops.softmax_channels(graph.forward_batch(batch).main).data
        if flip:
            mirrored = ops.softmax_channels(graph.forward_batch(_flipped(batch)).main).data
            probs = 0.5 * (probs + mirrored[..., ::-1])
    return probs


def evaluate(graph: LayerGraph, source: SampleSource, split: str = "val", flip: bool = False,
             batch_size: int = 4) -> ConfusionMatrix:
    cm = ConfusionMatrix(graph.decoder.classifier.out_channels)
    for batch in batch_iterator(source, split, batch_size):
        pred = predict_proba(graph, batch, flip).argmax(axis=1)
        cm.accumulate(pred, batch.labels)
    graph.clear_taps()
    return cm


@dataclass
class GateStats:
    """Mean latent gate over each modality's half, split by corruption."""

    clean: Dict[str, float]
    corrupted: Dict[str, float]
    counts: Dict[str, int]


def gate_statistics(fusion: FusionGraph, source: SampleSource, split: str = "val",
                    batch_size: int = 4) -> GateStats:
    sums = {(m, kind): 0.0 for m in "ab" for kind in ("clean", "corrupted")}
    counts = {key: 0 for key in sums}
    fusion.eval()
    for batch in batch_iterator(source, split, batch_size):
        with no_grad():
            fusion.forward_batch(batch)
        gate = fusion.taps["gate.latent"].data
        c = gate.shape[1] // 2
        for i, corruption in enumerate(batch.corruptions):
            hit = corruption.get("modality") if corruption else None
            for m, half in (("a", gate[i, :c]), ("b", gate[i, c:])):
                key = (m, "corrupted" if hit == m else "clean")
                sums[key] += float(half.mean())
                counts[key] += 1
    fusion.clear_taps()

    def mean(key: Tuple[str, str]) -> float:
        return sums[key] / counts[key] if counts[key] else float("nan")

    stats = GateStats(
        clean={m: mean((m, "clean")) for m in "ab"},
        corrupted={m: mean((m, "corrupted")) for m in "ab"},
        counts={f"{m}.{kind}": n for (m, kind), n in counts.items()},
    )
    logger.info("Gate statistics", clean=stats.clean, corrupted=stats.corrupted, counts=stats.counts)
    return stats
