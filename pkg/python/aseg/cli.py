"""
Aseg CLI - reproducible experiment commands.
=============================================
Every command reads a JSON run config, writes its resolved copy and a
JSON-lines ``run.log`` into the run directory, and puts all outputs there.

Usage (from terminal):
    python -m aseg gen-data --config run.json --out runs/data
    python -m aseg train --config run.json --override train.mode=fusion
    python -m aseg eval --config run.json --seed 3
    python -m aseg prune --config run.json
    python -m aseg inspect --config run.json --override inspect.target=aspp
    python -m aseg rf-map --config run.json
"""

import argparse
import json
import os
import sys
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np

from .augment import AugmentConfig
from .blocks import ASPP, EASPP, EasppConfig
from .checkpoint import load_weights, save_weights
from .config import apply_override, from_dict, require, to_dict
from .cost import CostReport
from .data import DatasetManifest, SyntheticSpec, batch_iterator, generate_synthetic, load_manifest
from .exceptions import EXIT_OK, EXIT_RUNTIME, AsegError, ConfigError, missing_file
from .graph import LayerGraph, count_params, cost_report
from .logging import StageTimer, configure_logging, get_logger
from .metrics import ConfusionMatrix, format_report, metrics_report, miou, trimap_miou
from .model import FusionConfig, ModelConfig, build_fusion, build_unimodal
from .netpbm import load_pgm_labels, save_pgm_labels
from .pruning import PruneConfig, PrunePlan, apply_prune_with_mask, prune_finetune_loop
from .receptive import empirical_receptive_field, receptive_field_table, save_heatmap
from .training import (AdamConfig, LossWeights, TrainSchedule, gate_statistics,
                       predict_proba, train_fusion_multistage, train_unimodal)

logger = get_logger("aseg.cli")

RESOLVED_CONFIG = "resolved_config.json"
RUN_LOG = "run.log"

GraphMode = Literal["unimodal", "fusion"]


# ======================================================
# Run config
# ======================================================

@dataclass
class DataSection:
    manifest: Optional[str] = None
    n_samples: int = 64
    spec: SyntheticSpec = field(default_factory=SyntheticSpec)


@dataclass
class TrainSection:
    mode: GraphMode = "unimodal"
    loss: LossWeights = field(default_factory=LossWeights)
    adam: AdamConfig = field(default_factory=AdamConfig)
    unimodal_a: Optional[str] = None
    unimodal_b: Optional[str] = None


@dataclass
class EvalSection:
    mode: GraphMode = "unimodal"
    checkpoint: Optional[str] = None
    plans: List[str] = field(default_factory=list)
    predictions: Optional[str] = None
    save_predictions: bool = False
    split: str = "val"
    flip: bool = False
    absent_as_one: bool = False
    trimap_bands: List[int] = field(default_factory=list)
    gate_statistics: bool = False


@dataclass
class PruneSection:
    mode: GraphMode = "unimodal"
    checkpoint: Optional[str] = None
    loop: PruneConfig = field(default_factory=PruneConfig)


@dataclass
class InspectSection:
    target: Literal["unimodal", "fusion", "aspp", "easpp"] = "unimodal"
    input_size: Tuple[int, int] = (384, 768)
    head_in_channels: int = 2048


@dataclass
class RfMapSection:
    checkpoint: Optional[str] = None
    tap: Literal["latent", "skip1", "skip2"] = "latent"
    split: str = "val"
    sample: int = 0
    target: Optional[Tuple[int, int]] = None
    window: int = 8
    stride: int = 4


@dataclass
class LoggingSection:
    level: str = "info"
    format: Literal["console", "json"] = "console"
    colorize: bool = True


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    model: ModelConfig = field(default_factory=ModelConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    schedule: TrainSchedule = field(default_factory=TrainSchedule.unimodal)
    augment: Optional[AugmentConfig] = None
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)
    prune: PruneSection = field(default_factory=PruneSection)
    inspect: InspectSection = field(default_factory=InspectSection)
    rf_map: RfMapSection = field(default_factory=RfMapSection)
    logging: LoggingSection = field(default_factory=LoggingSection)
    seed: int = 0
    out: str = "runs/default"


def load_run_config(path: str, overrides: Sequence[str] = (), seed: Optional[int] = None,
                    out: Optional[str] = None) -> RunConfig:
    """File, then ``--override`` expressions, then ``--seed``/``--out``."""
    if not os.path.isfile(path):
        raise missing_file(path, "config file")
    with open(path, encoding="utf-8") as fh:
        try:
            data: Dict[str, Any] = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})")
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    for expr in overrides:
        apply_override(data, expr)
    if seed is not None:
        data["seed"] = seed
    if out is not None:
        data["out"] = out
    return from_dict(RunConfig, data)


def _prepare_run_dir(cfg: RunConfig, command: str, argv: Sequence[str]) -> str:
    out = cfg.out
    os.makedirs(out, exist_ok=True)
    resolved = os.path.join(out, RESOLVED_CONFIG)
    if os.path.exists(resolved):
        raise ConfigError(f"run directory already used: {out} (outputs are write-once)")
    with open(resolved, "x", encoding="utf-8") as fh:
        json.dump({"command": command, "argv": list(argv), "config": to_dict(cfg)}, fh,
                  indent=2, sort_keys=True)
    return out


def _out(cfg: RunConfig, name: str) -> str:
    return os.path.join(cfg.out, name)


def _manifest(cfg: RunConfig) -> DatasetManifest:
    if cfg.data.manifest is None:
        raise ConfigError("data.manifest is required for this command")
    return load_manifest(cfg.data.manifest)


def _build(cfg: RunConfig, mode: str, checkpoint: Optional[str] = None,
           plans: Sequence[str] = ()) -> LayerGraph:
    graph: LayerGraph
    seed = None if checkpoint else cfg.seed
    graph = build_fusion(cfg.fusion, seed) if mode == "fusion" else build_unimodal(cfg.model, seed)
    for path in plans:
        if not os.path.isfile(path):
            raise missing_file(path, "prune plan")
        with open(path, encoding="utf-8") as fh:
            graph = apply_prune_with_mask(graph, PrunePlan.from_json(fh.read()))
    if checkpoint:
        load_weights(graph, checkpoint)
    return graph


# ======================================================
# Commands
# ======================================================

def cmd_gen_data(cfg: RunConfig) -> int:
    spec = cfg.data.spec
    manifest = generate_synthetic(spec, cfg.data.n_samples, cfg.out)
    print(f"wrote {len(manifest.samples)} samples to {os.path.join(cfg.out, 'manifest.json')}")
    return EXIT_OK


def cmd_train(cfg: RunConfig) -> int:
    manifest = _manifest(cfg)
    t = cfg.train
    ckpt_dir = _out(cfg, "checkpoints")
    os.makedirs(ckpt_dir, exist_ok=True)
    if t.mode == "fusion":
        fusion = build_fusion(cfg.fusion, cfg.seed)
        log = train_fusion_multistage(fusion, t.unimodal_a, t.unimodal_b, manifest, cfg.schedule,
                                      t.loss, t.adam, cfg.augment, ckpt_dir)
        graph: LayerGraph = fusion
    else:
        graph = build_unimodal(cfg.model, cfg.seed)
        log = train_unimodal(graph, manifest, cfg.schedule, t.loss, t.adam, cfg.augment, ckpt_dir)
    log.to_csv(_out(cfg, "train_log.csv"))
    digest = save_weights(graph, _out(cfg, "final.aseg"))
    print(f"final checkpoint {_out(cfg, 'final.aseg')} sha256={digest}")
    return EXIT_OK


def _prediction_path(root: str, index: int) -> str:
    return os.path.join(root, f"{index:05d}.pgm")


def cmd_eval(cfg: RunConfig) -> int:
    e = cfg.eval
    manifest = _manifest(cfg)
    indices = manifest.indices(e.split)
    num_classes = (cfg.fusion.stream_a if e.mode == "fusion" else cfg.model).num_classes
    cm = ConfusionMatrix(num_classes)
    preds: Dict[int, np.ndarray] = {}

    if e.predictions is not None:
        for index in indices:
            path = _prediction_path(e.predictions, index)
            if not os.path.isfile(path):
                raise missing_file(path, "prediction")
            preds[index] = load_pgm_labels(path)
    else:
        graph = _build(cfg, e.mode, e.checkpoint, e.plans)
        for batch in batch_iterator(manifest, e.split, 4):
            for index, pred in zip(batch.indices, predict_proba(graph, batch, e.flip).argmax(axis=1)):
                preds[index] = pred
        if e.gate_statistics:
            if e.mode != "fusion":
                raise ConfigError("eval.gate_statistics needs eval.mode = fusion")
            stats = gate_statistics(graph, manifest, e.split)  # type: ignore[arg-type]
            with open(_out(cfg, "gate_statistics.json"), "x", encoding="utf-8") as fh:
                json.dump(to_dict(stats), fh, indent=2, sort_keys=True)

    if e.save_predictions:
        pred_dir = _out(cfg, "predictions")
        os.makedirs(pred_dir, exist_ok=True)
        for index, pred in preds.items():
            save_pgm_labels(pred.astype(np.uint8), _prediction_path(pred_dir, index))

    truths = {index: manifest.sample(index).label for index in indices}
    for index in indices:
        cm.accumulate(preds[index], truths[index])
    report = metrics_report(cm)
    if e.absent_as_one:
        report.miou = miou(cm, absent_as_one=True)
    report.to_csv(_out(cfg, "metrics.csv"))
    print(format_report(report))

    if e.trimap_bands:
        with open(_out(cfg, "trimap.csv"), "x", encoding="utf-8") as fh:
            fh.write("band,mIoU\n")
            pred_all = np.stack([preds[i] for i in indices])
            truth_all = np.stack([truths[i] for i in indices])
            for band, value in trimap_miou(pred_all, truth_all, e.trimap_bands, num_classes):
                fh.write(f"{band},{value!r}\n")
    return EXIT_OK


def cmd_prune(cfg: RunConfig) -> int:
    p = cfg.prune
    manifest = _manifest(cfg)
    graph = _build(cfg, p.mode, p.checkpoint)
    h, w = manifest.sample(manifest.indices("train")[0]).label.shape
    channels = (cfg.fusion.stream_a if p.mode == "fusion" else cfg.model).encoder.input_channels
    graphs, report = prune_finetune_loop(graph, manifest, p.loop, (channels, h, w), cfg.seed)
    for i, plan in enumerate(report.plans):
        with open(_out(cfg, f"plan_stage{i}.json"), "x", encoding="utf-8") as fh:
            fh.write(plan.to_json())
    save_weights(graphs[-1], _out(cfg, "pruned.aseg"))
    report.to_csv(_out(cfg, "prune_report.csv"))
    for row in report.rows:
        print(f"{row.technique:<10} mIoU={row.miou:.4f} params={row.params:,} "
              f"flops={row.flops:,} reduction={row.reduction:.2f}%")
    return EXIT_OK


def cmd_inspect(cfg: RunConfig) -> int:
    spec = cfg.inspect
    h, w = spec.input_size
    module: Any
    if spec.target in ("aspp", "easpp"):
        head_cfg = EasppConfig(in_channels=spec.head_in_channels,
                               branch_channels=cfg.model.easpp.branch_channels,
                               bottleneck_channels=cfg.model.easpp.bottleneck_channels,
                               dilations=list(cfg.model.easpp.dilations), dropout=cfg.model.easpp.dropout)
        module = ASPP(head_cfg) if spec.target == "aspp" else EASPP(head_cfg)
        shape = (1, spec.head_in_channels, h, w)
    elif spec.target == "fusion":
        module = build_fusion(cfg.fusion, seed=None)
        shape = (1, cfg.fusion.stream_a.encoder.input_channels, h, w)
    else:
        module = build_unimodal(cfg.model, seed=None)
        shape = (1, cfg.model.encoder.input_channels, h, w)

    report: CostReport = cost_report(module, shape)
    report.to_csv(_out(cfg, "cost.csv"))
    params = count_params(module)
    rows = receptive_field_table(module)
    with open(_out(cfg, "receptive_fields.csv"), "x", encoding="utf-8") as fh:
        fh.write("name,kernel,rate,field,cascade\n")
        for r in rows:
            fh.write(f"{r.name},{r.kernel},{r.rate},{r.field},{'' if r.cascade is None else r.cascade}\n")
    print(f"target: {spec.target}  input: {shape}")
    print(f"params: {params:,}")
    print(f"flops:  {report.total_flops:,} ({report.total_flops / 1e9:.2f}B)")
    print(f"atrous layers: {sum(1 for r in rows if r.rate > 1)}")
    return EXIT_OK


def cmd_rf_map(cfg: RunConfig) -> int:
    r = cfg.rf_map
    manifest = _manifest(cfg)
    graph = _build(cfg, "unimodal", r.checkpoint)
    graph.eval()
    indices = manifest.indices(r.split)
    require(0 <= r.sample < len(indices), f"rf_map.sample {r.sample} outside the {r.split} split")
    sample = manifest.sample(indices[r.sample])
    image = sample.modality(cfg.model.modality).astype(np.dtype(cfg.model.dtype))

    def features(x):
        return getattr(graph.stream(x), r.tap)  # type: ignore[attr-defined]

    target = r.target
    if target is None:
        stride = {"latent": 16, "skip1": 8, "skip2": 4}[r.tap]
        target = (image.shape[1] // stride // 2, image.shape[2] // stride // 2)
    heatmap = empirical_receptive_field(features, image, target, r.window, r.stride)
    lo, hi = save_heatmap(heatmap, _out(cfg, "rf_map.pgm"))
    print(f"heatmap {heatmap.shape} target={target} range=[{lo:.6g}, {hi:.6g}]")
    return EXIT_OK


COMMANDS: Dict[str, Callable[[RunConfig], int]] = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "prune": cmd_prune,
    "inspect": cmd_inspect,
    "rf-map": cmd_rf_map,
}


# ======================================================
# Entry point
# ======================================================

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="aseg",
        description="Multimodal segmentation experiments on a numpy autodiff core",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  aseg gen-data --config run.json --out runs/data      Render a synthetic dataset
  aseg train --config run.json --seed 1                Train the configured model
  aseg inspect --config run.json --override inspect.target=aspp
        """,
    )
    subparsers = parser.add_subparsers(dest="command", help="Available commands")
    helps = {
        "gen-data": "Render a synthetic multimodal dataset",
        "train": "Train a unimodal or fusion model",
        "eval": "Evaluate a checkpoint or stored predictions",
        "prune": "Rank, prune and fine-tune a trained model",
        "inspect": "Per-layer parameter/FLOP counts and receptive fields",
        "rf-map": "Empirical receptive-field heatmap",
    }
    for name, text in helps.items():
        sub = subparsers.add_parser(name, help=text)
        sub.add_argument("--config", "-c", required=True, help="JSON run config")
        sub.add_argument("--seed", type=int, default=None, help="Override the run seed")
        sub.add_argument("--out", "-o", default=None, help="Run directory (overrides config 'out')")
        sub.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                         help="Set a dotted config key; repeatable")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main CLI entry point; returns the process exit code."""
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help()
        return EXIT_OK

    try:
        cfg = load_run_config(args.config, args.override, args.seed, args.out)
        _prepare_run_dir(cfg, args.command, argv)
        configure_logging(cfg.logging.level, cfg.logging.format, _out(cfg, RUN_LOG),
                          cfg.logging.colorize)
        with StageTimer(logger, args.command, out=cfg.out, seed=cfg.seed):
            return COMMANDS[args.command](cfg)
    except AsegError as exc:
        print(f"ERROR: {type(exc).__name__}: {exc.detail}", file=sys.stderr)
        return exc.exit_code
    except Exception as exc:  # noqa: BLE001
        print(f"ERROR: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
