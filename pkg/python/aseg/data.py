"""
Synthetic multimodal segmentation data.

Each sample renders the same random scene twice: modality A shows every
object by class colour and texture, modality B by a pseudo-depth relief
(depth, x-gradient, y-gradient) that depends on geometry only. A corrupted
sample has exactly one modality damaged by overexposure, noise or a
blackout; labels are never touched.

Usage:
    manifest = generate_synthetic(SyntheticSpec(seed=3), 200, "data/")
    for batch in batch_iterator(manifest, "train", 8, shuffle_seed=0):
        batch.modality("a")    # N×3×H×W float64
"""

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, Iterator, List, Optional, Protocol, Tuple

import numpy as np

from .config import from_dict, require, to_dict, worker_threads
from .exceptions import ConfigError, missing_file
from .logging import get_logger
from .netpbm import load_pgm_labels, load_ppm, save_pgm_labels, save_ppm

logger = get_logger("aseg.data")

IGNORE_LABEL = 255
SHAPE_KINDS = ("rectangle", "disc", "triangle", "bar", "ring")
REGIMES = ("overexposure", "noise", "blackout")
MANIFEST_NAME = "manifest.json"


@dataclass
class SyntheticSpec:
    num_classes: int = 6
    height: int = 64
    width: int = 64
    shapes: List[str] = field(default_factory=lambda: list(SHAPE_KINDS))
    instances: Tuple[int, int] = (2, 5)
    regimes_a: List[str] = field(default_factory=lambda: list(REGIMES))
    regimes_b: List[str] = field(default_factory=lambda: list(REGIMES))
    corruption_probability: float = 0.0
    val_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self) -> None:
        require(self.num_classes >= 2, f"num_classes must be >= 2, got {self.num_classes}")
        require(self.num_classes <= IGNORE_LABEL, "num_classes must stay below the ignore label")
        require(self.height % 16 == 0 and self.width % 16 == 0 and self.height > 0 and self.width > 0,
                f"image size {self.height}×{self.width} must be a positive multiple of 16")
        require(len(self.shapes) > 0 and all(s in SHAPE_KINDS for s in self.shapes),
                f"shapes must be drawn from {list(SHAPE_KINDS)}, got {self.shapes}")
        require(1 <= self.instances[0] <= self.instances[1],
                f"instances must be a (min, max) pair with 1 <= min <= max, got {self.instances}")
        for regime in list(self.regimes_a) + list(self.regimes_b):
            require(regime in REGIMES, f"unknown corruption regime {regime!r}")
        require(0.0 <= self.corruption_probability <= 1.0,
                f"corruption_probability must lie in [0, 1], got {self.corruption_probability}")
        require(0.0 <= self.val_fraction < 1.0, f"val_fraction must lie in [0, 1), got {self.val_fraction}")


@dataclass
class Sample:
    modality_a: np.ndarray
    modality_b: np.ndarray
    label: np.ndarray
    corruption: Optional[Dict[str, Any]] = None

    def modality(self, key: str) -> np.ndarray:
        return self.modality_a if key == "a" else self.modality_b


@dataclass
class Batch:
    a: np.ndarray
    b: np.ndarray
    labels: np.ndarray
    indices: List[int]
    corruptions: List[Optional[Dict[str, Any]]]

    def modality(self, key: str) -> np.ndarray:
        if key not in ("a", "b"):
            raise ConfigError(f"modality must be 'a' or 'b', got {key!r}")
        return self.a if key == "a" else self.b

    def __len__(self) -> int:
        return len(self.indices)


class SampleSource(Protocol):
    def indices(self, split: str) -> List[int]: ...

    def sample(self, index: int) -> Sample: ...


# ======================================================
# Rendering
# ======================================================

def _palette(num_classes: int) -> np.ndarray:
    """Distinct RGB colours per class; class 0 (background) is mid grey."""
    colours = np.zeros((num_classes, 3))
    colours[0] = 0.45
    for k in range(1, num_classes):
        hue = (k - 1) / max(1, num_classes - 1)
        angles = 2 * np.pi * (hue + np.array([0.0, 1 / 3, 2 / 3]))
        colours[k] = 0.5 + 0.4 * np.cos(angles)
    return colours


def _shape_mask(kind: str, rng: np.random.Generator, yy: np.ndarray, xx: np.ndarray,
                h: int, w: int) -> Tuple[np.ndarray, np.ndarray]:
    """Boolean mask and a [0, 1] relief profile for one instance."""
    cy, cx = rng.uniform(0.15, 0.85) * h, rng.uniform(0.15, 0.85) * w
    size = rng.uniform(0.12, 0.25) * min(h, w)
    dy, dx = yy - cy, xx - cx
    if kind == "rectangle":
        hh, hw = size * rng.uniform(0.6, 1.0), size * rng.uniform(0.6, 1.0)
        mask = (np.abs(dy) <= hh) & (np.abs(dx) <= hw)
        profile = 1.0 - 0.3 * (dx / hw)
    elif kind == "disc":
        r = np.hypot(dy, dx)
        mask = r <= size
        profile = np.sqrt(np.clip(1.0 - (r / size) ** 2, 0.0, 1.0))
    elif kind == "triangle":
        # apex up, base at cy + size
        mask = (dy <= size) & (np.abs(dx) <= (dy + size) / 2)
        profile = np.clip((dy + size) / (2 * size), 0.0, 1.0)
    elif kind == "bar":
        thickness = rng.integers(1, 4)
        length = size * 2.0
        if rng.random() < 0.5:
            mask = (np.abs(dy) < thickness / 2 + 0.5) & (np.abs(dx) <= length)
        else:
            mask = (np.abs(dx) < thickness / 2 + 0.5) & (np.abs(dy) <= length)
        profile = np.ones_like(dy)
    else:  # ring
        r = np.hypot(dy, dx)
        mask = (r <= size) & (r >= size * 0.55)
        profile = 1.0 - np.abs(r - size * 0.775) / (size * 0.225)
    return mask, np.clip(profile, 0.0, 1.0)


def _corrupt(image: np.ndarray, regime: str, rng: np.random.Generator) -> Tuple[np.ndarray, List[int]]:
    _, h, w = image.shape
    if regime == "noise":
        region = [0, h, 0, w]
        out = np.clip(image + rng.normal(0.0, 0.35, image.shape), 0.0, 1.0)
        return out, region
    rh, rw = int(rng.integers(h // 2, h + 1)), int(rng.integers(w // 2, w + 1))
    y0, x0 = int(rng.integers(0, h - rh + 1)), int(rng.integers(0, w - rw + 1))
    region = [y0, y0 + rh, x0, x0 + rw]
    out = image.copy()
    patch = out[:, y0:y0 + rh, x0:x0 + rw]
    if regime == "overexposure":
        out[:, y0:y0 + rh, x0:x0 + rw] = np.clip(0.3 * patch + 0.85, 0.0, 1.0)
    else:
        out[:, y0:y0 + rh, x0:x0 + rw] = 0.0
    return out, region


def render_sample(spec: SyntheticSpec, rng: np.random.Generator) -> Sample:
    """Draw one scene; both modalities are exact functions of the same geometry."""
    h, w = spec.height, spec.width
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    label = np.zeros((h, w), dtype=np.int64)
    colours = _palette(spec.num_classes)

    tilt = rng.uniform(-0.2, 0.2, size=2)
    depth = 0.2 + tilt[0] * (yy / h - 0.5) + tilt[1] * (xx / w - 0.5)
    texture_phase = rng.uniform(0, 2 * np.pi)
    rgb = colours[0][:, None, None] + 0.05 * np.sin(xx / 3.0 + texture_phase)[None]

    for _ in range(int(rng.integers(spec.instances[0], spec.instances[1] + 1))):
        k = int(rng.integers(1, spec.num_classes))
        kind = spec.shapes[(k - 1) % len(spec.shapes)]
        mask, profile = _shape_mask(kind, rng, yy, xx, h, w)
        if not mask.any():
            continue
        label[mask] = k
        cycle = (k - 1) // len(spec.shapes)
        base = rng.uniform(0.35, 0.55) + 0.1 * cycle
        depth = np.where(mask, base + 0.35 * profile, depth)
        freq = 0.6 + 0.25 * k
        texture = 0.08 * np.sin(freq * (xx + yy) + rng.uniform(0, 2 * np.pi))
        shade = rng.uniform(-0.05, 0.05)
        rgb = np.where(mask[None], colours[k][:, None, None] + texture[None] + shade, rgb)

    depth = np.clip(depth, 0.0, 1.0)
    gy, gx = np.gradient(depth)
    modality_b = np.stack([depth, np.clip(0.5 + 2.0 * gx, 0, 1), np.clip(0.5 + 2.0 * gy, 0, 1)])
    modality_a = np.clip(rgb, 0.0, 1.0)

    corruption = None
    if rng.random() < spec.corruption_probability:
        choices = [m for m, regs in (("a", spec.regimes_a), ("b", spec.regimes_b)) if regs]
        if choices:
            which = choices[int(rng.integers(len(choices)))]
            regimes = spec.regimes_a if which == "a" else spec.regimes_b
            regime = regimes[int(rng.integers(len(regimes)))]
            if which == "a":
                modality_a, region = _corrupt(modality_a, regime, rng)
            else:
                modality_b, region = _corrupt(modality_b, regime, rng)
            corruption = {"modality": which, "regime": regime, "region": region}
    return Sample(_quantize(modality_a), _quantize(modality_b), label, corruption)


def _quantize(image: np.ndarray) -> np.ndarray:
    """Round to the 8-bit grid so rendered and reloaded samples agree exactly."""
    return np.rint(image * 255.0) / 255.0


def sample_rngs(seed: int, n: int) -> List[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def split_indices(n: int, val_fraction: float) -> Dict[str, List[int]]:
    n_val = int(round(n * val_fraction))
    return {"train": list(range(n - n_val)), "val": list(range(n - n_val, n))}


# ======================================================
# Datasets
# ======================================================

@dataclass
class SampleEntry:
    index: int
    split: str
    a: str
    b: str
    label: str
    corruption: Optional[Dict[str, Any]] = None


@dataclass
class DatasetManifest:
    root: str
    seed: int
    spec: Dict[str, Any]
    samples: List[SampleEntry] = field(default_factory=list)

    def indices(self, split: str) -> List[int]:
        out = [e.index for e in self.samples if e.split == split]
        if not out and split not in ("train", "val"):
            raise ConfigError(f"unknown split {split!r}")
        return out

    def entry(self, index: int) -> SampleEntry:
        if not 0 <= index < len(self.samples):
            raise ConfigError(f"sample index {index} outside 0..{len(self.samples) - 1}")
        return self.samples[index]

    def sample(self, index: int) -> Sample:
        return load_sample(self, index)

    def path(self, relative: str) -> str:
        return os.path.join(self.root, relative)

    def to_json(self) -> str:
        data = to_dict(self)
        data.pop("root")
        return json.dumps(data, indent=2, sort_keys=True)


def load_sample(manifest: DatasetManifest, index: int) -> Sample:
    e = manifest.entry(index)
    return Sample(
        modality_a=load_ppm(manifest.path(e.a)).astype(np.float64) / 255.0,
        modality_b=load_ppm(manifest.path(e.b)).astype(np.float64) / 255.0,
        label=load_pgm_labels(manifest.path(e.label)),
        corruption=e.corruption,
    )


def load_manifest(path: str) -> DatasetManifest:
    """Read a manifest (file or its directory); every referenced file must exist."""
    if os.path.isdir(path):
        path = os.path.join(path, MANIFEST_NAME)
    if not os.path.isfile(path):
        raise missing_file(path, "dataset manifest")
    with open(path, encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})")
    data["root"] = os.path.dirname(os.path.abspath(path))
    manifest = from_dict(DatasetManifest, data, path="manifest")
    for e in manifest.samples:
        for rel in (e.a, e.b, e.label):
            if not os.path.isfile(manifest.path(rel)):
                raise missing_file(manifest.path(rel), "sample file")
    train, val = set(manifest.indices("train")), set(manifest.indices("val"))
    require(not (train & val), f"{path}: train and val splits overlap")
    return manifest


def generate_synthetic(spec: SyntheticSpec, n_samples: int, out_dir: str) -> DatasetManifest:
    """Render ``n_samples`` scenes into ``out_dir`` and write ``manifest.json``."""
    require(n_samples >= 1, f"n_samples must be >= 1, got {n_samples}")
    manifest_path = os.path.join(out_dir, MANIFEST_NAME)
    if os.path.exists(manifest_path):
        raise ConfigError(f"dataset already exists: {manifest_path}")
    splits = split_indices(n_samples, spec.val_fraction)
    split_of = {i: name for name, idx in splits.items() for i in idx}
    rngs = sample_rngs(spec.seed, n_samples)

    def write(index: int) -> SampleEntry:
        sample = render_sample(spec, rngs[index])
        split = split_of[index]
        stem = f"{split}/{index:05d}"
        entry = SampleEntry(index, split, f"{stem}_a.ppm", f"{stem}_b.ppm", f"{stem}_label.pgm",
                            sample.corruption)
        try:
            save_ppm(sample.modality_a, os.path.join(out_dir, entry.a))
            save_ppm(sample.modality_b, os.path.join(out_dir, entry.b))
            save_pgm_labels(sample.label.astype(np.uint8), os.path.join(out_dir, entry.label))
        except OSError as exc:
            raise ConfigError(f"cannot write sample {index} under {out_dir}: {exc}")
        return entry

    with ThreadPoolExecutor(max_workers=worker_threads()) as pool:
        entries = list(pool.map(write, range(n_samples)))

    manifest = DatasetManifest(os.path.abspath(out_dir), spec.seed, to_dict(spec), entries)
    with open(manifest_path, "x", encoding="utf-8") as fh:
        fh.write(manifest.to_json())
    for name, idx in splits.items():
        corrupted = sum(1 for i in idx if entries[i].corruption)
        logger.info("Split written", split=name, samples=len(idx), corrupted=corrupted)
    return manifest


class InMemoryDataset:
    """Samples held in memory, with the same ``indices``/``sample`` protocol as a manifest."""

    def __init__(self, samples: List[Sample], splits: Optional[Dict[str, List[int]]] = None):
        self.samples = samples
        self.splits = splits or {"train": list(range(len(samples))), "val": []}

    @classmethod
    def synthesize(cls, spec: SyntheticSpec, n_samples: int) -> "InMemoryDataset":
        rngs = sample_rngs(spec.seed, n_samples)
        samples = [render_sample(spec, r) for r in rngs]
        return cls(samples, split_indices(n_samples, spec.val_fraction))

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest) -> "InMemoryDataset":
        samples = [load_sample(manifest, i) for i in range(len(manifest.samples))]
        splits = {"train": manifest.indices("train"), "val": manifest.indices("val")}
        return cls(samples, splits)

    def indices(self, split: str) -> List[int]:
        if split not in self.splits:
            raise ConfigError(f"unknown split {split!r}")
        return list(self.splits[split])

    def sample(self, index: int) -> Sample:
        return self.samples[index]


def collate(samples: List[Sample], indices: List[int]) -> Batch:
    return Batch(
        a=np.stack([s.modality_a for s in samples]),
        b=np.stack([s.modality_b for s in samples]),
        labels=np.stack([s.label for s in samples]),
        indices=list(indices),
        corruptions=[s.corruption for s in samples],
    )


def batch_iterator(source: SampleSource, split: str, batch_size: int,
                   shuffle_seed: Optional[int] = None, augment_cfg=None,
                   epoch: int = 0, drop_last: bool = False) -> Iterator[Batch]:
    """Batches of ``split`` in manifest order, or shuffled by (seed, epoch).

    Augmentation draws from a generator keyed by (seed, epoch, sample index),
    so a batch's content does not depend on thread scheduling.
    """
    from .augment import augment

    require(batch_size >= 1, f"batch_size must be >= 1, got {batch_size}")
    order = source.indices(split)
    if shuffle_seed is not None:
        perm = np.random.default_rng([shuffle_seed, epoch]).permutation(len(order))
        order = [order[i] for i in perm]
    aug_seed = 0 if shuffle_seed is None else shuffle_seed

    def load(index: int) -> Sample:
        sample = source.sample(index)
        if augment_cfg is not None:
            sample = augment(sample, augment_cfg, np.random.default_rng([aug_seed, epoch, index]))
        return sample

    with ThreadPoolExecutor(max_workers=worker_threads()) as pool:
        for start in range(0, len(order), batch_size):
            chunk = order[start:start + batch_size]
            if drop_last and len(chunk) < batch_size:
                break
            yield collate(list(pool.map(load, chunk)), chunk)
