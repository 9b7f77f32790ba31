"""
Training-time augmentation.

Geometric transforms (rotation, skew, scale, crop, flip) are composed into
one affine map per sample and applied to both modalities (bilinear) and to
the label (nearest neighbour, out-of-image pixels become the ignore label).
Photometric transforms (brightness, contrast, vignetting) touch modality A
only.
"""

from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np
from scipy import ndimage

from .config import require
from .data import IGNORE_LABEL, Sample

VIGNETTE_REFERENCE_WIDTH = 768.0

Range = Tuple[float, float]


@dataclass
class AugmentConfig:
    rotation: Range = (-13.0, 13.0)
    skew: Range = (0.05, 0.10)
    scale: Range = (0.5, 2.0)
    vignette: Optional[Range] = (210.0, 300.0)
    crop: Range = (0.8, 0.9)
    brightness: Range = (-40.0, 40.0)
    contrast: Range = (0.5, 1.5)
    flip_probability: float = 0.5
    apply_probability: float = 0.5

    def __post_init__(self) -> None:
        for name in ("rotation", "skew", "scale", "crop", "brightness", "contrast"):
            lo, hi = getattr(self, name)
            require(lo <= hi, f"augment.{name} must be (low, high) with low <= high")
        require(self.scale[0] > 0 and self.crop[0] > 0, "augment scale and crop must be positive")
        require(self.crop[1] <= 1.0, "augment.crop keeps at most the whole image")
        require(0.0 <= self.flip_probability <= 1.0, "augment.flip_probability must lie in [0, 1]")
        require(0.0 <= self.apply_probability <= 1.0, "augment.apply_probability must lie in [0, 1]")

    @classmethod
    def identity(cls) -> "AugmentConfig":
        return cls(rotation=(0.0, 0.0), skew=(0.0, 0.0), scale=(1.0, 1.0), vignette=None,
                   crop=(1.0, 1.0), brightness=(0.0, 0.0), contrast=(1.0, 1.0),
                   flip_probability=0.0, apply_probability=1.0)


def sample_params(cfg: AugmentConfig, rng: np.random.Generator) -> Dict[str, float]:
    """Draw one value per transform; skipped transforms get their neutral value."""
    neutral = {"rotation": 0.0, "skew": 0.0, "scale": 1.0, "crop": 1.0,
               "brightness": 0.0, "contrast": 1.0}
    params: Dict[str, float] = {}
    for name, default in neutral.items():
        lo, hi = getattr(cfg, name)
        use = rng.random() < cfg.apply_probability
        params[name] = float(rng.uniform(lo, hi)) if use else default
    use = cfg.vignette is not None and rng.random() < cfg.apply_probability
    params["vignette"] = float(rng.uniform(*cfg.vignette)) if use else 0.0  # type: ignore[misc]
    params["crop_y"] = float(rng.uniform(-0.5, 0.5))
    params["crop_x"] = float(rng.uniform(-0.5, 0.5))
    params["flip"] = float(rng.random() < cfg.flip_probability)
    return params


def affine_for(params: Dict[str, float], h: int, w: int) -> Tuple[np.ndarray, np.ndarray]:
    """Matrix and offset mapping output (y, x) to input coordinates."""
    theta = np.deg2rad(params["rotation"])
    rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    shear = np.array([[1.0, 0.0], [params["skew"], 1.0]])
    zoom = np.eye(2) * (params["crop"] / params["scale"])
    matrix = rot @ shear @ zoom
    center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    slack = (1.0 - params["crop"]) * np.array([h, w])
    shift = slack * np.array([params["crop_y"], params["crop_x"]])
    offset = center + shift - matrix @ center
    return matrix, offset


def hflip(sample: Sample) -> Sample:
    return Sample(sample.modality_a[..., ::-1].copy(), sample.modality_b[..., ::-1].copy(),
                  sample.label[..., ::-1].copy(), sample.corruption)


def _warp_image(image: np.ndarray, matrix: np.ndarray, offset: np.ndarray) -> np.ndarray:
    return np.stack([ndimage.affine_transform(ch, matrix, offset, order=1, mode="constant", cval=0.0)
                     for ch in image]).astype(image.dtype)


def _warp_label(label: np.ndarray, matrix: np.ndarray, offset: np.ndarray) -> np.ndarray:
    return ndimage.affine_transform(label, matrix, offset, order=0, mode="constant",
                                    cval=IGNORE_LABEL).astype(label.dtype)


def vignette_mask(h: int, w: int, radius: float) -> np.ndarray:
    """1 inside ``radius`` (scaled to this width), falling linearly to 0.5 at twice it."""
    r = radius * w / VIGNETTE_REFERENCE_WIDTH
    yy, xx = np.mgrid[0:h, 0:w]
    d = np.hypot(yy - (h - 1) / 2.0, xx - (w - 1) / 2.0)
    return np.clip(1.0 - 0.5 * np.maximum(d - r, 0.0) / r, 0.5, 1.0)


def photometric(image: np.ndarray, params: Dict[str, float]) -> np.ndarray:
    out = image + params["brightness"] / 255.0
    mean = out.mean()
    out = (out - mean) * params["contrast"] + mean
    if params["vignette"] > 0:
        out = out * vignette_mask(image.shape[1], image.shape[2], params["vignette"])[None]
    return np.clip(out, 0.0, 1.0).astype(image.dtype)


def augment(sample: Sample, cfg: AugmentConfig, rng: np.random.Generator) -> Sample:
    """One random augmentation; geometry is shared by A, B and the label."""
    params = sample_params(cfg, rng)
    a, b, label = sample.modality_a, sample.modality_b, sample.label
    h, w = label.shape
    matrix, offset = affine_for(params, h, w)
    if not (np.allclose(matrix, np.eye(2), atol=0, rtol=0) and not offset.any()):
        a = _warp_image(a, matrix, offset)
        b = _warp_image(b, matrix, offset)
        label = _warp_label(label, matrix, offset)
    neutral = params["brightness"] == 0 and params["contrast"] == 1 and params["vignette"] == 0
    if not neutral:
        a = photometric(a, params)
    out = Sample(a.copy(), b.copy(), label.copy(), sample.corruption)
    return hflip(out) if params["flip"] else out
