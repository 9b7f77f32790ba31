"""
Receptive-field analysis.

Analytic sizes for single atrous layers and cascades, a per-layer table for
a graph, and the empirical occlusion probe: slide a mean-valued window over
the input and measure how far the feature vector at one location moves.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple

import numpy as np

from .blocks import CascadeBranch
from .config import worker_threads
from .exceptions import ShapeError
from .netpbm import save_pgm
from .nn import Conv2d, Module
from .tensor import Tensor, no_grad


def analytic_receptive_field(rate: int, kernel: int) -> int:
    """Span of one atrous layer: (r - 1)(N - 1) + N."""
    if rate < 1 or kernel < 1:
        raise ShapeError(f"receptive field needs rate >= 1 and kernel >= 1, got {rate}, {kernel}")
    return (rate - 1) * (kernel - 1) + kernel


def cascade_receptive_field(first: int, second: int) -> int:
    """Effective span of two stacked layers with spans ``first`` and ``second``."""
    if first < 1 or second < 1:
        raise ShapeError(f"receptive fields must be >= 1, got {first}, {second}")
    return first + second - 1


@dataclass
class RfRow:
    name: str
    kernel: int
    rate: int
    field: int
    cascade: Optional[int] = None


def receptive_field_table(graph: Module) -> List[RfRow]:
    """One row per spatial convolution; cascaded eASPP pairs carry their combined span."""
    rows: List[RfRow] = []
    for name, module in graph.named_modules():
        if isinstance(module, Conv2d) and module.kernel_size > 1:
            rows.append(RfRow(name, module.kernel_size, module.dilation,
                              analytic_receptive_field(module.dilation, module.kernel_size)))
        elif isinstance(module, CascadeBranch):
            single = analytic_receptive_field(module.rate, module.atrous1.kernel_size)
            rows.append(RfRow(name, module.atrous1.kernel_size, module.rate, single,
                              cascade_receptive_field(single, single)))
    return rows


def _occluder_bounds(center: int, window: int, size: int) -> Tuple[int, int]:
    lo = center - window // 2
    return max(lo, 0), min(lo + window, size)


def empirical_receptive_field(model: Callable[[Tensor], Tensor], image: np.ndarray,
                              target: Tuple[int, int], window: int = 8, stride: int = 4,
                              fill: Optional[np.ndarray] = None,
                              batch_size: int = 32) -> np.ndarray:
    """H×W heatmap of ‖f(x) - f(x occluded at (h, w))‖₂ at feature location ``target``.

    ``image`` is C×H×W. The occluder is centred on grid points spaced
    ``stride`` apart and clipped at the image border; it is filled with the
    per-channel image mean unless ``fill`` (length C) is given.
    """
    if image.ndim != 3:
        raise ShapeError(f"empirical_receptive_field expects C×H×W, got {image.shape}")
    if window < 1 or stride < 1:
        raise ShapeError(f"window and stride must be >= 1, got {window}, {stride}")
    c, h, w = image.shape
    values = image.mean(axis=(1, 2)) if fill is None else np.asarray(fill, dtype=image.dtype)
    ty, tx = target

    def features(batch: np.ndarray) -> np.ndarray:
        with no_grad():
            out = model(Tensor(batch))
        if not (0 <= ty < out.shape[2] and 0 <= tx < out.shape[3]):
            raise ShapeError(f"target {target} outside feature map {out.shape}")
        return out.data[:, :, ty, tx]

    reference = features(image[None])[0]
    centers = [(y, x) for y in range(0, h, stride) for x in range(0, w, stride)]

    def run(chunk: List[Tuple[int, int]]) -> np.ndarray:
        batch = np.repeat(image[None], len(chunk), axis=0)
        for i, (y, x) in enumerate(chunk):
            y0, y1 = _occluder_bounds(y, window, h)
            x0, x1 = _occluder_bounds(x, window, w)
            batch[i, :, y0:y1, x0:x1] = values[:, None, None]
        return np.linalg.norm(features(batch) - reference[None], axis=1)

    chunks = [centers[i:i + batch_size] for i in range(0, len(centers), batch_size)]
    with ThreadPoolExecutor(max_workers=worker_threads()) as pool:
        distances = np.concatenate(list(pool.map(run, chunks)))

    gh, gw = len(range(0, h, stride)), len(range(0, w, stride))
    grid = distances.reshape(gh, gw)
    return np.repeat(np.repeat(grid, stride, axis=0), stride, axis=1)[:h, :w]


def save_heatmap(heatmap: np.ndarray, path: str) -> Tuple[float, float]:
    """Min-max scale to 0..255, write P5 and a ``<path>.txt`` sidecar with the range."""
    lo, hi = float(heatmap.min()), float(heatmap.max())
    span = hi - lo
    scaled = np.zeros(heatmap.shape) if span == 0 else (heatmap - lo) / span
    save_pgm(np.rint(scaled * 255).astype(np.uint8), path)
    with open(path + ".txt", "x", encoding="utf-8") as fh:
        fh.write(f"min={lo!r}\nmax={hi!r}\n")
    return lo, hi
