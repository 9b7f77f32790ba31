"""
Analytic parameter and FLOP accounting.

FLOPs are counted as 2·MACs for convolutions and deconvolutions, plus
per-element costs for the non-linear layers (see ``ELEMENTWISE``). Modules
walk their own structure with shapes only, so large configurations are
costed without running a forward pass.

Usage:
    report = CostReport()
    graph.cost((1, 2048, 24, 48), report)
    report.total_params, report.total_flops
    report.to_csv(path)
"""

import csv
from dataclasses import dataclass, field
from typing import List, Tuple

Shape = Tuple[int, int, int, int]

ELEMENTWISE = {
    "batch_norm": 2,
    "relu": 1,
    "sigmoid": 4,
    "add": 1,
    "hadamard": 1,
    "channel_scale": 1,
    "bilinear": 4,
    "pool": 1,
}


@dataclass
class CostRow:
    kind: str
    name: str
    params: int
    flops: int


@dataclass
class CostReport:
    rows: List[CostRow] = field(default_factory=list)

    def add(self, kind: str, name: str, params: int = 0, flops: int = 0) -> None:
        self.rows.append(CostRow(kind, name, int(params), int(flops)))

    def elementwise(self, kind: str, name: str, shape: Shape, params: int = 0) -> None:
        """Per-element op over a tensor of ``shape``."""
        self.add(kind, name, params, ELEMENTWISE[kind] * numel(shape))

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def total_flops(self) -> int:
        return sum(r.flops for r in self.rows)

    def params_excluding(self, kinds: Tuple[str, ...]) -> int:
        return sum(r.params for r in self.rows if r.kind not in kinds)

    def to_csv(self, path: str) -> None:
        with open(path, "x", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["layer", "name", "params", "flops"])
            for row in self.rows:
                writer.writerow([row.kind, row.name, row.params, row.flops])


def numel(shape: Shape) -> int:
    n = 1
    for s in shape:
        n *= int(s)
    return n


def join(prefix: str, name: str) -> str:
    return f"{prefix}.{name}" if prefix else name
