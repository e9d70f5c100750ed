"""Log-uniform anchor scales, their branch assignment, and grid tiling."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidRange, SplitMismatch

# Width / height of a pedestrian box.
CALTECH_RATIO = 0.41
KITTI_RATIO = 0.36


@dataclass(frozen=True)
class AnchorConfig:
    s_min: float = 30.0
    s_max: float = 480.0
    n_anchors: int = 9
    aspect_ratio: float = CALTECH_RATIO
    branch_split: tuple[int, ...] = (3, 3, 3)

    def check(self) -> None:
        if not (self.s_min > 0 and math.isfinite(self.s_max)):
            raise InvalidRange(f"scales must be positive and finite: {self.s_min}, {self.s_max}")
        if self.s_min > self.s_max:
            raise InvalidRange(f"s_min {self.s_min} exceeds s_max {self.s_max}")
        if self.n_anchors < 1:
            raise InvalidRange("n_anchors must be >= 1")
        if self.aspect_ratio <= 0:
            raise InvalidRange("aspect_ratio must be positive")


@dataclass(frozen=True)
class Anchor:
    branch: int
    width: float
    height: float


@dataclass(frozen=True)
class AnchorSet:
    scales: tuple[float, ...]
    anchors: tuple[Anchor, ...]

    def on_branch(self, branch: int) -> list[Anchor]:
        return [a for a in self.anchors if a.branch == branch]


def anchor_scales(cfg: AnchorConfig) -> list[float]:
    """Centres (in log space) of N equal bins spanning [s_min, s_max]:
    ``s_n = s_min * (s_max / s_min) ** ((n - 0.5) / N)``."""
    cfg.check()
    ratio = cfg.s_max / cfg.s_min
    N = cfg.n_anchors
    return [cfg.s_min * ratio ** ((n - 0.5) / N) for n in range(1, N + 1)]


def bin_edges(cfg: AnchorConfig) -> list[float]:
    cfg.check()
    ratio = cfg.s_max / cfg.s_min
    N = cfg.n_anchors
    return [cfg.s_min * ratio ** (n / N) for n in range(N + 1)]


def assign_branches(scales, branch_split, aspect_ratio: float = CALTECH_RATIO) -> AnchorSet:
    """Give the smallest ``branch_split[0]`` scales to branch 0, the next block to branch 1, ..."""
    scales = [float(s) for s in scales]
    if any(c < 0 for c in branch_split) or sum(branch_split) != len(scales):
        raise SplitMismatch(f"split {tuple(branch_split)} does not partition {len(scales)} scales")
    if any(b < a for a, b in zip(scales, scales[1:])):
        raise SplitMismatch("scales must be ascending")
    anchors = []
    it = iter(scales)
    for branch, count in enumerate(branch_split):
        for _ in range(count):
            h = next(it)
            anchors.append(Anchor(branch, h * aspect_ratio, h))
    return AnchorSet(tuple(scales), tuple(anchors))


def make_anchor_set(cfg: AnchorConfig) -> AnchorSet:
    return assign_branches(anchor_scales(cfg), cfg.branch_split, cfg.aspect_ratio)


def grid_anchors(anchors, branch_stride: int, feat_h: int, feat_w: int) -> np.ndarray:
    """Tile ``anchors`` (a list of Anchor for one branch) over a feature grid.

    Cell (i, j) is centred at ((j + 0.5) * stride, (i + 0.5) * stride).  Rows
    are ordered cell-major (row, column) then anchor, matching the channel
    layout of the head outputs.  Returns an (H * W * A, 4) array of
    x1, y1, x2, y2; boxes are not clipped.
    """
    if isinstance(anchors, AnchorSet):
        anchors = anchors.anchors
    if branch_stride < 1:
        raise ValueError("stride must be >= 1")
    wh = np.array([[a.width, a.height] for a in anchors], dtype=np.float64).reshape(-1, 2)
    cy = (np.arange(feat_h) + 0.5) * branch_stride
    cx = (np.arange(feat_w) + 0.5) * branch_stride
    cyy, cxx = np.meshgrid(cy, cx, indexing="ij")
    ctr = np.stack([cxx.ravel(), cyy.ravel()], axis=1)[:, None, :]
    half = wh[None, :, :] / 2
    boxes = np.concatenate([ctr - half, ctr + half], axis=2)
    return boxes.reshape(-1, 4)


def format_scale_table(aset: AnchorSet) -> str:
    names = ("bran-s", "bran-m", "bran-l")
    lines = ["n   branch  height      width"]
    for n, a in enumerate(aset.anchors, start=1):
        bname = names[a.branch] if a.branch < len(names) else f"bran-{a.branch}"
        lines.append(f"{n:<3d} {bname:<7s} {a.height:<11.4f} {a.width:.4f}")
    return "\n".join(lines)
