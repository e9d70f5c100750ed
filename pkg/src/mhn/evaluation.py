"""Detection metrics: IoU, greedy matching, interpolated AP and log-average miss rate.

Boxes are (x1, y1, x2, y2) in continuous pixel coordinates; areas carry no
``+1`` term.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import NoGroundTruth

TP, FP, IGNORED = "TP", "FP", "ignored"
MR_EPS = 1e-4


@dataclass(frozen=True)
class GroundTruthBox:
    box: tuple[float, float, float, float]
    ignore: bool = False
    occlusion: int = 0

    @property
    def height(self) -> float:
        return self.box[3] - self.box[1]


@dataclass(frozen=True)
class ScoredBox:
    box: tuple[float, float, float, float]
    score: float


@dataclass(frozen=True)
class SubsetFilter:
    """Active height range ``[min_height, max_height)``; everything else is ignored."""

    min_height: float = 0.0
    max_height: float | None = None
    max_occlusion: int | None = None
    name: str = ""

    def __post_init__(self):
        if self.max_height is not None and self.min_height >= self.max_height:
            raise ValueError(f"min_height {self.min_height} must be below max_height {self.max_height}")

    def admits(self, gt: GroundTruthBox) -> bool:
        h = gt.height
        if h < self.min_height:
            return False
        if self.max_height is not None and h >= self.max_height:
            return False
        if self.max_occlusion is not None and gt.occlusion > self.max_occlusion:
            return False
        return True


# Height subsets used for pedestrian ablations.
SUBSETS = {
    "all": SubsetFilter(name="all"),
    "reasonable": SubsetFilter(30, name="reasonable"),
    "small": SubsetFilter(25, 60, name="small"),
    "medium": SubsetFilter(60, 120, name="medium"),
    "large": SubsetFilter(120, name="large"),
}


def iou(a, b) -> float:
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


@dataclass
class MatchResult:
    det_labels: list[str]
    gt_matched: list[bool]


def match(dets, gts, iou_thresh: float = 0.5) -> MatchResult:
    """Greedy matching of score-sorted detections against one image's ground truth.

    Each detection takes the unmatched non-ignore gt with the highest IoU
    (>= ``iou_thresh``) and becomes a TP.  Failing that, an ignore gt with
    IoU >= ``iou_thresh`` absorbs it (label ``ignored``); ignore regions may
    absorb any number of detections.  Otherwise it is a FP.
    """
    matched = [False] * len(gts)
    labels = []
    for d in dets:
        best, best_iou = -1, iou_thresh
        for k, g in enumerate(gts):
            if g.ignore or matched[k]:
                continue
            o = iou(d.box, g.box)
            if o >= best_iou and (best < 0 or o > best_iou):
                best, best_iou = k, o
        if best >= 0:
            matched[best] = True
            labels.append(TP)
            continue
        if any(g.ignore and iou(d.box, g.box) >= iou_thresh for g in gts):
            labels.append(IGNORED)
        else:
            labels.append(FP)
    return MatchResult(labels, matched)


@dataclass
class EvalCurve:
    """Operating points of a score sweep, one per distinct score (descending)."""

    thresholds: np.ndarray
    tp: np.ndarray
    fp: np.ndarray
    n_gt: int
    n_images: int = 1

    @property
    def recall(self) -> np.ndarray:
        return self.tp / self.n_gt if self.n_gt else np.zeros_like(self.tp, dtype=float)

    @property
    def precision(self) -> np.ndarray:
        denom = self.tp + self.fp
        return np.divide(self.tp, denom, out=np.zeros(len(denom)), where=denom > 0)

    @property
    def fppi(self) -> np.ndarray:
        return self.fp / self.n_images

    @property
    def miss_rate(self) -> np.ndarray:
        return 1.0 - self.recall


def build_curve(dets_by_image, gts_by_image, iou_thresh: float = 0.5) -> EvalCurve:
    """Match every image, then sweep the score threshold from high to low.

    ``dets_by_image`` maps image id -> list of ScoredBox; ``gts_by_image``
    maps image id -> list of GroundTruthBox.  Images present in either map
    count toward ``n_images``.
    """
    images = sorted(set(dets_by_image) | set(gts_by_image), key=str)
    scored = []
    n_gt = 0
    for img in images:
        gts = gts_by_image.get(img, [])
        n_gt += sum(not g.ignore for g in gts)
        dets = sorted(dets_by_image.get(img, []), key=lambda d: -d.score)
        res = match(dets, gts, iou_thresh)
        scored += [(d.score, lab) for d, lab in zip(dets, res.det_labels) if lab != IGNORED]
    scored.sort(key=lambda t: -t[0])
    thresholds, tps, fps = [], [], []
    tp = fp = 0
    for k, (s, lab) in enumerate(scored):
        tp += lab == TP
        fp += lab == FP
        if k + 1 == len(scored) or scored[k + 1][0] != s:
            thresholds.append(s)
            tps.append(tp)
            fps.append(fp)
    return EvalCurve(np.array(thresholds, float), np.array(tps, int), np.array(fps, int), n_gt, max(len(images), 1))


def average_precision(curve: EvalCurve, n_points: int = 11) -> float:
    """Interpolated AP: mean over ``n_points`` recall levels in [0, 1] of the
    best precision achieved at recall >= that level."""
    if curve.n_gt <= 0:
        raise NoGroundTruth("average precision needs at least one ground-truth box")
    rec, prec = curve.recall, curve.precision
    total = 0.0
    for r in np.linspace(0.0, 1.0, n_points):
        ok = rec >= r - 1e-12
        total += prec[ok].max() if ok.any() else 0.0
    return float(total / n_points)


def log_average_miss_rate(curve: EvalCurve, n_images: int | None = None, eps: float = MR_EPS) -> float:
    """Geometric mean of the miss rate at 9 FPPI points log-spaced over [0.01, 1].

    At each reference FPPI the miss rate of the lowest-threshold operating
    point whose FPPI does not exceed the reference is used.  The sweep starts
    from the empty detector (FPPI 0, miss rate 1).  Miss rates are floored at
    ``eps`` before taking logs.
    """
    n_images = curve.n_images if n_images is None else n_images
    if n_images <= 0:
        raise ValueError("n_images must be positive")
    if curve.n_gt <= 0:
        raise NoGroundTruth("miss rate needs at least one ground-truth box")
    fppi = np.concatenate([[0.0], curve.fp / n_images])
    mr = np.concatenate([[1.0], 1.0 - curve.tp / curve.n_gt])
    rates = []
    for ref in np.logspace(-2, 0, 9):
        idx = np.nonzero(fppi <= ref + 1e-12)[0]
        rates.append(max(min(mr[idx[-1]], 1.0), eps))
    gm = math.exp(sum(math.log(r) for r in rates) / len(rates))
    # exp/log round-off must not push the mean outside its operands' range
    return float(min(max(gm, min(rates)), max(rates)))


def subset_filter(gts, f: SubsetFilter) -> list[GroundTruthBox]:
    """Mark ground truth outside ``f`` as ignore; nothing is removed."""
    return [g if g.ignore or f.admits(g) else replace(g, ignore=True) for g in gts]


@dataclass
class Metrics:
    subset: str
    ap: float | None = None
    mr: float | None = None
    n_gt: int = 0
    extra: dict = field(default_factory=dict)


def evaluate(dets_by_image, gts_by_image, metric="ap", subsets=("all",), iou_thresh=0.5, n_points=11):
    rows = []
    for name in subsets:
        f = SUBSETS[name] if isinstance(name, str) else name
        gts = {k: subset_filter(v, f) for k, v in gts_by_image.items()}
        curve = build_curve(dets_by_image, gts, iou_thresh)
        m = Metrics(f.name or str(name), n_gt=curve.n_gt)
        if metric == "ap":
            m.ap = average_precision(curve, n_points)
        else:
            m.mr = log_average_miss_rate(curve)
        rows.append(m)
    return rows
