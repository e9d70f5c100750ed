"""From head outputs to final detections: decoding, score fusion and NMS."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .anchors import AnchorConfig, grid_anchors, make_anchor_set
from .archgraph import ArchGraph, infer_signatures
from .errors import MHNError, NonFiniteRegression
from .evaluation import iou
from .tensor_engine import forward, roi_pool

# Largest log-scale step applied when decoding widths/heights.
BBOX_CLIP = math.log(1000.0 / 16)


@dataclass(frozen=True)
class Proposal:
    box: tuple[float, float, float, float]
    s_mhn: float
    branch: int


@dataclass(frozen=True)
class Detection:
    box: tuple[float, float, float, float]
    s_rcnn: float
    s_mhn: float
    s_f: float
    lam: float = 0.0
    branch: int = 0


@dataclass(frozen=True)
class DetectConfig:
    lam: float = 0.5
    nms_iou: float = 0.5
    max_out: int = 100
    top_k: int = 200


def decode_boxes(anchors, reg, image_hw=None) -> np.ndarray:
    """Apply (tx, ty, tw, th) offsets to anchor boxes, then clip to the image."""
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    reg = np.asarray(reg, dtype=np.float64).reshape(-1, 4)
    if len(anchors) != len(reg):
        raise ValueError(f"{len(anchors)} anchors but {len(reg)} regression rows")
    if not np.isfinite(reg).all():
        raise NonFiniteRegression("regression offsets contain NaN or inf")
    w = anchors[:, 2] - anchors[:, 0]
    h = anchors[:, 3] - anchors[:, 1]
    cx = anchors[:, 0] + 0.5 * w + reg[:, 0] * w
    cy = anchors[:, 1] + 0.5 * h + reg[:, 1] * h
    nw = w * np.exp(np.minimum(reg[:, 2], BBOX_CLIP))
    nh = h * np.exp(np.minimum(reg[:, 3], BBOX_CLIP))
    out = np.stack([cx - 0.5 * nw, cy - 0.5 * nh, cx + 0.5 * nw, cy + 0.5 * nh], axis=1)
    if image_hw is not None:
        H, W = image_hw
        out[:, 0::2] = out[:, 0::2].clip(0, W)
        out[:, 1::2] = out[:, 1::2].clip(0, H)
    return out


def fuse_scores(s_rcnn: float, s_mhn: float, lam: float) -> float:
    """Final score: the second-stage score plus ``lam`` times the first-stage score."""
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    return s_rcnn + lam * s_mhn


def nms(dets, iou_threshold: float = 0.5, max_out: int = 100) -> list[Detection]:
    """Greedy NMS on ``s_f``.

    Order is s_f descending, then smaller x1, smaller y1, input position.
    A box is dropped when its IoU with a kept box is >= ``iou_threshold``.
    """
    if not 0 < iou_threshold < 1:
        raise ValueError("iou_threshold must lie in (0, 1)")
    order = sorted(range(len(dets)), key=lambda k: (-dets[k].s_f, dets[k].box[0], dets[k].box[1], k))
    keep: list[Detection] = []
    for k in order:
        if len(keep) >= max_out:
            break
        d = dets[k]
        if all(iou(d.box, kept.box) < iou_threshold for kept in keep):
            keep.append(d)
    return keep


def _softmax_fg(cls_map: np.ndarray) -> np.ndarray:
    """Per-anchor foreground probability from interleaved (bg, fg) channels.

    ``cls_map`` has shape (2A, H, W); the result is (H * W * A,) in
    cell-major, anchor-minor order.
    """
    logits = cls_map.astype(np.float64).reshape(-1, 2, *cls_map.shape[1:])
    fg = 1.0 / (1.0 + np.exp(logits[:, 0] - logits[:, 1]))
    return fg.transpose(1, 2, 0).reshape(-1)


def _reg_rows(reg_map: np.ndarray) -> np.ndarray:
    a4, h, w = reg_map.shape
    return reg_map.astype(np.float64).reshape(a4 // 4, 4, h, w).transpose(2, 3, 0, 1).reshape(-1, 4)


def propose(g: ArchGraph, outputs, image_hw, anchor_cfg: AnchorConfig, top_k: int) -> list[Proposal]:
    """Score and decode every anchor of every head, keep the ``top_k`` by s_mhn."""
    aset = make_anchor_set(anchor_cfg)
    sigs = infer_signatures(g)
    boxes, scores, branches = [], [], []
    for b, head in enumerate(g.heads):
        on_branch = aset.on_branch(b)
        if len(on_branch) != head.anchors:
            raise MHNError(
                f"head {head.branch!r} predicts {head.anchors} anchors, config assigns {len(on_branch)}"
            )
        if not on_branch:
            continue
        stride = sigs[g.resolve(head.branch)].stride
        cls_map, reg_map = outputs[head.cls][0], outputs[head.reg][0]
        grid = grid_anchors(on_branch, stride, *cls_map.shape[1:])
        boxes.append(decode_boxes(grid, _reg_rows(reg_map), image_hw))
        scores.append(_softmax_fg(cls_map))
        branches.append(np.full(len(grid), b))
    for k in range(len(g.heads), len(anchor_cfg.branch_split)):
        if anchor_cfg.branch_split[k]:
            raise MHNError(f"anchors assigned to branch {k}, but the graph has {len(g.heads)} heads")
    if not boxes:
        return []
    boxes = np.concatenate(boxes)
    scores = np.concatenate(scores)
    branches = np.concatenate(branches)
    valid = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
    idx = np.nonzero(valid)[0]
    idx = idx[np.argsort(-scores[idx], kind="stable")][:top_k]
    return [Proposal(tuple(float(v) for v in boxes[k]), float(scores[k]), int(branches[k])) for k in idx]


def rcnn_scores(g: ArchGraph, weights, feature_maps, proposals) -> np.ndarray:
    """Fast RCNN pedestrian probability for each proposal."""
    head = g.rcnn
    source = g.resolve(head.source)
    stride = infer_signatures(g)[source].stride
    feat = feature_maps[source]
    if not proposals:
        return np.zeros(0)
    pooled = np.concatenate([roi_pool(feat, p.box, stride, head.roi_size) for p in proposals])
    flat = pooled.reshape(len(proposals), -1, 1, 1)
    out = forward(head.graph, weights, flat)
    cls = out[head.cls][:, :, 0, 0].astype(np.float64)
    return 1.0 / (1.0 + np.exp(cls[:, 0] - cls[:, 1]))


def detect_pipeline(g: ArchGraph, weights, image, anchor_cfg: AnchorConfig | None = None,
                    cfg: DetectConfig | None = None) -> list[Detection]:
    """Full two-stage inference on one image tensor of shape (1, C, H, W).

    Without a second-stage head the proposal score is the final score
    (``s_rcnn = s_mhn`` and the recorded lambda is 0).  Boxes are always the
    first-stage decoded proposals, so lambda only changes scores and order.
    """
    anchor_cfg = anchor_cfg or AnchorConfig()
    cfg = cfg or DetectConfig()
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 4 or image.shape[0] != 1:
        raise MHNError(f"expected a single image of shape (1, C, H, W), got {image.shape}")
    maps = forward(g, weights, image, keep="all")
    outputs = {name: maps[g.resolve(name)] for name in g.outputs}
    for h in g.heads:
        outputs[h.cls], outputs[h.reg] = maps[h.cls], maps[h.reg]
    proposals = propose(g, outputs, image.shape[2:], anchor_cfg, cfg.top_k)
    if g.rcnn is not None:
        s_rcnn = rcnn_scores(g, weights, maps, proposals)
        dets = [
            Detection(p.box, float(r), p.s_mhn, fuse_scores(float(r), p.s_mhn, cfg.lam), cfg.lam, p.branch)
            for p, r in zip(proposals, s_rcnn)
        ]
    else:
        dets = [Detection(p.box, p.s_mhn, p.s_mhn, p.s_mhn, 0.0, p.branch) for p in proposals]
    return nms(dets, cfg.nms_iou, cfg.max_out)
