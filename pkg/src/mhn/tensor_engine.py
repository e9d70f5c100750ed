"""Deterministic float32 forward execution of ArchGraphs.

Tensors are plain ``numpy.ndarray`` of dtype float32 and shape (n, c, h, w).
Convolution accumulates each output value sequentially over
(in_channel, kh, kw) in that fixed order and adds the bias last, so results
are bit-reproducible and match a naive scalar loop exactly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .archgraph import ADD, CONV, INPUT, POOL, RELU, UPSAMPLE, ArchGraph, infer_signatures, topological_order
from .errors import DegenerateROI, MHNError, ShapeMismatch

DTYPE = np.float32


def _pair(v):
    return (v, v) if np.isscalar(v) else tuple(v)


def as_tensor4(x) -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim != 4 or min(x.shape) < 1:
        raise ShapeMismatch(f"expected a non-empty 4-D tensor, got shape {x.shape}")
    return x


def conv2d(x, w, bias=None, stride=1, dilation=1, padding=0) -> np.ndarray:
    x = as_tensor4(x)
    w = np.asarray(w, dtype=DTYPE)
    n, c, h, wd = x.shape
    if w.ndim != 4:
        raise ShapeMismatch(f"kernel must be 4-D, got {w.shape}")
    oc, ic, kh, kw = w.shape
    if ic != c:
        raise ShapeMismatch(f"kernel expects {ic} input channels, input has {c}")
    sh, sw = _pair(stride)
    dh, dw = _pair(dilation)
    ph, pw = _pair(padding)
    oh = (h + 2 * ph - dh * (kh - 1) - 1) // sh + 1
    ow = (wd + 2 * pw - dw * (kw - 1) - 1) // sw + 1
    if oh < 1 or ow < 1:
        raise ShapeMismatch(f"conv output would be {oh}x{ow} for input {h}x{wd}")
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x
    out = np.zeros((n, oc, oh, ow), dtype=DTYPE)
    for ci in range(c):
        for i in range(kh):
            r0 = i * dh
            rows = slice(r0, r0 + sh * (oh - 1) + 1, sh)
            for j in range(kw):
                c0 = j * dw
                patch = xp[:, ci, rows, c0:c0 + sw * (ow - 1) + 1:sw]
                out += w[:, ci, i, j][None, :, None, None] * patch[:, None]
    if bias is not None:
        b = np.asarray(bias, dtype=DTYPE).reshape(-1)
        if b.shape[0] != oc:
            raise ShapeMismatch(f"bias has {b.shape[0]} entries, kernel has {oc} outputs")
        out += b[None, :, None, None]
    return out


def maxpool2d(x, kernel=2, stride=2, padding=0) -> np.ndarray:
    x = as_tensor4(x)
    kh, kw = _pair(kernel)
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    n, c, h, w = x.shape
    if h + 2 * ph < kh or w + 2 * pw < kw:
        raise ShapeMismatch(f"pool window {kh}x{kw} larger than input {h}x{w}")
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (w + 2 * pw - kw) // sw + 1
    xp = x
    if ph or pw:
        xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)), constant_values=-np.inf)
    out = None
    for i in range(kh):
        for j in range(kw):
            win = xp[:, :, i:i + sh * (oh - 1) + 1:sh, j:j + sw * (ow - 1) + 1:sw]
            out = win.copy() if out is None else np.maximum(out, win)
    return out


def upsample_bilinear_x2(x) -> np.ndarray:
    """x2 bilinear resize, half-pixel (align_corners=False) sampling."""
    x = as_tensor4(x)
    n, c, h, w = x.shape
    y0, y1, ly = _bilinear_taps(h)
    x0, x1, lx = _bilinear_taps(w)
    ly = ly[:, None]
    top = x[:, :, y0][:, :, :, x0] * (1 - lx) + x[:, :, y0][:, :, :, x1] * lx
    bot = x[:, :, y1][:, :, :, x0] * (1 - lx) + x[:, :, y1][:, :, :, x1] * lx
    return (top * (1 - ly) + bot * ly).astype(DTYPE)


def _bilinear_taps(size):
    dst = np.arange(2 * size, dtype=DTYPE)
    src = np.maximum((dst + DTYPE(0.5)) / DTYPE(2) - DTYPE(0.5), DTYPE(0))
    i0 = np.minimum(np.floor(src).astype(np.int64), size - 1)
    i1 = np.minimum(i0 + 1, size - 1)
    lam = (src - i0).astype(DTYPE)
    return i0, i1, lam


def elementwise_add(a, b) -> np.ndarray:
    a, b = as_tensor4(a), as_tensor4(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"cannot add {a.shape} and {b.shape}")
    return a + b


def relu(x) -> np.ndarray:
    return np.maximum(as_tensor4(x), DTYPE(0))


def round_half_away(v: float) -> int:
    return int(math.copysign(math.floor(abs(v) + 0.5), v))


def roi_pool(feat, roi, feat_stride: int, out=(7, 7)) -> np.ndarray:
    """Max-pool the feature cells under ``roi`` (x1, y1, x2, y2 in input pixels).

    The roi is scaled by ``1 / feat_stride``, rounded half away from zero and
    clamped to the map; the resulting inclusive cell range of length ``L`` is
    split into bins at ``round(p * L / out)``.  Empty bins are zero.
    Returns a tensor of shape (n, c, oh, ow).
    """
    feat = as_tensor4(feat)
    n, c, h, w = feat.shape
    oh, ow = out
    x1, y1, x2, y2 = (float(v) for v in roi)
    if not all(math.isfinite(v) for v in (x1, y1, x2, y2)) or x2 <= x1 or y2 <= y1:
        raise DegenerateROI(f"roi {roi} has no positive area")
    cols = _roi_range(x1, x2, feat_stride, w)
    rows = _roi_range(y1, y2, feat_stride, h)
    if cols is None or rows is None:
        raise DegenerateROI(f"roi {roi} lies outside the {h}x{w} feature map (stride {feat_stride})")
    result = np.zeros((n, c, oh, ow), dtype=DTYPE)
    rb = _bins(*rows, oh)
    cb = _bins(*cols, ow)
    for p, (r0, r1) in enumerate(rb):
        for q, (c0, c1) in enumerate(cb):
            if r1 > r0 and c1 > c0:
                result[:, :, p, q] = feat[:, :, r0:r1, c0:c1].max(axis=(2, 3))
    return result


def _roi_range(a, b, stride, size):
    lo = round_half_away(a / stride)
    hi = round_half_away(b / stride)
    if hi < 0 or lo > size - 1:
        return None
    lo, hi = max(lo, 0), min(hi, size - 1)
    return lo, hi - lo + 1


def _bins(start, length, nbins):
    edges = [start + round_half_away(p * length / nbins) for p in range(nbins + 1)]
    return list(zip(edges[:-1], edges[1:]))


@dataclass
class WeightStore:
    """Conv weights keyed by share group (or node id for unshared convs)."""

    entries: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    def __getitem__(self, key):
        return self.entries[key]

    def __setitem__(self, key, value):
        k, b = value
        self.entries[key] = (np.asarray(k, DTYPE), np.asarray(b, DTYPE).reshape(-1))

    def __contains__(self, key):
        return key in self.entries

    def __len__(self):
        return len(self.entries)

    def keys(self):
        return self.entries.keys()

    def merged(self, other: "WeightStore") -> "WeightStore":
        return WeightStore({**self.entries, **other.entries})


def conv_shapes(g: ArchGraph) -> dict[str, tuple[int, int, int, int]]:
    """Kernel shape required for every weight key of ``g`` (heads included)."""
    sigs = infer_signatures(g)
    shapes = {}
    for n in g.nodes:
        if n.op == CONV:
            in_c = sigs[n.inputs[0]].channels
            shape = (n.out_channels, in_c, *n.kernel)
            prev = shapes.setdefault(n.weight_key, shape)
            if prev != shape:
                raise ShapeMismatch(f"share group {n.weight_key!r} needs {prev} and {shape}", n.id)
    return shapes


def init_weights(g: ArchGraph, seed: int = 17, std: float = 0.01) -> WeightStore:
    """Seeded Gaussian kernels with zero biases, drawn in graph order."""
    rng = np.random.default_rng(seed)
    store = WeightStore()
    graphs = [g] + ([g.rcnn.graph] if g.rcnn is not None else [])
    for sub in graphs:
        for key, shape in conv_shapes(sub).items():
            kernel = (rng.standard_normal(shape) * std).astype(DTYPE)
            store[key] = (kernel, np.zeros(shape[0], DTYPE))
    return store


def constant_weights(g: ArchGraph, kernel_value: float = 0.0, bias_value: float = 0.0) -> WeightStore:
    store = WeightStore()
    graphs = [g] + ([g.rcnn.graph] if g.rcnn is not None else [])
    for sub in graphs:
        for key, shape in conv_shapes(sub).items():
            store[key] = (np.full(shape, kernel_value, DTYPE), np.full(shape[0], bias_value, DTYPE))
    return store


def forward(g: ArchGraph, weights: WeightStore, x, keep=None) -> dict[str, np.ndarray]:
    """Run ``g`` on ``x``.

    Returns the maps of the declared outputs and of every head cls/reg node,
    keyed by output name / node id.  ``keep="all"`` returns every node.
    """
    x = as_tensor4(x)
    if x.shape[1] != g.input_channels:
        raise ShapeMismatch(f"input has {x.shape[1]} channels, graph expects {g.input_channels}", "input")
    values: dict[str, np.ndarray] = {}
    nodes = g.node_map()
    for nid in topological_order(g):
        n = nodes[nid]
        try:
            values[nid] = _run_node(n, [values[p] for p in n.inputs], weights, x)
        except ShapeMismatch as exc:
            if exc.node_id is None:
                raise ShapeMismatch(str(exc), nid) from exc
            raise
        except KeyError as exc:
            raise MHNError(f"node {nid!r}: no weights bound for {exc.args[0]!r}") from exc
    if keep == "all":
        return values
    result = {name: values[g.resolve(name)] for name in g.outputs}
    for h in g.heads:
        result[h.cls] = values[h.cls]
        result[h.reg] = values[h.reg]
    return result


def _run_node(n, ins, weights, x):
    if n.op == INPUT:
        return x
    if n.op == CONV:
        kernel, bias = weights[n.weight_key]
        if kernel.shape[0] != n.out_channels or kernel.shape[2:] != tuple(n.kernel):
            raise ShapeMismatch(f"weights {kernel.shape} do not fit conv {n.kernel} -> {n.out_channels}")
        return conv2d(ins[0], kernel, bias, n.stride, n.dilation, n.padding)
    if n.op == POOL:
        return maxpool2d(ins[0], n.kernel, n.stride, n.padding)
    if n.op == RELU:
        return relu(ins[0])
    if n.op == ADD:
        acc = ins[0]
        for other in ins[1:]:
            acc = elementwise_add(acc, other)
        return acc
    if n.op == UPSAMPLE:
        return upsample_bilinear_x2(ins[0])
    raise MHNError(f"unknown op {n.op!r}")
