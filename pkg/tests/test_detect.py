import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import naive_nms

from mhn.anchors import AnchorConfig
from mhn.archgraph import CONV, INPUT, ArchGraph, Head, NodeSpec
from mhn.builders import build_detector, toy_backbone
from mhn.detect import (
    DetectConfig, Detection, decode_boxes, detect_pipeline, fuse_scores, nms, propose,
)
from mhn.errors import NonFiniteRegression
from mhn.tensor_engine import WeightStore, constant_weights, forward, init_weights

F32 = np.float32


def det(box, s_f, s_rcnn=None, s_mhn=0.0):
    return Detection(tuple(float(v) for v in box), s_f if s_rcnn is None else s_rcnn, s_mhn, s_f)


def random_dets(rng, n, span=40.0):
    xy = rng.uniform(0, span, size=(n, 2))
    wh = rng.uniform(4, 20, size=(n, 2))
    scores = rng.uniform(0, 1, size=n)
    return [det((x, y, x + w, y + h), float(s)) for (x, y), (w, h), s in zip(xy, wh, scores)]


def test_decode_zero_offsets_identity():
    a = np.array([[0, 0, 10, 20], [5, 5, 9, 30]], float)
    assert np.array_equal(decode_boxes(a, np.zeros((2, 4))), a)


def test_decode_log_width_doubles():
    out = decode_boxes([[0, 0, 10, 20]], [[0, 0, math.log(2), 0]])[0]
    assert out.tolist() == [-5, 0, 15, 20]


def test_decode_matches_scalar_loop(rng):
    # sorting the two corner points per axis gives x1 < x2 and y1 < y2
    anchors = np.sort(rng.uniform(0, 100, size=(50, 2, 2)), axis=1).reshape(50, 4)
    reg = rng.normal(0, 0.5, size=(50, 4))
    got = decode_boxes(anchors, reg)
    for (x1, y1, x2, y2), (tx, ty, tw, th), g in zip(anchors, reg, got):
        w, h = x2 - x1, y2 - y1
        cx, cy = x1 + w / 2 + tx * w, y1 + h / 2 + ty * h
        nw, nh = w * math.exp(tw), h * math.exp(th)
        ref = [cx - nw / 2, cy - nh / 2, cx + nw / 2, cy + nh / 2]
        np.testing.assert_allclose(g, ref, rtol=1e-12, atol=1e-9)


def test_decode_clips_to_image():
    out = decode_boxes([[-5, -5, 50, 50]], [[0, 0, 0, 0]], image_hw=(40, 30))[0]
    assert out.tolist() == [0, 0, 30, 40]


def test_decode_rejects_non_finite():
    with pytest.raises(NonFiniteRegression):
        decode_boxes([[0, 0, 1, 1]], [[0, float("nan"), 0, 0]])


def test_fuse_examples():
    assert fuse_scores(0.6, 0.8, 0.5) == pytest.approx(1.0)
    assert fuse_scores(0.37, 0.99, 0.0) == 0.37
    with pytest.raises(ValueError):
        fuse_scores(0.5, 0.5, -0.1)


@settings(max_examples=100)
@given(st.floats(-10, 10), st.floats(-10, 10), st.floats(-10, 10), st.floats(0, 5))
def test_fusion_monotone_in_each_score(r, m, delta, lam):
    delta = abs(delta)
    assert fuse_scores(r + delta, m, lam) >= fuse_scores(r, m, lam)
    assert fuse_scores(r, m + delta, lam) >= fuse_scores(r, m, lam)


def test_nms_identical_boxes():
    out = nms([det((0, 0, 10, 10), 0.8), det((0, 0, 10, 10), 0.9)])
    assert [d.s_f for d in out] == [0.9]


def test_nms_disjoint_boxes_survive():
    dets = [det((0, 0, 10, 10), 0.3), det((20, 20, 30, 30), 0.6)]
    assert [d.s_f for d in nms(dets)] == [0.6, 0.3]


def test_nms_tie_break_is_positional():
    a, b = det((5, 0, 15, 10), 0.5), det((0, 0, 10, 10), 0.5)
    assert nms([a, b], 0.3)[0] is b


def test_nms_matches_reference(rng):
    for _ in range(100):
        dets = random_dets(rng, int(rng.integers(1, 9)))
        thr = float(rng.uniform(0.1, 0.9))
        assert nms(dets, thr, 5) == naive_nms(dets, thr, 5)


def test_nms_idempotent(rng):
    for _ in range(50):
        dets = random_dets(rng, 12)
        once = nms(dets, 0.4)
        assert nms(once, 0.4) == once


def test_shift_in_smhn_preserves_survivors(rng):
    for _ in range(100):
        n = int(rng.integers(1, 10))
        boxes = random_dets(rng, n)
        r = rng.uniform(0, 1, n)
        m = rng.integers(0, 100, n) / 100
        lam, c = 0.5, float(rng.integers(-4, 5)) / 4
        base = [Detection(d.box, r[k], m[k], fuse_scores(r[k], m[k], lam)) for k, d in enumerate(boxes)]
        shifted = [Detection(d.box, r[k], m[k] + c, fuse_scores(r[k], m[k] + c, lam)) for k, d in enumerate(boxes)]
        assert [d.box for d in nms(base)] == [d.box for d in nms(shifted)]


@pytest.fixture(scope="module")
def toy():
    g = build_detector("mhn", toy_backbone())
    x = np.random.default_rng(11).standard_normal((1, 3, 64, 64)).astype(F32)
    return g, init_weights(g, seed=3), x


def test_pipeline_zero_weights_uniform(toy):
    g, _, x = toy
    dets = detect_pipeline(g, constant_weights(g, 0.0, 0.0), x, cfg=DetectConfig(max_out=7))
    assert 0 < len(dets) <= 7
    assert all(d.s_mhn == 0.5 and d.s_rcnn == 0.5 for d in dets)


def test_pipeline_lambda_only_touches_scores(toy):
    g, w, x = toy
    # NMS may keep different members of a near-duplicate cluster, so both
    # runs are checked against the shared first-stage proposal pool.
    maps = forward(g, w, x, keep="all")
    outputs = {h.cls: maps[h.cls] for h in g.heads} | {h.reg: maps[h.reg] for h in g.heads}
    pool = {p.box: p.s_mhn for p in propose(g, outputs, x.shape[2:], AnchorConfig(), 200)}
    a = detect_pipeline(g, w, x, cfg=DetectConfig(lam=0.0))
    b = detect_pipeline(g, w, x, cfg=DetectConfig(lam=2.0))
    for d in a + b:
        assert pool[d.box] == d.s_mhn
    assert all(d.s_f == d.s_rcnn for d in a)
    assert all(d.s_f == d.s_rcnn + 2.0 * d.s_mhn for d in b)


def test_pipeline_deterministic(toy):
    g, w, x = toy
    assert detect_pipeline(g, w, x) == detect_pipeline(g, w, x)


def test_pipeline_boxes_valid(toy):
    g, w, x = toy
    for d in detect_pipeline(g, w, x):
        x1, y1, x2, y2 = d.box
        assert 0 <= x1 < x2 <= 64 and 0 <= y1 < y2 <= 64
        assert math.isfinite(d.s_f)


def test_single_hot_cell_gives_one_strong_detection():
    g = ArchGraph((
        NodeSpec("in", INPUT),
        NodeSpec("f", CONV, ("in",), out_channels=1),
        NodeSpec("h", CONV, ("f",), kernel=(5, 3), padding=(2, 1), out_channels=1),
        NodeSpec("c", CONV, ("h",), out_channels=2),
        NodeSpec("r", CONV, ("h",), out_channels=4),
    ), ("f",), input_channels=1, heads=(Head("f", "h", "c", "r", 1),))
    w = WeightStore()
    w["f"] = (np.ones((1, 1, 1, 1)), [0])
    mid = np.zeros((1, 1, 5, 3))
    mid[0, 0, 2, 1] = 1
    w["h"] = (mid, [0])
    w["c"] = (np.array([0, 20.0]).reshape(2, 1, 1, 1), [0, 0])
    w["r"] = (np.zeros((4, 1, 1, 1)), np.zeros(4))
    x = np.zeros((1, 1, 8, 8), F32)
    x[0, 0, 2, 5] = 1
    cfg = AnchorConfig(4, 4, 1, branch_split=(1,))
    dets = detect_pipeline(g, w, x, cfg, DetectConfig(max_out=100))
    strong = [d for d in dets if d.s_f > 0.9]
    assert len(strong) == 1
    x1, y1, x2, y2 = strong[0].box
    assert ((x1 + x2) / 2, (y1 + y2) / 2) == (5.5, 2.5)
    assert all(d.s_f == 0.5 for d in dets if d is not strong[0])
