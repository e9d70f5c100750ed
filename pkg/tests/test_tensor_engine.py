import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import naive_conv2d, naive_maxpool, naive_roi_pool, naive_upsample

from mhn.archgraph import infer_signatures
from mhn.builders import build, build_detector, toy_backbone
from mhn.errors import DegenerateROI, ShapeMismatch
from mhn.tensor_engine import (
    WeightStore, constant_weights, conv2d, elementwise_add, forward, init_weights,
    maxpool2d, relu, roi_pool, upsample_bilinear_x2,
)

F32 = np.float32


def test_identity_conv():
    x = np.ones((1, 1, 3, 3), F32)
    out = conv2d(x, np.ones((1, 1, 1, 1), F32), np.zeros(1, F32))
    assert np.array_equal(out, x)


def test_dilated_impulse():
    x = np.zeros((1, 1, 5, 5), F32)
    x[0, 0, 2, 2] = 1
    out = conv2d(x, np.ones((1, 1, 3, 3), F32), None, stride=1, dilation=2, padding=2)[0, 0]
    expected = np.zeros((5, 5), F32)
    expected[np.ix_([0, 2, 4], [0, 2, 4])] = 1
    assert np.array_equal(out, expected)


def test_zero_input_gives_bias():
    w = np.random.default_rng(0).standard_normal((3, 2, 3, 3)).astype(F32)
    out = conv2d(np.zeros((1, 2, 6, 6), F32), w, np.array([1.5, -2, 0], F32), padding=1)
    for c, b in enumerate([1.5, -2, 0]):
        assert np.all(out[0, c] == F32(b))


def test_conv_channel_mismatch():
    with pytest.raises(ShapeMismatch):
        conv2d(np.zeros((1, 2, 4, 4), F32), np.zeros((1, 3, 1, 1), F32))


def test_conv_matches_naive_real_valued(rng):
    for _ in range(20):
        c, oc = rng.integers(1, 4, size=2)
        k = int(rng.integers(1, 4))
        s, d, p = int(rng.integers(1, 3)), int(rng.integers(1, 3)), int(rng.integers(0, 3))
        h = int(rng.integers(d * (k - 1) + 1, 9))
        x = rng.standard_normal((2, c, h, h)).astype(F32)
        w = rng.standard_normal((oc, c, k, k)).astype(F32)
        b = rng.standard_normal(oc).astype(F32)
        got = conv2d(x, w, b, s, d, p)
        ref = naive_conv2d(x, w, b, s, d, (p, p))
        assert got.shape == ref.shape
        assert np.array_equal(got, ref)


@settings(max_examples=30, deadline=None)
@given(st.floats(-4, 4, allow_nan=False, width=32), st.integers(0, 10_000))
def test_conv_linearity(alpha, seed):
    r = np.random.default_rng(seed)
    x = r.integers(-3, 4, size=(1, 2, 6, 6)).astype(F32)
    w = r.integers(-2, 3, size=(2, 2, 3, 3)).astype(F32)
    a = F32(alpha)
    np.testing.assert_allclose(conv2d(a * x, w, padding=1), a * conv2d(x, w, padding=1), rtol=1e-5, atol=1e-5)


def test_maxpool_constant():
    out = maxpool2d(np.full((1, 2, 6, 6), 3.0, F32))
    assert out.shape == (1, 2, 3, 3) and np.all(out == 3.0)


def test_maxpool_block():
    assert maxpool2d(np.array([[[[1, 2], [3, 4]]]], F32))[0, 0, 0, 0] == 4


def test_maxpool_counting_grid():
    x = np.arange(16, dtype=F32).reshape(1, 1, 4, 4)
    assert maxpool2d(x)[0, 0].tolist() == [[5, 7], [13, 15]]


def test_maxpool_too_small():
    with pytest.raises(ShapeMismatch):
        maxpool2d(np.zeros((1, 1, 1, 4), F32))


def test_upsample_constant_and_single():
    assert np.all(upsample_bilinear_x2(np.full((1, 1, 3, 2), 2.5, F32)) == F32(2.5))
    out = upsample_bilinear_x2(np.full((1, 1, 1, 1), 7.0, F32))
    assert out.shape == (1, 1, 2, 2) and np.all(out == 7)


def test_upsample_2x2():
    out = upsample_bilinear_x2(np.array([[[[0, 1], [2, 3]]]], F32))[0, 0]
    # per-pixel evaluation of src = (dst + 0.5) / 2 - 0.5, clamped
    expected = [[0, 0.25, 0.75, 1], [0.5, 0.75, 1.25, 1.5], [1.5, 1.75, 2.25, 2.5], [2, 2.25, 2.75, 3]]
    assert out.tolist() == expected


def test_add_relu():
    a = np.random.default_rng(3).standard_normal((1, 2, 3, 3)).astype(F32)
    assert np.array_equal(elementwise_add(a, np.zeros_like(a)), a)
    assert np.all(relu(-np.abs(a)) == 0)
    with pytest.raises(ShapeMismatch):
        elementwise_add(a, np.zeros((1, 2, 3, 4), F32))


def test_add_relu_against_loops(rng):
    a = rng.standard_normal((2, 3, 4, 5)).astype(F32)
    b = rng.standard_normal((2, 3, 4, 5)).astype(F32)
    s, r = elementwise_add(a, b), relu(a)
    for idx in np.ndindex(a.shape):
        assert s[idx] == F32(a[idx] + b[idx])
        assert r[idx] == (a[idx] if a[idx] > 0 else 0)


def test_roi_identity_and_constant():
    x = np.random.default_rng(1).standard_normal((1, 3, 5, 6)).astype(F32)
    assert np.array_equal(roi_pool(x, (0, 0, 6 * 4, 5 * 4), 4, (5, 6)), x)
    c = np.full((1, 1, 8, 8), 2.0, F32)
    assert np.all(roi_pool(c, (3, 5, 40, 33), 8, (3, 3)) == 2)


def test_roi_quadrants():
    x = np.arange(16, dtype=F32).reshape(1, 1, 4, 4)
    assert roi_pool(x, (0, 0, 3, 3), 1, (2, 2))[0, 0].tolist() == [[5, 7], [13, 15]]


def test_roi_degenerate():
    x = np.zeros((1, 1, 4, 4), F32)
    with pytest.raises(DegenerateROI):
        roi_pool(x, (5, 5, 5, 9), 1, (2, 2))
    with pytest.raises(DegenerateROI):
        roi_pool(x, (100, 100, 120, 120), 4, (2, 2))
    # a sliver narrower than one cell is clamped to a single cell
    out = roi_pool(np.arange(16, dtype=F32).reshape(1, 1, 4, 4), (4.1, 4.1, 4.2, 4.2), 4, (2, 2))
    assert out[0, 0].max() == 5


def test_roi_against_naive(rng):
    for _ in range(30):
        h, w = rng.integers(2, 9, size=2)
        x = rng.standard_normal((1, 2, h, w)).astype(F32)
        stride = int(rng.choice([1, 2, 4, 8]))
        x1, y1 = rng.uniform(-stride, w * stride), rng.uniform(-stride, h * stride)
        box = (x1, y1, x1 + rng.uniform(0.5, 3 * stride * w), y1 + rng.uniform(0.5, 3 * stride * h))
        out = tuple(int(v) for v in rng.integers(1, 5, size=2))
        try:
            got = roi_pool(x, box, stride, out)
        except DegenerateROI:
            continue
        assert np.array_equal(got, naive_roi_pool(x, box, stride, out))


def test_forward_branch_shapes():
    x = np.zeros((1, 3, 64, 64), F32)
    for arch, sizes in [("mhn", (8, 4, 2)), ("mhn-d", (8, 8, 4)), ("mhn-noskip", (8, 4, 2))]:
        g = build(arch)
        out = forward(g, init_weights(g), x)
        assert [out[o].shape[2:] for o in g.outputs] == [(s, s) for s in sizes]


def test_forward_shapes_match_signatures():
    g = build_detector("mhn")
    sigs = infer_signatures(g)
    values = forward(g, init_weights(g), np.zeros((1, 3, 64, 96), F32), keep="all")
    for nid, v in values.items():
        s = sigs[nid]
        assert v.shape[1:] == (s.channels, 64 // s.stride, 96 // s.stride), nid


def test_forward_zero_weights():
    g = build_detector("mhn-d")
    x = np.random.default_rng(2).standard_normal((1, 3, 64, 64)).astype(F32)
    out = forward(g, constant_weights(g, 0.0, 0.0), x)
    assert all(np.all(v == 0) for v in out.values())


def test_forward_deterministic():
    g = build_detector("mhn")
    w = init_weights(g, seed=5)
    x = np.random.default_rng(9).standard_normal((1, 3, 64, 64)).astype(F32)
    a, b = forward(g, w, x), forward(g, w, x)
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)


def test_shared_groups_resolve_to_one_entry():
    g = build("mhn")
    w = init_weights(g)
    assert "conv6_1" in w and "conv6s_1" not in w and "conv6m_1" not in w


def test_forward_reports_node_on_bad_weights():
    g = build("mhn-noskip")
    w = init_weights(g)
    k, b = w["conv1_1"]
    w["conv1_1"] = (k[:, :2], b)
    with pytest.raises(ShapeMismatch) as exc:
        forward(g, w, np.zeros((1, 3, 64, 64), F32))
    assert exc.value.node_id == "conv1_1"


def test_init_is_seeded():
    g = build("mhn")
    a, b, c = init_weights(g, 1), init_weights(g, 1), init_weights(g, 2)
    assert all(np.array_equal(a[k][0], b[k][0]) for k in a.keys())
    assert not np.array_equal(a["conv1_1"][0], c["conv1_1"][0])
    assert abs(float(np.std(init_weights(build("mhn", toy_backbone()))["conv6_1"][0])) - 0.01) < 0.002


def test_upsample_against_naive(rng):
    x = rng.standard_normal((1, 2, 3, 5)).astype(F32)
    np.testing.assert_allclose(upsample_bilinear_x2(x), naive_upsample(x.astype(float)), atol=1e-6)


def test_maxpool_against_naive(rng):
    x = rng.integers(-50, 50, size=(2, 3, 7, 6)).astype(F32)
    for k, s in [(2, 2), (3, 2), (2, 1), (3, 3)]:
        assert np.array_equal(maxpool2d(x, k, s), naive_maxpool(x, k, s))


def test_weightstore_roundtrip_keys():
    w = WeightStore()
    w["a"] = (np.ones((1, 1, 1, 1)), [0.5])
    assert w["a"][0].dtype == F32 and w["a"][1].shape == (1,)
    assert len(w) == 1 and "a" in w
