import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hgpu.metrics import (FrameScore, aggregate, binarize, boundary_f, boundary_map, default_tolerance, region_j,
                          score_sequence, scores_to_csv, sequence_statistics)

masks8 = arrays(np.bool_, (8, 8))


def brute_j(pred, gt):
    inter = union = 0
    for a, b in zip(pred.ravel().tolist(), gt.ravel().tolist()):
        inter += a and b
        union += a or b
    return 1.0 if union == 0 else inter / union


def brute_boundary(mask):
    h, w = mask.shape
    out = set()
    for y in range(h):
        for x in range(w):
            if not mask[y, x]:
                continue
            nbrs = [(y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)]
            if any(not (0 <= v < h and 0 <= u < w) or not mask[v, u] for v, u in nbrs):
                out.add((y, x))
    return out


def brute_f0(pred, gt):
    pb, gb = brute_boundary(pred), brute_boundary(gt)
    if not pb and not gb:
        return 1.0
    if not pb or not gb:
        return 0.0
    both = len(pb & gb)
    p, r = both / len(pb), both / len(gb)
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


@pytest.fixture(scope="module")
def random_masks():
    rng = np.random.default_rng(2024)
    return [rng.random((8, 8)) < rng.uniform(0.1, 0.9) for _ in range(50)]


# ---------------------------------------------------------------- J
def test_j_examples():
    gt = np.ones((4, 4), bool)
    left = np.zeros((4, 4), bool)
    left[:, :2] = True
    assert region_j(gt, gt) == 1.0
    assert region_j(left, gt) == 0.5
    assert region_j(np.zeros((3, 3)), np.zeros((3, 3))) == 1.0
    assert region_j(np.zeros((3, 3)), np.ones((3, 3))) == 0.0


def test_j_matches_oracle_all_pairs(random_masks):
    for a in random_masks:
        for b in random_masks:
            assert region_j(a, b) == brute_j(a, b)


@settings(max_examples=100, deadline=None)
@given(masks8, masks8)
def test_j_symmetric_and_bounded(a, b):
    j = region_j(a, b)
    assert j == region_j(b, a) and 0.0 <= j <= 1.0


@settings(max_examples=100, deadline=None)
@given(masks8, masks8)
def test_j_one_iff_identical(a, b):
    if a.any() or b.any():
        assert (region_j(a, b) == 1.0) == np.array_equal(a, b)


def test_j_shape_mismatch():
    with pytest.raises(ValueError):
        region_j(np.zeros((2, 2)), np.zeros((3, 3)))


# ---------------------------------------------------------------- F
def test_boundary_map_of_square():
    m = np.zeros((6, 6), bool)
    m[1:5, 1:5] = True
    expected = m.copy()
    expected[2:4, 2:4] = False
    assert np.array_equal(boundary_map(m), expected)
    assert boundary_map(np.ones((3, 3))).sum() == 8  # image-edge pixels count


def test_f_examples():
    m = np.zeros((64, 64), bool)
    m[10:30, 12:40] = True
    assert boundary_f(m, m) == 1.0
    assert boundary_f(np.zeros_like(m), m) == 0.0
    assert boundary_f(np.zeros_like(m), np.zeros_like(m)) == 1.0


def test_default_tolerance():
    assert default_tolerance((64, 64)) == 1
    assert default_tolerance((480, 854)) == math.ceil(0.0075 * math.hypot(480, 854))


@pytest.mark.parametrize("tol", [1, 2, 3])
def test_shift_by_tolerance_still_matches(tol):
    gt = np.zeros((64, 64), bool)
    gt[10:30, 10:30] = True
    pred = np.roll(gt, tol, axis=1)
    assert boundary_f(pred, gt, tolerance=tol) == 1.0
    assert boundary_f(pred, gt, tolerance=tol - 0.5) < 1.0


def test_f_tolerance_zero_matches_oracle_all_pairs(random_masks):
    for a in random_masks:
        for b in random_masks:
            assert boundary_f(a, b, tolerance=0) == brute_f0(a, b)


@settings(max_examples=100, deadline=None)
@given(masks8, masks8, st.sampled_from([0, 1, 2]))
def test_f_symmetric_and_bounded(a, b, tol):
    f = boundary_f(a, b, tolerance=tol)
    assert 0.0 <= f <= 1.0
    assert f == pytest.approx(boundary_f(b, a, tolerance=tol), abs=1e-15)


@settings(max_examples=100, deadline=None)
@given(masks8, masks8)
def test_f_tolerance_brute_force(a, b):
    # oracle: match within Euclidean distance 1 by scanning all pairs
    pb, gb = brute_boundary(a), brute_boundary(b)
    if not pb or not gb:
        return
    near = lambda p, s: any((p[0] - q[0]) ** 2 + (p[1] - q[1]) ** 2 <= 1 for q in s)
    prec = sum(near(p, gb) for p in pb) / len(pb)
    rec = sum(near(g, pb) for g in gb) / len(gb)
    expected = 0.0 if prec + rec == 0 else 2 * prec * rec / (prec + rec)
    assert boundary_f(a, b, tolerance=1) == pytest.approx(expected, abs=1e-15)


# ---------------------------------------------------------------- binarize
def test_binarize():
    assert binarize(np.array([0.5, 0.49, 1.0])).tolist() == [True, False, True]
    assert not binarize(np.zeros((3, 3))).any()
    b = np.array([[0, 1], [1, 0]], dtype=float)
    assert np.array_equal(binarize(binarize(b)), binarize(b))


# ---------------------------------------------------------------- aggregation
def frames(seq, values, f=None):
    f = values if f is None else f
    return [FrameScore(seq, k, j, fv) for k, (j, fv) in enumerate(zip(values, f))]


def test_constant_scores():
    rep = aggregate(frames("a", [0.8] * 8) + frames("b", [0.8] * 5))
    assert rep.j.mean == pytest.approx(0.8, abs=1e-15)
    assert rep.j.recall == 1.0 and rep.j.decay == pytest.approx(0.0, abs=1e-15)


def test_all_below_threshold_recall_zero():
    assert aggregate(frames("a", [0.4] * 6)).j.recall == 0.0


def test_linear_decay_matches_hand_quartiles():
    values = list(np.linspace(1.0, 0.0, 8))
    rep = aggregate(frames("a", values), exclude_ends=False)
    # 8 frames -> quartiles of 2 frames
    assert rep.j.decay == pytest.approx((values[0] + values[1]) / 2 - (values[6] + values[7]) / 2, abs=1e-15)
    assert rep.j.decay > 0
    inner = values[1:-1]
    rep = aggregate(frames("a", values))
    q = math.ceil(len(inner) / 4)
    assert rep.j.decay == pytest.approx(np.mean(inner[:q]) - np.mean(inner[-q:]), abs=1e-15)


def test_sequences_weigh_equally():
    rep = aggregate(frames("long", [1.0] * 12) + frames("short", [0.0] * 4))
    assert rep.j.mean == 0.5


@settings(max_examples=100, deadline=None)
@given(st.lists(st.lists(st.floats(0, 1), min_size=1, max_size=9), min_size=1, max_size=5), st.randoms())
def test_aggregate_permutation_invariant(seqs, rnd):
    scores = [s for i, vals in enumerate(seqs) for s in frames(f"s{i}", vals)]
    shuffled = scores[:]
    rnd.shuffle(shuffled)
    assert aggregate(scores) == aggregate(shuffled)
    rep = aggregate(scores)
    assert 0 <= rep.j.mean <= 1 and 0 <= rep.j.recall <= 1 and -1 <= rep.j.decay <= 1
    assert rep.jf_mean == (rep.j.mean + rep.f.mean) / 2


def test_statistics_empty():
    with pytest.raises(ValueError):
        sequence_statistics([])


def test_frame_score_range():
    with pytest.raises(ValueError):
        FrameScore("a", 0, 1.2, 0.5)


def test_report_formats():
    gt = [np.eye(4, dtype=bool)] * 3
    scores = score_sequence("s", gt, gt)
    csv_text = scores_to_csv(scores)
    assert csv_text.splitlines()[0] == "sequence,frame,J,F"
    assert len(csv_text.splitlines()) == 4
    summary = json.loads(aggregate(scores).to_json())
    assert set(summary) == {"J", "F", "JF_mean"}
    assert set(summary["J"]) == {"mean", "recall", "decay"}
