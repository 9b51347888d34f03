import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sketchseg.metrics import c_metric, components, evaluate, granularity_mask, p_metric
from sketchseg.segment import refine_by_stroke
from sketchseg.sketch import LabeledSketch, Sketch


def labeled(labels, ids=None, names=None):
    labels = np.asarray(labels)
    ids = np.zeros(len(labels), int) if ids is None else np.asarray(ids)
    return LabeledSketch(Sketch(np.zeros((len(labels), 2)), ids), labels, names or {})


def count_correct(pred, truth, mask):
    """Counting oracle, one point at a time."""
    hit = tot = 0
    for p, t, m in zip(pred, truth, mask):
        if not m:
            tot += 1
            hit += p == t
    return hit / tot


def run_components(ids, truth):
    """Independent run splitter: walk the points and open a new run on any change."""
    runs, cur = [], [0]
    for i in range(1, len(ids)):
        if ids[i] != ids[i - 1] or truth[i] != truth[i - 1]:
            runs.append(cur)
            cur = []
        cur.append(i)
    runs.append(cur)
    return runs


def c_oracle(pred, truth, ids, mask, thr=0.75):
    good = total = 0
    for run in run_components(ids, truth):
        if all(mask[i] for i in run):
            continue
        total += 1
        good += sum(pred[i] == truth[i] for i in run) >= thr * len(run)
    return good / total


def test_p_metric_examples():
    truth = labeled(np.zeros(10, int))
    assert p_metric(np.r_[np.zeros(7, int), np.ones(3, int)], truth) == 0.7
    assert p_metric(np.zeros(10, int), truth) == 1.0


def test_p_metric_empty_rejected():
    with pytest.raises(ValueError):
        p_metric([0, 1], labeled([0, 1]), mask=[True, True])


def test_c_metric_examples():
    truth = labeled([0, 0, 0, 0])
    assert c_metric([0, 0, 0, 0], truth) == 1.0
    assert c_metric([0, 0, 0, 1], truth) == 1.0  # 3 of 4 meets 75% inclusive
    assert c_metric([0, 0, 1, 1], truth) == 0.0


def test_c_metric_zero_components_rejected():
    with pytest.raises(ValueError):
        c_metric([0, 0], labeled([0, 0]), mask=np.array([True, True]))


def test_components_split_on_stroke_and_label():
    comps = components([0, 0, 0, 1, 1], [0, 0, 1, 1, 1])
    assert [c.tolist() for c in comps] == [[0, 1], [2], [3, 4]]


@settings(max_examples=1000, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_metrics_match_counting_oracles(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 40))
    L = int(rng.integers(1, 5))
    ids = np.cumsum(np.r_[0, rng.random(n - 1) < 0.2]).astype(int)
    truth = rng.integers(0, L, n)
    pred = np.where(rng.random(n) < 0.6, truth, rng.integers(0, L, n))
    mask = rng.random(n) < 0.2
    if mask.all():
        mask[0] = False
    ls = labeled(truth, ids)
    assert p_metric(pred, ls, mask) == count_correct(pred, truth, mask)
    assert c_metric(pred, ls, mask) == c_oracle(pred, truth, ids, mask)


def test_granularity_examples():
    names = {0: "a", 1: "b", 2: "c"}
    truth = labeled([0, 1, 1, 0], names=names)
    ex = labeled([1, 0], names=names)
    assert not granularity_mask(truth, ex).any()
    truth = labeled([0, 0, 2, 2, 2, 2, 2, 1], names=names)
    assert granularity_mask(truth, ex).sum() == 5


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_granularity_mask_size_matches_count(seed):
    rng = np.random.default_rng(seed)
    truth = rng.integers(0, 6, 30)
    ex = rng.integers(0, 6, int(rng.integers(1, 10)))
    have = set(ex.tolist())
    expected = sum(1 for t in truth if t not in have)
    assert granularity_mask(labeled(truth), labeled(ex)).sum() == expected


def test_granularity_uses_names_not_ids():
    truth = labeled([0, 1], names={0: "candy", 1: "stick"})
    ex = labeled([0], names={0: "stick"})
    assert granularity_mask(truth, ex).tolist() == [True, False]


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_metrics_invariant_under_relabeling(seed):
    rng = np.random.default_rng(seed)
    n = 25
    ids = np.sort(rng.integers(0, 4, n))
    ids = np.unique(ids, return_inverse=True)[1]
    truth = rng.integers(0, 4, n)
    pred = np.where(rng.random(n) < 0.7, truth, rng.integers(0, 4, n))
    perm = rng.permutation(4)
    a = labeled(truth, ids)
    b = labeled(perm[truth], ids)
    assert p_metric(pred, a) == p_metric(perm[pred], b)
    assert c_metric(pred, a) == c_metric(perm[pred], b)
    assert p_metric(pred, a) <= 1 and c_metric(pred, a) <= 1


def test_refine_examples():
    out = refine_by_stroke(labeled([0, 0, 1]))
    assert out.labels.tolist() == [0, 0, 0]
    out = refine_by_stroke(labeled([2, 2, 1, 1]))
    assert out.labels.tolist() == [1, 1, 1, 1]  # tie goes to the smaller id
    same = labeled([3, 3, 1], [0, 0, 1])
    assert refine_by_stroke(same).labels.tolist() == [3, 3, 1]


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_refine_idempotent_and_fixes_strict_majorities(seed):
    rng = np.random.default_rng(seed)
    n_strokes = int(rng.integers(1, 6))
    ids = np.repeat(np.arange(n_strokes), rng.integers(1, 8, n_strokes))
    stroke_label = rng.integers(0, 3, n_strokes)
    truth = labeled(stroke_label[ids], ids)
    pred = labeled(np.where(rng.random(len(ids)) < 0.6, truth.labels,
                            rng.integers(0, 3, len(ids))), ids)
    once = refine_by_stroke(pred)
    assert np.array_equal(refine_by_stroke(once).labels, once.labels)
    for s in range(n_strokes):
        sel = ids == s
        if 2 * (pred.labels[sel] == truth.labels[sel]).sum() > sel.sum():
            assert (once.labels[sel] == truth.labels[sel]).all()


def test_evaluate_report_averages_breakdown():
    names = {0: "a", 1: "b"}
    ex = labeled([0, 1], names=names)
    truths = [labeled([0, 0, 1, 1], [0, 0, 1, 1], names), labeled([1, 1, 0], [0, 0, 0], names)]
    preds = [labeled([0, 1, 1, 1], [0, 0, 1, 1], names), labeled([1, 1, 1], [0, 0, 0], names)]
    rep = evaluate(preds, truths, ex)
    assert np.isclose(rep.p_metric, np.mean([r[0] for r in rep.per_sketch]))
    assert np.isclose(rep.c_metric, np.mean([r[1] for r in rep.per_sketch]))
    assert rep.p_metric == pytest.approx((0.75 + 2 / 3) / 2)
    assert rep.masked_points == 0
