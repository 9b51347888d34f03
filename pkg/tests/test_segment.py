import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sketchseg import autodiff as ad
from sketchseg import model as model_mod
from sketchseg.autodiff import Tensor
from sketchseg.keypoints import Keypoints
from sketchseg.model import ModelParams, Toggles
from sketchseg.segment import predict_labels, refine_by_stroke, segment, segmentation_loss
from sketchseg.sketch import LabeledSketch, Sketch, rotate_points
from sketchseg.synth import toy_dataset


@pytest.fixture(scope="module")
def pair():
    data = toy_dataset("lollipop", 2, 3)
    return data[0], data[1]


def test_label_head_input_width():
    p = ModelParams(3, seed=0)
    assert p.tau.mlp.widths == [258, 256, 256, 256, 3]


def test_predict_single_label_is_certain():
    p = ModelParams(1, seed=0)
    rng = np.random.default_rng(0)
    d = predict_labels(rng.standard_normal((6, 2)), rng.standard_normal((6, 128)),
                       rng.standard_normal((1, 128)), p.tau)
    assert np.array_equal(d.data, np.ones((6, 1)))


def test_zero_final_layer_is_uniform():
    p = ModelParams(4, seed=0)
    last = p.tau.mlp.layers[-1]
    last.weight.data[:] = 0
    last.bias.data[:] = 0
    rng = np.random.default_rng(1)
    d = predict_labels(rng.standard_normal((5, 2)), rng.standard_normal((5, 128)),
                       rng.standard_normal((1, 128)), p.tau)
    assert np.allclose(d.data, 0.25, atol=0, rtol=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_label_rows_are_distributions(seed):
    rng = np.random.default_rng(seed)
    p = ModelParams(int(rng.integers(1, 6)), seed=seed % 1000)
    pts = rng.standard_normal((7, 2))
    feats = rng.standard_normal((7, 128))
    feats[3] = feats[2]
    pts[3] = pts[2]
    d = predict_labels(pts, feats, rng.standard_normal((1, 128)), p.tau).data
    assert np.all((d >= 0) & (d <= 1))
    assert np.allclose(d.sum(1), 1, atol=1e-12)
    assert np.array_equal(d[2], d[3])


def test_segmentation_loss_examples():
    onehot = Tensor(np.eye(3)[[0, 2, 1]])
    assert segmentation_loss(onehot, [0, 2, 1]).data == 0.0
    n = 5
    uni = Tensor(np.full((n, 4), 0.25))
    assert segmentation_loss(uni, [0, 1, 2, 3, 0]).data == pytest.approx(n * np.log(4), rel=1e-14)
    wrong = Tensor(np.eye(2)[[0]])
    assert np.isfinite(segmentation_loss(wrong, [1]).data)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_segmentation_loss_matches_scalar_recomputation(seed):
    rng = np.random.default_rng(seed)
    n, L = int(rng.integers(1, 10)), int(rng.integers(1, 5))
    logits = rng.standard_normal((n, L))
    probs = np.exp(logits) / np.exp(logits).sum(1, keepdims=True)
    labels = rng.integers(0, L, n)
    expected = 0.0
    for i in range(n):
        expected -= np.log(max(probs[i, labels[i]], 1e-12))
    assert segmentation_loss(Tensor(probs), labels).data == pytest.approx(expected, rel=1e-12)


def test_segment_single_label_exemplar(pair):
    ex, target = pair
    one = LabeledSketch(ex.sketch, np.zeros(ex.sketch.n_points, int), {0: "all"})
    out = segment(target.sketch, one, ModelParams(1, seed=0))
    assert np.all(out.labels == 0)


def test_segment_restores_target_coordinates(pair):
    ex, target = pair
    out = segment(target.sketch, ex, ModelParams(2, seed=0))
    assert np.abs(out.sketch.points - target.sketch.points).max() < 1e-12
    assert np.array_equal(out.sketch.stroke_ids, target.sketch.stroke_ids)
    assert out.labels.shape == (target.sketch.n_points,)


def test_segment_rejects_empty_exemplar(pair):
    _, target = pair
    empty = LabeledSketch(Sketch(np.zeros((0, 2)), np.zeros(0, int)), np.zeros(0, int), {})
    with pytest.raises(ValueError):
        segment(target.sketch, empty, ModelParams(1, seed=0))


def _stub_keypoints(per_point, coords, omega, idx=np.arange(0, 256, 9)):
    """Keypoints pinned to fixed point indices, so they move with the points."""
    c = ad.as_tensor(coords)
    onehot = np.zeros((len(idx), c.shape[0]))
    onehot[np.arange(len(idx)), idx] = 1.0
    prob_t = Tensor(onehot)
    return Keypoints(prob_t, ad.matmul(prob_t, c))


@pytest.mark.parametrize("angle,reflect", [(0.3, False), (2.5, False), (-1.2, True), (3.0, True)])
def test_segment_invariant_to_rigid_pose_with_stubbed_keypoints(pair, monkeypatch, angle, reflect):
    ex, target = pair
    monkeypatch.setattr(model_mod, "predict_keypoints", _stub_keypoints)
    params = ModelParams(2, seed=4)
    base = segment(target.sketch, ex, params)
    pts = rotate_points(target.sketch.points, angle)
    if reflect:
        pts = pts * [-1.0, 1.0]
    moved = target.sketch.with_points(pts + [0.1, -0.05])
    out = segment(moved, ex, params)
    assert np.array_equal(out.labels, base.labels)
    assert np.abs(out.sketch.points - moved.points).max() < 1e-12


def test_refine_all_uniform_unchanged():
    sk = Sketch(np.zeros((4, 2)), np.array([0, 0, 1, 1]))
    ls = LabeledSketch(sk, np.array([2, 2, 0, 0]), {})
    assert np.array_equal(refine_by_stroke(ls).labels, ls.labels)
