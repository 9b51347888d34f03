import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sketchseg import autodiff as ad
from sketchseg.autodiff import Tensor
from sketchseg.keypoints import (GlobalTransform, KeypointHead, alignment_residual, apply_global,
                                 chamfer, chamfer_global_align, chamfer_np, invert_global,
                                 keypoint_anchor_loss, predict_keypoints, rigid_solve)


def rot(deg):
    a = np.radians(deg)
    return np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])


MIRROR_Y = np.diag([-1.0, 1.0])


def brute_chamfer(a, b):
    ab = np.mean([min(((p - q) ** 2).sum() for q in b) for p in a])
    ba = np.mean([min(((p - q) ** 2).sum() for q in a) for p in b])
    return ab + ba


def test_chamfer_examples():
    assert chamfer_np(np.zeros((3, 2)), np.zeros((3, 2))) == 0.0
    assert chamfer_np(np.array([[0.0, 0.0]]), np.array([[3.0, 4.0]])) == 50.0
    assert chamfer_np(np.array([[0.0, 0], [1, 0]]), np.array([[0.0, 0]])) == 0.5


def test_chamfer_empty_rejected():
    with pytest.raises(ValueError):
        chamfer(np.zeros((0, 2)), np.zeros((2, 2)))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 20), st.integers(1, 20))
def test_chamfer_properties(seed, n, m):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((n, 2)), rng.standard_normal((m, 2))
    c = chamfer_np(a, b)
    assert c >= 0
    assert np.isclose(c, chamfer_np(b, a), rtol=1e-13)
    assert chamfer_np(a, a) == 0.0
    assert np.isclose(c, brute_chamfer(a, b), rtol=1e-12)


def test_uniform_column_gives_mean():
    head = KeypointHead(np.random.default_rng(0), feature_dim=4, n_keypoints=3)
    for _, p in head.named_parameters():
        p.data = np.zeros_like(p.data)
    kps = predict_keypoints(Tensor(np.ones((2, 4))), np.array([[0.0, 0], [2, 0]]), head)
    assert np.allclose(kps.coords.data, [[1.0, 0]] * 3)


def test_one_hot_column_gives_point():
    head = KeypointHead(np.random.default_rng(0), feature_dim=2, n_keypoints=1)
    for _, p in head.named_parameters():
        p.data = np.zeros_like(p.data)
    last = head.mlp.layers[-1]
    last.bias.data[:] = 0.0
    # make the logit huge on point 1 only: route feature 0 through relus
    head.mlp.layers[0].weight.data[0, 0] = 1.0
    head.mlp.layers[1].weight.data[0, 0] = 1.0
    last.weight.data[0, 0] = 1000.0
    feats = Tensor(np.array([[0.0, 0], [1.0, 0], [0.0, 0]]))
    kps = predict_keypoints(feats, np.array([[0.0, 0], [5, 7], [1, 1]]), head)
    assert np.allclose(kps.coords.data, [[5.0, 7.0]])


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_keypoints_are_convex_combinations(seed):
    rng = np.random.default_rng(seed)
    head = KeypointHead(rng, feature_dim=8, n_keypoints=16)
    pts = rng.uniform(-0.5, 0.5, (30, 2))
    kps = predict_keypoints(Tensor(rng.standard_normal((30, 8))), pts, head)
    prob = kps.prob
    assert np.all(prob >= 0)
    assert np.allclose(prob.sum(0), 1.0, atol=1e-12)
    from scipy.spatial import Delaunay
    assert np.all(Delaunay(pts).find_simplex(kps.coords.data, tol=1e-12) >= 0)


def test_anchor_loss_zero_on_covering_subset():
    pts = np.array([[0.0, 0], [1, 0], [2, 0]])
    assert float(keypoint_anchor_loss(pts, pts[[0, 1, 2, 1]]).data) == 0.0


def test_anchor_loss_collapsed_closed_form():
    # three collinear points, all keypoints at their centroid (1, 0):
    # points -> centroid: (1 + 0 + 1) / 3 ; centroid -> nearest point: 0
    pts = np.array([[0.0, 0], [1, 0], [2, 0]])
    assert np.isclose(float(keypoint_anchor_loss(pts, np.ones((4, 1)) * [1.0, 0]).data), 2 / 3)


def test_anchor_loss_decreases_under_gradient_steps():
    rng = np.random.default_rng(0)
    pts = rng.uniform(-0.5, 0.5, (40, 2))
    head = KeypointHead(rng, feature_dim=2, n_keypoints=8)
    feats = Tensor(pts)
    losses = []
    for _ in range(30):
        loss = keypoint_anchor_loss(pts, predict_keypoints(feats, pts, head))
        losses.append(float(loss.data))
        ad.backward(loss)
        for _, p in head.named_parameters():
            p.data = p.data - 0.05 * p.grad
            p.grad = None
    assert losses[-1] < 0.8 * losses[0]


def test_rigid_identity_and_translation():
    src = np.random.default_rng(0).standard_normal((10, 2))
    g = rigid_solve(src, src)
    assert np.allclose(g.R.data, np.eye(2), atol=1e-12) and np.allclose(g.t.data, 0, atol=1e-12)
    g = rigid_solve(src, src + [2.0, 3.0])
    assert np.allclose(g.R.data, np.eye(2), atol=1e-12)
    assert np.allclose(g.t.data, [[2.0, 3.0]], atol=1e-12)


def test_rigid_recovers_rotation():
    src = np.random.default_rng(1).standard_normal((20, 2))
    dst = src @ rot(37).T + [1.0, -1.0]
    R, t = rigid_solve(src, dst).numpy()
    assert np.allclose(R, rot(37), atol=1e-9) and np.allclose(t, [1, -1], atol=1e-9)


def test_rigid_recovers_mirror():
    src = np.random.default_rng(2).standard_normal((20, 2))
    g = rigid_solve(src, src @ MIRROR_Y.T)
    assert np.isclose(np.linalg.det(g.R.data), -1.0)
    assert g.reflection
    assert alignment_residual(src, src @ MIRROR_Y.T, g) < 1e-20


def test_rigid_rejects_degenerate():
    with pytest.raises(ValueError):
        rigid_solve(np.ones((5, 2)), np.random.default_rng(0).standard_normal((5, 2)))
    with pytest.raises(ValueError):
        rigid_solve(np.ones((1, 2)), np.ones((1, 2)))
    with pytest.raises(ad.ShapeError):
        rigid_solve(np.ones((3, 2)), np.ones((4, 2)))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_rigid_solution_is_orthogonal_and_beats_identity(seed):
    rng = np.random.default_rng(seed)
    src, dst = rng.standard_normal((12, 2)), rng.standard_normal((12, 2))
    g = rigid_solve(src, dst)
    R = g.R.data
    assert np.allclose(R.T @ R, np.eye(2), atol=1e-9)
    assert np.isclose(abs(np.linalg.det(R)), 1.0, atol=1e-9)
    ident = GlobalTransform.from_numpy(np.eye(2), dst.mean(0) - src.mean(0))
    assert alignment_residual(src, dst, g) <= alignment_residual(src, dst, ident) + 1e-12


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-180, 180))
def test_rigid_solve_equivariance(seed, deg):
    rng = np.random.default_rng(seed)
    src, dst = rng.standard_normal((10, 2)), rng.standard_normal((10, 2))
    Q = rot(deg)
    R = rigid_solve(src, dst).R.data
    R2 = rigid_solve(src @ Q.T, dst @ Q.T).R.data
    assert np.allclose(R2, Q @ R @ Q.T, atol=1e-9)


def test_apply_and_invert_global():
    pts = np.array([[1.0, 0.0]])
    assert np.allclose(apply_global(pts, GlobalTransform.from_numpy(rot(90), [0, 0])).data,
                       [[0.0, 1.0]], atol=1e-15)
    assert np.array_equal(apply_global(pts, GlobalTransform.identity()).data, pts)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-180, 180), st.booleans())
def test_global_roundtrip(seed, deg, mirror):
    rng = np.random.default_rng(seed)
    R = rot(deg) @ (MIRROR_Y if mirror else np.eye(2))
    g = GlobalTransform.from_numpy(R, rng.standard_normal(2))
    pts = rng.standard_normal((15, 2))
    back = apply_global(apply_global(pts, g), invert_global(g)).data
    assert np.abs(back - pts).max() < 1e-12


def test_chamfer_grid_alignment_finds_pose():
    rng = np.random.default_rng(3)
    src = rng.uniform(-0.5, 0.5, (60, 2))
    R = rot(71.5) @ MIRROR_Y
    g = chamfer_global_align(src, src @ R.T + 0.2)
    assert np.allclose(g.R.data, R, atol=1e-12)
    assert g.reflection
