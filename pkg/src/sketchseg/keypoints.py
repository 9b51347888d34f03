"""Chamfer distance, the keypoint head and rigid sketch-level alignment."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import autodiff as ad
from .autodiff import Tensor
from .nn import MLP

N_KEYPOINTS = 256
KEYPOINT_HIDDEN = 128

_FLIP_X = np.array([[-1.0], [1.0]]).T  # row-vector mask for x -> -x


def _nearest(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    dx = np.subtract.outer(a[:, 0], b[:, 0])
    dy = np.subtract.outer(a[:, 1], b[:, 1])
    return (dx * dx + dy * dy).argmin(axis=1)


def chamfer(a, b) -> Tensor:
    """Symmetric mean squared nearest-neighbour distance.

    Differentiable in both coordinate sets; the assignment is held constant.
    """
    a, b = ad.as_tensor(a), ad.as_tensor(b)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("chamfer: empty point set")
    ab = _nearest(a.data, b.data)
    ba = _nearest(b.data, a.data)
    da = ad.mean(ad.sum(ad.square(ad.sub(a, ad.gather_rows(b, ab))), axis=1))
    db = ad.mean(ad.sum(ad.square(ad.sub(b, ad.gather_rows(a, ba))), axis=1))
    return ad.add(da, db)


def chamfer_np(a: np.ndarray, b: np.ndarray) -> float:
    with ad.no_grad():
        return float(chamfer(a, b).data)


class KeypointHead:
    """Shared per-point MLP producing one logit per keypoint."""

    def __init__(self, rng, feature_dim: int = 128, n_keypoints: int = N_KEYPOINTS,
                 hidden: int = KEYPOINT_HIDDEN):
        self.mlp = MLP([feature_dim, hidden, hidden, n_keypoints], rng)

    @property
    def n_keypoints(self) -> int:
        return self.mlp.widths[-1]

    def named_parameters(self, prefix=""):
        yield from self.mlp.named_parameters(prefix)


@dataclass
class Keypoints:
    """``prob_t`` is the probability map stored keypoint-major (M x N)."""

    prob_t: Tensor
    coords: Tensor

    @property
    def prob(self) -> np.ndarray:
        return self.prob_t.data.T


def predict_keypoints(per_point: Tensor, coords, omega: KeypointHead) -> Keypoints:
    """Softmax over points per keypoint column; keypoints are weighted point means."""
    logits = omega.mlp(per_point)
    prob_t = ad.softmax_rows(ad.transpose(logits))
    return Keypoints(prob_t, ad.matmul(prob_t, ad.as_tensor(coords)))


def keypoint_anchor_loss(points, kps) -> Tensor:
    if isinstance(kps, Keypoints):
        kps = kps.coords
    return chamfer(points, kps)


# -- rigid alignment ---------------------------------------------------------

@dataclass
class GlobalTransform:
    """x -> R x + t on row vectors, i.e. X R^T + t."""

    R: Tensor
    t: Tensor  # 1 x 2

    @property
    def reflection(self) -> bool:
        return bool(np.linalg.det(self.R.data) < 0)

    def numpy(self) -> tuple[np.ndarray, np.ndarray]:
        return self.R.data.copy(), self.t.data.reshape(2).copy()

    @classmethod
    def identity(cls) -> "GlobalTransform":
        return cls(Tensor(np.eye(2)), Tensor(np.zeros((1, 2))))

    @classmethod
    def from_numpy(cls, R, t) -> "GlobalTransform":
        return cls(Tensor(np.asarray(R, float)), Tensor(np.asarray(t, float).reshape(1, 2)))


def _cross_dot(a: Tensor, b: Tensor) -> tuple[Tensor, Tensor]:
    ax, ay = ad.index(a, (slice(None), slice(0, 1))), ad.index(a, (slice(None), slice(1, 2)))
    bx, by = ad.index(b, (slice(None), slice(0, 1))), ad.index(b, (slice(None), slice(1, 2)))
    dot = ad.sum(ad.add(ad.mul(ax, bx), ad.mul(ay, by)))
    cross = ad.sum(ad.sub(ad.mul(ax, by), ad.mul(ay, bx)))
    return cross, dot


def rigid_solve(src, dst) -> GlobalTransform:
    """Least-squares rotation-or-reflection plus translation taking src onto dst.

    Both candidates are solved in closed form (rotation angle via atan2 of the
    summed cross and dot products, the reflection by flipping the source x-axis
    first); the one with the smaller residual wins, ties going to the rotation.
    The winning branch is differentiable; the choice itself is not.
    """
    src, dst = ad.as_tensor(src), ad.as_tensor(dst)
    if src.shape != dst.shape or src.data.ndim != 2 or src.shape[1] != 2:
        raise ad.ShapeError(f"rigid_solve: shapes {src.shape} and {dst.shape}")
    if src.shape[0] < 2:
        raise ValueError("rigid_solve: need at least two correspondences")
    mu_s = ad.mean(src, axis=0, keepdims=True)
    mu_d = ad.mean(dst, axis=0, keepdims=True)
    a = ad.sub(src, mu_s)
    b = ad.sub(dst, mu_d)
    if not np.any(np.abs(a.data) > 1e-12 * max(1.0, np.abs(src.data).max())):
        raise ValueError("rigid_solve: source keypoints coincide")

    an, bn = a.data, b.data
    dot = (an * bn).sum()
    cross = (an[:, 0] * bn[:, 1] - an[:, 1] * bn[:, 0]).sum()
    dot_f = (-an[:, 0] * bn[:, 0] + an[:, 1] * bn[:, 1]).sum()
    cross_f = (-an[:, 0] * bn[:, 1] - an[:, 1] * bn[:, 0]).sum()
    reflect = np.hypot(dot_f, cross_f) > np.hypot(dot, cross)

    if reflect:
        a = ad.mul(a, _FLIP_X)
    cross_t, dot_t = _cross_dot(a, b)
    theta = ad.atan2(cross_t, dot_t)
    c = ad.reshape(ad.cos(theta), (1, 1))
    s = ad.reshape(ad.sin(theta), (1, 1))
    if reflect:
        R = ad.concat([ad.concat([ad.neg(c), ad.neg(s)], axis=1),
                       ad.concat([ad.neg(s), c], axis=1)], axis=0)
    else:
        R = ad.concat([ad.concat([c, ad.neg(s)], axis=1),
                       ad.concat([s, c], axis=1)], axis=0)
    t = ad.sub(mu_d, ad.matmul(mu_s, ad.transpose(R)))
    return GlobalTransform(R, t)


def alignment_residual(src, dst, g: GlobalTransform) -> float:
    src = np.asarray(src.data if isinstance(src, Tensor) else src)
    dst = np.asarray(dst.data if isinstance(dst, Tensor) else dst)
    R, t = g.numpy()
    return float(((src @ R.T + t - dst) ** 2).sum(1).mean())


def apply_global(points, g: GlobalTransform) -> Tensor:
    return ad.add(ad.matmul(ad.as_tensor(points), ad.transpose(g.R)), g.t)


def invert_global(g: GlobalTransform) -> GlobalTransform:
    R, t = g.numpy()
    return GlobalTransform.from_numpy(R.T, -(R.T @ t))


def chamfer_global_align(src: np.ndarray, dst: np.ndarray, n_angles: int = 720) -> GlobalTransform:
    """Grid search over rotations and reflections, translation by mean matching.

    Returns the candidate minimising Chamfer(R src + t, dst); constant transform.
    Both Chamfer terms are nearest-neighbour queries against a fixed tree:
    moved source points against the centred target, and the target rotated
    back against the centred source.
    """
    src = np.asarray(src.data if isinstance(src, Tensor) else src, dtype=float)
    dst = np.asarray(dst.data if isinstance(dst, Tensor) else dst, dtype=float)
    mu_s, mu_d = src.mean(0), dst.mean(0)
    a, b = src - mu_s, dst - mu_d
    ang = 2 * np.pi * np.arange(n_angles) / n_angles
    c, s = np.cos(ang), np.sin(ang)
    rots = np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)  # A x 2 x 2
    flip = np.diag([-1.0, 1.0])
    tree_b = cKDTree(b)
    best, best_cost = None, np.inf
    for refl in (False, True):
        a_k = a @ flip if refl else a  # R diag(-1, 1) a == R (flipped a)
        tree_a = cKDTree(a_k)
        fwd = tree_b.query(np.einsum("kij,nj->kni", rots, a_k).reshape(-1, 2))[0]
        back = tree_a.query(np.einsum("kji,nj->kni", rots, b).reshape(-1, 2))[0]
        cost = (fwd.reshape(n_angles, -1) ** 2).mean(1) + (back.reshape(n_angles, -1) ** 2).mean(1)
        i = int(np.argmin(cost))
        if cost[i] < best_cost:
            best_cost = cost[i]
            best = rots[i] @ flip if refl else rots[i]
    return GlobalTransform.from_numpy(best, mu_d - best @ mu_s)
