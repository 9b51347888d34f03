"""Per-stroke constrained affine deformation of the exemplar."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .keypoints import chamfer
from .nn import MLP

STROKE_HIDDEN = 256
COS_30 = np.sqrt(3.0) / 2.0
SIN_30 = 0.5
SCALE_RANGE = (0.5, 2.0)
CONSTRAINTS = ("orth", "rot", "sigma", "trans")

_IDENTITY = np.array([[1.0, 0.0, 0.0, 1.0]])


class StrokeHead:
    """Maps [F_sketch(target), F_sketch(exemplar), F_stroke(exemplar, j)] to 8 numbers.

    The last layer starts at zero, so training begins from the identity warp.
    """

    def __init__(self, rng, feature_dim: int = 128, hidden: int = STROKE_HIDDEN):
        self.mlp = MLP([3 * feature_dim, hidden, hidden, 8], rng, zero_last=True)

    def named_parameters(self, prefix=""):
        yield from self.mlp.named_parameters(prefix)


@dataclass
class StrokeTransforms:
    """Batched per-stroke transforms: R rows are (r11, r12, r21, r22)."""

    R: Tensor      # S x 4
    t: Tensor      # S x 2
    sigma: Tensor  # S x 2

    def __len__(self):
        return self.R.shape[0]

    @classmethod
    def from_numpy(cls, R, t, sigma) -> "StrokeTransforms":
        return cls(Tensor(np.asarray(R, float).reshape(-1, 4)),
                   Tensor(np.asarray(t, float).reshape(-1, 2)),
                   Tensor(np.asarray(sigma, float).reshape(-1, 2)))

    @classmethod
    def identity(cls, n: int) -> "StrokeTransforms":
        return cls.from_numpy(np.repeat(_IDENTITY, n, 0), np.zeros((n, 2)), np.ones((n, 2)))

    def matrices(self) -> np.ndarray:
        return self.R.data.reshape(-1, 2, 2)

    def angles(self) -> np.ndarray:
        """Rotation angle (degrees) of the nearest orthogonal matrix per stroke."""
        out = []
        for m in self.matrices():
            u, _, vt = np.linalg.svd(m)
            q = u @ vt
            out.append(np.degrees(np.arctan2(q[1, 0], q[0, 0])))
        return np.array(out)


def decode(raw: Tensor) -> StrokeTransforms:
    R = ad.add(ad.index(raw, (slice(None), slice(0, 4))), _IDENTITY)
    t = ad.index(raw, (slice(None), slice(4, 6)))
    sigma = ad.add(ad.index(raw, (slice(None), slice(6, 8))), 1.0)
    return StrokeTransforms(R, t, sigma)


def predict_stroke_transforms(f_target_sketch: Tensor, f_exemplar_sketch: Tensor,
                              f_exemplar_strokes: Tensor, phi: StrokeHead) -> StrokeTransforms:
    n = f_exemplar_strokes.shape[0]
    rows = np.zeros(n, dtype=np.intp)
    x = ad.concat([ad.gather_rows(f_target_sketch, rows),
                   ad.gather_rows(f_exemplar_sketch, rows),
                   f_exemplar_strokes], axis=1)
    return decode(phi.mlp(x))


def _col(x: Tensor, j: int) -> Tensor:
    return ad.index(x, (slice(None), slice(j, j + 1)))


def apply_stroke_transforms(points, stroke_ids, tr: StrokeTransforms) -> Tensor:
    """e -> R diag(sigma) e + t with each point using its stroke's transform."""
    ids = np.asarray(stroke_ids, dtype=np.intp)
    n_strokes = int(ids[-1]) + 1 if len(ids) else 0
    if n_strokes != len(tr):
        raise ValueError(f"{len(tr)} transforms for {n_strokes} strokes")
    p = ad.as_tensor(points)
    scaled = ad.mul(p, ad.gather_rows(tr.sigma, ids))
    R = ad.gather_rows(tr.R, ids)
    t = ad.gather_rows(tr.t, ids)
    sx, sy = _col(scaled, 0), _col(scaled, 1)
    x = ad.add(ad.add(ad.mul(_col(R, 0), sx), ad.mul(_col(R, 1), sy)), _col(t, 0))
    y = ad.add(ad.add(ad.mul(_col(R, 2), sx), ad.mul(_col(R, 3), sy)), _col(t, 1))
    return ad.concat([x, y], axis=1)


def _hinge_range(v: Tensor, lo: float, hi: float) -> Tensor:
    return ad.add(ad.clamp_min_zero(ad.sub(lo, v)), ad.clamp_min_zero(ad.sub(v, hi)))


def constraint_losses(tr: StrokeTransforms) -> dict[str, Tensor]:
    """Per-stroke soft constraints, each an S x 1 tensor.

    orth: squared Frobenius norm of I - R R^T; rot: r11, r22 in [cos 30, 1] and
    r12, r21 in [-sin 30, sin 30]; sigma: both scales in [0.5, 2]; trans: |t|.
    """
    r11, r12, r21, r22 = (_col(tr.R, j) for j in range(4))
    a = ad.add(ad.square(r11), ad.square(r12))
    b = ad.add(ad.mul(r11, r21), ad.mul(r12, r22))
    d = ad.add(ad.square(r21), ad.square(r22))
    orth = ad.add(ad.add(ad.square(ad.sub(1.0, a)), ad.mul(2.0, ad.square(b))),
                  ad.square(ad.sub(1.0, d)))
    rot = _hinge_range(r11, COS_30, 1.0)
    rot = ad.add(rot, _hinge_range(r22, COS_30, 1.0))
    rot = ad.add(rot, _hinge_range(r12, -SIN_30, SIN_30))
    rot = ad.add(rot, _hinge_range(r21, -SIN_30, SIN_30))
    sig = ad.sum(_hinge_range(tr.sigma, *SCALE_RANGE), axis=1, keepdims=True)
    trans = ad.sqrt(ad.sum(ad.square(tr.t), axis=1, keepdims=True))
    return {"orth": orth, "rot": rot, "sigma": sig, "trans": trans}


def keypoint_mse(ka, kb) -> Tensor:
    return ad.mean(ad.sum(ad.square(ad.sub(ka, kb)), axis=1))


def stroke_level_loss(deformed, aligned_target, kp_deformed, kp_target,
                      tr: StrokeTransforms, beta: float, gamma: float,
                      drop=frozenset()) -> tuple[Tensor, dict]:
    """beta * Chamfer + gamma * keypoint MSE + gamma * mean stroke constraints.

    Returns the total and its components; constraint names in ``drop`` are
    left out entirely.
    """
    cd = chamfer(deformed, aligned_target)
    mse = keypoint_mse(kp_deformed, kp_target)
    parts = {"chamfer": cd, "kp_mse": mse}
    total = ad.add(ad.mul(beta, cd), ad.mul(gamma, mse))
    cons = constraint_losses(tr)
    kept = [cons[k] for k in CONSTRAINTS if k not in drop]
    for k in CONSTRAINTS:
        parts[k] = ad.mean(cons[k])
    if kept:
        acc = kept[0]
        for c in kept[1:]:
            acc = ad.add(acc, c)
        total = ad.add(total, ad.mul(gamma, ad.mean(acc)))
    return total, parts
