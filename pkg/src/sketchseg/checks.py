"""Finite-difference checks of every primitive and of the full training loss."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .deform import StrokeTransforms, constraint_losses
from .keypoints import chamfer, rigid_solve
from .model import ModelParams
from .sketch import LabeledSketch, Sketch
from .train import TrainConfig, joint_loss

JOINT_SAMPLES = 8  # coordinates per parameter tensor


def _weighted(out: Tensor, w: np.ndarray) -> Tensor:
    return ad.sum(ad.mul(out, w))


def primitive_cases(rng: np.random.Generator):
    """(name, f, x) triples: scalar f of a single input tensor x."""
    a = rng.uniform(-1, 1, (4, 3))
    b = rng.uniform(-1, 1, (4, 3))
    pos = rng.uniform(0.2, 1.5, (4, 3))
    m = rng.uniform(-1, 1, (3, 5))
    w43 = rng.standard_normal((4, 3))
    idx = np.array([0, 2, 2, 1, 0, 3])
    seg = np.array([1, 0, 1, 1])
    cases = [
        ("add", lambda x: _weighted(ad.forward_op("add", x, Tensor(b)), w43), a),
        ("add.broadcast", lambda x: _weighted(ad.forward_op("add", Tensor(b), x), w43),
         a[:1]),
        ("sub", lambda x: _weighted(ad.forward_op("sub", Tensor(b), x), w43), a),
        ("mul", lambda x: _weighted(ad.forward_op("mul", x, Tensor(b)), w43), a),
        ("matmul.left", lambda x: ad.sum(ad.square(ad.forward_op("matmul", x, Tensor(m)))), a),
        ("matmul.right", lambda x: ad.sum(ad.square(ad.forward_op("matmul", Tensor(a), x))), m),
        ("relu", lambda x: _weighted(ad.forward_op("relu", x), w43), a),
        ("clamp_min_zero", lambda x: _weighted(ad.forward_op("clamp_min_zero", x), w43), a),
        ("softmax_rows", lambda x: _weighted(ad.forward_op("softmax_rows", x), w43), a),
        ("max_over_rows", lambda x: _weighted(ad.forward_op("max_over_rows", x), w43[:1]), a),
        ("concat", lambda x: _weighted(ad.forward_op("concat", x, Tensor(b), axis=1),
                                      np.c_[w43, w43[:, ::-1]]), a),
        ("gather_rows", lambda x: _weighted(ad.forward_op("gather_rows", x, idx),
                                           np.repeat(w43, 2, axis=0)[:6]), a),
        ("scatter_max", lambda x: _weighted(ad.forward_op("scatter_max", x, seg, 2), w43[:2]), a),
        ("sum", lambda x: ad.sum(ad.mul(ad.forward_op("sum", x, axis=0), w43[0])), a),
        ("mean", lambda x: ad.sum(ad.mul(ad.forward_op("mean", x, axis=1), w43[:, 0])), a),
        ("square", lambda x: _weighted(ad.forward_op("square", x), w43), a),
        ("sqrt", lambda x: _weighted(ad.forward_op("sqrt", x), w43), pos),
        ("atan2.y", lambda x: _weighted(ad.forward_op("atan2", x, Tensor(pos)), w43), a),
        ("atan2.x", lambda x: _weighted(ad.forward_op("atan2", Tensor(pos), x), w43), a),
        ("sin", lambda x: _weighted(ad.forward_op("sin", x), w43), a),
        ("cos", lambda x: _weighted(ad.forward_op("cos", x), w43), a),
    ]
    pts = rng.uniform(-0.5, 0.5, (10, 2))
    other = rng.uniform(-0.5, 0.5, (7, 2))
    theta = 0.7
    rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    moved = pts @ rot.T + 0.1 + 0.01 * rng.standard_normal(pts.shape)
    raw = np.c_[rng.uniform(-0.6, 0.6, (3, 4)), rng.uniform(-0.3, 0.3, (3, 2)),
                rng.uniform(-0.7, 1.2, (3, 2))]

    def constraints(x):
        tr = StrokeTransforms(ad.index(x, (slice(None), slice(0, 4))),
                              ad.index(x, (slice(None), slice(4, 6))),
                              ad.index(x, (slice(None), slice(6, 8))))
        total = None
        for v in constraint_losses(tr).values():
            total = ad.sum(v) if total is None else ad.add(total, ad.sum(v))
        return total

    cases += [
        ("chamfer", lambda x: chamfer(x, Tensor(other)), pts),
        ("rigid_solve", lambda x: _weighted(rigid_solve(x, Tensor(moved)).R, np.eye(2) + 0.3), pts),
        ("constraints", constraints, raw),
    ]
    return cases


def toy_instance(seed: int = 0):
    """Two strokes of eight points each, plus a differently posed target."""
    rng = np.random.default_rng(seed)
    t = np.linspace(0, 1, 8)
    arc = np.c_[0.3 * np.cos(3 * t), 0.3 * np.sin(3 * t) + 0.1]
    bar = np.c_[0.05 * t, -0.45 * t - 0.1]
    ex = Sketch.from_strokes([arc, bar + 0.01 * rng.standard_normal(bar.shape)], "toy")
    exemplar = LabeledSketch(ex, np.repeat([0, 1], 8), {0: "arc", 1: "bar"})
    c, s = np.cos(0.4), np.sin(0.4)
    tgt_pts = (ex.points + 0.02 * rng.standard_normal(ex.points.shape)) @ np.array([[c, s], [-s, c]])
    target = Sketch(tgt_pts, ex.stroke_ids, "toy")
    return exemplar, target


def joint_loss_checks(seed: int = 0, samples: int = JOINT_SAMPLES):
    exemplar, target = toy_instance(seed)
    params = ModelParams(2, seed=seed, n_keypoints=16)
    config = TrainConfig(seed=seed, n_keypoints=16)
    rng = np.random.default_rng(seed)
    # the deformation head starts at zero, which would hide its inner gradients
    last = params.phi.mlp.layers[-1]
    last.weight.data = 0.01 * rng.standard_normal(last.weight.shape)
    last.bias.data = 0.01 * rng.standard_normal(last.bias.shape)
    out = []
    for name, p in params.named_parameters():
        err = ad.grad_check(
            lambda _: joint_loss([target], exemplar, params, config, True, seed)[0],
            p, samples=min(samples, p.data.size), rng=rng)
        out.append((f"joint_loss[{name}]", err))
    return out


def gradcheck_report(seed: int = 0) -> list[tuple[str, float]]:
    rng = np.random.default_rng(seed)
    rows = [(name, ad.grad_check(f, Tensor(x.copy()))) for name, f, x in primitive_cases(rng)]
    return rows + joint_loss_checks(seed)
