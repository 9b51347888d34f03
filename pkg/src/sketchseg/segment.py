"""Point-label head, its loss, inference and stroke-majority refinement."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .keypoints import apply_global, invert_global
from .model import LabelHead, ModelParams, Toggles, deform_pair, encode_exemplar
from .sketch import LabeledSketch, Sketch

PROB_FLOOR = 1e-12


def predict_labels(points, f_strokes_per_point, f_sketch, tau: LabelHead) -> Tensor:
    """Per-point label distribution (N x L)."""
    pts = ad.as_tensor(points)
    n = pts.shape[0]
    glob = ad.gather_rows(ad.as_tensor(f_sketch), np.zeros(n, dtype=np.intp))
    x = ad.concat([pts, ad.as_tensor(f_strokes_per_point), glob], axis=1)
    return ad.softmax_rows(tau.mlp(x))


def segmentation_loss(dist: Tensor, labels) -> Tensor:
    """Summed cross-entropy, probabilities floored at 1e-12."""
    labels = np.asarray(labels, dtype=np.intp)
    onehot = np.zeros(dist.shape)
    onehot[np.arange(len(labels)), labels] = 1.0
    p_true = ad.sum(ad.mul(dist, onehot), axis=1)
    return ad.neg(ad.sum(ad.log(p_true, floor=PROB_FLOOR)))


def stroke_features_per_point(per_stroke: Tensor, stroke_ids, enabled: bool = True) -> Tensor:
    ids = np.asarray(stroke_ids, dtype=np.intp)
    if not enabled:
        return Tensor(np.zeros((len(ids), per_stroke.shape[1])))
    return ad.gather_rows(per_stroke, ids)


def segment(target: Sketch, exemplar: LabeledSketch, params: ModelParams,
            toggles: Toggles = Toggles()) -> LabeledSketch:
    """Label a (resampled, normalized) target from a labeled exemplar.

    The classifier sees the aligned target's points and stroke embeddings and
    the deformed exemplar's sketch embedding. Labels are then carried back to
    the target's own coordinates.
    """
    if exemplar.labels.size == 0:
        raise ValueError("exemplar has no labels")
    ex_sk = exemplar.sketch
    with ad.no_grad():
        ex = encode_exemplar(ex_sk.points, ex_sk.stroke_ids, params)
        res = deform_pair(target.points, target.stroke_ids, ex, params, toggles)
        dist = predict_labels(
            res.aligned_target,
            stroke_features_per_point(res.emb_aligned.per_stroke, target.stroke_ids,
                                      toggles.stroke_feature),
            res.emb_deformed.sketch, params.tau)
        restored = apply_global(res.aligned_target, invert_global(res.transform)).data
    labels = dist.data.argmax(axis=1)
    out = Sketch(restored, target.stroke_ids.copy(), target.category)
    return LabeledSketch(out, labels, dict(exemplar.label_names))


def refine_by_stroke(result: LabeledSketch) -> LabeledSketch:
    """Every point takes its stroke's most frequent label (smallest id on ties)."""
    labels = result.labels.copy()
    ids = result.sketch.stroke_ids
    for j in np.unique(ids):
        sel = ids == j
        labels[sel] = np.bincount(labels[sel]).argmax()
    return LabeledSketch(result.sketch, labels, dict(result.label_names))
