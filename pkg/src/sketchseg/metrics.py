"""Point (P) and component (C) accuracy with granularity masking."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .sketch import LabeledSketch

COMPONENT_THRESHOLD = 0.75


def _names(ls: LabeledSketch) -> np.ndarray:
    """Labels as comparable keys: names when a dictionary exists, else ids."""
    if ls.label_names:
        return np.array([str(ls.label_names.get(int(l), l)) for l in ls.labels], dtype=object)
    return ls.labels.astype(object)


def _pair(pred, truth):
    if isinstance(pred, LabeledSketch) and isinstance(truth, LabeledSketch) \
            and pred.label_names and truth.label_names:
        return _names(pred), _names(truth)
    p = pred.labels if isinstance(pred, LabeledSketch) else np.asarray(pred)
    t = truth.labels if isinstance(truth, LabeledSketch) else np.asarray(truth)
    return p, t


def _mask(mask, n):
    if mask is None:
        return np.zeros(n, dtype=bool)
    mask = np.asarray(mask)
    if mask.dtype == bool:
        return mask
    out = np.zeros(n, dtype=bool)
    out[mask.astype(np.intp)] = True
    return out


def p_metric(pred, truth, mask=None) -> float:
    """Fraction of unmasked points whose predicted label is correct.

    ``mask`` marks excluded points (boolean array or index list).
    """
    p, t = _pair(pred, truth)
    if len(p) != len(t):
        raise ValueError(f"point counts differ: {len(p)} vs {len(t)}")
    keep = ~_mask(mask, len(t))
    if not keep.any():
        raise ValueError("no unmasked points to evaluate")
    return float(np.mean(p[keep] == t[keep]))


def components(stroke_ids, truth_labels) -> list[np.ndarray]:
    """Maximal runs of equal truth label inside one stroke, as index arrays."""
    ids = np.asarray(stroke_ids)
    lab = np.asarray(truth_labels)
    if len(ids) == 0:
        return []
    cut = np.flatnonzero((ids[1:] != ids[:-1]) | (lab[1:] != lab[:-1])) + 1
    return np.split(np.arange(len(ids)), cut)


def c_metric(pred, truth: LabeledSketch, mask=None,
             threshold: float = COMPONENT_THRESHOLD) -> float:
    """Share of truth components with at least ``threshold`` of points correct."""
    p, t = _pair(pred, truth)
    if len(p) != len(t):
        raise ValueError(f"point counts differ: {len(p)} vs {len(t)}")
    m = _mask(mask, len(t))
    comps = [c for c in components(truth.sketch.stroke_ids, truth.labels) if not m[c].all()]
    if not comps:
        raise ValueError("no components to evaluate")
    correct = sum(np.mean(p[c] == t[c]) >= threshold for c in comps)
    return correct / len(comps)


def granularity_mask(truth: LabeledSketch, exemplar: LabeledSketch) -> np.ndarray:
    """Points whose truth label does not occur in the exemplar (excluded from scoring)."""
    if truth.label_names and exemplar.label_names:
        have = {str(exemplar.label_names.get(int(l), l)) for l in np.unique(exemplar.labels)}
        return np.array([k not in have for k in _names(truth)], dtype=bool)
    return ~np.isin(truth.labels, np.unique(exemplar.labels))


@dataclass
class EvalReport:
    p_metric: float
    c_metric: float
    per_sketch: list = field(default_factory=list)  # (p, c, n_masked)
    masked_points: int = 0


def evaluate(preds: list[LabeledSketch], truths: list[LabeledSketch],
             exemplar: LabeledSketch) -> EvalReport:
    rows = []
    for pred, truth in zip(preds, truths, strict=True):
        m = granularity_mask(truth, exemplar)
        rows.append((p_metric(pred, truth, m), c_metric(pred, truth, m), int(m.sum())))
    arr = np.array([r[:2] for r in rows])
    return EvalReport(float(arr[:, 0].mean()), float(arr[:, 1].mean()), rows,
                      sum(r[2] for r in rows))
