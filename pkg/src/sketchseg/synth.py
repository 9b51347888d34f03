"""Procedural toy categories with per-stroke ground-truth labels."""
from __future__ import annotations

import numpy as np

from .sketch import LabeledSketch, Sketch, preprocess, rotate_points

KINDS = ("lollipop", "arrow", "snowman")
PART_NAMES = {
    "lollipop": ("candy", "stick"),
    "arrow": ("shaft", "head", "tail"),
    "snowman": ("body", "head", "arms", "hat"),
}


def _circle(rng, center, radius, n=None):
    n = int(rng.integers(24, 40)) if n is None else n
    start = rng.uniform(0, 2 * np.pi)
    sweep = 2 * np.pi * rng.uniform(1.0, 1.08) * rng.choice([-1, 1])
    a = start + sweep * np.linspace(0, 1, n)
    r = radius * (1 + 0.03 * rng.standard_normal(n))
    return np.asarray(center) + np.c_[np.cos(a), np.sin(a)] * r[:, None]


def _line(rng, p, q, n=None, wobble=0.01):
    n = int(rng.integers(2, 6)) if n is None else n
    u = np.linspace(0, 1, n)[:, None]
    pts = np.asarray(p) + u * (np.asarray(q) - np.asarray(p))
    if n > 2:
        pts[1:-1] += wobble * rng.standard_normal((n - 2, 2))
    return pts


def _lollipop(rng):
    r = rng.uniform(0.22, 0.3)
    cy = rng.uniform(0.25, 0.35)
    candy = _circle(rng, (rng.normal(0, 0.02), cy), r)
    x0 = rng.normal(0, 0.02)
    stick = _line(rng, (x0, cy - r), (x0 + rng.normal(0, 0.04), -0.7 * rng.uniform(0.9, 1.1)))
    return [(candy, 0), (stick, 1)]


def _arrow(rng):
    length = rng.uniform(0.9, 1.2)
    tip = np.array([length / 2, rng.normal(0, 0.02)])
    tail = np.array([-length / 2, rng.normal(0, 0.02)])
    shaft = _line(rng, tail, tip, int(rng.integers(3, 8)))
    h = rng.uniform(0.15, 0.25)
    spread = rng.uniform(0.1, 0.18)
    head = np.array([tip + (-h, spread), tip, tip + (-h, -spread)])
    strokes = [(shaft, 0), (head + 0.005 * rng.standard_normal(head.shape), 1)]
    if rng.random() < 0.5:
        f = rng.uniform(0.08, 0.14)
        feather = np.array([tail + (f, spread * 0.8), tail, tail + (f, -spread * 0.8)])
        strokes.append((feather, 2))
    return strokes


def _snowman(rng):
    rb = rng.uniform(0.28, 0.34)
    rh = rng.uniform(0.15, 0.2)
    body = _circle(rng, (0, -0.3), rb)
    head = _circle(rng, (rng.normal(0, 0.02), -0.3 + rb + rh * 0.95), rh)
    strokes = [(body, 0), (head, 1)]
    if rng.random() < 0.7:
        y = -0.3 + rb * 0.5
        strokes.append((_line(rng, (-rb * 0.9, y), (-rb * 1.8, y + 0.15)), 2))
        strokes.append((_line(rng, (rb * 0.9, y), (rb * 1.8, y + 0.15)), 2))
    if rng.random() < 0.5:
        top = -0.3 + rb + 2 * rh * 0.95
        w = rh * 0.8
        hat = np.array([(-w, top), (-w * 0.7, top + 0.2), (w * 0.7, top + 0.2), (w, top)])
        strokes.append((hat, 3))
    return strokes


_MAKERS = {"lollipop": _lollipop, "arrow": _arrow, "snowman": _snowman}


def random_pose(rng, max_rotation: float = np.pi, reflect_prob: float = 0.5):
    angle = rng.uniform(-max_rotation, max_rotation)
    reflect = bool(rng.random() < reflect_prob)
    return angle, reflect


def generate(kind: str, count: int, seed: int, max_rotation: float = np.pi,
             reflect_prob: float = 0.5, quantize: bool = True):
    """Raw sketches (QuickDraw-like 0..255 coordinates) with per-stroke label ids.

    Returns a list of ``(strokes, stroke_labels)`` with strokes as (n, 2) arrays.
    """
    if kind not in _MAKERS:
        raise ValueError(f"unknown kind {kind!r}; expected one of {KINDS}")
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng([seed, KINDS.index(kind)])
    out = []
    for _ in range(count):
        parts = _MAKERS[kind](rng)
        order = rng.permutation(len(parts))
        parts = [parts[i] for i in order]
        angle, reflect = random_pose(rng, max_rotation, reflect_prob)
        strokes = []
        for pts, _ in parts:
            p = pts * np.array([-1.0, 1.0]) if reflect else pts
            strokes.append(rotate_points(p, angle))
        allp = np.concatenate(strokes)
        lo, hi = allp.min(0), allp.max(0)
        scale = 255.0 / (hi - lo).max()
        strokes = [(s - lo) * scale for s in strokes]
        if quantize:
            strokes = [_dedupe(np.round(s)) for s in strokes]
        out.append((strokes, [lab for _, lab in parts]))
    return out


def _dedupe(s):
    keep = np.r_[True, np.any(np.diff(s, axis=0) != 0, axis=1)]
    return s[keep]


def prepare(strokes, stroke_labels, kind: str, n: int = 256, seed: int = 0) -> LabeledSketch:
    """Resample + normalize a raw sketch and broadcast stroke labels to points."""
    sk = preprocess(Sketch.from_strokes(strokes, kind), n, seed)
    labels = np.asarray(stroke_labels)[sk.stroke_ids]
    names = dict(enumerate(PART_NAMES[kind]))
    return LabeledSketch(sk, labels, names)


def toy_dataset(kind: str, count: int, seed: int, n: int = 256, **kw) -> list[LabeledSketch]:
    return [prepare(s, l, kind, n, seed=sketch_seed(seed, i))
            for i, (s, l) in enumerate(generate(kind, count, seed, **kw))]


def sketch_seed(seed: int, index: int) -> int:
    """Resampling seed of the ``index``-th sketch of a dataset seeded with ``seed``."""
    return seed * 100003 + index


def synth_category(kind: str, count: int, seed: int, out_dir, n_points: int = 256,
                   n_exemplars: int = 1, max_rotation: float = np.pi,
                   reflect_prob: float = 0.5):
    """Write a synthetic category to ``out_dir`` and return its manifest.

    The first ``n_exemplars`` sketches become labeled exemplars; the rest are
    the unlabeled targets, with their ground truth kept in a separate file.
    """
    from pathlib import Path

    from .formats import DatasetManifest, write_labels, write_ndjson

    if count < n_exemplars + 1:
        raise ValueError(f"count must be at least {n_exemplars + 1}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    raw = generate(kind, count, seed, max_rotation, reflect_prob)
    names = PART_NAMES[kind]
    items = [LabeledSketch(Sketch.from_strokes(s, kind),
                           np.repeat(labs, [len(p) for p in s]),
                           dict(enumerate(names))) for s, labs in raw]
    ex_files = []
    for i in range(n_exemplars):
        sk_file, lab_file = f"exemplar{i}.ndjson", f"exemplar{i}.labels"
        write_ndjson(out / sk_file, [items[i].sketch])
        write_labels(out / lab_file, [items[i]], per_stroke=True)
        ex_files.append((sk_file, lab_file))
    targets = items[n_exemplars:]
    write_ndjson(out / "sketches.ndjson", [t.sketch for t in targets])
    write_labels(out / "truth.labels", targets, per_stroke=True)
    m = DatasetManifest(kind, "sketches.ndjson", ex_files[0][0], ex_files[0][1],
                        "truth.labels", seed, n_points, ex_files[1:], root=out)
    m.save(out / "manifest.json")
    return m
