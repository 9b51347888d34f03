"""Vector sketch data model: resampling, normalization and rotation jitter."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

DEFAULT_N = 256
AUGMENT_ANGLE = np.pi / 12


@dataclass
class Sketch:
    """Ordered strokes stored flat: ``points`` is (N, 2), ``stroke_ids`` (N,).

    Stroke ids are contiguous and non-decreasing, so stroke ``j`` is the run
    of points whose id equals ``j``.
    """

    points: np.ndarray
    stroke_ids: np.ndarray
    category: str = ""

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        self.stroke_ids = np.asarray(self.stroke_ids, dtype=np.intp).reshape(-1)
        if len(self.points) != len(self.stroke_ids):
            raise ValueError("points and stroke_ids differ in length")
        if len(self.stroke_ids):
            steps = np.diff(self.stroke_ids)
            if self.stroke_ids[0] != 0 or np.any((steps != 0) & (steps != 1)):
                raise ValueError("stroke ids must be contiguous and start at 0")

    @classmethod
    def from_strokes(cls, strokes, category: str = "") -> "Sketch":
        strokes = [np.asarray(s, dtype=np.float64).reshape(-1, 2) for s in strokes]
        if any(len(s) == 0 for s in strokes):
            raise ValueError("empty stroke")
        ids = np.concatenate([np.full(len(s), j) for j, s in enumerate(strokes)]) \
            if strokes else np.zeros(0, dtype=np.intp)
        pts = np.concatenate(strokes) if strokes else np.zeros((0, 2))
        return cls(pts, ids, category)

    @property
    def n_points(self) -> int:
        return len(self.points)

    @property
    def n_strokes(self) -> int:
        return int(self.stroke_ids[-1]) + 1 if len(self.stroke_ids) else 0

    @property
    def strokes(self) -> list[np.ndarray]:
        bounds = np.flatnonzero(np.diff(self.stroke_ids)) + 1
        return np.split(self.points, bounds)

    def with_points(self, points) -> "Sketch":
        return replace(self, points=np.asarray(points, dtype=np.float64))


@dataclass
class LabeledSketch:
    sketch: Sketch
    labels: np.ndarray
    label_names: dict = field(default_factory=dict)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.intp).reshape(-1)
        if len(self.labels) != self.sketch.n_points:
            raise ValueError(
                f"{len(self.labels)} labels for {self.sketch.n_points} points")
        if len(self.labels) and self.labels.min() < 0:
            raise ValueError("negative label")

    @property
    def n_labels(self) -> int:
        if self.label_names:
            return max(len(self.label_names), int(self.labels.max()) + 1)
        return int(self.labels.max()) + 1 if len(self.labels) else 0


@dataclass(frozen=True)
class NormalizationRecord:
    center: tuple
    scale: float

    def inverse(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) / self.scale + np.asarray(self.center)


# -- Ramer-Douglas-Peucker ----------------------------------------------------

def _seg_dist(pts, a, b):
    ab = b - a
    L2 = ab @ ab
    if L2 == 0:
        return np.hypot(*(pts - a).T)
    t = np.clip((pts - a) @ ab / L2, 0.0, 1.0)
    proj = a + t[:, None] * ab
    return np.hypot(*(pts - proj).T)


def rdp_mask(points: np.ndarray, tol: float) -> np.ndarray:
    """Keep-mask of the Ramer-Douglas-Peucker simplification (iterative)."""
    n = len(points)
    keep = np.zeros(n, dtype=bool)
    if n == 0:
        return keep
    keep[0] = keep[-1] = True
    stack = [(0, n - 1)]
    while stack:
        i, j = stack.pop()
        if j - i < 2:
            continue
        d = _seg_dist(points[i + 1:j], points[i], points[j])
        k = int(np.argmax(d))
        if d[k] > tol:
            m = i + 1 + k
            keep[m] = True
            stack.append((i, m))
            stack.append((m, j))
    return keep


def _arclength(stroke):
    if len(stroke) < 2:
        return np.zeros(len(stroke))
    return np.r_[0.0, np.cumsum(np.hypot(*np.diff(stroke, axis=0).T))]


def _point_at(stroke, s_cum, s):
    j = int(np.searchsorted(s_cum, s, side="right")) - 1
    j = min(max(j, 0), len(stroke) - 2)
    seg = s_cum[j + 1] - s_cum[j]
    if seg == 0:
        return stroke[j].copy()
    u = (s - s_cum[j]) / seg
    return stroke[j] + u * (stroke[j + 1] - stroke[j])


def resample(sketch: Sketch, n: int = DEFAULT_N, seed=0) -> Sketch:
    """Resample to exactly ``n`` points, every output point on the input polyline.

    Simplify with RDP (tolerance bisected to the smallest value giving at most
    ``n`` points), then split randomly chosen segments from the longest
    quartile at their arc-length midpoint until ``n`` is reached.
    """
    strokes = sketch.strokes
    if n < len(strokes):
        raise ValueError(f"cannot resample {len(strokes)} strokes to {n} points")
    if any(len(s) == 0 for s in strokes):
        raise ValueError("empty stroke")
    rng = np.random.default_rng(seed)
    total = sum(len(s) for s in strokes)

    if total <= n:
        masks = [np.ones(len(s), dtype=bool) for s in strokes]
    else:
        def count(tol):
            ms = [rdp_mask(s, tol) for s in strokes]
            return ms, sum(int(m.sum()) for m in ms)

        extent = float(np.ptp(sketch.points, axis=0).max()) or 1.0
        lo, hi = 0.0, extent
        masks, c = count(hi)
        while hi - lo > 1e-6 * extent:
            mid = 0.5 * (lo + hi)
            ms, c = count(mid)
            if c <= n:
                hi, masks = mid, ms
            else:
                lo = mid

    s_cums = [_arclength(s) for s in strokes]
    # per stroke: arc-length parameters of the kept points
    params = [list(sc[m]) for sc, m in zip(s_cums, masks)]

    total = sum(len(p) for p in params)
    if total > n:
        # endpoints alone exceed n: drop trailing endpoints of random strokes
        multi = [j for j, p in enumerate(params) if len(p) > 1]
        for j in rng.permutation(multi)[: total - n]:
            params[j].pop()
        total = n

    while total < n:
        segs = [(j, k, params[j][k + 1] - params[j][k])
                for j, p in enumerate(params) for k in range(len(p) - 1)]
        if not segs:
            raise ValueError("sketch has no segments to split")
        lengths = np.array([s[2] for s in segs])
        cand = np.flatnonzero(lengths >= np.quantile(lengths, 0.75))
        j, k, _ = segs[int(rng.choice(cand))]
        params[j].insert(k + 1, 0.5 * (params[j][k] + params[j][k + 1]))
        total += 1

    out = []
    for stroke, sc, p, m in zip(strokes, s_cums, params, masks):
        if len(stroke) == 1:
            out.append(stroke.copy())
            continue
        kept = set(np.flatnonzero(m))
        pts = []
        for s in p:
            # reuse original vertices exactly when the parameter hits one
            hit = np.flatnonzero(sc == s)
            if len(hit) and int(hit[0]) in kept:
                pts.append(stroke[int(hit[0])].copy())
            else:
                pts.append(_point_at(stroke, sc, s))
        out.append(np.array(pts))
    return Sketch.from_strokes(out, sketch.category)


def transfer_labels(raw: LabeledSketch, resampled: Sketch) -> LabeledSketch:
    """Give each resampled point the label of the nearest raw point of its stroke."""
    labels = np.empty(resampled.n_points, dtype=np.intp)
    for j in range(resampled.n_strokes):
        src = np.flatnonzero(raw.sketch.stroke_ids == j)
        dst = np.flatnonzero(resampled.stroke_ids == j)
        d = ((resampled.points[dst, None, :] - raw.sketch.points[None, src, :]) ** 2).sum(-1)
        labels[dst] = raw.labels[src[d.argmin(axis=1)]]
    return LabeledSketch(resampled, labels, dict(raw.label_names))


def preprocess(sketch: Sketch, n: int = DEFAULT_N, seed=0) -> Sketch:
    """Resample to ``n`` points, then normalize into the unit box."""
    return normalize(resample(sketch, n, seed))[0]


def preprocess_labeled(ls: LabeledSketch, n: int = DEFAULT_N, seed=0) -> LabeledSketch:
    out = transfer_labels(ls, resample(ls.sketch, n, seed))
    return LabeledSketch(normalize(out.sketch)[0], out.labels, out.label_names)


def normalize(sketch: Sketch) -> tuple[Sketch, NormalizationRecord]:
    """Isotropic fit of the longer bounding-box side onto [-0.5, 0.5]."""
    pts = sketch.points
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    side = float((hi - lo).max())
    if side == 0:
        raise ValueError("degenerate sketch: all points identical")
    center = 0.5 * (lo + hi)
    scale = 1.0 / side
    rec = NormalizationRecord(tuple(float(c) for c in center), scale)
    return sketch.with_points((pts - center) * scale), rec


def rotate_points(points: np.ndarray, angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return points @ np.array([[c, s], [-s, c]])


def augment_rotate(sketch: Sketch, rng=None, angle: float | None = None,
                   max_angle: float = AUGMENT_ANGLE) -> Sketch:
    """Rotate about the origin by a random angle in [-max_angle, max_angle], renormalize.

    ``rng`` may be a Generator or a seed; ``angle`` overrides the draw.
    """
    if angle is None:
        rng = np.random.default_rng(rng)
        angle = rng.uniform(-max_angle, max_angle)
    if angle == 0:
        return sketch.with_points(sketch.points.copy())
    rotated = sketch.with_points(rotate_points(sketch.points, angle))
    return normalize(rotated)[0]
