"""Sketch graph construction and the residual edge-convolution encoder."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from . import autodiff as ad
from .autodiff import Tensor
from .nn import Linear
from .sketch import Sketch

K_NEIGHBORS = 4
DILATIONS = (1, 4, 8, 16)
STOCHASTIC_EPSILON = 0.2
HIDDEN = 64
FEATURE_DIM = 128


@dataclass
class EdgeSet:
    """Directed edges ``src[e] -> dst[e]``; a node aggregates over its in-edges."""

    src: np.ndarray
    dst: np.ndarray
    layer_index: int = 0

    def __len__(self):
        return len(self.src)

    def pairs(self) -> set:
        return set(zip(self.src.tolist(), self.dst.tolist()))

    def union(self, other: "EdgeSet", n: int) -> "EdgeSet":
        key = np.unique(np.r_[self.dst * n + self.src, other.dst * n + other.src])
        return EdgeSet(key % n, key // n, self.layer_index)


def pairwise_sq_distances(x: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances; exact differences for low-dimensional input."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1] <= 3:
        return cdist(x, x, "sqeuclidean")
    sq = (x ** 2).sum(1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    return np.maximum(d2, 0.0)


def ranked_neighbors(x: np.ndarray, m: int) -> np.ndarray:
    """Row i: the ``m`` nearest other nodes, by (distance, index) ascending."""
    n = len(x)
    d = pairwise_sq_distances(x)
    np.fill_diagonal(d, np.inf)
    m = min(m, n - 1)
    if m <= 0:
        return np.zeros((n, 0), dtype=np.intp)
    if m >= n - 1:
        return np.argsort(d, axis=1, kind="stable")[:, :m]
    out = np.empty((n, m), dtype=np.intp)
    # rows whose m-th distance is unique: the m nearest are exactly the
    # entries at or below it, and row-major nonzero lists them by index
    thr = np.partition(d, m - 1, axis=1)[:, m - 1]
    within = d <= thr[:, None]
    clean = np.count_nonzero(within, axis=1) == m
    if clean.all():
        clean = slice(None)
    else:
        bad = ~clean
        out[bad] = np.argsort(d[bad], axis=1, kind="stable")[:, :m]
        within, d = within[clean], d[clean]
    if d.shape[0]:
        cols = (np.flatnonzero(within) % n).reshape(-1, m)
        cand = np.take_along_axis(d, cols, axis=1)
        order = np.argsort(cand, axis=1)
        srt = np.take_along_axis(cand, order, axis=1)
        # equal distances must keep index order, which quicksort does not promise
        tied = (srt[:, 1:] == srt[:, :-1]).any(axis=1)
        if tied.any():
            order[tied] = np.argsort(cand[tied], axis=1, kind="stable")
        out[clean] = np.take_along_axis(cols, order, axis=1)
    return out


def dilated_knn(x, k: int = K_NEIGHBORS, d: int = 1, epsilon: float = 0.0,
                rng=None, layer_index: int = 0) -> EdgeSet:
    """Dilated k-NN edges into every node.

    Take the k*d nearest candidates and keep ranks d, 2d, ..., kd. With
    probability ``epsilon`` per node, k candidates are drawn uniformly instead.
    With fewer than k*d candidates the dilation shrinks to fit.
    """
    if k <= 0 or d <= 0:
        raise ValueError(f"dilated_knn: k and d must be positive (k={k}, d={d})")
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("dilated_knn: epsilon outside [0, 1]")
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    n = len(x)
    cand = ranked_neighbors(x, k * d)
    c = cand.shape[1]
    if c == 0:
        return EdgeSet(np.zeros(0, np.intp), np.zeros(0, np.intp), layer_index)
    if c >= k:
        step = d if c >= k * d else max(1, c // k)
        chosen = cand[:, step - 1:step * k:step][:, :k]
    else:
        chosen = cand
    if epsilon > 0:
        rng = np.random.default_rng(rng)
        flip = np.flatnonzero(rng.random(n) < epsilon)
        kk = min(k, c)
        if len(flip):
            # a uniform k-subset per node: the ranks of the k smallest of c uniforms
            pick = np.sort(np.argsort(rng.random((len(flip), c)), axis=1)[:, :kk], axis=1)
            chosen[flip] = np.take_along_axis(cand[flip], pick, axis=1)
    dst = np.repeat(np.arange(n), chosen.shape[1])
    return EdgeSet(chosen.reshape(-1).astype(np.intp), dst, layer_index)


def static_edges(stroke_ids) -> EdgeSet:
    """Both directions between consecutive points of a stroke; self-edge for lone points."""
    if isinstance(stroke_ids, Sketch):
        stroke_ids = stroke_ids.stroke_ids
    ids = np.asarray(stroke_ids)
    n = len(ids)
    i = np.flatnonzero(ids[:-1] == ids[1:])
    counts = np.bincount(ids) if n else np.zeros(0, int)
    lone = np.flatnonzero(counts[ids] == 1) if n else np.zeros(0, int)
    src = np.r_[i, i + 1, lone].astype(np.intp)
    dst = np.r_[i + 1, i, lone].astype(np.intp)
    key = np.unique(dst * n + src)
    return EdgeSet(key % n, key // n)


@dataclass
class Embeddings:
    per_point: Tensor
    per_stroke: Tensor
    sketch: Tensor


class EdgeConv:
    """h_i' = max over in-edges j of relu(W [h_i, h_j - h_i] + b)."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        self.n_in = n_in
        self.lin = Linear(2 * n_in, n_out, rng)

    def __call__(self, h: Tensor, edges: EdgeSet) -> Tensor:
        w = self.lin.weight
        w_self = ad.index(w, slice(0, self.n_in))
        w_rel = ad.index(w, slice(self.n_in, None))
        a = ad.matmul(h, ad.sub(w_self, w_rel))
        b = ad.matmul(h, w_rel)
        msg = ad.add(ad.add(ad.gather_rows(a, edges.dst), ad.gather_rows(b, edges.src)),
                     self.lin.bias)
        return ad.scatter_max(ad.relu(msg), edges.dst, h.shape[0])

    def named_parameters(self, prefix=""):
        yield from self.lin.named_parameters(prefix)


class EncoderParams:
    def __init__(self, rng: np.random.Generator, hidden: int = HIDDEN,
                 feature_dim: int = FEATURE_DIM, n_layers: int = len(DILATIONS)):
        widths = [2] + [hidden] * n_layers
        self.convs = [EdgeConv(a, b, rng) for a, b in zip(widths[:-1], widths[1:])]
        self.proj = Linear(hidden, feature_dim, rng, gain=1.0)

    @property
    def feature_dim(self) -> int:
        return self.proj.weight.shape[1]

    def named_parameters(self, prefix=""):
        for i, conv in enumerate(self.convs):
            yield from conv.named_parameters(f"{prefix}conv{i}.")
        yield from self.proj.named_parameters(prefix + "proj.")


def build_graph(x: np.ndarray, static: EdgeSet, layer: int, train_mode: bool, rng,
                k: int = K_NEIGHBORS) -> EdgeSet:
    eps = STOCHASTIC_EPSILON if train_mode else 0.0
    dyn = dilated_knn(x, k, DILATIONS[layer % len(DILATIONS)], eps, rng, layer)
    return dyn.union(static, len(x))


def encode(coords, stroke_ids, params: EncoderParams, train_mode: bool = False,
           rng=None) -> Embeddings:
    """Point, stroke and sketch embeddings of a sketch.

    ``coords`` may be a Tensor so gradients reach the input coordinates.
    Layer 0 builds dynamic edges from the coordinates, later layers from the
    previous layer's features.
    """
    if isinstance(coords, Sketch):
        coords, stroke_ids = coords.points, coords.stroke_ids
    x = ad.as_tensor(coords)
    ids = np.asarray(stroke_ids, dtype=np.intp)
    if x.data.ndim != 2 or x.shape[1] != 2 or len(ids) != x.shape[0]:
        raise ad.ShapeError(f"encode: coords {x.shape} vs stroke ids {ids.shape}")
    rng = np.random.default_rng(rng) if train_mode else None
    static = static_edges(ids)
    h = x
    for layer, conv in enumerate(params.convs):
        edges = build_graph(h.data, static, layer, train_mode, rng)
        out = conv(h, edges)
        h = out if layer == 0 else ad.add(h, out)
    per_point = params.proj(h)
    n_strokes = int(ids[-1]) + 1
    per_stroke = ad.scatter_max(per_point, ids, n_strokes)
    return Embeddings(per_point, per_stroke, ad.max_over_rows(per_point))
