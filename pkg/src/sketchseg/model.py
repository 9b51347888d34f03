"""Model parameters and the shared hierarchical deformation forward pass."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .deform import StrokeHead, StrokeTransforms, apply_stroke_transforms, \
    predict_stroke_transforms
from .graph import FEATURE_DIM, Embeddings, EncoderParams, encode
from .keypoints import N_KEYPOINTS, GlobalTransform, KeypointHead, Keypoints, \
    apply_global, chamfer_global_align, predict_keypoints, rigid_solve
from .nn import MLP

LABEL_HIDDEN = 256

ALIGN_MODES = ("keypoints", "none", "chamfer", "reverse")


class LabelHead:
    """Point classifier on [coordinates, stroke embedding, sketch embedding]."""

    def __init__(self, rng, n_labels: int, feature_dim: int = FEATURE_DIM,
                 hidden: int = LABEL_HIDDEN):
        self.mlp = MLP([2 + 2 * feature_dim, hidden, hidden, hidden, n_labels], rng)

    @property
    def n_labels(self) -> int:
        return self.mlp.widths[-1]

    def named_parameters(self, prefix=""):
        yield from self.mlp.named_parameters(prefix)


class ModelParams:
    def __init__(self, n_labels: int, seed: int = 0, n_keypoints: int = N_KEYPOINTS,
                 feature_dim: int = FEATURE_DIM):
        rng = np.random.default_rng(seed)
        self.seed = seed
        self.encoder = EncoderParams(rng, feature_dim=feature_dim)
        self.omega = KeypointHead(rng, feature_dim, n_keypoints)
        self.phi = StrokeHead(rng, feature_dim)
        self.tau = LabelHead(rng, n_labels, feature_dim)

    @property
    def n_labels(self) -> int:
        return self.tau.n_labels

    @property
    def n_keypoints(self) -> int:
        return self.omega.n_keypoints

    @property
    def feature_dim(self) -> int:
        return self.encoder.feature_dim

    def named_parameters(self):
        yield from self.encoder.named_parameters("encoder.")
        yield from self.omega.named_parameters("omega.")
        yield from self.phi.named_parameters("phi.")
        yield from self.tau.named_parameters("tau.")

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        if set(params) != set(state):
            missing = sorted(set(params) ^ set(state))
            raise ValueError(f"parameter names differ: {missing[:5]}")
        for k, t in params.items():
            v = np.asarray(state[k], dtype=np.float64)
            if v.shape != t.shape:
                raise ValueError(f"{k}: shape {v.shape} != {t.shape}")
            t.data = v.copy()

    def zero_grad(self):
        for _, t in self.named_parameters():
            t.grad = None


@dataclass
class Toggles:
    align: str = "keypoints"
    stroke_feature: bool = True

    def __post_init__(self):
        if self.align not in ALIGN_MODES:
            raise ValueError(f"unknown alignment mode {self.align!r}")


@dataclass
class DeformationResult:
    """Everything the losses and the label head need for one (target, exemplar) pair."""

    transform: GlobalTransform
    aligned_target: Tensor            # X^ (N x 2)
    emb_target: Embeddings            # of the unaligned target
    kp_target: Keypoints              # of the unaligned target
    emb_aligned: Embeddings
    kp_aligned: Keypoints
    emb_exemplar: Embeddings
    strokes: StrokeTransforms
    deformed: Tensor                  # E^ (N x 2)
    emb_deformed: Embeddings
    kp_deformed: Keypoints
    extras: dict = field(default_factory=dict)


@dataclass
class ExemplarPass:
    """Exemplar encoding, shared by all targets of a batch."""

    points: Tensor
    stroke_ids: np.ndarray
    emb: Embeddings
    kps: Keypoints


def encode_exemplar(points, stroke_ids, params: ModelParams, train_mode=False,
                    rng=None) -> ExemplarPass:
    pts = ad.as_tensor(points)
    emb = encode(pts, stroke_ids, params.encoder, train_mode, rng)
    return ExemplarPass(pts, np.asarray(stroke_ids), emb,
                        predict_keypoints(emb.per_point, pts, params.omega))


def _stream(rng, train_mode):
    if not train_mode:
        return None, None, None, None
    return tuple(int(s) for s in rng.integers(0, 2**31, size=4))


def deform_pair(target_points, target_ids, ex: ExemplarPass, params: ModelParams,
                toggles: Toggles = Toggles(), train_mode: bool = False,
                rng=None) -> DeformationResult:
    """Global alignment of the target followed by per-stroke exemplar warping."""
    rng = np.random.default_rng(rng) if train_mode else None
    s_target, s_aligned, s_deformed, s_ex = _stream(rng, train_mode)
    x = ad.as_tensor(target_points)
    ids = np.asarray(target_ids)
    emb_x = encode(x, ids, params.encoder, train_mode, s_target)
    kp_x = predict_keypoints(emb_x.per_point, x, params.omega)

    ex_points, ex_emb = ex.points, ex.emb
    extras = {}
    if toggles.align == "keypoints":
        g = rigid_solve(kp_x.coords, ex.kps.coords)
        x_hat = apply_global(x, g)
    elif toggles.align == "chamfer":
        g = chamfer_global_align(x.data, ex.points.data)
        x_hat = apply_global(x, g)
    elif toggles.align == "none":
        g = GlobalTransform.identity()
        x_hat = x
    else:  # reverse: bring the exemplar into the target's frame instead
        g_ex = rigid_solve(ex.kps.coords, kp_x.coords)
        ex_points = apply_global(ex.points, g_ex)
        ex_emb = encode(ex_points, ex.stroke_ids, params.encoder, train_mode, s_ex)
        extras["exemplar_transform"] = g_ex
        g = GlobalTransform.identity()
        x_hat = x

    if x_hat is x:
        emb_hat, kp_hat = emb_x, kp_x
    else:
        emb_hat = encode(x_hat, ids, params.encoder, train_mode, s_aligned)
        kp_hat = predict_keypoints(emb_hat.per_point, x_hat, params.omega)

    tr = predict_stroke_transforms(emb_hat.sketch, ex_emb.sketch, ex_emb.per_stroke,
                                   params.phi)
    e_hat = apply_stroke_transforms(ex_points, ex.stroke_ids, tr)
    emb_e = encode(e_hat, ex.stroke_ids, params.encoder, train_mode, s_deformed)
    kp_e = predict_keypoints(emb_e.per_point, e_hat, params.omega)
    return DeformationResult(g, x_hat, emb_x, kp_x, emb_hat, kp_hat, ex_emb, tr,
                             e_hat, emb_e, kp_e, extras)
