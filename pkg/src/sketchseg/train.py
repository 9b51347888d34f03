"""Joint training of the encoder, keypoint, deformation and label heads."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .deform import CONSTRAINTS, stroke_level_loss
from .keypoints import chamfer_np, keypoint_anchor_loss
from .metrics import p_metric
from .model import ModelParams, Toggles, deform_pair, encode_exemplar
from .segment import predict_labels, segment, segmentation_loss, stroke_features_per_point
from .sketch import LabeledSketch, Sketch, augment_rotate

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    def __init__(self, msg, params=None):
        super().__init__(msg)
        self.params = params


@dataclass
class TrainConfig:
    alpha: float = 1.0
    beta: float = 0.2
    gamma: float = 50.0
    delta: float = 0.02
    learning_rate: float = 5e-5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 24
    epochs: int = 300
    seed: int = 0
    n_keypoints: int = 256
    augment: bool = True
    probe_size: int = 8
    probe_every: int = 1
    no_global_align: bool = False
    chamfer_global_align: bool = False
    reverse_global_align: bool = False
    no_stroke_feature: bool = False
    drop_constraints: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        if isinstance(self.drop_constraints, str):
            names = [s for s in self.drop_constraints.replace(";", ",").split(",") if s.strip()]
            self.drop_constraints = names
        drop = set(self.drop_constraints)
        if "all" in drop:
            drop = set(CONSTRAINTS)
        bad = drop - set(CONSTRAINTS)
        if bad:
            raise ValueError(f"unknown constraints {sorted(bad)}")
        self.drop_constraints = frozenset(drop)
        if self.learning_rate <= 0 or self.batch_size <= 0 or self.epochs < 0:
            raise ValueError("learning_rate and batch_size must be positive, epochs >= 0")
        if min(self.alpha, self.beta, self.gamma, self.delta) < 0:
            raise ValueError("loss weights must be non-negative")
        if sum([self.no_global_align, self.chamfer_global_align,
                self.reverse_global_align]) > 1:
            raise ValueError("at most one global alignment toggle may be set")

    @property
    def toggles(self) -> Toggles:
        align = "keypoints"
        if self.no_global_align:
            align = "none"
        elif self.chamfer_global_align:
            align = "chamfer"
        elif self.reverse_global_align:
            align = "reverse"
        return Toggles(align=align, stroke_feature=not self.no_stroke_feature)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["drop_constraints"] = ",".join(sorted(self.drop_constraints))
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        out = {}
        for k, v in d.items():
            if k not in kinds:
                raise ValueError(f"unknown config key {k!r}")
            default = getattr(cls(), k)
            if k == "drop_constraints":
                out[k] = v
            elif isinstance(default, bool):
                out[k] = v if isinstance(v, bool) else str(v).strip().lower() in ("1", "true", "yes", "on")
            elif isinstance(default, int):
                out[k] = int(v)
            else:
                out[k] = float(v)
        return cls(**out)


# -- loss --------------------------------------------------------------------

def pair_loss(target_points, target_ids, ex, ex_labels, params: ModelParams,
              config: TrainConfig, train_mode=True, rng=None):
    tog = config.toggles
    res = deform_pair(target_points, target_ids, ex, params, tog, train_mode, rng)
    anchor = keypoint_anchor_loss(target_points, res.kp_target)
    strokes, parts = stroke_level_loss(
        res.deformed, res.aligned_target, res.kp_deformed.coords, res.kp_aligned.coords,
        res.strokes, config.beta, config.gamma, config.drop_constraints)
    dist = predict_labels(
        res.deformed,
        stroke_features_per_point(res.emb_deformed.per_stroke, ex.stroke_ids,
                                  tog.stroke_feature),
        res.emb_deformed.sketch, params.tau)
    ce = segmentation_loss(dist, ex_labels)
    total = ad.add(ad.add(ad.mul(config.alpha, anchor), strokes), ad.mul(config.delta, ce))
    parts = {k: float(v.data) for k, v in parts.items()}
    parts.update(anchor=float(anchor.data), ce=float(ce.data), strokes=float(strokes.data))
    return total, parts, res


def joint_loss(targets: list[Sketch], exemplar: LabeledSketch, params: ModelParams,
               config: TrainConfig, train_mode: bool = True, rng=None):
    """Batch-mean of alpha*anchor + stroke-level loss + delta*cross-entropy.

    Returns ``(loss, components)`` where components are batch-mean floats.
    """
    if not targets:
        raise ValueError("empty batch")
    rng = np.random.default_rng(rng)
    ex_sk = exemplar.sketch
    ex = encode_exemplar(ex_sk.points, ex_sk.stroke_ids, params, train_mode,
                         int(rng.integers(2**31)) if train_mode else None)
    total, comps = None, {}
    for t in targets:
        pair, parts, _ = pair_loss(t.points, t.stroke_ids, ex, exemplar.labels, params,
                                   config, train_mode, int(rng.integers(2**31)))
        total = pair if total is None else ad.add(total, pair)
        for k, v in parts.items():
            comps[k] = comps.get(k, 0.0) + v / len(targets)
    loss = ad.mul(total, 1.0 / len(targets))
    comps["loss"] = float(loss.data)
    return loss, comps


# -- optimizer ---------------------------------------------------------------

@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: ModelParams, grads: dict, state: AdamState, config: TrainConfig) -> None:
    """In-place Adam update with bias correction; NaN gradients abort."""
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient in {k}")
    state.step += 1
    b1, b2 = config.adam_beta1, config.adam_beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for k, t in params.named_parameters():
        g = grads.get(k)
        if g is None:
            g = np.zeros(t.shape)
        m = state.m.get(k)
        if m is None:
            m = state.m[k] = np.zeros(t.shape)
            state.v[k] = np.zeros(t.shape)
        v = state.v[k]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        t.data = t.data - config.learning_rate * (m / c1) / (np.sqrt(v / c2) + config.adam_eps)


def collect_grads(params: ModelParams) -> dict:
    return {k: (t.grad if t.grad is not None else np.zeros(t.shape))
            for k, t in params.named_parameters()}


# -- training loop -----------------------------------------------------------

def probe_score(params, probe: list[LabeledSketch], exemplar: LabeledSketch,
                toggles: Toggles) -> float:
    scores = [p_metric(segment(p.sketch, exemplar, params, toggles), p) for p in probe]
    return float(np.mean(scores))


def train(targets: list[Sketch], exemplar: LabeledSketch, config: TrainConfig,
          probe: list[LabeledSketch] | None = None, params: ModelParams | None = None,
          callback=None):
    """Train on unlabeled ``targets`` with one labeled ``exemplar``.

    ``probe`` holds labeled sketches used only to pick the best epoch. Returns
    ``(params, history)`` where history has one dict per epoch plus the
    initial evaluation under ``epoch == 0``.
    """
    if not targets:
        raise ValueError("need at least one unlabeled sketch")
    if params is None:
        params = ModelParams(exemplar.n_labels, seed=config.seed,
                             n_keypoints=config.n_keypoints)
    rng = np.random.default_rng([config.seed, 1])
    state = AdamState()
    tog = config.toggles
    history = []
    best_state, best_score = params.state(), -math.inf
    bs = min(config.batch_size, len(targets))

    def evaluate(epoch, comps):
        nonlocal best_state, best_score
        row = {"epoch": epoch, **comps}
        if probe and (epoch % config.probe_every == 0 or epoch == config.epochs):
            score = probe_score(params, probe, exemplar, tog)
            row["probe_p"] = score
            if score >= best_score:
                best_score, best_state = score, params.state()
        history.append(row)
        if callback:
            callback(row)
        log.info("epoch %d %s", epoch, {k: round(v, 5) for k, v in row.items() if k != "epoch"})

    with ad.no_grad():
        _, comps0 = joint_loss(targets[:bs], exemplar, params, config, False, 0)
    evaluate(0, comps0)

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(targets))
        sums, n_batches = {}, 0
        for lo in range(0, len(order), bs):
            batch = [targets[i] for i in order[lo:lo + bs]]
            ex = exemplar
            if config.augment:
                batch = [augment_rotate(s, rng) for s in batch]
                ex = LabeledSketch(augment_rotate(exemplar.sketch, rng), exemplar.labels,
                                   exemplar.label_names)
            params.zero_grad()
            loss, comps = joint_loss(batch, ex, params, config, True, rng)
            if not np.isfinite(loss.data):
                ad.clear_tape()
                params.load_state(best_state if probe else params.state())
                raise TrainingDiverged(f"loss is {float(loss.data)} at epoch {epoch}", params)
            ad.backward(loss)
            adam_step(params, collect_grads(params), state, config)
            for k, v in comps.items():
                sums[k] = sums.get(k, 0.0) + v
            n_batches += 1
        evaluate(epoch, {k: v / n_batches for k, v in sums.items()})

    if probe:
        params.load_state(best_state)
    return params, history


def select_exemplar(exemplars: list[LabeledSketch], target: Sketch, params,
                    toggles: Toggles = Toggles()) -> int:
    """Index of the exemplar whose deformation lands closest (Chamfer) to the target.

    ``params`` is one model shared by all exemplars or a list holding the
    model trained for each exemplar. Ties go to the lowest index.
    """
    if not exemplars:
        raise ValueError("no exemplars")
    models = list(params) if isinstance(params, (list, tuple)) else [params] * len(exemplars)
    if len(models) != len(exemplars):
        raise ValueError(f"{len(models)} models for {len(exemplars)} exemplars")
    costs = []
    with ad.no_grad():
        for e, p in zip(exemplars, models):
            ex = encode_exemplar(e.sketch.points, e.sketch.stroke_ids, p)
            res = deform_pair(target.points, target.stroke_ids, ex, p, toggles)
            costs.append(chamfer_np(res.deformed.data, res.aligned_target.data))
    return int(np.argmin(costs))
