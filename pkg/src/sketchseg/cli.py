"""Command line: synth, train, segment, eval, gradcheck, ablate.

Each command reads an optional flat ``key = value`` config file; ``--set
key=value`` and explicit flags override it. Rejected input ends the process
with a single ``error <CODE>: <message>`` line on stderr and a nonzero exit.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .formats import (FORMAT_VERSION, DatasetManifest, FormatError, atomic_write,
                      load_checkpoint, load_config, save_checkpoint, write_labels)
from .metrics import COMPONENT_THRESHOLD, c_metric, granularity_mask, p_metric
from .model import ModelParams
from .render import plot_bars, plot_segmentations, plot_training, render_svg
from .segment import refine_by_stroke, segment
from .sketch import preprocess, preprocess_labeled
from .synth import KINDS, sketch_seed, synth_category
from .train import TrainConfig, TrainingDiverged, select_exemplar, train

log = logging.getLogger("sketchseg")

REPORT_HEADER = f"# sketchseg-report v{FORMAT_VERSION}"
COMPONENT_NOTE = (f"# C-metric: a component is a maximal run of one truth label inside a stroke; "
                  f"correct when >= {COMPONENT_THRESHOLD:.0%} of its points are")

ABLATIONS = {
    "full": {},
    "no_global_align": {"no_global_align": True},
    "chamfer_global_align": {"chamfer_global_align": True},
    "reverse_global_align": {"reverse_global_align": True},
    "no_stroke_feature": {"no_stroke_feature": True},
    "no_constraints": {"drop_constraints": "all"},
}


class CliError(Exception):
    def __init__(self, code: str, msg: str):
        super().__init__(msg)
        self.code = code


# -- shared helpers ---------------------------------------------------------

def _settings(args, command_keys: set[str]) -> tuple[dict, dict]:
    """Split config file + --set pairs into (command options, TrainConfig fields)."""
    raw = {}
    if args.config:
        raw.update(load_config(args.config))
    for item in args.set or []:
        if "=" not in item:
            raise CliError("E_CONFIG", f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        raw[k.strip()] = v.strip()
    train_keys = {f.name for f in fields(TrainConfig)}
    unknown = set(raw) - train_keys - command_keys
    if unknown:
        raise CliError("E_CONFIG", f"unknown config keys {sorted(unknown)}")
    opts = {k: v for k, v in raw.items() if k in command_keys}
    tcfg = {k: v for k, v in raw.items() if k in train_keys and k not in command_keys}
    return opts, tcfg


def _opt(args, opts, name, cast=str, default=None, required=False):
    v = getattr(args, name, None)
    if v is None and name in opts:
        v = opts[name]
    if v is None:
        if required:
            raise CliError("E_USAGE", f"missing required option --{name.replace('_', '-')}")
        return default
    try:
        return cast(v)
    except (TypeError, ValueError):
        raise CliError("E_CONFIG", f"bad value {v!r} for {name}") from None


def _train_config(tcfg: dict, overrides: dict | None = None) -> TrainConfig:
    d = dict(tcfg)
    d.update(overrides or {})
    try:
        return TrainConfig.from_dict(d)
    except (TypeError, ValueError) as e:
        raise CliError("E_CONFIG", str(e)) from None


def _load_dataset(manifest_path):
    m = DatasetManifest.load(manifest_path)
    raw = m.load_sketches()
    if not raw:
        raise CliError("E_INPUT", "manifest lists no sketches")
    n_ex = 1 + len(m.extra_exemplars)
    exemplars = [preprocess_labeled(ls, m.n_points, sketch_seed(m.seed, i))
                 for i, (_, ls) in enumerate(m.load_exemplars())]
    targets = [preprocess(s, m.n_points, sketch_seed(m.seed, n_ex + i))
               for i, s in enumerate(raw)]
    truth = m.load_truth(raw)
    if truth is not None:
        truth = [preprocess_labeled(t, m.n_points, sketch_seed(m.seed, n_ex + i))
                 for i, t in enumerate(truth)]
    return m, exemplars, targets, truth


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else str(v)
    return str(v)


def _tsv(rows: list[dict], header_lines: list[str]) -> str:
    cols = list(rows[0]) if rows else []
    for r in rows:
        cols += [k for k in r if k not in cols]
    lines = [*header_lines, "\t".join(cols)]
    lines += ["\t".join(_fmt(r.get(c, "")) for c in cols) for r in rows]
    return "\n".join(lines) + "\n"


def _meta(config: TrainConfig, exemplar, index: int, category: str, history=None) -> dict:
    meta = {"config": config.to_dict(), "seed": config.seed, "category": category,
            "exemplar_index": index, "n_labels": int(exemplar.n_labels),
            "label_names": {str(k): str(v) for k, v in sorted(exemplar.label_names.items())}}
    if history is not None:
        meta["best_probe_p"] = max((r["probe_p"] for r in history if "probe_p" in r),
                                   default=None)
    return meta


def _load_model(path) -> tuple[ModelParams, TrainConfig, dict]:
    try:
        state, meta = load_checkpoint(path)
    except OSError as e:
        raise CliError("E_PATH", f"cannot read checkpoint {path}: {e.strerror}") from None
    config = TrainConfig.from_dict(meta["config"])
    params = ModelParams(int(meta["n_labels"]), seed=config.seed,
                         n_keypoints=config.n_keypoints)
    params.load_state(state)
    return params, config, meta


def _fit(targets, exemplar, truth, config: TrainConfig):
    probe = truth[:config.probe_size] if truth and config.probe_size > 0 else None
    try:
        return train(targets, exemplar, config, probe=probe)
    except TrainingDiverged as e:
        raise CliError("E_DIVERGED", str(e)) from None


def _exemplar_of(meta: dict, exemplars: list) -> int:
    k = int(meta.get("exemplar_index", 0))
    if not 0 <= k < len(exemplars):
        raise CliError("E_PRECONDITION",
                       f"checkpoint was trained on exemplar {k}; manifest has {len(exemplars)}")
    if exemplars[k].n_labels != int(meta["n_labels"]):
        raise CliError("E_PRECONDITION", "checkpoint and exemplar label counts differ")
    return k


def _predict(models, exemplars, target, refine=False):
    """Segment with one (params, config, exemplar index) model, or pick per target
    among per-exemplar models by post-deformation Chamfer."""
    if len(models) == 1:
        j = 0
    else:
        j = select_exemplar([exemplars[k] for _, _, k in models], target,
                            [p for p, _, _ in models], models[0][1].toggles)
    params, config, k = models[j]
    pred = segment(target, exemplars[k], params, config.toggles)
    return k, (refine_by_stroke(pred) if refine else pred)


def _score(models, exemplars, targets, truth, refine=False):
    """Per-target rows of (exemplar index, P, C, masked points)."""
    rows = []
    for i, (tgt, tr) in enumerate(zip(targets, truth)):
        k, pred = _predict(models, exemplars, tgt, refine)
        mask = granularity_mask(tr, exemplars[k])
        try:
            p, c = p_metric(pred, tr, mask), c_metric(pred, tr, mask)
        except ValueError:
            p = c = float("nan")
        rows.append({"sketch": i, "exemplar": k, "p_metric": p, "c_metric": c,
                     "masked": int(mask.sum()), "_pred": pred})
    return rows


def _mean(vals):
    vals = [v for v in vals if not math.isnan(v)]
    return float(np.mean(vals)) if vals else float("nan")


# -- commands ---------------------------------------------------------------

def cmd_synth(args) -> int:
    opts, _ = _settings(args, {"kind", "count", "seed", "out", "n_points", "n_exemplars",
                               "max_rotation", "reflect_prob"})
    kind = _opt(args, opts, "kind", required=True)
    if kind not in KINDS:
        raise CliError("E_CONFIG", f"unknown kind {kind!r}; choose from {', '.join(KINDS)}")
    count = _opt(args, opts, "count", int, 30)
    n_ex = _opt(args, opts, "n_exemplars", int, 1)
    if count < n_ex + 1 or n_ex < 1:
        raise CliError("E_PRECONDITION", "need n_exemplars >= 1 and count > n_exemplars")
    m = synth_category(kind, count, _opt(args, opts, "seed", int, 0),
                       _opt(args, opts, "out", Path, required=True),
                       _opt(args, opts, "n_points", int, 256), n_ex,
                       math.radians(_opt(args, opts, "max_rotation", float, 180.0)),
                       _opt(args, opts, "reflect_prob", float, 0.5))
    print(m.root / "manifest.json")
    return 0


def cmd_train(args) -> int:
    opts, tcfg = _settings(args, {"manifest", "out", "exemplar"})
    out = _opt(args, opts, "out", Path, required=True)
    m, exemplars, targets, truth = _load_dataset(_opt(args, opts, "manifest", required=True))
    k = _opt(args, opts, "exemplar", int, 0)
    if not 0 <= k < len(exemplars):
        raise CliError("E_PRECONDITION", f"exemplar {k} out of range; manifest has {len(exemplars)}")
    config = _train_config(tcfg)
    out.mkdir(parents=True, exist_ok=True)
    params, history = _fit(targets, exemplars[k], truth, config)
    save_checkpoint(out / "model.ckpt", params.state(),
                    _meta(config, exemplars[k], k, m.category, history))
    atomic_write(out / "train_log.tsv", _tsv(history, [REPORT_HEADER + " train"]))
    plot_training(history, out / "training.png")
    print(out / "model.ckpt")
    return 0


def cmd_segment(args) -> int:
    opts, _ = _settings(args, {"manifest", "out", "refine"})
    if not args.checkpoint:
        raise CliError("E_USAGE", "missing required option --checkpoint")
    m, exemplars, targets, _ = _load_dataset(_opt(args, opts, "manifest", required=True))
    models = []
    for ck in args.checkpoint:
        params, config, meta = _load_model(ck)
        models.append((params, config, _exemplar_of(meta, exemplars)))
    refine = _opt(args, opts, "refine", lambda v: str(v).lower() in ("1", "true", "yes"), False)
    out = _opt(args, opts, "out", Path, required=True)
    (out / "svg").mkdir(parents=True, exist_ok=True)
    preds = []
    for i, tgt in enumerate(targets):
        _, pred = _predict(models, exemplars, tgt, refine)
        render_svg(pred, out / "svg" / f"{i:04d}.svg", title=f"{m.category} {i}")
        preds.append(pred)
    write_labels(out / "predictions.labels", preds)
    print(out / "predictions.labels")
    return 0


def cmd_eval(args) -> int:
    opts, _ = _settings(args, {"manifest", "out", "refine"})
    if not args.checkpoint:
        raise CliError("E_USAGE", "missing required option --checkpoint")
    m, exemplars, targets, truth = _load_dataset(_opt(args, opts, "manifest", required=True))
    if truth is None:
        raise CliError("E_PRECONDITION", "manifest has no truth_labels; nothing to evaluate")
    refine = _opt(args, opts, "refine", lambda v: str(v).lower() in ("1", "true", "yes"), False)
    out = _opt(args, opts, "out", Path, required=True)
    out.mkdir(parents=True, exist_ok=True)
    summary, per_sketch, first_preds, models = [], [], None, []

    def add(name, rows):
        nonlocal first_preds
        if first_preds is None:
            first_preds = [r["_pred"] for r in rows[:10]]
        for r in rows:
            per_sketch.append({"checkpoint": name,
                               **{k: v for k, v in r.items() if k != "_pred"}})
        summary.append({"category": m.category, "checkpoint": name,
                        "p_metric": 100 * _mean([r["p_metric"] for r in rows]),
                        "c_metric": 100 * _mean([r["c_metric"] for r in rows])})

    for ck in args.checkpoint:
        params, config, meta = _load_model(ck)
        models.append((params, config, _exemplar_of(meta, exemplars)))
        add(Path(ck).name, _score(models[-1:], exemplars, targets, truth, refine))
    ps = [s["p_metric"] for s in summary]
    cs = [s["c_metric"] for s in summary]
    summary.append({"category": m.category, "checkpoint": "mean", "p_metric": float(np.mean(ps)),
                    "c_metric": float(np.mean(cs))})
    summary.append({"category": m.category, "checkpoint": "std", "p_metric": float(np.std(ps)),
                    "c_metric": float(np.std(cs))})
    # several exemplars: per target, the model whose deformation fits best
    per_exemplar = {}
    for mdl in models:
        per_exemplar.setdefault(mdl[2], mdl)
    if len(per_exemplar) > 1:
        add("selected", _score([per_exemplar[k] for k in sorted(per_exemplar)], exemplars,
                               targets, truth, refine))
    head = [REPORT_HEADER + " eval", COMPONENT_NOTE]
    atomic_write(out / "summary.tsv", _tsv(summary, head))
    atomic_write(out / "per_sketch.tsv", _tsv(per_sketch, head))
    plot_segmentations(first_preds, out / "segmentations.png",
                       titles=[f"#{i}" for i in range(len(first_preds))])
    for s in summary:
        print(f"{s['category']}\t{s['checkpoint']}\tP={s['p_metric']:.2f}\tC={s['c_metric']:.2f}")
    return 0


def cmd_gradcheck(args) -> int:
    from .checks import gradcheck_report
    opts, _ = _settings(args, {"seed", "tolerance"})
    tol = _opt(args, opts, "tolerance", float, 1e-3)
    rows = gradcheck_report(_opt(args, opts, "seed", int, 0))
    worst = 0.0
    for name, err in rows:
        worst = max(worst, err)
        print(f"{name}\t{err:.3e}\t{'ok' if err < tol else 'FAIL'}")
    if not worst < tol:
        raise CliError("E_GRADCHECK", f"max relative error {worst:.3e} >= {tol:g}")
    return 0


def cmd_ablate(args) -> int:
    opts, tcfg = _settings(args, {"manifest", "out", "variants", "seeds"})
    out = _opt(args, opts, "out", Path, required=True)
    names = _opt(args, opts, "variants", lambda v: [s for s in v.split(",") if s],
                 list(ABLATIONS))
    bad = [n for n in names if n not in ABLATIONS]
    if bad:
        raise CliError("E_CONFIG", f"unknown variants {bad}; choose from {list(ABLATIONS)}")
    seeds = _opt(args, opts, "seeds", lambda v: [int(s) for s in v.split(",") if s], [0])
    m, exemplars, targets, truth = _load_dataset(_opt(args, opts, "manifest", required=True))
    if truth is None:
        raise CliError("E_PRECONDITION", "manifest has no truth_labels; nothing to compare")
    out.mkdir(parents=True, exist_ok=True)
    table, runs = [], []
    for name in names:
        ps, cs = [], []
        for seed in seeds:
            config = _train_config(tcfg, {**ABLATIONS[name], "seed": seed})
            params, _ = _fit(targets, exemplars[0], truth, config)
            rows = _score([(params, config, 0)], exemplars, targets, truth)
            p = 100 * _mean([r["p_metric"] for r in rows])
            c = 100 * _mean([r["c_metric"] for r in rows])
            runs.append({"variant": name, "seed": seed, "p_metric": p, "c_metric": c})
            ps.append(p)
            cs.append(c)
        table.append({"variant": name, "p_metric": float(np.mean(ps)),
                      "c_metric": float(np.mean(cs)), "p_std": float(np.std(ps)),
                      "c_std": float(np.std(cs))})
        print(f"{name}\tP={table[-1]['p_metric']:.2f}\tC={table[-1]['c_metric']:.2f}", flush=True)
    head = [REPORT_HEADER + " ablate", COMPONENT_NOTE]
    atomic_write(out / "ablation.tsv", _tsv(table, head))
    atomic_write(out / "ablation_runs.tsv", _tsv(runs, head))
    plot_bars(table, ("p_metric", "c_metric"), out / "ablation.png")
    return 0


# -- entry point ------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("E_USAGE", message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sketchseg", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def command(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="flat key = value file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
        sp.set_defaults(func=fn)
        return sp

    sp = command("synth", cmd_synth, "write a synthetic category")
    sp.add_argument("--kind")
    sp.add_argument("--count", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--n-points", dest="n_points", type=int)
    sp.add_argument("--n-exemplars", dest="n_exemplars", type=int)
    sp.add_argument("--max-rotation", dest="max_rotation", type=float, help="degrees")
    sp.add_argument("--reflect-prob", dest="reflect_prob", type=float)
    sp.add_argument("--out")

    sp = command("train", cmd_train, "train on a manifest, write checkpoint and log")
    sp.add_argument("--manifest")
    sp.add_argument("--exemplar", type=int, help="index of the exemplar to train for")
    sp.add_argument("--out")

    sp = command("segment", cmd_segment, "label the manifest's sketches, write SVGs")
    sp.add_argument("--manifest")
    sp.add_argument("--checkpoint", action="append",
                    help="repeat with one model per exemplar to pick per sketch")
    sp.add_argument("--out")
    sp.add_argument("--refine", action="store_const", const="true")

    sp = command("eval", cmd_eval, "score checkpoints against ground truth")
    sp.add_argument("--manifest")
    sp.add_argument("--checkpoint", action="append")
    sp.add_argument("--out")
    sp.add_argument("--refine", action="store_const", const="true")

    sp = command("gradcheck", cmd_gradcheck, "finite-difference check of all gradients")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--tolerance", type=float)

    sp = command("ablate", cmd_ablate, "train and score the ablation variants")
    sp.add_argument("--manifest")
    sp.add_argument("--out")
    sp.add_argument("--variants", help="comma list of " + ",".join(ABLATIONS))
    sp.add_argument("--seeds", help="comma list of training seeds")
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except CliError as e:
        code, msg = e.code, str(e)
    except FormatError as e:
        code, msg = "E_INPUT", str(e)
    except FileNotFoundError as e:
        code, msg = "E_PATH", str(e)
    except OSError as e:
        code, msg = "E_PATH", f"{e.filename or ''}: {e.strerror or e}"
    except ad.ShapeError as e:
        code, msg = "E_INPUT", str(e)
    except ValueError as e:
        code, msg = "E_PRECONDITION", str(e)
    print(f"error {code}: {' '.join(msg.split())}", file=sys.stderr)
    return 2


if __name__ == "__main__":
    sys.exit(main())
