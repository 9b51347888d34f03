"""SVG rendering of labeled sketches and matplotlib report figures."""
from __future__ import annotations

import colorsys
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .formats import FORMAT_VERSION, atomic_write
from .sketch import LabeledSketch

PALETTE_SIZE = 64
SVG_SIZE = 512
_MARGIN = 24
_LEGEND_W = 140


def _palette() -> list[str]:
    # 16 well-separated hues x 4 lightness levels
    out = []
    for level in (0.45, 0.3, 0.6, 0.75):
        for i in range(16):
            h = (i * 7 % 16) / 16.0
            r, g, b = colorsys.hls_to_rgb(h, level, 0.8)
            out.append("#%02x%02x%02x" % (round(r * 255), round(g * 255), round(b * 255)))
    return out


PALETTE = _palette()


def _fmt(v: float) -> str:
    return f"{v:.2f}".rstrip("0").rstrip(".")


def svg_string(result: LabeledSketch, title: str = "") -> str:
    """One polyline per run of equal label within a stroke, plus a legend."""
    labels = result.labels
    present = sorted(set(labels.tolist()))
    if present and present[-1] >= PALETTE_SIZE:
        raise ValueError(f"at most {PALETTE_SIZE} labels can be rendered")
    pts = result.sketch.points
    ids = result.sketch.stroke_ids
    lo = pts.min(0) if len(pts) else np.zeros(2)
    span = float((pts.max(0) - lo).max()) if len(pts) else 0.0
    scale = (SVG_SIZE - 2 * _MARGIN) / span if span > 0 else 1.0

    def xy(p):
        return f"{_fmt(_MARGIN + (p[0] - lo[0]) * scale)},{_fmt(SVG_SIZE - _MARGIN - (p[1] - lo[1]) * scale)}"

    out = [
        f'<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_SIZE + _LEGEND_W}" '
        f'height="{SVG_SIZE}" viewBox="0 0 {SVG_SIZE + _LEGEND_W} {SVG_SIZE}" '
        f'data-format="sketchseg-svg" data-version="{FORMAT_VERSION}">',
        f'<rect width="100%" height="100%" fill="white"/>',
    ]
    if title:
        out.append(f'<title>{escape(title)}</title>')
    cut = np.flatnonzero((ids[1:] != ids[:-1]) | (labels[1:] != labels[:-1])) + 1
    for run in np.split(np.arange(len(ids)), cut):
        if len(run) == 0:
            continue
        # extend to the next point of the same stroke so label runs join up
        end = run[-1] + 1
        seq = run if end >= len(ids) or ids[end] != ids[run[0]] else np.r_[run, end]
        coords = " ".join(xy(pts[i]) for i in seq)
        out.append(f'<polyline points="{coords}" fill="none" stroke="{PALETTE[labels[run[0]]]}" '
                   f'stroke-width="3" stroke-linecap="round" stroke-linejoin="round"/>')
    out.append('<g font-family="sans-serif" font-size="14">')
    for row, lab in enumerate(present):
        y = _MARGIN + 22 * row
        name = result.label_names.get(lab, lab) if result.label_names else lab
        out.append(f'<rect x="{SVG_SIZE}" y="{y}" width="14" height="14" fill="{PALETTE[lab]}"/>')
        out.append(f'<text x="{SVG_SIZE + 20}" y="{y + 12}">{escape(str(name))}</text>')
    out.append("</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"


def render_svg(result: LabeledSketch, path, title: str = "") -> None:
    atomic_write(path, svg_string(result, title))


# -- report figures ---------------------------------------------------------

def _pyplot():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def _save(fig, path) -> None:
    import io
    buf = io.BytesIO()
    # no timestamps or software tags so identical figures give identical bytes
    fig.savefig(buf, format="png", dpi=100, metadata={"Software": None})
    atomic_write(path, buf.getvalue())


def plot_training(history: list[dict], path) -> None:
    plt = _pyplot()
    epochs = [r["epoch"] for r in history]
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.2))
    for key in ("loss", "anchor", "strokes"):
        axes[0].plot(epochs, [r.get(key, np.nan) for r in history], label=key)
    axes[0].set_yscale("log")
    axes[0].set_xlabel("epoch")
    axes[0].legend()
    if any("probe_p" in r for r in history):
        axes[1].plot([r["epoch"] for r in history if "probe_p" in r],
                     [r["probe_p"] for r in history if "probe_p" in r], color="k")
    axes[1].set_ylim(0, 1)
    axes[1].set_xlabel("epoch")
    axes[1].set_ylabel("probe P-metric")
    fig.tight_layout()
    _save(fig, path)
    plt.close(fig)


def plot_segmentations(results: list[LabeledSketch], path, titles=None, cols: int = 5) -> None:
    plt = _pyplot()
    n = max(1, len(results))
    rows = (n + cols - 1) // cols
    fig, axes = plt.subplots(rows, cols, figsize=(2.2 * cols, 2.2 * rows), squeeze=False)
    for ax in axes.ravel():
        ax.set_axis_off()
    for k, res in enumerate(results):
        ax = axes.ravel()[k]
        pts, ids, labs = res.sketch.points, res.sketch.stroke_ids, res.labels
        cut = np.flatnonzero((ids[1:] != ids[:-1]) | (labs[1:] != labs[:-1])) + 1
        for run in np.split(np.arange(len(ids)), cut):
            end = run[-1] + 1
            seq = run if end >= len(ids) or ids[end] != ids[run[0]] else np.r_[run, end]
            ax.plot(pts[seq, 0], pts[seq, 1], color=PALETTE[labs[run[0]] % PALETTE_SIZE], lw=1.5)
        ax.set_aspect("equal")
        if titles:
            ax.set_title(titles[k], fontsize=8)
    fig.tight_layout()
    _save(fig, path)
    plt.close(fig)


def plot_bars(table: list[dict], keys: tuple[str, ...], path, label_key: str = "variant") -> None:
    plt = _pyplot()
    names = [str(r[label_key]) for r in table]
    x = np.arange(len(names))
    w = 0.8 / len(keys)
    fig, ax = plt.subplots(figsize=(1.2 * len(names) + 2, 3.2))
    for i, key in enumerate(keys):
        ax.bar(x + i * w, [r[key] for r in table], w, label=key)
    ax.set_xticks(x + w * (len(keys) - 1) / 2, names, rotation=20, ha="right", fontsize=8)
    ax.set_ylim(0, 100)
    ax.legend()
    fig.tight_layout()
    _save(fig, Path(path))
    plt.close(fig)
