"""File formats: NDJSON sketches, label files, manifests, configs, checkpoints.

Every format starts with a header naming it and its version.
"""
from __future__ import annotations

import json
import logging
import math
import os
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .sketch import LabeledSketch, Sketch

log = logging.getLogger(__name__)

NDJSON_FORMAT = "sketchseg-ndjson"
LABELS_FORMAT = "sketchseg-labels"
MANIFEST_FORMAT = "sketchseg-manifest"
CHECKPOINT_MAGIC = b"SKETCHSEG-CHECKPOINT"
FORMAT_VERSION = 1


class FormatError(ValueError):
    """Malformed input; ``line`` is 1-based when known."""

    def __init__(self, msg, line=None, path=None):
        where = "".join([f"{path}:" if path else "", f"line {line}: " if line else ""])
        super().__init__(where + msg)
        self.line = line


# -- atomic writes ----------------------------------------------------------

def atomic_write(path, data) -> None:
    """Write to a temporary file in the target directory, then rename over ``path``."""
    path = Path(path)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent or ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _lines(stream):
    if isinstance(stream, (str, Path)):
        with open(stream, encoding="utf-8") as fh:
            return fh.read().splitlines()
    text = stream.read()
    if isinstance(text, bytes):
        text = text.decode("utf-8")
    return text.splitlines()


# -- NDJSON sketches --------------------------------------------------------

def _coord_list(v, what, line):
    if not isinstance(v, list) or not v:
        raise FormatError(f"{what} must be a non-empty list", line)
    out = []
    for c in v:
        if isinstance(c, bool) or not isinstance(c, (int, float)) or not math.isfinite(c):
            raise FormatError(f"non-numeric coordinate {c!r} in {what}", line)
        out.append(float(c))
    return out


def _parse_drawing(obj, line) -> Sketch:
    if not isinstance(obj, dict) or "drawing" not in obj:
        raise FormatError("object has no 'drawing' field", line)
    drawing = obj["drawing"]
    if not isinstance(drawing, list) or not drawing:
        raise FormatError("empty drawing", line)
    strokes = []
    for j, stroke in enumerate(drawing):
        if not isinstance(stroke, list) or len(stroke) < 2:
            raise FormatError(f"stroke {j} is not an [xs, ys] pair", line)
        xs = _coord_list(stroke[0], f"stroke {j} x", line)
        ys = _coord_list(stroke[1], f"stroke {j} y", line)
        if len(xs) != len(ys):
            raise FormatError(f"stroke {j} has {len(xs)} x and {len(ys)} y values", line)
        strokes.append(np.c_[xs, ys])
    return Sketch.from_strokes(strokes, str(obj.get("word", "")))


def parse_ndjson(stream, strict: bool = True, errors: list | None = None) -> list[Sketch]:
    """QuickDraw simplified-drawing records, one JSON object per line.

    A leading ``{"format": "sketchseg-ndjson", ...}`` header is optional. In
    strict mode the first malformed line raises ``FormatError``; otherwise it
    is logged, appended to ``errors`` and skipped.
    """
    out = []
    for i, raw in enumerate(_lines(stream), start=1):
        if not raw.strip():
            continue
        try:
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as e:
                raise FormatError(f"invalid JSON ({e.msg})", i) from None
            if i == 1 and isinstance(obj, dict) and obj.get("format") == NDJSON_FORMAT:
                if obj.get("version") != FORMAT_VERSION:
                    raise FormatError(f"unsupported version {obj.get('version')!r}", i)
                continue
            out.append(_parse_drawing(obj, i))
        except FormatError as e:
            if strict:
                raise
            log.warning("skipping %s", e)
            if errors is not None:
                errors.append(e)
    return out


def _num(v: float):
    return int(v) if float(v).is_integer() and abs(v) < 2**53 else float(v)


def dumps_ndjson(sketches: list[Sketch]) -> str:
    lines = [json.dumps({"format": NDJSON_FORMAT, "version": FORMAT_VERSION})]
    for sk in sketches:
        drawing = [[[_num(v) for v in s[:, 0]], [_num(v) for v in s[:, 1]]]
                   for s in sk.strokes]
        lines.append(json.dumps({"word": sk.category, "drawing": drawing},
                                separators=(",", ":")))
    return "\n".join(lines) + "\n"


def write_ndjson(path, sketches: list[Sketch]) -> None:
    atomic_write(path, dumps_ndjson(sketches))


# -- label files ------------------------------------------------------------
# One record per line, whitespace-separated tokens: one per stroke (broadcast
# to its points) or one per point.

def _label_records(stream) -> list[tuple[int, list[str]]]:
    lines = _lines(stream)
    recs = []
    for i, raw in enumerate(lines, start=1):
        text = raw.strip()
        if i == 1 and text.startswith("#"):
            head = text[1:].split()
            if len(head) != 2 or head[0] != LABELS_FORMAT or head[1] != f"v{FORMAT_VERSION}":
                raise FormatError(f"bad label header {text!r}", i)
            continue
        if not text or text.startswith("#"):
            continue
        recs.append((i, text.split()))
    return recs


def labels_from_tokens(tokens: list[str], sketch: Sketch, line=None) -> LabeledSketch:
    if len(tokens) == sketch.n_points:
        per_point = list(tokens)
    elif len(tokens) == sketch.n_strokes:
        per_point = [tokens[j] for j in sketch.stroke_ids]
    else:
        raise FormatError(
            f"{len(tokens)} labels for {sketch.n_strokes} strokes / {sketch.n_points} points",
            line)
    ids: dict[str, int] = {}
    for t in per_point:
        ids.setdefault(t, len(ids))
    labels = np.array([ids[t] for t in per_point], dtype=np.intp)
    return LabeledSketch(sketch, labels, {v: k for k, v in ids.items()})


def parse_labels(stream, sketch: Sketch) -> LabeledSketch:
    """Annotation of a single sketch; names are remapped to dense ids in first-seen order."""
    recs = _label_records(stream)
    if len(recs) != 1:
        raise FormatError(f"expected 1 label record, found {len(recs)}")
    line, tokens = recs[0]
    return labels_from_tokens(tokens, sketch, line)


def parse_label_file(stream, sketches: list[Sketch]) -> list[LabeledSketch]:
    recs = _label_records(stream)
    if len(recs) != len(sketches):
        raise FormatError(f"{len(recs)} label records for {len(sketches)} sketches")
    return [labels_from_tokens(t, s, line) for (line, t), s in zip(recs, sketches)]


def _token(ls: LabeledSketch, lab: int) -> str:
    name = str(ls.label_names.get(int(lab), lab)) if ls.label_names else str(int(lab))
    if not name or any(c.isspace() for c in name):
        raise ValueError(f"label name {name!r} is empty or contains whitespace")
    return name


def dumps_labels(items: list[LabeledSketch], per_stroke: bool = False) -> str:
    lines = [f"# {LABELS_FORMAT} v{FORMAT_VERSION}"]
    for ls in items:
        labs = ls.labels
        if per_stroke:
            first = np.r_[0, np.flatnonzero(np.diff(ls.sketch.stroke_ids)) + 1]
            labs = labs[first]
        lines.append(" ".join(_token(ls, v) for v in labs))
    return "\n".join(lines) + "\n"


def write_labels(path, items: list[LabeledSketch], per_stroke: bool = False) -> None:
    atomic_write(path, dumps_labels(items, per_stroke))


# -- manifest ---------------------------------------------------------------

@dataclass
class DatasetManifest:
    """A category: unlabeled sketches, one labeled exemplar, optional ground truth.

    Paths are relative to the manifest's directory.
    """

    category: str
    sketches: str
    exemplar: str
    exemplar_labels: str
    truth_labels: str | None = None
    seed: int = 0
    n_points: int = 256
    extra_exemplars: list = field(default_factory=list)  # [(sketch file, label file)]
    root: Path = field(default=Path("."), compare=False, repr=False)

    def path(self, rel) -> Path:
        return self.root / rel

    def validate(self) -> None:
        refs = [self.sketches, self.exemplar, self.exemplar_labels]
        refs += [self.truth_labels] if self.truth_labels else []
        refs += [p for pair in self.extra_exemplars for p in pair]
        missing = [r for r in refs if not self.path(r).is_file()]
        if missing:
            raise FileNotFoundError(f"manifest references missing files: {missing}")
        if self.n_points < 1:
            raise ValueError("n_points must be positive")

    def to_json(self) -> str:
        d = asdict(self)
        d.pop("root")
        d["extra_exemplars"] = [list(p) for p in self.extra_exemplars]
        return json.dumps({"format": MANIFEST_FORMAT, "version": FORMAT_VERSION, **d},
                          indent=2, sort_keys=True) + "\n"

    def save(self, path) -> None:
        atomic_write(path, self.to_json())

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        try:
            d = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise FormatError(f"invalid manifest JSON ({e.msg})", e.lineno, path) from None
        if d.pop("format", None) != MANIFEST_FORMAT or d.pop("version", None) != FORMAT_VERSION:
            raise FormatError("not a version-1 sketchseg manifest", path=path)
        known = {"category", "sketches", "exemplar", "exemplar_labels", "truth_labels",
                 "seed", "n_points", "extra_exemplars"}
        if set(d) - known:
            raise FormatError(f"unknown manifest keys {sorted(set(d) - known)}", path=path)
        d["extra_exemplars"] = [tuple(p) for p in d.get("extra_exemplars", [])]
        m = cls(**d, root=path.parent)
        m.validate()
        return m

    def load_sketches(self) -> list[Sketch]:
        return parse_ndjson(self.path(self.sketches))

    def load_exemplars(self) -> list[tuple[Sketch, LabeledSketch]]:
        """Raw exemplar sketches with their labels; the primary one first."""
        out = []
        for sk_file, lab_file in [(self.exemplar, self.exemplar_labels), *self.extra_exemplars]:
            sketches = parse_ndjson(self.path(sk_file))
            if len(sketches) != 1:
                raise FormatError(f"exemplar file holds {len(sketches)} sketches", path=sk_file)
            out.append((sketches[0], parse_labels(self.path(lab_file), sketches[0])))
        return out

    def load_truth(self, sketches: list[Sketch]) -> list[LabeledSketch] | None:
        if not self.truth_labels:
            return None
        return parse_label_file(self.path(self.truth_labels), sketches)


# -- flat key=value config --------------------------------------------------

def parse_config(text: str) -> dict[str, str]:
    """``key = value`` per line; ``#`` starts a comment; duplicate keys are errors."""
    out = {}
    for i, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"expected key = value, got {raw.strip()!r}", i)
        key, value = (s.strip() for s in line.split("=", 1))
        if not key or not key.replace("_", "").isalnum():
            raise FormatError(f"bad key {key!r}", i)
        if key in out:
            raise FormatError(f"duplicate key {key!r}", i)
        out[key] = value
    return out


def load_config(path) -> dict[str, str]:
    return parse_config(Path(path).read_text(encoding="utf-8"))


# -- checkpoints ------------------------------------------------------------
# Layout: magic + version line, one line of canonical JSON (config echo, seed,
# tensor table), then the tensors as little-endian float64 in table order.

def dumps_checkpoint(state: dict[str, np.ndarray], meta: dict) -> bytes:
    table, blobs, offset = [], [], 0
    for name in sorted(state):
        arr = np.ascontiguousarray(state[name], dtype="<f8")
        table.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({"meta": meta, "tensors": table}, sort_keys=True,
                        separators=(",", ":"), allow_nan=False)
    return b"".join([CHECKPOINT_MAGIC, b" %d\n" % FORMAT_VERSION,
                     header.encode("utf-8"), b"\n", *blobs])


def loads_checkpoint(data: bytes) -> tuple[dict[str, np.ndarray], dict]:
    first, _, rest = data.partition(b"\n")
    parts = first.split()
    if len(parts) != 2 or parts[0] != CHECKPOINT_MAGIC:
        raise FormatError("not a sketchseg checkpoint")
    if parts[1] != str(FORMAT_VERSION).encode():
        raise FormatError(f"unsupported checkpoint version {parts[1].decode()!r}")
    header, _, body = rest.partition(b"\n")
    try:
        head = json.loads(header)
    except json.JSONDecodeError as e:
        raise FormatError(f"corrupt checkpoint header ({e.msg})") from None
    state = {}
    for t in head["tensors"]:
        count = int(np.prod(t["shape"], dtype=np.int64))
        end = t["offset"] + 8 * count
        if end > len(body):
            raise FormatError(f"checkpoint truncated in tensor {t['name']!r}")
        state[t["name"]] = np.frombuffer(body, "<f8", count, t["offset"]) \
            .reshape(t["shape"]).astype(np.float64)
    return state, head["meta"]


def save_checkpoint(path, state: dict[str, np.ndarray], meta: dict) -> None:
    atomic_write(path, dumps_checkpoint(state, meta))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    return loads_checkpoint(Path(path).read_bytes())
