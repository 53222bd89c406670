"""JSON-lines frame files, decisions, key=value configs.

A frame file holds one sequence: a header line followed by one frame per line::

    {"schema": "handobj.frames", "version": 1, "sequence_id": "seq0000", "num_vertices": 120}
    {"frame_index": 0, "j2d": [[x, y], ...], "j3d": [[x, y, z], ...], "vertices": [...],
     "theta": [48 values], "beta": [10 values], "gt_box": [x0, y0, x1, y1]}
"""
from __future__ import annotations

import json
import math

import numpy as np

from .geometry import Box2
from .hand_model import HandParams
from .pseudo_filter import FilterConfig, FrameRecord, HandPrediction, SequenceRecord

FRAME_SCHEMA = "handobj.frames"
FRAME_VERSION = 1


class DataError(Exception):
    """Malformed input; ``line`` is 1-based when known."""

    def __init__(self, message, path=None, line=None):
        where = f"{path}:{line}: " if path and line else (f"{path}: " if path else "")
        super().__init__(where + message)
        self.path = path
        self.line = line


def _dumps(obj):
    return json.dumps(obj, separators=(",", ":"), allow_nan=False)


def _array(doc, key, shape):
    if key not in doc:
        raise ValueError(f"missing field {key!r}")
    a = np.asarray(doc[key], dtype=np.float64)
    if a.shape != shape:
        raise ValueError(f"{key} has shape {a.shape}, expected {shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{key} contains non-finite numbers")
    return a


def frame_to_json(frame: FrameRecord):
    p = frame.prediction
    return {
        "frame_index": frame.frame_index,
        "j2d": p.j2d.tolist(),
        "j3d": p.j3d.tolist(),
        "vertices": p.vertices.tolist(),
        "theta": p.params.theta.tolist(),
        "beta": p.params.beta.tolist(),
        "gt_box": frame.gt_hand_box.to_xyxy(),
    }


def frame_from_json(doc, num_vertices):
    idx = doc.get("frame_index")
    if not isinstance(idx, int) or isinstance(idx, bool):
        raise ValueError("frame_index must be an integer")
    pred = HandPrediction(
        _array(doc, "j2d", (21, 2)),
        _array(doc, "j3d", (21, 3)),
        _array(doc, "vertices", (num_vertices, 3)),
        HandParams(_array(doc, "theta", (48,)), _array(doc, "beta", (10,))),
    )
    return FrameRecord(idx, pred, Box2.from_xyxy(_array(doc, "gt_box", (4,))))


def write_sequence(path, seq: SequenceRecord):
    nv = len(seq.frames[0].prediction.vertices)
    with open(path, "w") as fh:
        header = {"schema": FRAME_SCHEMA, "version": FRAME_VERSION, "sequence_id": seq.sequence_id,
                  "num_vertices": nv}
        fh.write(_dumps(header) + "\n")
        for f in seq.frames:
            fh.write(_dumps(frame_to_json(f)) + "\n")


def read_sequence(path) -> SequenceRecord:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DataError("empty file", path)
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DataError(f"header is not JSON ({exc.msg})", path, 1) from None
    if not isinstance(header, dict) or header.get("schema") != FRAME_SCHEMA:
        raise DataError(f"first line must be a {FRAME_SCHEMA!r} header", path, 1)
    if header.get("version") != FRAME_VERSION:
        raise DataError(f"unsupported schema version {header.get('version')!r}", path, 1)
    nv = header.get("num_vertices")
    if not isinstance(nv, int) or nv < 1:
        raise DataError("header num_vertices must be a positive integer", path, 1)
    frames = []
    for lineno, text in enumerate(lines[1:], start=2):
        if not text.strip():
            continue
        try:
            doc = json.loads(text, parse_constant=_reject_constant)
            if not isinstance(doc, dict):
                raise ValueError("frame line must be a JSON object")
            frame = frame_from_json(doc, nv)
        except (ValueError, TypeError) as exc:
            raise DataError(str(exc), path, lineno) from None
        if frames and frame.frame_index <= frames[-1].frame_index:
            raise DataError("frame_index must be unique and ascending", path, lineno)
        frames.append(frame)
    if not frames:
        raise DataError("no frames", path)
    return SequenceRecord(str(header.get("sequence_id", "")), tuple(frames))


def _reject_constant(name):
    raise ValueError(f"non-finite number {name} is not allowed")


def write_jsonl(path, rows):
    with open(path, "w") as fh:
        for row in rows:
            fh.write(_dumps(row) + "\n")


def read_jsonl(path):
    rows = []
    with open(path) as fh:
        for lineno, text in enumerate(fh, start=1):
            if not text.strip():
                continue
            try:
                rows.append(json.loads(text, parse_constant=_reject_constant))
            except (json.JSONDecodeError, ValueError) as exc:
                raise DataError(f"invalid JSON ({exc})", path, lineno) from None
    return rows


def write_json(path, obj):
    with open(path, "w") as fh:
        fh.write(json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n")


def read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh, parse_constant=_reject_constant)
    except (json.JSONDecodeError, ValueError) as exc:
        raise DataError(f"invalid JSON ({exc})", path) from None


# ---------------------------------------------------------------------------
# key=value configuration
# ---------------------------------------------------------------------------

def parse_kv_config(text, source="<config>"):
    """``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"expected key=value, got {raw!r}", source, lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise DataError("empty key", source, lineno)
        out[key] = value
    return out


FILTER_KEYS = ("iou_min", "t_p", "bone_min", "angle_min", "angle_max", "t_j", "t_theta", "shape_sigma_mult")


def filter_config_from_kv(values, base=None):
    """Build a :class:`FilterConfig` from string values; unknown keys are an error."""
    base = base or FilterConfig()
    kw = {}
    angle = list(base.angle_range)
    for key, raw in values.items():
        if key not in FILTER_KEYS:
            raise ValueError(f"unknown filter setting {key!r}")
        val = float(raw)
        if not math.isfinite(val):
            raise ValueError(f"{key} must be finite")
        if key == "angle_min":
            angle[0] = val
        elif key == "angle_max":
            angle[1] = val
        else:
            kw[key] = val
    return base.with_overrides(angle_range=tuple(angle), **kw)
