"""PGM masks, CSV grids, deterministic JSON and artifact schemas."""

from __future__ import annotations

import json
import math
import re
from pathlib import Path

import jsonschema
import numpy as np

FOREGROUND_THRESHOLD = 128


class FormatError(ValueError):
    pass


# --- PGM ---------------------------------------------------------------------

_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _header_tokens(data: bytes, count: int, pos: int):
    tokens = []
    for _ in range(count):
        m = _TOKEN.match(data, pos)
        if not m:
            raise FormatError("truncated PGM header")
        tokens.append(m.group(1))
        pos = m.end()
    return tokens, pos


def read_pgm(path) -> np.ndarray:
    """8-bit grayscale image from a binary (P5) or ASCII (P2) PGM file."""
    data = Path(path).read_bytes()
    magic = data[:2]
    if magic not in (b"P5", b"P2"):
        raise FormatError(f"{path}: unsupported format {magic!r} (need P5 or P2)")
    (w, h, maxval), pos = _header_tokens(data, 3, 2)
    try:
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError:
        raise FormatError(f"{path}: malformed PGM header") from None
    if w < 1 or h < 1:
        raise FormatError(f"{path}: bad dimensions {w}x{h}")
    if maxval != 255:
        raise FormatError(f"{path}: maxval {maxval} unsupported (need 255)")
    if magic == b"P5":
        # exactly one whitespace byte separates the header from the raster
        raster = data[pos + 1 : pos + 1 + w * h]
        if len(raster) < w * h:
            raise FormatError(f"{path}: truncated payload ({len(raster)} of {w * h} bytes)")
        return np.frombuffer(raster, dtype=np.uint8).reshape(h, w).copy()
    values = data[pos:].split()
    if len(values) < w * h:
        raise FormatError(f"{path}: truncated payload ({len(values)} of {w * h} values)")
    arr = np.array([int(v) for v in values[: w * h]], dtype=np.int64)
    if arr.min() < 0 or arr.max() > 255:
        raise FormatError(f"{path}: sample out of range")
    return arr.astype(np.uint8).reshape(h, w)


def write_pgm(path, image: np.ndarray, ascii: bool = False) -> None:
    img = np.asarray(image, dtype=np.uint8)
    h, w = img.shape
    if ascii:
        body = "\n".join(" ".join(str(v) for v in row) for row in img)
        Path(path).write_text(f"P2\n{w} {h}\n255\n{body}\n")
    else:
        Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + img.tobytes())


def load_mask(path) -> np.ndarray:
    """Binary foreground map: pixels >= 128 are foreground."""
    return read_pgm(path) >= FOREGROUND_THRESHOLD


def list_pgms(path) -> list[Path]:
    """A single file, or every ``*.pgm`` in a directory in lexicographic order."""
    p = Path(path)
    if p.is_dir():
        files = sorted(q for q in p.iterdir() if q.suffix.lower() == ".pgm")
        if not files:
            raise FileNotFoundError(f"no .pgm files in {p}")
        return files
    if not p.exists():
        raise FileNotFoundError(str(p))
    return [p]


# --- numbers and JSON ----------------------------------------------------------


def format_float(x: float) -> str:
    s = format(float(x), ".17g")
    if not any(c in s for c in ".en"):
        s += ".0"
    return s


def dumps(obj, indent: int = 2, _level: int = 0) -> str:
    """JSON text with insertion-ordered keys and 17-significant-digit floats.

    Non-finite floats become ``null``.
    """
    pad = " " * (indent * (_level + 1))
    end = " " * (indent * _level)
    if obj is None or isinstance(obj, bool):
        return json.dumps(obj)
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return format_float(obj) if math.isfinite(obj) else "null"
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {dumps(v, indent, _level + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        seq = list(obj)
        if not seq:
            return "[]"
        if all(isinstance(v, (int, float, np.number)) and not isinstance(v, bool) for v in seq):
            return "[" + ", ".join(dumps(v) for v in seq) + "]"
        items = [pad + dumps(v, indent, _level + 1) for v in seq]
        return "[\n" + ",\n".join(items) + "\n" + end + "]"
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def write_json(path, obj) -> None:
    Path(path).write_text(dumps(obj) + "\n", encoding="utf-8")


def write_grid_csv(path, grid: np.ndarray) -> None:
    rows = [",".join(format_float(v) for v in row) for row in np.atleast_2d(grid)]
    Path(path).write_text("\n".join(rows) + "\n", encoding="utf-8")


def read_grid_csv(path) -> np.ndarray:
    text = Path(path).read_text(encoding="utf-8").strip()
    if not text:
        raise FormatError(f"{path}: empty grid")
    try:
        rows = [[float(v) for v in line.split(",")] for line in text.splitlines()]
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None
    if len({len(r) for r in rows}) != 1:
        raise FormatError(f"{path}: ragged rows")
    return np.array(rows)


# --- schemas -------------------------------------------------------------------

_NUM = {"type": "number"}
_NUM_OR_NULL = {"type": ["number", "null"]}
_BOX = {"type": "array", "items": {"type": "integer"}, "minItems": 4, "maxItems": 4}
_CONFIG = {
    "type": "object",
    "required": ["kernel_size", "depth", "channels", "attention", "input_size"],
    "additionalProperties": False,
    "properties": {
        "kernel_size": {"type": "integer", "minimum": 2},
        "depth": {"type": "integer", "minimum": 1},
        "channels": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1},
        "attention": {"type": "boolean"},
        "input_size": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 2, "maxItems": 2},
    },
}
_CANDIDATE = {
    "type": "object",
    "required": ["config", "trf", "params"],
    "properties": {"config": _CONFIG, "trf": _NUM, "params": {"type": "integer"}},
}
_SCORES = {k: _NUM for k in ("dice", "jaccard", "sensitivity", "specificity", "accuracy")}


def _obj(required: dict, optional: dict | None = None) -> dict:
    return {
        "type": "object",
        "required": list(required),
        "properties": {**required, **(optional or {})},
        "additionalProperties": False,
    }


SCHEMAS = {
    "config": _CONFIG,
    "trf": _obj(
        {
            "trf_size": _NUM,
            "center_box": _BOX,
            "per_layer": {"type": "array", "items": {"type": "array", "minItems": 2, "maxItems": 2}},
        },
        {"pixel_trf_size": _NUM},
    ),
    "params": _obj(
        {
            "params": {"type": "integer"},
            "per_node": {"type": "array", "items": {"type": "array", "minItems": 3, "maxItems": 3}},
        }
    ),
    "erf_sidecar": _obj(
        {
            "box": _BOX,
            "target": {"type": "array", "items": {"type": "integer"}, "minItems": 2, "maxItems": 2},
            "seed": {"type": "integer"},
            "scheme": {"enum": ["uniform_kaiming", "all_ones", "imported"]},
        },
        {"post_sigmoid": {"type": "boolean"}, "input": {"type": "string"}},
    ),
    "erf_rate": _obj(
        {
            "items": {
                "type": "array",
                "items": _obj(
                    {"file": {"type": "string"}, "erf_rate": _NUM, "epsilon": _NUM, "mode": {"enum": ["bimodal_trough", "skewed_knee", "fixed"]}}
                ),
            },
            "aggregate": _obj({"erf_rate": _NUM, "count": {"type": "integer"}}),
        }
    ),
    "object_rate": _obj(
        {
            "trf": _NUM,
            "items": {
                "type": "array",
                "items": _obj({"file": {"type": "string"}, "object_rate": _NUM_OR_NULL, "empty": {"type": "boolean"}}),
            },
            "aggregate": _obj({"object_rate": _NUM_OR_NULL, "count": {"type": "integer"}, "empty_count": {"type": "integer"}}),
        }
    ),
    "metrics": _obj(
        {
            "items": {
                "type": "array",
                "items": _obj({"pred": {"type": "string"}, "truth": {"type": "string"}, **_SCORES}),
            },
            "aggregate": _obj({"count": {"type": "integer"}, **_SCORES}),
        }
    ),
    "advice": _obj(
        {
            "trf_window": {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 2},
            "rationale": {"enum": ["high_contrast_minimal", "low_contrast_roi_matched"]},
            "confidence": {"enum": ["normal", "low"]},
            "average_dimension": _NUM_OR_NULL,
            "candidates": {"type": "array", "items": _CANDIDATE},
        },
        {"roi": {"type": "object"}},
    ),
    "search": _obj({"target_trf": _NUM, "budget": {"type": "integer"}, "candidates": {"type": "array", "items": _CANDIDATE}}),
    "catalog": _obj(
        {
            "rows": {
                "type": "array",
                "items": {
                    "type": "object",
                    "required": ["kernel_size", "depth", "channels", "published_trf", "published_params", "buildable"],
                },
            }
        }
    ),
    "manifest": _obj(
        {
            "command": {"type": "string"},
            "argv": {"type": "array", "items": {"type": "string"}},
            "config": {"type": ["string", "null"]},
            "dataset": {"type": ["string", "null"]},
            "seed": {"type": "integer"},
            "scheme": {"type": ["string", "null"]},
            "tool_version": {"type": "string"},
            "timestamp": {"type": "string"},
            "artifacts": {"type": "array", "items": {"type": "string"}},
        }
    ),
}


def validate_artifact(kind: str, obj) -> None:
    """Raise jsonschema.ValidationError unless ``obj`` matches ``kind``."""
    jsonschema.validate(obj, SCHEMAS[kind])
