"""Artifact writers: CSV with round-trip floats, JSON, PGM label images and raw grids."""
from __future__ import annotations

import csv
import hashlib
import json
import math
from pathlib import Path

import numpy as np


def _fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        return format(float(x), ".17g")
    if isinstance(x, (np.integer,)):
        return str(int(x))
    return str(x)


def write_csv(path, header, rows) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    return path


def read_csv(path) -> tuple[list[str], list[list[float]]]:
    with Path(path).open(newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        rows = [[float(v) for v in row] for row in r]
    return header, rows


def to_jsonable(obj):
    """Plain Python types for JSON; non-finite floats become strings."""
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else repr(x)
    if isinstance(obj, complex):
        return [to_jsonable(obj.real), to_jsonable(obj.imag)]
    return obj


def write_json(path, obj) -> Path:
    path = Path(path)
    path.write_text(json.dumps(to_jsonable(obj), indent=2, sort_keys=True) + "\n")
    return path


def read_json(path):
    return json.loads(Path(path).read_text())


def write_pgm(path, labels: np.ndarray) -> Path:
    """Plain (P2) graymap; each label value is its own gray level."""
    labels = np.asarray(labels)
    if labels.ndim == 1:
        labels = labels[None, :]
    if labels.min() < 0:
        raise ValueError("labels must be non-negative")
    maxval = max(int(labels.max()), 1)
    if maxval > 65535:
        raise ValueError("too many labels for a PGM image")
    h, w = labels.shape
    lines = ["P2", f"{w} {h}", str(maxval)]
    lines += [" ".join(str(int(v)) for v in row) for row in labels]
    path = Path(path)
    path.write_text("\n".join(lines) + "\n")
    return path


def read_pgm(path) -> np.ndarray:
    tokens = [t for line in Path(path).read_text().splitlines() if not line.startswith("#") for t in line.split()]
    if tokens[0] != "P2":
        raise ValueError("not a plain PGM file")
    w, h = int(tokens[1]), int(tokens[2])
    return np.array(tokens[4:4 + w * h], dtype=np.int64).reshape(h, w)


def write_raw(path, array: np.ndarray, **meta) -> tuple[Path, Path]:
    """Little-endian float64 bytes plus a JSON sidecar with shape and dtype."""
    path = Path(path)
    arr = np.ascontiguousarray(array, dtype="<f8")
    path.write_bytes(arr.tobytes(order="C"))
    side = path.with_suffix(path.suffix + ".json")
    write_json(side, {"shape": list(arr.shape), "dtype": "<f8", "order": "C", "bytes": arr.nbytes, **meta})
    return path, side


def read_raw(path) -> np.ndarray:
    path = Path(path)
    meta = read_json(path.with_suffix(path.suffix + ".json"))
    data = np.frombuffer(path.read_bytes(), dtype=meta["dtype"])
    return data.reshape(meta["shape"])


def write_complex(path_stem, values: np.ndarray, **meta) -> list[Path]:
    """Complex grid as paired real/imaginary raw files."""
    stem = Path(path_stem)
    out = []
    for part, arr in (("re", values.real), ("im", values.imag)):
        out.extend(write_raw(stem.with_name(f"{stem.name}_{part}.f64"), arr, **meta))
    return out


def sha256(path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
