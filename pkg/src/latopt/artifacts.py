"""Writers and readers for run artifacts (CSV with LF endings, binary PGM, JSON)."""
from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np
from PIL import Image

from .core_fe import tensor_to_vector, vector_to_tensor

FIELD_COLUMNS = ("D11", "D12", "D13", "D22", "D23", "D33")


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def write_csv(path, header, rows) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if header:
            w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) if not isinstance(v, str) else v for v in row])
    return path


def read_csv(path, header: bool = True) -> tuple[list, np.ndarray]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    head = rows[0] if header else []
    body = rows[1:] if header else rows
    return head, np.array([[float(v) for v in r] for r in body])


def write_field_csv(path, field) -> Path:
    """One row per element with the six independent Kelvin entries."""
    return write_csv(path, FIELD_COLUMNS, tensor_to_vector(np.asarray(field)))


def read_field_csv(path) -> np.ndarray:
    _, data = read_csv(path)
    return vector_to_tensor(data)


def write_grid_csv(path, grid) -> Path:
    """Row-major density grid without header (row 0 is the bottom row of the cell)."""
    return write_csv(path, None, np.asarray(grid))


def write_pgm(path, grid) -> Path:
    """8-bit binary PGM of ``rho * 255`` rounded; the image is flipped so +y points up."""
    g = np.clip(np.asarray(grid, dtype=float), 0.0, 1.0)
    img = np.rint(g[::-1] * 255.0).astype(np.uint8)
    path = Path(path)
    Image.fromarray(img).save(path, format="PPM")
    return path


def read_pgm(path) -> np.ndarray:
    """Inverse of :func:`write_pgm`, returning the 0..255 array with row 0 at the bottom."""
    with Image.open(path) as im:
        return np.asarray(im)[::-1].copy()


def write_json(path, obj) -> Path:
    path = Path(path)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")
    return path


def read_json(path):
    return json.loads(Path(path).read_text())


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.bool_):
        return bool(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")
