"""File formats: flat little-endian float64 blobs with JSON sidecars, plus
plain-text PGM (P2) and CSV debug exports."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Sequence

import numpy as np


def write_flat(path, arrays: Sequence[np.ndarray], sidecar: dict) -> tuple[Path, Path]:
    """Concatenate ``arrays`` as ``<f8`` into ``path`` and write ``path.json``.

    The sidecar gains a ``tensors`` list with each array's shape, in order.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    flat = [np.ascontiguousarray(a, dtype="<f8").ravel() for a in arrays]
    blob = np.concatenate(flat) if flat else np.zeros(0, dtype="<f8")
    path.write_bytes(blob.tobytes())
    meta = dict(sidecar)
    meta["tensors"] = [list(np.shape(a)) for a in arrays]
    meta["dtype"] = "float64-le"
    side = path.with_suffix(path.suffix + ".json")
    side.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path, side


def read_flat(path) -> tuple[list[np.ndarray], dict]:
    path = Path(path)
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    blob = np.frombuffer(path.read_bytes(), dtype="<f8")
    sizes = [int(np.prod(s)) for s in meta["tensors"]]
    if sum(sizes) != blob.size:
        raise ValueError(
            f"{path}: sidecar describes {sum(sizes)} values but file holds {blob.size}"
        )
    arrays, offset = [], 0
    for shape, n in zip(meta["tensors"], sizes):
        arrays.append(blob[offset:offset + n].astype(np.float64).reshape(shape))
        offset += n
    return arrays, meta


def write_pgm(path, image: np.ndarray, maxval: int = 255) -> Path:
    """Write a 2-D array as an ASCII PGM, linearly rescaled to ``[0, maxval]``."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ValueError(f"PGM export needs a 2-D array, got shape {image.shape}")
    lo, hi = float(image.min()), float(image.max())
    if hi > lo:
        levels = np.rint((image - lo) / (hi - lo) * maxval).astype(int)
    else:
        levels = np.zeros(image.shape, dtype=int)
    h, w = image.shape
    lines = ["P2", f"{w} {h}", str(maxval)]
    lines += [" ".join(str(v) for v in row) for row in levels]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n")
    return path


def read_pgm(path) -> np.ndarray:
    tokens = Path(path).read_text().split()
    if tokens[0] != "P2":
        raise ValueError(f"{path}: not an ASCII PGM")
    w, h = int(tokens[1]), int(tokens[2])
    return np.array(tokens[4:4 + w * h], dtype=int).reshape(h, w)


def write_csv_matrix(path, matrix: np.ndarray) -> Path:
    """Row-major CSV with 6 significant digits."""
    matrix = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    text = "\n".join(",".join(f"{v:.6g}" for v in row) for row in matrix)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text + "\n")
    return path
