"""Plain-text tensor checkpoints.

Layout::

    CKPT v1
    <name> <rows> <cols>
    <rows lines of cols floats>
    ...

Tensors are written in lexicographic name order and every float uses
``repr`` so that values round-trip exactly. One-dimensional arrays are
stored as a single row; :func:`load_checkpoint` returns 2-D arrays and
callers flatten where they expect vectors.
"""

from __future__ import annotations

import hashlib
from pathlib import Path
from typing import Dict, Mapping

import numpy as np

from .errors import DataError, NumericalError

HEADER = "CKPT v1"


def _as_matrix(name, value):
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise DataError(f"tensor {name!r} has {arr.ndim} dimensions; only 0-2 are supported")
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"tensor {name!r} contains non-finite values")
    return arr


def dumps(tensors: Mapping[str, np.ndarray]) -> str:
    lines = [HEADER]
    for name in sorted(tensors):
        if not name or any(ch.isspace() for ch in name):
            raise DataError(f"invalid tensor name {name!r}")
        arr = _as_matrix(name, tensors[name])
        rows, cols = arr.shape
        lines.append(f"{name} {rows} {cols}")
        for row in arr.tolist():
            lines.append(" ".join(map(repr, row)))
    return "\n".join(lines) + "\n"


def loads(text: str) -> Dict[str, np.ndarray]:
    lines = text.splitlines()
    if not lines or lines[0].strip() != HEADER:
        raise DataError(f"not a checkpoint: expected header {HEADER!r}")
    out: Dict[str, np.ndarray] = {}
    pos = 1
    while pos < len(lines):
        if not lines[pos].strip():
            pos += 1
            continue
        parts = lines[pos].split()
        if len(parts) != 3:
            raise DataError(f"line {pos + 1}: malformed tensor header {lines[pos]!r}")
        name, rows, cols = parts[0], int(parts[1]), int(parts[2])
        block = lines[pos + 1:pos + 1 + rows]
        if len(block) != rows:
            raise DataError(f"tensor {name!r}: expected {rows} rows, file ended early")
        data = np.zeros((rows, cols))
        for r, line in enumerate(block):
            vals = line.split()
            if len(vals) != cols:
                raise DataError(f"tensor {name!r} row {r}: expected {cols} values, got {len(vals)}")
            data[r] = [float(v) for v in vals]
        out[name] = data
        pos += 1 + rows
    return out


def save_checkpoint(path, tensors: Mapping[str, np.ndarray]) -> str:
    """Write ``tensors`` to ``path`` and return the SHA-256 of the bytes written."""
    text = dumps(tensors)
    Path(path).write_text(text)
    return hashlib.sha256(text.encode()).hexdigest()


def load_checkpoint(path) -> Dict[str, np.ndarray]:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    return loads(text)


def tensors_hash(tensors: Mapping[str, np.ndarray]) -> str:
    """Hash of the serialized form; equal hashes mean bit-identical tensors."""
    return hashlib.sha256(dumps(tensors).encode()).hexdigest()
