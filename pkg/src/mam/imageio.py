"""Plain-text PBM (P1) and PGM (P2) images."""

from __future__ import annotations

from pathlib import Path

import numpy as np


class ImageFormatError(ValueError):
    pass


def _tokens(text: str) -> list[str]:
    out = []
    for line in text.splitlines():
        out.extend(line.split("#", 1)[0].split())
    return out


def dumps_pbm(image) -> str:
    img = np.asarray(image)
    if img.ndim != 2 or not np.isin(img, (0, 1)).all():
        raise ImageFormatError("PBM needs a 2-D 0/1 array")
    rows, cols = img.shape
    body = "\n".join(" ".join(str(int(v)) for v in row) for row in img)
    return f"P1\n{cols} {rows}\n{body}\n"


def loads_pbm(text: str) -> np.ndarray:
    tok = _tokens(text)
    if not tok or tok[0] != "P1":
        raise ImageFormatError("not a plain PBM (P1) file")
    try:
        cols, rows = int(tok[1]), int(tok[2])
    except (IndexError, ValueError) as exc:
        raise ImageFormatError("bad PBM header") from exc
    # P1 pixels may also be packed without separators
    bits = "".join(tok[3:])
    if len(bits) != rows * cols or set(bits) - {"0", "1"}:
        raise ImageFormatError(f"expected {rows * cols} pixels of 0/1")
    return np.frombuffer(bits.encode(), dtype=np.uint8).reshape(rows, cols) - ord("0")


def dumps_pgm(values, maxval: int = 255) -> str:
    """Grey image; non-negative values are scaled so the largest maps to ``maxval``."""
    arr = np.asarray(values, dtype=float)
    if arr.ndim != 2:
        raise ImageFormatError("PGM needs a 2-D array")
    top = arr.max() if arr.size else 0.0
    scaled = np.zeros(arr.shape, dtype=np.int64) if top <= 0 else np.rint(np.clip(arr, 0, None) / top * maxval).astype(np.int64)
    rows, cols = arr.shape
    body = "\n".join(" ".join(str(int(v)) for v in row) for row in scaled)
    return f"P2\n{cols} {rows}\n{maxval}\n{body}\n"


def loads_pgm(text: str) -> np.ndarray:
    tok = _tokens(text)
    if not tok or tok[0] != "P2":
        raise ImageFormatError("not a plain PGM (P2) file")
    try:
        cols, rows, _maxval = int(tok[1]), int(tok[2]), int(tok[3])
        vals = np.array([int(t) for t in tok[4:]], dtype=np.int64)
    except (IndexError, ValueError) as exc:
        raise ImageFormatError("bad PGM data") from exc
    if len(vals) != rows * cols:
        raise ImageFormatError(f"expected {rows * cols} pixels")
    return vals.reshape(rows, cols)


def read_pbm(path) -> np.ndarray:
    return loads_pbm(Path(path).read_text())


def write_pbm(path, image) -> None:
    Path(path).write_text(dumps_pbm(image))


def write_pgm(path, values) -> None:
    Path(path).write_text(dumps_pgm(values))
