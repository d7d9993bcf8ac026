"""Image file helpers: PFM float maps, CSV depth grids and 8-bit images."""

from __future__ import annotations

import os
import re
from pathlib import Path

import numpy as np


class ImageFormatError(ValueError):
    pass


def write_pfm(path, img) -> None:
    """Write a single-channel little-endian PFM (rows stored bottom-up)."""
    a = np.asarray(img, dtype="<f4")
    if a.ndim != 2:
        raise ValueError("PFM writer expects a 2-D array")
    h, w = a.shape
    with open(path, "wb") as fh:
        fh.write(b"Pf\n%d %d\n-1.0\n" % (w, h))
        fh.write(np.ascontiguousarray(a[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    """Read a PFM file (grayscale ``Pf`` or colour ``PF``; colour is returned
    as H x W x 3).  Values come back as float64 in top-down row order."""
    data = Path(path).read_bytes()
    m = re.match(rb"(P[Ff])\s+(\d+)\s+(\d+)\s+(\S+)\s", data)
    if not m:
        raise ImageFormatError(f"{path}: not a PFM file")
    channels = 3 if m.group(1) == b"PF" else 1
    w, h = int(m.group(2)), int(m.group(3))
    try:
        scale = float(m.group(4))
    except ValueError as exc:
        raise ImageFormatError(f"{path}: bad PFM scale") from exc
    dtype = "<f4" if scale < 0 else ">f4"
    count = w * h * channels
    body = data[m.end():]
    if len(body) < 4 * count:
        raise ImageFormatError(f"{path}: truncated PFM data")
    arr = np.frombuffer(body, dtype=dtype, count=count).astype(float)
    shape = (h, w, 3) if channels == 3 else (h, w)
    return arr.reshape(shape)[::-1].copy()


def read_csv_grid(path) -> np.ndarray:
    try:
        arr = np.loadtxt(path, delimiter=",", ndmin=2)
    except ValueError as exc:
        raise ImageFormatError(f"{path}: {exc}") from exc
    return arr.astype(float)


def write_csv_grid(path, img, fmt="%.9g") -> None:
    np.savetxt(path, np.asarray(img, dtype=float), delimiter=",", fmt=fmt)


def read_depth(path) -> np.ndarray:
    """Depth image in meters from ``.pfm`` or ``.csv``."""
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".pfm":
        img = read_pfm(path)
    elif ext == ".csv":
        img = read_csv_grid(path)
    else:
        raise ImageFormatError(f"{path}: depth must be .pfm or .csv")
    if img.ndim != 2:
        raise ImageFormatError(f"{path}: depth image must be single channel")
    return img


def read_gray(path) -> np.ndarray:
    """Any Pillow-readable image as grayscale floats in [0, 1]."""
    from PIL import Image

    with Image.open(path) as im:
        if im.mode in ("F", "I", "I;16"):
            a = np.asarray(im, dtype=float)
            top = a.max() if a.size and a.max() > 1 else 1.0
            return np.clip(a / top, 0.0, 1.0)
        return np.asarray(im.convert("L"), dtype=float) / 255.0


def write_gray(path, img) -> None:
    from PIL import Image

    a = np.clip(np.asarray(img, dtype=float), 0.0, 1.0)
    Image.fromarray(np.round(a * 255).astype(np.uint8)).save(path)
