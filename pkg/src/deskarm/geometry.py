"""Small planar-geometry helpers: angle wrapping, rotated rectangles and
convex polygon overlap."""

from __future__ import annotations

import math

import numpy as np


def wrap_half_pi(angle):
    """Wrap angles into (-pi/2, pi/2] using pi-periodicity (works on arrays)."""
    a = np.asarray(angle, dtype=float)
    w = np.mod(a + np.pi / 2, np.pi) - np.pi / 2
    w = np.where(w <= -np.pi / 2, w + np.pi, w)
    return float(w) if w.ndim == 0 else w


def angle_diff_mod_pi(a: float, b: float) -> float:
    """Smallest absolute difference between two line orientations."""
    d = math.fmod(a - b, math.pi)
    d = abs(d)
    return min(d, math.pi - d)


def rotated_rect(center, angle: float, length: float, height: float) -> np.ndarray:
    """Corners of a rectangle whose ``length`` side points along ``angle``.

    ``angle`` is measured from +x toward +y.  Vertex order: the first two
    corners span the length side, so ``v0 -> v1`` runs along the axis.
    """
    cx, cy = center
    a = np.array([math.cos(angle), math.sin(angle)]) * (length / 2.0)
    b = np.array([-math.sin(angle), math.cos(angle)]) * (height / 2.0)
    c = np.array([cx, cy], dtype=float)
    return np.array([c - a - b, c + a - b, c + a + b, c - a + b])


def polygon_area(poly) -> float:
    """Signed shoelace area (positive for counter-clockwise in x-right/y-up)."""
    p = np.asarray(poly, dtype=float)
    if len(p) < 3:
        return 0.0
    x, y = p[:, 0], p[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def _ccw(poly: np.ndarray) -> np.ndarray:
    return poly if polygon_area(poly) >= 0 else poly[::-1]


def clip_convex(subject, clip) -> np.ndarray:
    """Sutherland-Hodgman: intersection of ``subject`` with convex ``clip``."""
    out = [tuple(p) for p in _ccw(np.asarray(subject, dtype=float))]
    cp = _ccw(np.asarray(clip, dtype=float))
    for i in range(len(cp)):
        if not out:
            break
        a, b = cp[i], cp[(i + 1) % len(cp)]
        ex, ey = b[0] - a[0], b[1] - a[1]

        def side(p):
            return ex * (p[1] - a[1]) - ey * (p[0] - a[0])

        inp, out = out, []
        for j in range(len(inp)):
            p, q = inp[j], inp[(j + 1) % len(inp)]
            sp, sq = side(p), side(q)
            if sp >= 0:
                out.append(p)
            if (sp >= 0) != (sq >= 0):
                t = sp / (sp - sq)
                out.append((p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])))
    return np.array(out, dtype=float).reshape(-1, 2)


def convex_iou(a, b) -> float:
    """Jaccard index of two convex polygons."""
    area_a = abs(polygon_area(a))
    area_b = abs(polygon_area(b))
    inter = abs(polygon_area(clip_convex(a, b)))
    union = area_a + area_b - inter
    return inter / union if union > 0 else 0.0
