"""Drawing pipeline: picture -> polylines -> strokes on a calibrated plane
-> timed joint trajectory for the arm holding a pen.

Images are float arrays in [0, 1] with row 0 at the top.  Pixel polylines
use ``(x, y) = (column, row)``.  Plane coordinates are meters along the
calibration's ``u_axis`` and ``v_axis``.

The pen is handled by the wrist-pitch joint alone: it is left out of the
arm's IK so the other six joints carry the pen across the paper while the
wrist pitch lowers it to the surface and lifts it between strokes.
"""

from __future__ import annotations

import csv
import io
import math
import re
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage, optimize

from .chain import (IkOptions, IkTask, KinematicChain, clamp_to_limits, forward_kinematics,
                    min_travel_time, solve_ik)
from .transforms import RigidTransform


class NoForegroundError(ValueError):
    """The image has no foreground (blank or constant)."""

    def __init__(self, shape):
        super().__init__("image has no foreground")
        self.mask = np.zeros(shape, dtype=bool)


class CollinearPointsError(ValueError):
    pass


class UnreachableWaypointError(RuntimeError):
    def __init__(self, stroke_index: int, residual: float):
        super().__init__(f"stroke {stroke_index}: pen target unreachable "
                         f"(position residual {residual:.3g} m)")
        self.stroke_index = stroke_index
        self.residual = residual


# --------------------------------------------------------------------------
# data types

@dataclass(frozen=True)
class PlaneCalibration:
    origin: np.ndarray
    u_axis: np.ndarray
    v_axis: np.ndarray
    normal: np.ndarray
    rms_residual: float = 0.0

    def __post_init__(self):
        for name in ("origin", "u_axis", "v_axis", "normal"):
            a = np.array(getattr(self, name), dtype=float)
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        u, v, n = self.u_axis, self.v_axis, self.normal
        if (abs(np.linalg.norm(u) - 1) > 1e-9 or abs(np.linalg.norm(v) - 1) > 1e-9
                or abs(u @ v) > 1e-9 or np.abs(np.cross(u, v) - n).max() > 1e-9):
            raise ValueError("plane axes must be orthonormal with u x v = normal")

    @classmethod
    def from_axes(cls, origin, u_axis, v_axis, rms_residual=0.0) -> "PlaneCalibration":
        u, v = np.asarray(u_axis, float), np.asarray(v_axis, float)
        return cls(origin, u, v, np.cross(u, v), rms_residual)

    def to_world(self, xy, height=0.0) -> np.ndarray:
        """Plane coordinates (N, 2) -> world points, ``height`` along the normal."""
        p = np.atleast_2d(np.asarray(xy, dtype=float))
        h = np.broadcast_to(np.asarray(height, dtype=float), (len(p),))
        return (self.origin + p[:, :1] * self.u_axis + p[:, 1:2] * self.v_axis
                + h[:, None] * self.normal)

    def signed_distance(self, points) -> np.ndarray:
        return (np.atleast_2d(points) - self.origin) @ self.normal


@dataclass(frozen=True)
class Stroke:
    points: np.ndarray
    pen_down: bool = True

    def __post_init__(self):
        p = np.array(self.points, dtype=float).reshape(-1, 2)
        if len(p) > 1:
            keep = np.r_[True, np.any(p[1:] != p[:-1], axis=1)]
            p = p[keep]
        if self.pen_down and len(p) < 2:
            raise ValueError("a pen-down stroke needs at least 2 distinct points")
        p.setflags(write=False)
        object.__setattr__(self, "points", p)

    @property
    def closed(self) -> bool:
        return len(self.points) > 2 and np.array_equal(self.points[0], self.points[-1])

    @property
    def length(self) -> float:
        return float(np.linalg.norm(np.diff(self.points, axis=0), axis=1).sum())


@dataclass(frozen=True)
class DrawingPlan:
    strokes: tuple
    pen_travel_height: float
    calibration: PlaneCalibration | None = None
    source_image_id: str = ""

    def __post_init__(self):
        s = tuple(self.strokes)
        object.__setattr__(self, "strokes", s)
        if s and (s[0].pen_down or s[-1].pen_down):
            raise ValueError("a drawing plan must begin and end pen-up")

    @property
    def pen_down_strokes(self) -> list:
        return [s for s in self.strokes if s.pen_down]


@dataclass(frozen=True)
class PenContactModel:
    contact_torque_limit: float = 0.3
    press_depth: float = 0.0005
    lift_height: float = 0.02

    def __post_init__(self):
        if not 0.0 < self.contact_torque_limit <= 1.0:
            raise ValueError("contact_torque_limit must be in (0, 1]")
        if self.press_depth < 0 or self.lift_height <= 0:
            raise ValueError("press_depth must be >= 0 and lift_height > 0")


@dataclass(frozen=True)
class TrajectoryPoint:
    time: float
    q: np.ndarray
    pen_down: bool
    stroke_index: int       # index into the plan's pen-down strokes, -1 in transit
    wrist_torque: float     # commanded fraction of the wrist-pitch torque


# --------------------------------------------------------------------------
# image stages

def preprocess(image, contrast: float = 1.0, brightness: float = 0.0) -> np.ndarray:
    """``clip(contrast * image + brightness, 0, 1)``."""
    return np.clip(contrast * np.asarray(image, dtype=float) + brightness, 0.0, 1.0)


def otsu_threshold(image) -> float:
    """Otsu's threshold, evaluated exactly over the image's distinct levels.

    Returns the highest level of the lower class, so ``image > t`` is the
    upper class.  Ties go to the lowest cut.
    """
    levels, counts = np.unique(np.asarray(image, dtype=float).ravel(), return_counts=True)
    if len(levels) < 2:
        return float(levels[0]) if len(levels) else 0.0
    w0 = np.cumsum(counts)[:-1].astype(float)
    w1 = counts.sum() - w0
    m0 = np.cumsum(counts * levels)[:-1]
    mu0 = m0 / w0
    mu1 = ((counts * levels).sum() - m0) / w1
    between = w0 * w1 * (mu0 - mu1) ** 2
    return float(levels[int(np.argmax(between))])


def extract_foreground(image, foreground: str = "bright") -> np.ndarray:
    """Otsu split, then the largest 8-connected component of the chosen class.

    Raises :class:`NoForegroundError` when the image has a single gray level.
    Equal-size components are resolved in favour of the one met first in
    row-major order.
    """
    if foreground not in ("bright", "dark"):
        raise ValueError("foreground must be 'bright' or 'dark'")
    img = np.asarray(image, dtype=float)
    if img.size == 0 or img.max() - img.min() <= 1e-12:
        raise NoForegroundError(img.shape)
    t = otsu_threshold(img)
    fg = img > t if foreground == "bright" else img <= t
    labels, n = ndimage.label(fg, structure=np.ones((3, 3)))
    if n == 0:
        raise NoForegroundError(img.shape)
    sizes = np.bincount(labels.ravel())[1:]
    return labels == int(np.argmax(sizes)) + 1


# clockwise in image coordinates (rows grow downward), starting west
_MOORE = [(0, -1), (-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1)]


def moore_trace(mask, start) -> list:
    """Outer boundary of the 8-connected region containing ``start``.

    ``start`` must be the region's first pixel in row-major order.  Returns
    ``(row, col)`` pixels in clockwise order, not repeating the first.
    Tracing stops when the first move (pixel and backtrack direction) is
    about to repeat, which also terminates on one-pixel-wide regions where
    the start is never re-entered from the west.
    """
    m = np.pad(np.asarray(mask, dtype=bool), 1)
    s = (start[0] + 1, start[1] + 1)
    c, b = s, (s[0], s[1] - 1)
    out = [s]
    first_move = None
    for _ in range(8 * m.size):
        k = _MOORE.index((b[0] - c[0], b[1] - c[1]))
        for step in range(1, 9):
            dr, dc = _MOORE[(k + step) % 8]
            p = (c[0] + dr, c[1] + dc)
            if m[p]:
                pr, pc = _MOORE[(k + step - 1) % 8]
                b, c = (c[0] + pr, c[1] + pc), p
                break
        else:
            break  # isolated pixel
        if first_move is None:
            first_move = (c, b)
        elif (c, b) == first_move:
            out.pop()  # the start pixel, reached again just before
            break
        out.append(c)
    return [(r - 1, q - 1) for r, q in out]


def _point_segment_distance(p, a, b) -> np.ndarray:
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0.0:
        return np.linalg.norm(p - a, axis=-1)
    t = np.clip((p - a) @ ab / denom, 0.0, 1.0)
    return np.linalg.norm(p - (a + t[..., None] * ab), axis=-1)


def douglas_peucker(points, epsilon: float) -> np.ndarray:
    """Open-polyline simplification keeping both end points."""
    p = np.asarray(points, dtype=float)
    if len(p) < 3:
        return p.copy()
    keep = np.zeros(len(p), dtype=bool)
    keep[0] = keep[-1] = True
    stack = [(0, len(p) - 1)]
    while stack:
        i, j = stack.pop()
        if j <= i + 1:
            continue
        d = _point_segment_distance(p[i + 1:j], p[i], p[j])
        k = int(np.argmax(d))
        if d[k] > epsilon:
            k += i + 1
            keep[k] = True
            stack.append((i, k))
            stack.append((k, j))
    return p[keep]


def simplify_closed(points, epsilon: float) -> np.ndarray:
    """Douglas-Peucker for a closed curve: split at the first point and the
    point farthest from it, simplify both halves.  Result repeats its first
    point at the end."""
    p = np.asarray(points, dtype=float)
    if len(p) < 3:
        return np.vstack([p, p[:1]])
    far = int(np.argmax(np.linalg.norm(p - p[0], axis=1)))
    first = douglas_peucker(p[:far + 1], epsilon)
    second = douglas_peucker(np.vstack([p[far:], p[:1]]), epsilon)
    return np.vstack([first, second[1:]])


def vectorize(mask, epsilon: float = 1.0) -> list:
    """Closed polylines ``(x, y)`` tracing every region and hole boundary.

    Regions are 8-connected; holes (background not reachable from the
    border, 4-connected) are traced as their own loops.  Single-pixel
    regions are skipped.
    """
    m = np.asarray(mask, dtype=bool)
    if not m.any():
        return []
    loops = []
    regions, n = ndimage.label(m, structure=np.ones((3, 3)))
    bg, nb = ndimage.label(~m)
    border = set(np.unique(np.r_[bg[0], bg[-1], bg[:, 0], bg[:, -1]]))
    holes = [(bg == k) for k in range(1, nb + 1) if k not in border]
    for region in [regions == k for k in range(1, n + 1)] + holes:
        rows, cols = np.nonzero(region)
        start = (int(rows[0]), int(cols[0]))
        boundary = moore_trace(region, start)
        if len(boundary) < 2:
            continue
        xy = np.array([(c, r) for r, c in boundary], dtype=float)
        loops.append(simplify_closed(xy, epsilon))
    return loops


def _merge_collinear(p: np.ndarray, tol: float, closed: bool) -> np.ndarray:
    if closed:
        ring = p[:-1]
        # start at a real corner so the seam is not left as a fake vertex
        for i in range(len(ring)):
            d_in = ring[i] - ring[i - 1]
            d_out = ring[(i + 1) % len(ring)] - ring[i]
            if _turn(d_in, d_out) >= tol:
                ring = np.roll(ring, -i, axis=0)
                break
        p = np.vstack([ring, ring[:1]])
    out = [p[0], p[1]]
    run_dir = p[1] - p[0]   # direction of the run's first segment, so slow
    for i in range(2, len(p)):  # curves cannot drift through the tolerance
        d = p[i] - p[i - 1]
        if _turn(run_dir, d) < tol:
            out[-1] = p[i]
        else:
            out.append(p[i])
            run_dir = d
    return np.array(out)


def _turn(a, b) -> float:
    return abs(math.atan2(a[0] * b[1] - a[1] * b[0], a[0] * b[0] + a[1] * b[1]))


def split_polyline(points, max_seg_len: float) -> np.ndarray:
    """Insert evenly spaced vertices so no segment exceeds ``max_seg_len``."""
    p = np.asarray(points, dtype=float)
    out = [p[0]]
    for a, b in zip(p[:-1], p[1:]):
        n = max(1, math.ceil(np.linalg.norm(b - a) / max_seg_len))
        for k in range(1, n + 1):
            out.append(a + (b - a) * (k / n))
    return np.array(out)


def segment_and_merge(polylines, max_seg_len: float = 40.0,
                      merge_angle_tol: float = math.radians(3.0), start=(0.0, 0.0)) -> list:
    """Split polylines into short segments, merge collinear runs back, and
    order the strokes greedily by nearest start point.

    Open strokes may be drawn backwards and closed strokes may start at any
    vertex, whichever is nearest the pen.  Merged collinear runs are kept as
    one segment even when longer than ``max_seg_len``.
    """
    if max_seg_len <= 0:
        raise ValueError("max_seg_len must be positive")
    strokes = []
    for line in polylines:
        p = np.asarray(line, dtype=float)
        if len(p) > 1:
            p = p[np.r_[True, np.any(p[1:] != p[:-1], axis=1)]]
        if len(p) < 2:
            continue
        closed = len(p) > 2 and np.array_equal(p[0], p[-1])
        pieces = split_polyline(p, max_seg_len)
        strokes.append((_merge_collinear(pieces, merge_angle_tol, closed), closed))

    ordered = []
    pos = np.asarray(start, dtype=float)
    remaining = list(range(len(strokes)))
    while remaining:
        best = None
        for idx in remaining:
            p, closed = strokes[idx]
            cands = range(len(p) - 1) if closed else (0, len(p) - 1)
            for v in cands:
                d = float(np.linalg.norm(p[v] - pos))
                if best is None or d < best[0]:
                    best = (d, idx, v)
        _, idx, v = best
        p, closed = strokes[idx]
        if closed:
            ring = np.roll(p[:-1], -v, axis=0)
            p = np.vstack([ring, ring[:1]])
        elif v:
            p = p[::-1]
        ordered.append(Stroke(p, True))
        pos = p[-1]
        remaining.remove(idx)
    return ordered


# --------------------------------------------------------------------------
# plane

def fit_plane(points, toward=None) -> PlaneCalibration:
    """Total-least-squares plane through >= 3 points.

    The normal is the smallest principal direction of the centred points,
    ``u_axis`` the largest and ``v_axis = normal x u_axis``.  Signs are
    fixed so the result does not depend on the SVD: the normal points
    toward ``toward`` when given (else its largest component is positive),
    and ``u_axis`` has a positive largest component.
    """
    p = np.asarray(points, dtype=float)
    if p.ndim != 2 or p.shape[1] != 3 or len(p) < 3:
        raise ValueError("need at least 3 points in 3-D")
    origin = p.mean(axis=0)
    _, s, vt = np.linalg.svd(p - origin)
    if s[1] <= 1e-9 * max(s[0], 1e-300):
        raise CollinearPointsError("calibration points are collinear or coincident")
    u, n = vt[0], vt[2]
    if u[np.argmax(np.abs(u))] < 0:
        u = -u
    if toward is not None:
        if (np.asarray(toward, float) - origin) @ n < 0:
            n = -n
    elif n[np.argmax(np.abs(n))] < 0:
        n = -n
    v = np.cross(n, u)
    n = np.cross(u, v)
    d = (p - origin) @ n
    rms = 0.0 if len(p) == 3 else float(np.sqrt(np.mean(d * d)))
    return PlaneCalibration(origin, u, v, n, rms)


def plane_rms_distance(cal: PlaneCalibration, points) -> float:
    """RMS of the orthogonal distances from ``points`` to the plane."""
    d = cal.signed_distance(points)
    return float(np.sqrt(np.mean(d * d)))


def write_calibration(path, cal: PlaneCalibration) -> None:
    vals = [*cal.origin, *cal.u_axis, *cal.v_axis, cal.rms_residual]
    with open(path, "w") as fh:
        fh.write("# origin(3) u_axis(3) v_axis(3) rms_residual, meters\n")
        fh.write(" ".join(repr(float(x)) for x in vals) + "\n")


def read_calibration(path) -> PlaneCalibration:
    with open(path) as fh:
        text = " ".join(line for line in fh if not line.lstrip().startswith("#"))
    vals = [float(x) for x in text.split()]
    if len(vals) != 10:
        raise ValueError(f"{path}: expected 10 numbers, found {len(vals)}")
    return PlaneCalibration.from_axes(vals[0:3], vals[3:6], vals[6:9], vals[9])


def strokes_to_plane(strokes: Sequence[Stroke], cal: PlaneCalibration, scale: float,
                     offset=(0.0, 0.0), lift_height: float = 0.02,
                     source_image_id: str = "") -> DrawingPlan:
    """Pixel strokes -> plane coordinates, with pen-up moves around them.

    ``(x, y) = scale * pixel + offset``; the world point is
    ``origin + x u_axis + y v_axis``.  A one-point pen-up stroke opens and
    closes the plan; pen-up transfers join consecutive strokes.
    """
    ox, oy = offset
    down = [Stroke(np.asarray(s.points) * scale + [ox, oy], True) for s in strokes
            if s.pen_down]
    out = []
    for i, s in enumerate(down):
        if i == 0:
            out.append(Stroke(s.points[:1], False))
        else:
            out.append(Stroke(np.vstack([down[i - 1].points[-1], s.points[0]]), False))
        out.append(s)
    if down:
        out.append(Stroke(down[-1].points[-1:], False))
    return DrawingPlan(tuple(out), lift_height, cal, source_image_id)


# --------------------------------------------------------------------------
# arm trajectory

def resample(points, spacing: float) -> np.ndarray:
    """Insert points so consecutive ones are at most ``spacing`` apart."""
    return split_polyline(points, spacing)


def _lift_pitch(chain, q, pitch_idx, effector, cal, height) -> float:
    """Wrist-pitch angle putting the pen ``height`` above the plane while the
    other joints stay at ``q``; searches outward from the current angle and
    takes the nearer solution."""
    def h(angle):
        x = q.copy()
        x[pitch_idx] = angle
        tip = forward_kinematics(chain, x)[effector].translation
        return float(cal.signed_distance(tip)[0]) - height

    a0 = q[pitch_idx]
    lo, hi = chain.lower[pitch_idx], chain.upper[pitch_idx]
    best = None
    for bound in (hi, lo):
        grid = np.linspace(a0, bound, 64)
        vals = [h(a) for a in grid]
        for k in range(1, len(grid)):
            if vals[k - 1] < 0 <= vals[k]:
                root = optimize.brentq(h, grid[k - 1], grid[k], xtol=1e-12)
                if best is None or abs(root - a0) < abs(best - a0):
                    best = root
                break
    if best is None:
        raise UnreachableWaypointError(-1, height)
    return best


def plan_pen_trajectory(plan: DrawingPlan, chain: KinematicChain, pen_model: PenContactModel,
                        seed, *, pen_effector: str = "pen", pitch_joint: str = "Wrist Pitch",
                        contact_pitch: float = 0.0, pen_orientation=None,
                        spacing: float = 0.005, min_dt: float = 0.01,
                        reach_tol: float = 1e-4, opts: IkOptions | None = None) -> list:
    """Timed joint trajectory for a drawing plan.

    Every pen-down waypoint is solved with the wrist-pitch joint held at
    ``contact_pitch`` and excluded from the IK (priority 1: pen tip at the
    plane pushed in by ``press_depth``; priority 2: hand orientation
    ``pen_orientation``, default the chain's rest orientation).  Around
    each stroke the wrist pitch alone lifts the pen to ``lift_height``.
    Each step lasts the larger of ``min_dt`` and the joint-speed bound.
    """
    if not plan.strokes:
        return []
    if plan.calibration is None:
        raise ValueError("plan has no plane calibration")
    cal = plan.calibration
    opts = opts or IkOptions()
    pitch = chain.joint_index(pitch_joint)
    mask = np.ones(chain.n_joints, dtype=bool)
    mask[pitch] = False
    if pen_orientation is None:
        pen_orientation = forward_kinematics(chain, chain.neutral())[pen_effector].rotation

    q = clamp_to_limits(chain, seed).copy()
    traj = [TrajectoryPoint(0.0, q.copy(), False, -1, 1.0)]

    def push(qn, pen_down, stroke, torque):
        prev = traj[-1]
        dt = max(min_travel_time(chain, prev.q, qn), min_dt)
        traj.append(TrajectoryPoint(prev.time + dt, qn.copy(), pen_down, stroke, torque))

    def solve(point_xy, stroke, q_seed):
        target = cal.to_world(point_xy, -pen_model.press_depth)[0]
        x = q_seed.copy()
        x[pitch] = contact_pitch
        tasks = [IkTask(pen_effector, RigidTransform(pen_orientation, target),
                        orientation_weight=0.0, active_joints=mask, priority=1),
                 IkTask(pen_effector, RigidTransform(pen_orientation, target),
                        position_weight=0.0, active_joints=mask, priority=2)]
        sol, rep = solve_ik(chain, x, tasks, opts)
        if rep.residuals[0].position > reach_tol:
            raise UnreachableWaypointError(stroke, rep.residuals[0].position)
        return sol

    for k, stroke in enumerate(plan.pen_down_strokes):
        pts = resample(stroke.points, spacing)
        first = solve(pts[0], k, q)
        above = first.copy()
        above[pitch] = _lift_pitch(chain, first, pitch, pen_effector, cal,
                                   pen_model.lift_height)
        push(above, False, -1, 1.0)
        # descent under the reduced contact torque, then full torque on paper
        push(first, True, k, pen_model.contact_torque_limit)
        q = first
        for xy in pts[1:]:
            q = solve(xy, k, q)
            push(q, True, k, 1.0)
        up = q.copy()
        up[pitch] = _lift_pitch(chain, q, pitch, pen_effector, cal, pen_model.lift_height)
        push(up, False, -1, 1.0)
        q = up
    return traj


def trajectory_csv(traj: Sequence[TrajectoryPoint], joint_names: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["time", *joint_names])
    for p in traj:
        w.writerow([repr(float(p.time)), *(repr(float(x)) for x in p.q)])
    return buf.getvalue()


# --------------------------------------------------------------------------
# SVG

SVG_NS = "http://www.w3.org/2000/svg"


def _fmt(x: float) -> str:
    s = f"{x:.6f}".rstrip("0").rstrip(".")
    return "0" if s in ("-0", "") else s


def export_svg(plan: DrawingPlan, margin_mm: float = 5.0) -> str:
    """One ``<path>`` per pen-down stroke, coordinates in millimeters.

    Closed strokes list every corner with an explicit line-to back to the
    start, followed by ``Z``.
    """
    down = plan.pen_down_strokes
    if down:
        allpts = np.vstack([s.points for s in down]) * 1000.0
        lo, hi = allpts.min(axis=0) - margin_mm, allpts.max(axis=0) + margin_mm
    else:
        lo, hi = np.zeros(2), np.full(2, 2 * margin_mm)
    size = hi - lo
    lines = ['<?xml version="1.0" encoding="UTF-8"?>',
             f'<svg xmlns="{SVG_NS}" width="{_fmt(size[0])}mm" height="{_fmt(size[1])}mm" '
             f'viewBox="{_fmt(lo[0])} {_fmt(lo[1])} {_fmt(size[0])} {_fmt(size[1])}">']
    if plan.source_image_id:
        lines.append(f"  <title>{plan.source_image_id}</title>")
    for s in down:
        pts = s.points * 1000.0
        cmds = [f"M {_fmt(pts[0, 0])} {_fmt(pts[0, 1])}"]
        cmds += [f"L {_fmt(x)} {_fmt(y)}" for x, y in pts[1:]]
        if s.closed:
            cmds.append("Z")
        lines.append(f'  <path d="{" ".join(cmds)}" fill="none" stroke="black" '
                     f'stroke-width="0.5"/>')
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


_TOKEN = re.compile(r"[MLZmlz]|-?\d*\.?\d+(?:[eE][-+]?\d+)?")


def parse_svg(text: str) -> list:
    """Point lists (meters) of the paths written by :func:`export_svg`."""
    root = ET.fromstring(text)
    out = []
    for el in root.iter(f"{{{SVG_NS}}}path"):
        toks = _TOKEN.findall(el.get("d", ""))
        pts, i = [], 0
        while i < len(toks):
            t = toks[i]
            if t in "MLml":
                pts.append((float(toks[i + 1]), float(toks[i + 2])))
                i += 3
            elif t in "Zz":
                if pts and pts[-1] != pts[0]:
                    pts.append(pts[0])
                i += 1
            else:
                raise ValueError(f"unexpected path token {t!r}")
        out.append(np.array(pts) / 1000.0)
    return out


# --------------------------------------------------------------------------
# whole pipeline

@dataclass(frozen=True)
class DrawingResult:
    plan: DrawingPlan
    svg: str
    trajectory: list = field(default_factory=list)


def demo_calibration_points() -> np.ndarray:
    """The five touched points of the bundled table calibration."""
    from importlib import resources

    text = resources.files("deskarm.data").joinpath("demo_plane.txt").read_text()
    return np.loadtxt(io.StringIO(text), ndmin=2)


def draw_image(image, cal: PlaneCalibration, *, chain: KinematicChain | None = None,
               seed=None, contrast: float = 1.0, brightness: float = 0.0,
               foreground: str = "bright", epsilon: float = 1.0, max_seg_len: float = 40.0,
               merge_angle_tol: float = math.radians(3.0), scale: float = 0.001,
               offset=None, pen_model: PenContactModel | None = None,
               source_image_id: str = "") -> DrawingResult:
    """Image -> plan and SVG, plus the joint trajectory when ``chain`` is given.

    ``offset`` defaults to centring the image on the calibration origin.
    """
    img = preprocess(image, contrast, brightness)
    mask = extract_foreground(img, foreground)
    strokes = segment_and_merge(vectorize(mask, epsilon), max_seg_len, merge_angle_tol)
    pen_model = pen_model or PenContactModel()
    if offset is None:
        h, w = img.shape
        offset = (-scale * w / 2, -scale * h / 2)
    plan = strokes_to_plane(strokes, cal, scale, offset, pen_model.lift_height, source_image_id)
    traj = []
    if chain is not None:
        seed = chain.neutral() if seed is None else seed
        traj = plan_pen_trajectory(plan, chain, pen_model, seed)
    return DrawingResult(plan, export_svg(plan), traj)
