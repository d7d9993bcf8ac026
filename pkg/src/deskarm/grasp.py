"""Grasp maps in the generative grasping (GG-CNN) parameterization.

A grasp at pixel ``(u, v)`` is an angle, an opening width in pixels and a
quality score.  Angles are measured from the image +u axis toward +v, which
is a right-handed rotation about the camera's optical (z) axis, and live in
(-pi/2, pi/2] because a parallel-jaw grasp is symmetric under a half turn.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from . import images
from .geometry import angle_diff_mod_pi, convex_iou, polygon_area, rotated_rect, wrap_half_pi
from .transforms import RigidTransform

log = logging.getLogger(__name__)

MAX_WIDTH_PX = 150.0


class CornellFormatError(ValueError):
    pass


class DegenerateRectangleError(ValueError):
    pass


# --------------------------------------------------------------------------
# value types

@dataclass(frozen=True)
class GraspPose2D:
    center: tuple          # (u, v) pixels
    angle: float           # radians, (-pi/2, pi/2]
    width: float           # pixels, [0, 150]
    quality: float         # [0, 1]

    def __post_init__(self):
        u, v = self.center
        object.__setattr__(self, "center", (float(u), float(v)))
        if not -math.pi / 2 - 1e-12 <= self.angle <= math.pi / 2 + 1e-12:
            raise ValueError(f"angle {self.angle} outside [-pi/2, pi/2]")
        if not 0.0 <= self.width <= MAX_WIDTH_PX:
            raise ValueError(f"width {self.width} outside [0, {MAX_WIDTH_PX}]")
        if not 0.0 <= self.quality <= 1.0:
            raise ValueError(f"quality {self.quality} outside [0, 1]")


@dataclass(frozen=True)
class GraspPose3D:
    position: np.ndarray
    rotation_about_z: float
    width: float
    quality: float

    def __post_init__(self):
        p = np.array(self.position, dtype=float)
        p.setflags(write=False)
        object.__setattr__(self, "position", p)
        if self.width < 0:
            raise ValueError("width must be non-negative")


@dataclass(frozen=True)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    cam_to_world: RigidTransform = field(default_factory=RigidTransform.identity)

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")

    def project(self, points_cam) -> np.ndarray:
        """Pixel coordinates (u, v) of camera-frame points."""
        p = np.atleast_2d(np.asarray(points_cam, dtype=float))
        return np.stack([self.fx * p[:, 0] / p[:, 2] + self.cx,
                         self.fy * p[:, 1] / p[:, 2] + self.cy], axis=1)


@dataclass(frozen=True)
class GraspRectangle:
    """Four vertices in order around the rectangle, (x, y) = (u, v) pixels."""
    vertices: np.ndarray
    positive: bool = True

    def __post_init__(self):
        v = np.array(self.vertices, dtype=float)
        if v.shape != (4, 2):
            raise ValueError("a grasp rectangle needs exactly 4 (x, y) vertices")
        v.setflags(write=False)
        object.__setattr__(self, "vertices", v)

    @property
    def polarity(self) -> str:
        return "positive" if self.positive else "negative"

    def is_valid(self, tol_deg: float = 5.0) -> bool:
        """Non-degenerate and opposite edges parallel within ``tol_deg``."""
        v = self.vertices
        e = np.roll(v, -1, axis=0) - v
        if abs(polygon_area(v)) <= 1e-12:
            return False
        ang = np.arctan2(e[:, 1], e[:, 0])
        tol = math.radians(tol_deg)
        return (angle_diff_mod_pi(ang[0], ang[2]) <= tol
                and angle_diff_mod_pi(ang[1], ang[3]) <= tol)


@dataclass(frozen=True, eq=False)
class GraspMap:
    """Quality, angle and width images plus the (cos 2phi, sin 2phi) pair."""
    q_img: np.ndarray
    angle_img: np.ndarray
    width_img: np.ndarray
    cos2_img: np.ndarray = None
    sin2_img: np.ndarray = None

    def __post_init__(self):
        q = np.array(self.q_img, dtype=float)
        a = np.array(self.angle_img, dtype=float)
        w = np.array(self.width_img, dtype=float)
        if q.ndim != 2 or q.size == 0 or a.shape != q.shape or w.shape != q.shape:
            raise ValueError("Q, angle and width images must be same-shape non-empty 2-D arrays")
        if self.cos2_img is None or self.sin2_img is None:
            c2, s2 = decompose_angle(a)
        else:
            c2 = np.array(self.cos2_img, dtype=float)
            s2 = np.array(self.sin2_img, dtype=float)
        if not (np.all(q >= 0) and np.all(q <= 1)):
            raise ValueError("Q must lie in [0, 1]")
        if not (np.all(a >= -np.pi / 2) and np.all(a <= np.pi / 2)):
            raise ValueError("angles must lie in [-pi/2, pi/2]")
        if not (np.all(w >= 0) and np.all(w <= MAX_WIDTH_PX)):
            raise ValueError("widths must lie in [0, 150] px")
        if c2.shape != q.shape or s2.shape != q.shape:
            raise ValueError("decomposition pair must match the map shape")
        mask = q > 0
        if np.any(np.abs(c2[mask] ** 2 + s2[mask] ** 2 - 1.0) > 1e-9):
            raise ValueError("cos2^2 + sin2^2 must equal 1 where Q > 0")
        for name, arr in (("q_img", q), ("angle_img", a), ("width_img", w),
                          ("cos2_img", c2), ("sin2_img", s2)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def shape(self) -> tuple:
        return self.q_img.shape


# --------------------------------------------------------------------------
# Cornell rectangles

def read_rectangle_file(text: str, positive: bool = True) -> tuple[list, int]:
    """Parse one Cornell ``cpos``/``cneg`` file.

    Returns ``(rectangles, dropped)`` where ``dropped`` counts rectangles
    discarded because a vertex contained NaN.
    """
    rows = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 2:
            raise CornellFormatError(f"line {lineno}: expected 'x y', got {line!r}")
        try:
            rows.append((float(parts[0]), float(parts[1])))
        except ValueError as exc:
            raise CornellFormatError(f"line {lineno}: {exc}") from None
    if len(rows) % 4:
        raise CornellFormatError(f"{len(rows)} vertex lines is not a multiple of 4")
    rects, dropped = [], 0
    for k in range(0, len(rows), 4):
        block = np.array(rows[k:k + 4])
        if np.isnan(block).any():
            dropped += 1
            continue
        rects.append(GraspRectangle(block, positive))
    return rects, dropped


def parse_cornell_rectangles(pos_file: str, neg_file: str = "") -> list:
    """Positive then negative rectangles from the two annotation texts."""
    pos, dp = read_rectangle_file(pos_file, True)
    neg, dn = read_rectangle_file(neg_file, False)
    if dp or dn:
        log.warning("dropped %d positive and %d negative rectangles with NaN vertices", dp, dn)
    return pos + neg


def _edge_pairs(v: np.ndarray):
    e = np.roll(v, -1, axis=0) - v
    lengths = np.hypot(e[:, 0], e[:, 1])
    pair_a = (lengths[0] + lengths[2]) / 2.0
    pair_b = (lengths[1] + lengths[3]) / 2.0
    return e, lengths, pair_a, pair_b


def _pair_angle(e: np.ndarray, lengths: np.ndarray, i: int) -> float:
    # doubled-angle average of the two opposite edges: independent of edge
    # direction, so it does not matter which way round the vertices run
    c = s = 0.0
    for k in (i, i + 2):
        dx, dy = e[k]
        c += (dx * dx - dy * dy) / lengths[k] ** 2
        s += 2.0 * dx * dy / lengths[k] ** 2
    return wrap_half_pi(0.5 * math.atan2(s, c))


def rectangle_to_grasp(rect: GraspRectangle) -> GraspPose2D:
    """Grasp pose of a rectangle annotation.

    The longer pair of opposite edges is taken as the jaw-opening direction
    (the grasp axis joins the middles of the two short, jaw-plate edges).
    Choosing by length rather than vertex position keeps the result
    unchanged under cyclic re-ordering of the vertices; for a square the
    candidate with the smaller absolute angle wins.
    """
    v = rect.vertices
    if abs(polygon_area(v)) <= 1e-12:
        raise DegenerateRectangleError("rectangle has zero area")
    e, lengths, pa, pb = _edge_pairs(v)
    if abs(pa - pb) <= 1e-9 * max(pa, pb):
        cands = [(_pair_angle(e, lengths, 0), pa), (_pair_angle(e, lengths, 1), pb)]
        angle, width = min(cands, key=lambda c: (abs(c[0]), -c[0]))
    elif pa > pb:
        angle, width = _pair_angle(e, lengths, 0), pa
    else:
        angle, width = _pair_angle(e, lengths, 1), pb
    center = v.mean(axis=0)
    return GraspPose2D((center[0], center[1]), angle, min(float(width), MAX_WIDTH_PX),
                       1.0 if rect.positive else 0.0)


def rectangle_jaw_length(rect: GraspRectangle) -> float:
    """Length of the jaw-plate (shorter) edges."""
    _, _, pa, pb = _edge_pairs(rect.vertices)
    return float(min(pa, pb))


def grasp_rectangle(pose: GraspPose2D, jaw_length: float | None = None) -> np.ndarray:
    """Rectangle corners for a grasp; the jaw length defaults to width / 2."""
    h = pose.width / 2.0 if jaw_length is None else jaw_length
    return rotated_rect(pose.center, pose.angle, pose.width, h)


# --------------------------------------------------------------------------
# maps

def decompose_angle(angle_img):
    """(cos 2phi, sin 2phi) elementwise."""
    a = np.asarray(angle_img, dtype=float)
    return np.cos(2.0 * a), np.sin(2.0 * a)


def recompose_angle(cos2_img, sin2_img):
    """Inverse of :func:`decompose_angle`, values in (-pi/2, pi/2]."""
    a = 0.5 * np.arctan2(np.asarray(sin2_img, dtype=float), np.asarray(cos2_img, dtype=float))
    return np.where(a <= -np.pi / 2, np.pi / 2, a)


def empty_map(shape) -> GraspMap:
    z = np.zeros(shape)
    return GraspMap(z, z, z)


def rasterize_ground_truth(rects: Iterable[GraspRectangle], shape) -> GraspMap:
    """Training targets from positive rectangles.

    Each rectangle marks the middle third of its extent along the grasp
    axis (and its full jaw length across it).  Pixel ``(r, c)`` is sampled
    at its centre ``(c + 0.5, r + 0.5)``; later rectangles overwrite earlier
    ones.
    """
    h, w = shape
    if h <= 0 or w <= 0:
        raise ValueError("shape must be positive")
    q = np.zeros((h, w))
    ang = np.zeros((h, w))
    wid = np.zeros((h, w))
    uu, vv = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
    for rect in rects:
        if not rect.positive:
            continue
        g = rectangle_to_grasp(rect)
        jaw = rectangle_jaw_length(rect)
        _, _, pa, pb = _edge_pairs(rect.vertices)
        full = max(pa, pb)
        ca, sa = math.cos(g.angle), math.sin(g.angle)
        du, dv = uu - g.center[0], vv - g.center[1]
        along = du * ca + dv * sa
        across = -du * sa + dv * ca
        inside = (np.abs(along) <= full / 6.0) & (np.abs(across) <= jaw / 2.0)
        q[inside] = 1.0
        ang[inside] = g.angle
        wid[inside] = g.width
    return GraspMap(q, ang, wid)


def select_best_grasp(gmap: GraspMap, smooth: bool = True, sigma: float = 2.0) -> GraspPose2D:
    """Highest-quality pixel (first hit in row-major order on ties).

    With ``smooth`` the argmax is taken over a Gaussian-blurred Q; the
    reported quality is always the raw Q at the chosen pixel.
    """
    q = gmap.q_img
    score = ndimage.gaussian_filter(q, sigma, mode="nearest") if smooth else q
    r, c = np.unravel_index(int(np.argmax(score)), q.shape)
    return GraspPose2D((c, r), float(gmap.angle_img[r, c]), float(gmap.width_img[r, c]),
                       float(q[r, c]))


# --------------------------------------------------------------------------
# image -> camera -> world

def depth_at(depth_img, u: float, v: float) -> float:
    """Median of the valid (finite, positive) depths in the 3x3 block
    around pixel ``(u, v)``; NaN when none are valid."""
    d = np.asarray(depth_img, dtype=float)
    r, c = int(math.floor(v)), int(math.floor(u))
    block = d[max(r - 1, 0):r + 2, max(c - 1, 0):c + 2]
    good = block[np.isfinite(block) & (block > 0)]
    return float(np.median(good)) if good.size else float("nan")


def image_to_camera(pose: GraspPose2D, depth: float, cam: CameraModel) -> GraspPose3D:
    if not depth > 0:
        raise ValueError(f"depth must be positive, got {depth}")
    u, v = pose.center
    x = (u - cam.cx) * depth / cam.fx
    y = (v - cam.cy) * depth / cam.fy
    return GraspPose3D(np.array([x, y, depth]), pose.angle, pose.width * depth / cam.fx,
                       pose.quality)


def camera_to_world(pose: GraspPose3D, cam: CameraModel) -> GraspPose3D:
    """Apply the camera extrinsics.

    The grasp axis ``Rz(angle) @ x`` is carried into the world frame and its
    heading about world z (modulo pi) becomes the new rotation.
    """
    T = cam.cam_to_world
    a = pose.rotation_about_z
    if np.array_equal(T.rotation, np.eye(3)):
        yaw = a  # pure translation: heading untouched, bit for bit
    else:
        d = T.rotation @ np.array([math.cos(a), math.sin(a), 0.0])
        yaw = wrap_half_pi(math.atan2(d[1], d[0])) if math.hypot(d[0], d[1]) > 1e-12 else 0.0
    return GraspPose3D(T.apply(pose.position), yaw, pose.width, pose.quality)


# --------------------------------------------------------------------------
# evaluation

def evaluate_rectangle_metric(predicted: GraspPose2D, ground_truth: Sequence[GraspRectangle],
                              max_angle_deg: float = 30.0, min_iou: float = 0.25) -> bool:
    """Rectangle metric: some positive rectangle within 30 degrees whose
    Jaccard overlap with the predicted rectangle exceeds 0.25."""
    pred_poly = grasp_rectangle(predicted)
    if predicted.width <= 0:
        return False
    limit = math.radians(max_angle_deg)
    for rect in ground_truth:
        if not rect.positive:
            continue
        g = rectangle_to_grasp(rect)
        if angle_diff_mod_pi(predicted.angle, g.angle) >= limit:
            continue
        if convex_iou(pred_poly, rect.vertices) > min_iou:
            return True
    return False


# --------------------------------------------------------------------------
# heuristic stand-in for the network

def heuristic_predict(depth_img, height_threshold: float = 0.005, edge_sigma: float = 8.0,
                      width_gain: float = 1.3) -> GraspMap:
    """Deterministic grasp map from depth discontinuities.

    Objects are pixels standing more than ``height_threshold`` above the
    background (taken as the 90th depth percentile).  Q is the blurred,
    normalized depth-gradient magnitude, restricted to objects and weighted
    toward each object's interior.  The grasp axis follows the dominant
    gradient direction of the blurred structure tensor, so the jaw plates
    lie along the strongest edges.  W is the object's thickness across
    that direction.
    """
    d = np.asarray(depth_img, dtype=float)
    if d.ndim != 2 or d.size == 0:
        raise ValueError("depth image must be a non-empty 2-D array")
    valid = np.isfinite(d) & (d > 0)
    if not valid.any():
        return empty_map(d.shape)
    background = float(np.percentile(d[valid], 90))
    filled = np.where(valid, d, background)
    height = background - filled
    mask = height > height_threshold

    gu = ndimage.sobel(filled, axis=1) / 8.0
    gv = ndimage.sobel(filled, axis=0) / 8.0
    mag = np.hypot(gu, gv)
    if not mask.any() or mag.max() <= 0:
        return empty_map(d.shape)

    edges = ndimage.gaussian_filter(mag, edge_sigma)
    edges /= edges.max()
    dist = ndimage.distance_transform_edt(mask)
    labels, n = ndimage.label(mask)
    peak = np.asarray(ndimage.maximum(dist, labels, index=np.arange(1, n + 1)))
    comp_peak = np.concatenate([[1.0], peak])[labels]
    centrality = np.where(mask, dist / comp_peak, 0.0)

    q = edges * centrality
    if q.max() > 0:
        q = q / q.max()
    q = np.clip(q, 0.0, 1.0)

    juu = ndimage.gaussian_filter(gu * gu, 2 * edge_sigma)
    jvv = ndimage.gaussian_filter(gv * gv, 2 * edge_sigma)
    juv = ndimage.gaussian_filter(gu * gv, 2 * edge_sigma)
    angle = recompose_angle(juu - jvv, 2.0 * juv)

    thickness = 2.0 * width_gain * comp_peak
    width = np.clip(np.where(mask, thickness, 0.0), 0.0, MAX_WIDTH_PX)
    angle = np.where(q > 0, angle, 0.0)
    return GraspMap(q, angle, width)


# --------------------------------------------------------------------------
# export

def save_grasp_map(gmap: GraspMap, directory, provenance: str = "") -> Path:
    """One PFM per channel plus ``grasp_map.json`` describing them."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    channels = {"q": gmap.q_img, "angle": gmap.angle_img, "width": gmap.width_img,
                "cos2": gmap.cos2_img, "sin2": gmap.sin2_img}
    for name, img in channels.items():
        images.write_pfm(out / f"{name}.pfm", img)
    meta = {
        "shape": list(gmap.shape),
        "channels": {name: f"{name}.pfm" for name in channels},
        "ranges": {"q": [0.0, 1.0], "angle": [-math.pi / 2, math.pi / 2],
                   "width": [0.0, MAX_WIDTH_PX], "cos2": [-1.0, 1.0], "sin2": [-1.0, 1.0]},
        "units": {"angle": "rad", "width": "px"},
        "provenance": provenance,
    }
    path = out / "grasp_map.json"
    path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path


def load_grasp_map(directory) -> GraspMap:
    """Read back a map written by :func:`save_grasp_map` (float32 precision)."""
    base = Path(directory)
    meta = json.loads((base / "grasp_map.json").read_text())
    ch = {k: images.read_pfm(base / v) for k, v in meta["channels"].items()}
    q = np.clip(ch["q"], 0.0, 1.0)
    angle = np.clip(ch["angle"], -np.pi / 2, np.pi / 2)
    return GraspMap(q, angle, np.clip(ch["width"], 0.0, MAX_WIDTH_PX))
