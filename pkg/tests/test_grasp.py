import math
import os
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation

from deskarm.geometry import angle_diff_mod_pi, convex_iou, rotated_rect
from deskarm.grasp import (
    CameraModel,
    CornellFormatError,
    DegenerateRectangleError,
    GraspMap,
    GraspPose2D,
    GraspPose3D,
    GraspRectangle,
    camera_to_world,
    decompose_angle,
    depth_at,
    evaluate_rectangle_metric,
    grasp_rectangle,
    heuristic_predict,
    image_to_camera,
    load_grasp_map,
    parse_cornell_rectangles,
    rasterize_ground_truth,
    read_rectangle_file,
    recompose_angle,
    rectangle_to_grasp,
    save_grasp_map,
    select_best_grasp,
)
from deskarm.transforms import RigidTransform, rpy_matrix

shapely = pytest.importorskip("shapely")
from shapely.geometry import Polygon  # noqa: E402


# --- oracles ------------------------------------------------------------------

def crossing_number_inside(poly, x, y):
    """Classic even-odd ray casting for a single point."""
    inside = False
    n = len(poly)
    for i in range(n):
        x1, y1 = poly[i]
        x2, y2 = poly[(i + 1) % n]
        if (y1 > y) != (y2 > y):
            xc = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
            if x < xc:
                inside = not inside
    return inside


def center_third_polygon(v):
    """Middle third of the rectangle, built directly from the vertices."""
    v = np.asarray(v, dtype=float)
    l01 = np.linalg.norm(v[1] - v[0])
    l12 = np.linalg.norm(v[2] - v[1])
    if l12 > l01:  # make v0->v1 the long (opening) edge
        v = np.roll(v, -1, axis=0)
    a, b, c, d = v
    return [a + (b - a) / 3, a + 2 * (b - a) / 3, d + 2 * (c - d) / 3, d + (c - d) / 3]


def brute_force_q(rects, shape):
    h, w = shape
    q = np.zeros(shape)
    for rect in rects:
        if not rect.positive:
            continue
        poly = center_third_polygon(rect.vertices)
        for r in range(h):
            for c in range(w):
                if crossing_number_inside(poly, c + 0.5, r + 0.5):
                    q[r, c] = 1.0
    return q


def scan_argmax(q):
    best, at = -np.inf, (0, 0)
    for r in range(q.shape[0]):
        for c in range(q.shape[1]):
            if q[r, c] > best:
                best, at = q[r, c], (r, c)
    return at


def shapely_metric(pred, rects):
    pp = Polygon(grasp_rectangle(pred))
    for rect in rects:
        if not rect.positive:
            continue
        g = rectangle_to_grasp(rect)
        d = abs(pred.angle - g.angle) % math.pi
        if min(d, math.pi - d) >= math.radians(30):
            continue
        gp = Polygon(rect.vertices)
        if pp.intersection(gp).area / pp.union(gp).area > 0.25:
            return True
    return False


def random_rect(rng, size=100, positive=True):
    c = rng.uniform(15, size - 15, 2)
    return GraspRectangle(rotated_rect(c, rng.uniform(-np.pi, np.pi),
                                       rng.uniform(12, 60), rng.uniform(5, 30)), positive)


def random_map(rng, shape=(24, 32)):
    q = rng.uniform(0, 1, shape)
    q[rng.uniform(size=shape) < 0.2] = 0.0
    return GraspMap(q, rng.uniform(-np.pi / 2, np.pi / 2, shape), rng.uniform(0, 150, shape))


# --- Cornell parsing ----------------------------------------------------------

CPOS = """253.0 319.7
309.0 324.0
307.0 350.0
251.0 345.7
262.0 315.0
320.0 316.0
319.0 342.0
261.0 341.0
"""


def test_two_rectangles_from_eight_lines():
    rects = parse_cornell_rectangles(CPOS, "")
    assert len(rects) == 2
    np.testing.assert_array_equal(rects[0].vertices[0], [253.0, 319.7])
    assert all(r.positive for r in rects)


def test_nan_rectangle_dropped(caplog):
    text = CPOS + "NaN NaN\n1 2\n3 4\n5 6\n"
    rects, dropped = read_rectangle_file(text)
    assert len(rects) == 2 and dropped == 1
    with caplog.at_level("WARNING"):
        both = parse_cornell_rectangles(text, CPOS)
    assert len(both) == 4 and "dropped 1" in caplog.text
    assert [r.positive for r in both] == [True, True, False, False]


def test_cornell_errors():
    with pytest.raises(CornellFormatError):
        read_rectangle_file("1 2\n3 4\n5 6\n")
    with pytest.raises(CornellFormatError):
        read_rectangle_file("1 2\n3 x\n5 6\n7 8\n")


@pytest.mark.skipif(not os.environ.get("DESKARM_CORNELL_DIR"),
                    reason="set DESKARM_CORNELL_DIR to a local copy of the Cornell dataset")
def test_full_cornell_counts():
    root = Path(os.environ["DESKARM_CORNELL_DIR"])
    pos = neg = dpos = dneg = 0
    for f in sorted(root.rglob("pcd*cpos.txt")):
        r, d = read_rectangle_file(f.read_text(), True)
        pos, dpos = pos + len(r), dpos + d
    for f in sorted(root.rglob("pcd*cneg.txt")):
        r, d = read_rectangle_file(f.read_text(), False)
        neg, dneg = neg + len(r), dneg + d
    assert pos + dpos == 5110
    assert neg + dneg == 2909


# --- rectangle -> grasp -------------------------------------------------------

def test_axis_aligned_rectangle():
    # 60 px opening along u, jaw plates 20 px long running along v
    rect = GraspRectangle([[10, 40], [70, 40], [70, 60], [10, 60]])
    g = rectangle_to_grasp(rect)
    assert g.angle == 0.0 and g.width == 60.0 and g.center == (40.0, 50.0)
    assert g.quality == 1.0
    assert rectangle_to_grasp(GraspRectangle(rect.vertices, False)).quality == 0.0


def test_rotated_rectangle_wraps():
    rect = GraspRectangle(rotated_rect((50, 50), math.radians(100), 60, 20))
    g = rectangle_to_grasp(rect)
    assert g.angle == pytest.approx(math.radians(-80), abs=1e-12)
    assert g.width == pytest.approx(60.0, abs=1e-12)


def test_degenerate_rectangle():
    with pytest.raises(DegenerateRectangleError):
        rectangle_to_grasp(GraspRectangle([[0, 0], [10, 0], [20, 0], [5, 0]]))


def test_width_clamped():
    g = rectangle_to_grasp(GraspRectangle(rotated_rect((0, 0), 0.3, 400, 10)))
    assert g.width == 150.0


def test_validity_check():
    assert GraspRectangle(rotated_rect((0, 0), 0.3, 40, 10)).is_valid()
    assert not GraspRectangle([[0, 0], [10, 0], [12, 10], [0, 5]]).is_valid()


@pytest.mark.parametrize("seed", range(20))
def test_center_and_cyclic_invariance(seed):
    rng = np.random.default_rng(seed)
    rect = random_rect(rng)
    g = rectangle_to_grasp(rect)
    centroid = rect.vertices.sum(axis=0) / 4
    assert np.abs(np.array(g.center) - centroid).max() < 1e-9
    for k in range(1, 4):
        gk = rectangle_to_grasp(GraspRectangle(np.roll(rect.vertices, k, axis=0)))
        assert np.abs(np.array(gk.center) - g.center).max() < 1e-9
        assert angle_diff_mod_pi(gk.angle, g.angle) < 1e-9
        assert gk.width == pytest.approx(g.width, abs=1e-9)


# --- decomposition ------------------------------------------------------------

def test_decompose_examples():
    c, s = decompose_angle(np.array([0.0, np.pi / 4, -np.pi / 2, np.pi / 2]))
    np.testing.assert_allclose(c, [1, 0, -1, -1], atol=1e-15)
    np.testing.assert_allclose(s, [0, 1, 0, 0], atol=1e-15)
    assert recompose_angle(1.0, 0.0) == 0.0
    assert recompose_angle(0.0, 1.0) == pytest.approx(np.pi / 4, abs=1e-15)
    assert recompose_angle(*decompose_angle(-np.pi / 2)) == recompose_angle(
        *decompose_angle(np.pi / 2)) == pytest.approx(np.pi / 2, abs=1e-15)


@given(st.floats(-np.pi / 2, np.pi / 2, exclude_min=True))
def test_round_trip_property(a):
    assert abs(float(recompose_angle(*decompose_angle(a))) - a) < 1e-12


# --- rasterization ------------------------------------------------------------

def test_empty_rasterization():
    m = rasterize_ground_truth([], (20, 30))
    assert not m.q_img.any() and m.shape == (20, 30)


def test_center_third_block():
    rect = GraspRectangle(rotated_rect((50, 50), 0.0, 90, 30))
    m = rasterize_ground_truth([rect], (100, 100))
    expected = np.zeros((100, 100))
    expected[35:65, 35:65] = 1.0
    np.testing.assert_array_equal(m.q_img, expected)
    assert set(np.unique(m.width_img)) == {0.0, 90.0}


def test_later_rectangle_overwrites():
    a = GraspRectangle(rotated_rect((50, 50), 0.0, 60, 30))
    b = GraspRectangle(rotated_rect((50, 50), 0.5, 45, 30))
    m = rasterize_ground_truth([a, b], (100, 100))
    assert m.angle_img[50, 50] == pytest.approx(0.5) and m.width_img[50, 50] == pytest.approx(45)
    m2 = rasterize_ground_truth([b, a], (100, 100))
    assert m2.angle_img[50, 50] == 0.0


def test_negative_rectangles_ignored():
    m = rasterize_ground_truth([random_rect(np.random.default_rng(0), positive=False)], (100, 100))
    assert not m.q_img.any()


@pytest.mark.parametrize("seed", range(5))
def test_rasterization_matches_point_in_polygon(seed):
    rng = np.random.default_rng(seed)
    rects = [random_rect(rng, positive=rng.uniform() < 0.8) for _ in range(3)]
    m = rasterize_ground_truth(rects, (100, 100))
    np.testing.assert_array_equal(m.q_img, brute_force_q(rects, (100, 100)))
    mask = m.q_img > 0
    np.testing.assert_allclose(m.cos2_img[mask] ** 2 + m.sin2_img[mask] ** 2, 1.0, atol=1e-12)


# --- map invariants and selection ----------------------------------------------

def test_map_rejects_out_of_range():
    z = np.zeros((3, 3))
    with pytest.raises(ValueError):
        GraspMap(z + 1.5, z, z)
    with pytest.raises(ValueError):
        GraspMap(z, z + 2.0, z)
    with pytest.raises(ValueError):
        GraspMap(z, z, z + 151)
    with pytest.raises(ValueError):
        GraspMap(z + 0.5, z, z, cos2_img=z, sin2_img=z)


def test_select_on_zero_map():
    g = select_best_grasp(GraspMap(*(np.zeros((5, 5)),) * 3))
    assert g.center == (0.0, 0.0) and g.quality == 0.0


def test_select_single_pixel():
    q = np.zeros((10, 10))
    q[7, 3] = 1.0
    g = select_best_grasp(GraspMap(q, np.zeros_like(q), np.full_like(q, 20)), smooth=False)
    assert g.center == (3.0, 7.0) and g.quality == 1.0 and g.width == 20.0


def test_select_ties_first_in_row_major():
    q = np.zeros((4, 4))
    q[2, 1] = q[1, 3] = 0.7
    assert select_best_grasp(GraspMap(q, q * 0, q * 0), smooth=False).center == (3.0, 1.0)


@pytest.mark.parametrize("seed", range(10))
def test_select_matches_scan(seed):
    m = random_map(np.random.default_rng(seed))
    g = select_best_grasp(m, smooth=False)
    r, c = scan_argmax(m.q_img)
    assert g.center == (c, r)
    assert g.angle == m.angle_img[r, c] and g.width == m.width_img[r, c]


def test_smoothing_prefers_broad_peak():
    q = np.zeros((30, 30))
    q[5, 5] = 1.0            # isolated spike
    q[18:25, 18:25] = 0.9    # broad plateau
    m = GraspMap(q, q * 0, q * 0)
    assert select_best_grasp(m, smooth=False).center == (5.0, 5.0)
    assert select_best_grasp(m).center == (21.0, 21.0)


# --- transforms ---------------------------------------------------------------

CAM = CameraModel(500.0, 500.0, 320.0, 320.0)


def test_principal_point_and_pinhole():
    p = image_to_camera(GraspPose2D((320, 320), 0.0, 10, 1.0), 0.5, CAM)
    np.testing.assert_array_equal(p.position, [0, 0, 0.5])
    p = image_to_camera(GraspPose2D((820, 320), 0.0, 10, 1.0), 1.0, CAM)
    assert p.position[0] == 1.0 and p.position[1] == 0.0
    p = image_to_camera(GraspPose2D((0, 0), 0.0, 150, 1.0), 0.5, CAM)
    assert p.width == pytest.approx(0.15, abs=1e-15)


def test_nonpositive_depth():
    with pytest.raises(ValueError):
        image_to_camera(GraspPose2D((0, 0), 0.0, 10, 1.0), 0.0, CAM)


def test_depth_median_skips_holes():
    d = np.full((5, 5), 0.6)
    d[2, 2] = 0.0
    d[1, 1] = np.nan
    d[3, 3] = 0.5
    assert depth_at(d, 2, 2) == 0.6
    assert math.isnan(depth_at(np.zeros((3, 3)), 1, 1))


def test_identity_extrinsics_is_noop():
    p = image_to_camera(GraspPose2D((100, 200), 0.7, 30, 0.4), 0.8, CAM)
    w = camera_to_world(p, CAM)
    np.testing.assert_array_equal(w.position, p.position)
    assert w.rotation_about_z == p.rotation_about_z and w.width == p.width


def test_pure_translation():
    cam = CameraModel(500, 500, 320, 320, RigidTransform.from_translation([0, 0, 1]))
    p = GraspPose3D([0.1, 0.2, 0.3], 0.4, 0.05, 1.0)
    w = camera_to_world(p, cam)
    np.testing.assert_allclose(w.position, [0.1, 0.2, 1.3], atol=1e-15)
    assert w.rotation_about_z == 0.4


@pytest.mark.parametrize("seed", range(10))
def test_extrinsics_match_homogeneous_oracle(seed):
    rng = np.random.default_rng(seed)
    # keep the optical axis roughly vertical so the heading is well defined
    R = Rotation.from_euler("xyz", [np.pi + rng.normal(0, 0.2), rng.normal(0, 0.2),
                                    rng.uniform(-np.pi, np.pi)]).as_matrix()
    t = rng.uniform(-1, 1, 3)
    cam = CameraModel(500, 500, 320, 320, RigidTransform(R, t))
    p = GraspPose3D(rng.uniform(-0.3, 0.3, 3), rng.uniform(-1.5, 1.5), 0.05, 1.0)
    M = np.eye(4)
    M[:3, :3], M[:3, 3] = R, t
    G = np.eye(4)
    G[:3, :3] = Rotation.from_euler("z", p.rotation_about_z).as_matrix()
    G[:3, 3] = p.position
    W = M @ G
    w = camera_to_world(p, cam)
    np.testing.assert_allclose(w.position, W[:3, 3], atol=1e-9)
    heading = math.atan2(W[1, 0], W[0, 0])
    assert angle_diff_mod_pi(w.rotation_about_z, heading) < 1e-9
    assert -np.pi / 2 < w.rotation_about_z <= np.pi / 2


def test_top_down_camera_heading():
    # camera looking straight down: image +u -> world +x, image +v -> world -y
    cam = CameraModel(500, 500, 320, 240, RigidTransform(rpy_matrix(np.pi, 0, 0), [0, 0, 1]))
    p = image_to_camera(GraspPose2D((320, 240), math.radians(30), 40, 1.0), 1.0, cam)
    w = camera_to_world(p, cam)
    assert w.rotation_about_z == pytest.approx(math.radians(-30), abs=1e-12)
    np.testing.assert_allclose(w.position, [0, 0, 0], atol=1e-12)


# --- rectangle metric -----------------------------------------------------------

def test_self_match_and_perpendicular():
    rect = GraspRectangle(rotated_rect((40, 40), 0.3, 50, 25))
    g = rectangle_to_grasp(rect)
    assert evaluate_rectangle_metric(g, [rect])
    turned = GraspPose2D(g.center, g.angle - math.pi / 2, g.width, 1.0)
    assert not evaluate_rectangle_metric(turned, [rect])
    assert not evaluate_rectangle_metric(g, [GraspRectangle(rect.vertices, False)])


def test_convex_iou_against_shapely():
    rng = np.random.default_rng(1)
    for _ in range(50):
        a = rotated_rect(rng.uniform(0, 10, 2), rng.uniform(-3, 3), rng.uniform(1, 8), rng.uniform(1, 8))
        b = rotated_rect(rng.uniform(0, 10, 2), rng.uniform(-3, 3), rng.uniform(1, 8), rng.uniform(1, 8))
        pa, pb = Polygon(a), Polygon(b)
        ref = pa.intersection(pb).area / pa.union(pb).area
        assert convex_iou(a, b) == pytest.approx(ref, abs=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_metric_matches_shapely(seed):
    rng = np.random.default_rng(100 + seed)
    for _ in range(30):
        rects = [random_rect(rng, positive=rng.uniform() < 0.8) for _ in range(3)]
        base = rectangle_to_grasp(rects[0])
        pred = GraspPose2D(np.array(base.center) + rng.normal(0, 8, 2),
                           float(np.clip(base.angle + rng.normal(0, 0.4), -1.5, 1.5)),
                           float(np.clip(base.width * rng.uniform(0.5, 1.5), 0, 150)), 1.0)
        assert evaluate_rectangle_metric(pred, rects) == shapely_metric(pred, rects)


# --- heuristic predictor -------------------------------------------------------

def block_scene(angle=0.4):
    d = np.full((100, 120), 0.6)
    uu, vv = np.meshgrid(np.arange(120) + 0.5, np.arange(100) + 0.5)
    du, dv = uu - 70, vv - 45
    along = du * math.cos(angle) + dv * math.sin(angle)
    across = -du * math.sin(angle) + dv * math.cos(angle)
    mask = (np.abs(along) <= 25) & (np.abs(across) <= 9)
    d[mask] = 0.55
    return d, mask


def test_constant_depth_gives_zero_quality():
    m = heuristic_predict(np.full((40, 40), 0.7))
    assert not m.q_img.any()


def test_block_argmax_inside_footprint():
    d, mask = block_scene()
    m = heuristic_predict(d)
    g = select_best_grasp(m)
    u, v = int(g.center[0]), int(g.center[1])
    assert mask[v, u]
    # grasp axis across the narrow side of the block: 0.4 + pi/2, wrapped
    assert angle_diff_mod_pi(g.angle, 0.4 + math.pi / 2) < math.radians(15)
    assert 18 < g.width < 40


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_heuristic_ranges(seed):
    rng = np.random.default_rng(seed)
    d = 0.6 + rng.normal(0, 0.01, (32, 32))
    d[rng.uniform(size=d.shape) < 0.05] = np.nan
    m = heuristic_predict(d)   # GraspMap validates every range on construction
    assert m.q_img.max() <= 1.0 and m.width_img.max() <= 150.0


# --- export ---------------------------------------------------------------------

def test_save_and_load_map(tmp_path):
    m = random_map(np.random.default_rng(4))
    meta = save_grasp_map(m, tmp_path / "out", provenance="unit test")
    assert meta.exists()
    back = load_grasp_map(tmp_path / "out")
    np.testing.assert_allclose(back.q_img, m.q_img, atol=1e-7)
    np.testing.assert_allclose(back.angle_img, m.angle_img, atol=1e-6)
