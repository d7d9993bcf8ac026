"""Bin-grasping episodes with a binary terminal reward.

A parallel-jaw gripper hovers over a bin of planar objects (disks and
boxes extruded to a height).  A camera on the wrist looks straight down,
so every observation is a gripper-centred depth image.  Each step moves
the gripper by a bounded planar command expressed in its own frame; the
episode ends when the policy closes the gripper or when the last of the
``T`` steps is taken, at which point the grasp is scored geometrically.

Gripper frame: x is the closing direction, z points up.  Camera frame:
x along the gripper x, y along the gripper -y, z down, so image ``u``
runs along the closing direction.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Protocol, Sequence

import numpy as np
from PIL import Image
from scipy import stats

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .geometry import wrap_half_pi
from .grasp import depth_at, heuristic_predict, select_best_grasp


# --------------------------------------------------------------------------
# objects

@dataclass(frozen=True)
class Disk:
    radius: float
    height: float = 0.03

    def __post_init__(self):
        if not (self.radius > 0 and self.height > 0):
            raise ValueError("disk radius and height must be positive")

    @property
    def bounding_radius(self) -> float:
        return self.radius


@dataclass(frozen=True)
class Box:
    length: float      # along the object's local x
    width: float       # along the object's local y
    height: float = 0.03

    def __post_init__(self):
        if not (self.length > 0 and self.width > 0 and self.height > 0):
            raise ValueError("box dimensions must be positive")

    @property
    def bounding_radius(self) -> float:
        return 0.5 * math.hypot(self.length, self.width)


@dataclass(frozen=True)
class Chord:
    """Where a line ``p + s d`` crosses an object's footprint."""
    s_in: float
    s_out: float
    cos_in: float      # |cos| between the line and the surface normal at entry
    cos_out: float     # ... and at exit


@dataclass(frozen=True)
class PlacedObject:
    shape: Disk | Box
    x: float
    y: float
    theta: float = 0.0

    def _local(self, px, py):
        c, s = math.cos(self.theta), math.sin(self.theta)
        dx, dy = np.asarray(px) - self.x, np.asarray(py) - self.y
        return c * dx + s * dy, -s * dx + c * dy

    def contains(self, px, py):
        """Vectorized point-in-footprint test (boundary counts as inside)."""
        lx, ly = self._local(px, py)
        if isinstance(self.shape, Disk):
            return lx * lx + ly * ly <= self.shape.radius ** 2
        return (np.abs(lx) <= self.shape.length / 2) & (np.abs(ly) <= self.shape.width / 2)

    def corners(self) -> np.ndarray:
        """Footprint corners of a box, counter-clockwise."""
        if not isinstance(self.shape, Box):
            raise TypeError("only boxes have corners")
        hl, hw = self.shape.length / 2, self.shape.width / 2
        local = np.array([[-hl, -hw], [hl, -hw], [hl, hw], [-hl, hw]])
        c, s = math.cos(self.theta), math.sin(self.theta)
        return local @ np.array([[c, s], [-s, c]]) + [self.x, self.y]

    def chord(self, point, direction) -> Chord | None:
        """Entry/exit parameters of the line through ``point`` along the
        unit ``direction``; ``None`` when the line misses or only grazes."""
        px, py = point
        dx, dy = direction
        if isinstance(self.shape, Disk):
            # |p + s d - c|^2 = r^2
            fx, fy = px - self.x, py - self.y
            b = fx * dx + fy * dy
            disc = b * b - (fx * fx + fy * fy - self.shape.radius ** 2)
            if disc <= 0:
                return None
            root = math.sqrt(disc)
            cos_n = root / self.shape.radius   # cos of angle between normal and line
            return Chord(-b - root, -b + root, cos_n, cos_n)
        # slab method in the box frame
        lp = self._local(px, py)
        c, s = math.cos(self.theta), math.sin(self.theta)
        ld = (c * dx + s * dy, -s * dx + c * dy)
        half = (self.shape.length / 2, self.shape.width / 2)
        s_in, s_out = -math.inf, math.inf
        axis_in = axis_out = 0
        for i in range(2):
            if ld[i] == 0.0:
                if abs(lp[i]) > half[i]:
                    return None
                continue
            t1, t2 = sorted(((-half[i] - lp[i]) / ld[i], (half[i] - lp[i]) / ld[i]))
            if t1 > s_in:
                s_in, axis_in = t1, i
            if t2 < s_out:
                s_out, axis_out = t2, i
        if not s_in < s_out:
            return None
        return Chord(s_in, s_out, abs(ld[axis_in]), abs(ld[axis_out]))


def _separated(a: PlacedObject, b: PlacedObject, clearance: float) -> bool:
    """True when the footprints are at least ``clearance`` apart."""
    da, db = isinstance(a.shape, Disk), isinstance(b.shape, Disk)
    if da and db:
        return math.hypot(a.x - b.x, a.y - b.y) >= a.shape.radius + b.shape.radius + clearance
    if da or db:
        disk, box = (a, b) if da else (b, a)
        lx, ly = box._local(disk.x, disk.y)
        qx = np.clip(lx, -box.shape.length / 2, box.shape.length / 2)
        qy = np.clip(ly, -box.shape.width / 2, box.shape.width / 2)
        return math.hypot(lx - qx, ly - qy) >= disk.shape.radius + clearance
    # separating axis test on the four edge normals, footprints inflated by
    # half the clearance each (conservative at the corners)
    ca, cb = a.corners(), b.corners()
    for poly in (ca, cb):
        for k in range(4):
            e = poly[(k + 1) % 4] - poly[k]
            n = np.array([-e[1], e[0]]) / math.hypot(*e)
            pa, pb = ca @ n, cb @ n
            if pa.max() + clearance <= pb.min() or pb.max() + clearance <= pa.min():
                return True
    return False


def _inside_bin(obj: PlacedObject, half) -> bool:
    if isinstance(obj.shape, Disk):
        r = obj.shape.radius
        return abs(obj.x) + r <= half[0] and abs(obj.y) + r <= half[1]
    c = obj.corners()
    return bool(np.all(np.abs(c[:, 0]) <= half[0]) and np.all(np.abs(c[:, 1]) <= half[1]))


# --------------------------------------------------------------------------
# configuration, state, actions

DEFAULT_OBJECTS = (
    Disk(0.020, 0.03),
    Disk(0.030, 0.02),
    Box(0.060, 0.030, 0.04),
    Box(0.080, 0.025, 0.03),
    Box(0.040, 0.040, 0.05),
)


@dataclass(frozen=True)
class CameraIntrinsics:
    width: int = 128
    height: int = 128
    fx: float = 180.0
    fy: float = 180.0
    height_above_floor: float = 0.5

    @property
    def cx(self) -> float:
        return self.width / 2

    @property
    def cy(self) -> float:
        return self.height / 2


@dataclass(frozen=True)
class EpisodeConfig:
    """Everything that defines an episode distribution.

    ``objects`` is the object set.  With ``n_objects`` set, each episode
    draws that many descriptors from the set (with replacement); with
    ``None`` every descriptor is placed once.
    """
    T: int = 10
    bin_size: tuple = (0.30, 0.30)
    objects: tuple = DEFAULT_OBJECTS
    n_objects: int | None = 1
    rng_seed: int = 0
    gripper_opening: float = 0.085
    normal_tolerance_deg: float = 15.0
    max_translation: float = 0.05     # metres per step
    max_rotation: float = math.pi / 8  # radians per step
    clearance: float = 0.005
    max_placement_tries: int = 1000
    camera: CameraIntrinsics = field(default_factory=CameraIntrinsics)

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("T must be at least 1")
        if min(self.bin_size) <= 0:
            raise ValueError("bin size must be positive")
        if self.n_objects is not None and self.n_objects < 0:
            raise ValueError("n_objects must be non-negative")
        if self.n_objects and not self.objects:
            raise ValueError("cannot draw objects from an empty set")
        if min(self.gripper_opening, self.max_translation, self.max_rotation) <= 0:
            raise ValueError("gripper opening and step bounds must be positive")


def episode_config_from_dict(doc: Mapping) -> EpisodeConfig:
    """Config from a parsed TOML document; ``[[objects]]`` tables carry
    ``kind = "disk"`` (radius, height) or ``kind = "box"`` (length, width,
    height); ``[camera]`` overrides the intrinsics."""
    kw = {k: doc[k] for k in ("T", "n_objects", "rng_seed", "gripper_opening",
                              "normal_tolerance_deg", "max_translation", "max_rotation",
                              "clearance", "max_placement_tries") if k in doc}
    if "bin_size" in doc:
        kw["bin_size"] = tuple(float(v) for v in doc["bin_size"])
    if "objects" in doc:
        objs = []
        for o in doc["objects"]:
            o = dict(o)
            kind = o.pop("kind", None)
            if kind == "disk":
                objs.append(Disk(**o))
            elif kind == "box":
                objs.append(Box(**o))
            else:
                raise ValueError(f"unknown object kind {kind!r}")
        kw["objects"] = tuple(objs)
    if "camera" in doc:
        kw["camera"] = CameraIntrinsics(**doc["camera"])
    return EpisodeConfig(**kw)


def load_episode_config(path) -> EpisodeConfig:
    return episode_config_from_dict(tomllib.loads(Path(path).read_text(encoding="utf-8")))


@dataclass(frozen=True)
class Action:
    """Planar gripper command in the gripper frame, or a close."""
    dx: float = 0.0
    dy: float = 0.0
    dtheta: float = 0.0
    close: bool = False

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.dx, self.dy, self.dtheta)):
            raise ValueError("action components must be finite")
        if self.close and (self.dx or self.dy or self.dtheta):
            raise ValueError("a close action carries no motion")

    @classmethod
    def close_gripper(cls) -> "Action":
        return cls(close=True)

    def bounded(self, max_translation: float, max_rotation: float) -> "Action":
        n = math.hypot(self.dx, self.dy)
        k = max_translation / n if n > max_translation else 1.0
        dth = min(max(self.dtheta, -max_rotation), max_rotation)
        return Action(self.dx * k, self.dy * k, dth, self.close)


@dataclass(frozen=True)
class GripperPose:
    x: float = 0.0
    y: float = 0.0
    theta: float = 0.0

    @property
    def closing_direction(self) -> tuple:
        return (math.cos(self.theta), math.sin(self.theta))


@dataclass(frozen=True)
class Observation:
    depth: np.ndarray
    t: int


@dataclass(frozen=True)
class EpisodeState:
    objects: tuple
    gripper: GripperPose
    t: int
    done: bool = False


@dataclass(frozen=True)
class TraceRow:
    t: int
    before: GripperPose
    action: Action
    after: GripperPose
    reward: int
    done: bool


@dataclass(frozen=True)
class EpisodeResult:
    reward: int
    steps_taken: int
    trace: tuple
    objects: tuple
    final_pose: GripperPose

    @property
    def success(self) -> bool:
        return self.reward == 1


# --------------------------------------------------------------------------
# scene sampling, rendering, grasp test

def place_objects(config: EpisodeConfig, rng: np.random.Generator) -> tuple:
    """Seeded rejection sampling of non-overlapping object poses."""
    if config.n_objects is None:
        shapes = list(config.objects)
    else:
        idx = rng.integers(0, len(config.objects), config.n_objects) if config.n_objects else []
        shapes = [config.objects[int(i)] for i in idx]
    half = (config.bin_size[0] / 2, config.bin_size[1] / 2)
    placed = []
    for shape in shapes:
        for _ in range(config.max_placement_tries):
            cand = PlacedObject(shape, float(rng.uniform(-half[0], half[0])),
                                float(rng.uniform(-half[1], half[1])),
                                float(rng.uniform(-math.pi, math.pi)))
            if _inside_bin(cand, half) and all(_separated(cand, o, config.clearance)
                                                 for o in placed):
                placed.append(cand)
                break
        else:
            raise RuntimeError(f"could not place {shape} after "
                               f"{config.max_placement_tries} tries")
    return tuple(placed)


def render_depth(objects: Sequence[PlacedObject], gripper: GripperPose,
                 camera: CameraIntrinsics) -> np.ndarray:
    """Depth image from the wrist camera (metres along the optical axis).

    Only the flat top faces are drawn; a ray sees the nearest top face
    whose footprint contains the ray's point at that face's height, and
    the floor otherwise.
    """
    H = camera.height_above_floor
    vv, uu = np.mgrid[0:camera.height, 0:camera.width] + 0.5
    xc = (uu - camera.cx) / camera.fx        # per unit depth, camera frame
    yc = (vv - camera.cy) / camera.fy
    # camera -> world: x_w = Rz(theta) (x_c, -y_c)
    c, s = math.cos(gripper.theta), math.sin(gripper.theta)
    rx, ry = c * xc + s * yc, s * xc - c * yc
    depth = np.full((camera.height, camera.width), H)
    for obj in objects:
        d = H - obj.shape.height
        hit = obj.contains(gripper.x + rx * d, gripper.y + ry * d)
        depth = np.where(hit & (d < depth), d, depth)
    return depth


def grasp_outcome(objects: Sequence[PlacedObject], gripper: GripperPose, opening: float,
                  normal_tolerance_deg: float = 15.0) -> bool:
    """Geometric grasp test at ``gripper``.

    The closing segment spans ``opening`` centred on the gripper along its
    x axis.  Success needs exactly one object crossing the segment, that
    object's whole chord inside the segment (it fits between the jaws),
    and both contact normals within the tolerance of the closing line.
    """
    d = gripper.closing_direction
    half = opening / 2
    hits = []
    for obj in objects:
        ch = obj.chord((gripper.x, gripper.y), d)
        if ch is not None and ch.s_out > -half and ch.s_in < half:
            hits.append(ch)
    if len(hits) != 1:
        return False
    ch = hits[0]
    cos_tol = math.cos(math.radians(normal_tolerance_deg))
    return (ch.s_in >= -half and ch.s_out <= half
            and ch.cos_in >= cos_tol and ch.cos_out >= cos_tol)


# --------------------------------------------------------------------------
# environment

class BinEnv:
    """One episode at a time; ``reset`` then ``step`` until done."""

    def __init__(self, config: EpisodeConfig | None = None):
        self.config = config or EpisodeConfig()
        self.state: EpisodeState | None = None
        self._trace: list = []

    def reset(self, seed=None) -> Observation:
        """New scene from ``seed`` (an int or sequence of ints; defaults to
        the config's ``rng_seed``).  The gripper starts over the bin centre."""
        rng = np.random.default_rng(self.config.rng_seed if seed is None else seed)
        self.state = EpisodeState(place_objects(self.config, rng), GripperPose(), 0)
        self._trace = []
        return self.observe()

    def observe(self) -> Observation:
        s = self._require_state()
        return Observation(render_depth(s.objects, s.gripper, self.config.camera),
                           min(s.t, self.config.T - 1))

    def _require_state(self) -> EpisodeState:
        if self.state is None:
            raise RuntimeError("call reset() first")
        return self.state

    def step(self, action: Action):
        """Apply ``action``; returns ``(observation, done, reward)``.

        Motion is clipped to the per-step bounds and the gripper centre to
        the bin.  The grasp is attempted on a close or after the motion of
        the last step.  After the terminal step the observation shows the
        final pose and keeps the terminal step's index.
        """
        s = self._require_state()
        if s.done:
            raise RuntimeError("episode is over; call reset()")
        cfg = self.config
        act = action.bounded(cfg.max_translation, cfg.max_rotation)
        g = s.gripper
        c, sn = math.cos(g.theta), math.sin(g.theta)
        hx, hy = cfg.bin_size[0] / 2, cfg.bin_size[1] / 2
        nx = min(max(g.x + c * act.dx - sn * act.dy, -hx), hx)
        ny = min(max(g.y + sn * act.dx + c * act.dy, -hy), hy)
        nth = math.remainder(g.theta + act.dtheta, 2 * math.pi)
        new = GripperPose(nx, ny, nth)
        done = act.close or s.t == cfg.T - 1
        reward = int(grasp_outcome(s.objects, new, cfg.gripper_opening,
                                   cfg.normal_tolerance_deg)) if done else 0
        self._trace.append(TraceRow(s.t, g, act, new, reward, done))
        self.state = EpisodeState(s.objects, new, s.t if done else s.t + 1, done)
        return self.observe(), done, reward

    def result(self) -> EpisodeResult:
        s = self._require_state()
        if not s.done:
            raise RuntimeError("episode still running")
        last = self._trace[-1]
        return EpisodeResult(last.reward, len(self._trace), tuple(self._trace),
                             s.objects, s.gripper)


# --------------------------------------------------------------------------
# policies

Policy = Callable[[Observation], Action]


class QFunction(Protocol):
    """Action-value interface: (timestep, observation, candidate) -> score."""

    def __call__(self, t: int, observation: Observation, action: Action) -> float: ...


def greedy_policy(q: QFunction, candidates: Sequence[Action]) -> Policy:
    """Policy picking the highest-scoring candidate (first on ties)."""
    cands = tuple(candidates)
    if not cands:
        raise ValueError("need at least one candidate action")

    def policy(obs: Observation) -> Action:
        scores = [q(obs.t, obs, a) for a in cands]
        return cands[int(np.argmax(scores))]
    return policy


def close_at_center(obs: Observation) -> Action:
    """Close immediately wherever the gripper is (the bin centre)."""
    return Action.close_gripper()


class RandomPolicy:
    """Seeded random motion, closing with probability ``p_close``."""

    def __init__(self, config: EpisodeConfig, seed: int = 0, p_close: float = 0.1):
        self.config = config
        self.rng = np.random.default_rng(seed)
        self.p_close = p_close

    def __call__(self, obs: Observation) -> Action:
        if self.rng.random() < self.p_close:
            return Action.close_gripper()
        m, r = self.config.max_translation, self.config.max_rotation
        dx, dy = self.rng.uniform(-1.5 * m, 1.5 * m, 2)
        return Action(float(dx), float(dy), float(self.rng.uniform(-1.5 * r, 1.5 * r)))


def _servo(dx, dy, dtheta, pos_tol, ang_tol) -> Action:
    if math.hypot(dx, dy) <= pos_tol and abs(dtheta) <= ang_tol:
        return Action.close_gripper()
    return Action(dx, dy, dtheta)


class OraclePolicy:
    """Privileged policy that reads the true scene from the environment.

    It servoes to the first object's centre with the jaws across the
    object's narrowest graspable axis and closes once there.
    """

    def __init__(self, env: BinEnv, pos_tol: float = 1e-6, ang_tol: float = 1e-6):
        self.env = env
        self.pos_tol, self.ang_tol = pos_tol, ang_tol

    def __call__(self, obs: Observation) -> Action:
        s = self.env.state
        if not s.objects:
            return Action.close_gripper()
        obj = s.objects[0]
        g = s.gripper
        target = obj.theta
        if isinstance(obj.shape, Box) and obj.shape.width < obj.shape.length:
            target = obj.theta + math.pi / 2
        ex, ey = obj.x - g.x, obj.y - g.y
        c, sn = math.cos(g.theta), math.sin(g.theta)
        dth = 0.0 if isinstance(obj.shape, Disk) else wrap_half_pi(target - g.theta)
        return _servo(c * ex + sn * ey, -sn * ex + c * ey, dth, self.pos_tol, self.ang_tol)


class GraspMapPolicy:
    """Closed-loop baseline: predict a grasp map from the wrist depth
    image, servo toward its best grasp and close once aligned."""

    def __init__(self, config: EpisodeConfig, pos_tol: float = 0.003,
                 ang_tol: float = math.radians(3.0), predictor=heuristic_predict):
        self.camera = config.camera
        self.pos_tol, self.ang_tol = pos_tol, ang_tol
        self.predictor = predictor

    def __call__(self, obs: Observation) -> Action:
        gmap = self.predictor(obs.depth)
        if gmap.q_img.max() <= 0:
            return Action()
        g = select_best_grasp(gmap)
        u, v = g.center[0] + 0.5, g.center[1] + 0.5
        z = depth_at(obs.depth, g.center[0], g.center[1])
        cam = self.camera
        xc, yc = (u - cam.cx) * z / cam.fx, (v - cam.cy) * z / cam.fy
        # camera (x, y) -> gripper (x, -y); image angle a -> gripper angle -a
        return _servo(xc, -yc, wrap_half_pi(-g.angle), self.pos_tol, self.ang_tol)


# --------------------------------------------------------------------------
# batch evaluation and export

def run_episode(env: BinEnv, policy: Policy, seed=None) -> EpisodeResult:
    obs = env.reset(seed)
    if hasattr(policy, "reset"):
        policy.reset()
    done = False
    while not done:
        obs, done, _ = env.step(policy(obs))
    return env.result()


@dataclass(frozen=True)
class RunSummary:
    success_rate: float
    ci_low: float
    ci_high: float
    results: tuple

    @property
    def successes(self) -> int:
        return sum(r.reward for r in self.results)


def wilson_interval(successes: int, n: int, confidence: float = 0.95) -> tuple:
    if n == 0:
        return (0.0, 1.0)
    ci = stats.binomtest(successes, n).proportion_ci(confidence, method="wilson")
    return (float(ci.low), float(ci.high))


def run_policy(config: EpisodeConfig, policy_factory: Callable[[BinEnv], Policy],
               episodes: int, seed: int | None = None) -> RunSummary:
    """Evaluate a policy on ``episodes`` scenes; episode ``i`` is seeded
    with ``(seed, i)`` (``seed`` defaulting to the config's)."""
    if episodes < 1:
        raise ValueError("episodes must be positive")
    base = config.rng_seed if seed is None else seed
    env = BinEnv(config)
    policy = policy_factory(env)
    results = tuple(run_episode(env, policy, [base, i]) for i in range(episodes))
    k = sum(r.reward for r in results)
    lo, hi = wilson_interval(k, episodes)
    return RunSummary(k / episodes, lo, hi, results)


POLICIES = {
    "baseline": lambda env: GraspMapPolicy(env.config),
    "center": lambda env: close_at_center,
    "oracle": lambda env: OraclePolicy(env),
}


def trace_csv(result: EpisodeResult, episode: int = 0) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["episode", "t", "x", "y", "theta", "dx", "dy", "dtheta", "close",
                "x_next", "y_next", "theta_next", "reward", "done"])
    for r in result.trace:
        w.writerow([episode, r.t, repr(r.before.x), repr(r.before.y), repr(r.before.theta),
                    repr(r.action.dx), repr(r.action.dy), repr(r.action.dtheta),
                    int(r.action.close), repr(r.after.x), repr(r.after.y),
                    repr(r.after.theta), r.reward, int(r.done)])
    return buf.getvalue()


def write_pgm(path, depth, near: float | None = None, far: float | None = None) -> None:
    """8-bit PGM render, nearest surfaces bright."""
    d = np.asarray(depth, dtype=float)
    near = float(d.min()) if near is None else near
    far = float(d.max()) if far is None else far
    span = far - near if far > near else 1.0
    img = np.clip((far - d) / span, 0.0, 1.0)
    Image.fromarray(np.round(img * 255).astype(np.uint8), mode="L").save(
        Path(path), format="PPM")
