"""Kinematic chains of revolute joints and a prioritized damped-least-squares IK.

A chain is an ordered list of joints; each joint names its parent (another
joint earlier in the list, or the base), so two arms hanging off one torso
are a single chain.  End effectors are frames rigidly attached to a joint.

Chain documents are TOML; see ``data/sophia_arm.toml`` for the reference arm
and the README for the schema.
"""

from __future__ import annotations

import math
import re
import sys
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .transforms import RigidTransform, axis_angle_matrix, orientation_error, rotation_log

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

BUILTIN_CHAINS = ("sophia_arm", "sophia_body")


class ChainError(ValueError):
    """Malformed chain document or inconsistent chain definition."""


class InfeasibleMaskError(ValueError):
    """No active joint can move the end effector of some task."""


@dataclass(frozen=True)
class ActuatorSpec:
    """One row of the arm's mechanical-properties table, kept verbatim.

    The free-text torque columns (e.g. ``"6.451 Nm @15rpm(90deg/seg)"``) are
    stored as written; ``parse_torque_speed`` splits them into numbers.
    """

    weight_to_handle_g: float
    driven_by: str
    ratio: str
    max_pulley_torque: str
    max_motor_torque: str
    motor: str
    feedback: str


@dataclass(frozen=True)
class HandAxisSpec:
    """Finger actuator metadata; not part of the kinematic model."""

    name: str
    drive: str
    torque_kgcm: float
    speed_s_per_60deg: float
    voltage: float
    motor: str
    feedback: str


_TORQUE_RE = re.compile(
    r"^\s*([\d.]+)\s*Nm\s*@\s*([\d.]+)\s*rpm\s*\(\s*([\d.]+)\s*deg/seg\s*\)\s*$")


def parse_torque_speed(text: str) -> tuple[float, float, float]:
    """``"2.018 Nm @26.5rpm(159deg/seg)"`` -> ``(2.018, 26.5, 159.0)``."""
    m = _TORQUE_RE.match(text)
    if not m:
        raise ChainError(f"cannot parse torque/speed entry {text!r}")
    return float(m.group(1)), float(m.group(2)), float(m.group(3))


def parse_ratio(text: str) -> float:
    """``"2.917 : 1"`` -> ``2.917``."""
    try:
        num, den = (float(p) for p in text.split(":"))
    except ValueError as exc:
        raise ChainError(f"cannot parse ratio {text!r}") from exc
    return num / den


@dataclass(frozen=True)
class JointSpec:
    name: str
    axis: tuple
    parent_offset: RigidTransform
    limit_lo: float
    limit_hi: float
    max_speed: float  # rad/s
    drive_ratio: float = 1.0
    max_output_torque: float = 0.0  # N m
    actuator_label: str = ""
    parent: int | None = None  # joint index, None = chain base
    table: ActuatorSpec | None = None

    def __post_init__(self):
        axis = tuple(float(a) for a in self.axis)
        if len(axis) != 3:
            raise ChainError(f"{self.name}: axis must have 3 components")
        if abs(math.sqrt(sum(a * a for a in axis)) - 1.0) > 1e-9:
            raise ChainError(f"{self.name}: axis {axis} is not unit length")
        object.__setattr__(self, "axis", axis)
        if not self.limit_lo < self.limit_hi:
            raise ChainError(f"{self.name}: limit_lo must be < limit_hi")
        if not self.max_speed > 0:
            raise ChainError(f"{self.name}: max_speed must be positive")
        if not self.drive_ratio > 0:
            raise ChainError(f"{self.name}: drive_ratio must be positive")


@dataclass(frozen=True)
class EndEffector:
    joint: int
    tool: RigidTransform = field(default_factory=RigidTransform.identity)


@dataclass(frozen=True, eq=False)
class KinematicChain:
    name: str
    joints: tuple
    base_pose: RigidTransform = field(default_factory=RigidTransform.identity)
    end_effectors: Mapping[str, EndEffector] = field(default_factory=dict)
    hand: tuple = ()

    def __post_init__(self):
        joints = tuple(self.joints)
        if not joints:
            raise ChainError("a chain needs at least one joint")
        names = [j.name for j in joints]
        dupes = sorted({n for n in names if names.count(n) > 1})
        if dupes:
            raise ChainError(f"duplicate joint names: {dupes}")
        for i, j in enumerate(joints):
            if j.parent is not None and not 0 <= j.parent < i:
                raise ChainError(f"{j.name}: parent must precede the joint")
        for ee_name, ee in self.end_effectors.items():
            if not 0 <= ee.joint < len(joints):
                raise ChainError(f"end effector {ee_name!r} joint index out of range")
        object.__setattr__(self, "joints", joints)
        object.__setattr__(self, "end_effectors", dict(self.end_effectors))
        object.__setattr__(self, "hand", tuple(self.hand))

    @property
    def n_joints(self) -> int:
        return len(self.joints)

    @property
    def joint_names(self) -> list[str]:
        return [j.name for j in self.joints]

    @property
    def lower(self) -> np.ndarray:
        return np.array([j.limit_lo for j in self.joints])

    @property
    def upper(self) -> np.ndarray:
        return np.array([j.limit_hi for j in self.joints])

    @property
    def max_speeds(self) -> np.ndarray:
        return np.array([j.max_speed for j in self.joints])

    def joint_index(self, name: str) -> int:
        for i, j in enumerate(self.joints):
            if j.name == name:
                return i
        raise KeyError(name)

    def ancestors(self, joint: int) -> list[int]:
        """Joint indices from the base down to ``joint`` inclusive."""
        path = []
        j: int | None = joint
        while j is not None:
            path.append(j)
            j = self.joints[j].parent
        return path[::-1]

    def neutral(self) -> np.ndarray:
        """Mid-range configuration."""
        return (self.lower + self.upper) / 2.0

    def with_speed_scale(self, scale: float) -> "KinematicChain":
        joints = [replace(j, max_speed=j.max_speed * scale) for j in self.joints]
        return replace(self, joints=tuple(joints))


# --------------------------------------------------------------------------
# chain documents

def _transform_from_doc(doc: Mapping, where: str) -> RigidTransform:
    xyz = doc.get("xyz", [0.0, 0.0, 0.0])
    rpy = doc.get("rpy")
    if rpy is None and "rpy_deg" in doc:
        rpy = [math.radians(a) for a in doc["rpy_deg"]]
    if rpy is None:
        rpy = [0.0, 0.0, 0.0]
    if len(xyz) != 3 or len(rpy) != 3:
        raise ChainError(f"{where}: xyz and rpy need 3 components")
    return RigidTransform.from_rpy(xyz, rpy)


def chain_from_dict(doc: Mapping) -> KinematicChain:
    """Build a chain from an already-parsed chain document."""
    try:
        joint_docs = doc["joints"]
    except KeyError:
        raise ChainError("chain document has no joints") from None
    if not joint_docs:
        raise ChainError("a chain needs at least one joint")
    index: dict[str, int] = {}
    joints = []
    for i, jd in enumerate(joint_docs):
        try:
            name = jd["name"]
        except KeyError:
            raise ChainError(f"joint #{i} has no name") from None
        if name in index:
            raise ChainError(f"duplicate joint name {name!r}")
        parent_name = jd.get("parent", joints[-1].name if joints else "base")
        if parent_name == "base":
            parent = None
        elif parent_name in index:
            parent = index[parent_name]
        else:
            raise ChainError(f"{name}: parent {parent_name!r} not defined before it")
        if "limits_deg" in jd:
            lo, hi = (math.radians(v) for v in jd["limits_deg"])
        elif "limits" in jd:
            lo, hi = (float(v) for v in jd["limits"])
        else:
            raise ChainError(f"{name}: missing limits")
        table = None
        if "table" in jd:
            t = jd["table"]
            table = ActuatorSpec(
                weight_to_handle_g=float(t["weight_to_handle_g"]),
                driven_by=t["driven_by"], ratio=t["ratio"],
                max_pulley_torque=t["max_pulley_torque"],
                max_motor_torque=t["max_motor_torque"],
                motor=t["motor"], feedback=t["feedback"])
        # explicit values win; otherwise derive them from the verbatim table row
        if "max_speed_deg_s" in jd:
            speed = math.radians(jd["max_speed_deg_s"])
        elif "max_speed" in jd:
            speed = float(jd["max_speed"])
        elif table is not None:
            speed = math.radians(parse_torque_speed(table.max_pulley_torque)[2])
        else:
            raise ChainError(f"{name}: missing max_speed")
        ratio = jd.get("drive_ratio")
        if ratio is None:
            ratio = parse_ratio(table.ratio) if table is not None else 1.0
        torque = jd.get("max_output_torque")
        if torque is None:
            torque = parse_torque_speed(table.max_pulley_torque)[0] if table is not None else 0.0
        joints.append(JointSpec(
            name=name, axis=tuple(jd.get("axis", (0.0, 0.0, 1.0))),
            parent_offset=_transform_from_doc(jd, name),
            limit_lo=lo, limit_hi=hi, max_speed=speed,
            drive_ratio=float(ratio), max_output_torque=float(torque),
            actuator_label=jd.get("actuator", table.motor if table else ""),
            parent=parent, table=table))
        index[name] = i
    ees = {}
    for ee_name, ed in doc.get("end_effectors", {}).items():
        jname = ed.get("joint")
        if jname not in index:
            raise ChainError(f"end effector {ee_name!r}: unknown joint {jname!r}")
        ees[ee_name] = EndEffector(index[jname], _transform_from_doc(ed, ee_name))
    if not ees:
        ees["tip"] = EndEffector(len(joints) - 1)
    hand = tuple(HandAxisSpec(**h) for h in doc.get("hand", []))
    return KinematicChain(
        name=doc.get("name", "chain"), joints=tuple(joints),
        base_pose=_transform_from_doc(doc.get("base", {}), "base"),
        end_effectors=ees, hand=hand)


def parse_chain(text: str) -> KinematicChain:
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ChainError(f"malformed chain document: {exc}") from exc
    return chain_from_dict(doc)


def load_chain(source: str | Path | Mapping = "sophia_arm") -> KinematicChain:
    """Load a chain from a built-in name, a TOML path, or a parsed document."""
    if isinstance(source, Mapping):
        return chain_from_dict(source)
    if source == "sophia_arm":
        text = resources.files("deskarm.data").joinpath("sophia_arm.toml").read_text("utf-8")
        return parse_chain(text)
    if source == "sophia_body":
        return sophia_body()
    return parse_chain(Path(source).read_text("utf-8"))


def _mirror_transform(T: RigidTransform) -> RigidTransform:
    # reflection across the x-z plane, conjugated so it stays a rotation
    S = np.diag([1.0, -1.0, 1.0])
    return RigidTransform(S @ T.rotation @ S, S @ T.translation)


def sophia_body(shoulder_half_width: float = 0.17) -> KinematicChain:
    """Both arms on one torso: ``right/...`` joints then ``left/...`` joints.

    The left arm is the right arm reflected across the sagittal (x-z) plane.
    End effectors are ``right_palm``, ``right_pen``, ``left_palm``, ``left_pen``.
    """
    arm = load_chain("sophia_arm")
    joints: list[JointSpec] = []
    ees: dict[str, EndEffector] = {}
    n = arm.n_joints
    for side, sign in (("right", -1.0), ("left", 1.0)):
        first = len(joints)
        for i, j in enumerate(arm.joints):
            offset = j.parent_offset
            lo, hi = j.limit_lo, j.limit_hi
            axis = j.axis
            if side == "left":
                offset = _mirror_transform(offset)
                # rotations about x or z flip sense under the reflection
                if abs(axis[1]) < 0.5:
                    lo, hi = -hi, -lo
            if i == 0:
                base = RigidTransform.from_translation([0.0, sign * shoulder_half_width, 0.0])
                offset = base @ offset
            parent = None if j.parent is None else first + j.parent
            joints.append(replace(j, name=f"{side}/{j.name}", parent_offset=offset,
                                  limit_lo=lo, limit_hi=hi, axis=axis, parent=parent))
        for ee_name, ee in arm.end_effectors.items():
            tool = ee.tool if side == "right" else _mirror_transform(ee.tool)
            ees[f"{side}_{ee_name}"] = EndEffector(first + ee.joint, tool)
    assert len(joints) == 2 * n
    return KinematicChain(name="sophia_body", joints=tuple(joints),
                          base_pose=arm.base_pose, end_effectors=ees, hand=arm.hand)


# --------------------------------------------------------------------------
# kinematics

def _check_state(chain: KinematicChain, state) -> np.ndarray:
    q = np.asarray(state, dtype=float)
    if q.shape != (chain.n_joints,):
        raise ValueError(f"state has {q.size} angles, chain {chain.name!r} "
                         f"has {chain.n_joints} joints")
    return q


def _frames(chain: KinematicChain, q: np.ndarray) -> list:
    """(rotation before joint rotation, rotation after, origin) per joint."""
    base_R, base_p = chain.base_pose.rotation, chain.base_pose.translation
    out: list = []
    for i, j in enumerate(chain.joints):
        if j.parent is None:
            pR, pp = base_R, base_p
        else:
            _, pR, pp = out[j.parent]
        off = j.parent_offset
        R_pre = pR @ off.rotation
        out.append((R_pre, R_pre @ axis_angle_matrix(j.axis, q[i]), pR @ off.translation + pp))
    return out


def joint_frames(chain: KinematicChain, state) -> list[tuple[np.ndarray, np.ndarray]]:
    """World (rotation, origin) of every joint frame *after* its rotation."""
    q = _check_state(chain, state)
    return [(R, p) for _, R, p in _frames(chain, q)]


def _ee_pose(chain, frames, ee: EndEffector) -> tuple[np.ndarray, np.ndarray]:
    R, p = frames[ee.joint]
    return R @ ee.tool.rotation, R @ ee.tool.translation + p


def forward_kinematics(chain: KinematicChain, state) -> dict[str, RigidTransform]:
    """World pose of every named end effector."""
    frames = joint_frames(chain, state)
    out = {}
    for name, ee in chain.end_effectors.items():
        R, p = _ee_pose(chain, frames, ee)
        out[name] = RigidTransform(R, p)
    return out


def _ee_position_rotation(chain, state, ee_name):
    frames = joint_frames(chain, state)
    return _ee_pose(chain, frames, chain.end_effectors[ee_name])


def numeric_jacobian(chain: KinematicChain, state, end_effector: str,
                     mask: Sequence[bool] | None = None, h: float = 1e-6) -> np.ndarray:
    """6xN Jacobian by central differences.

    Rows 0-2 are d(position)/dq, rows 3-5 the world-frame angular rate
    ``log(R(q+h) R(q-h)^T) / 2h``.  Perturbing joint i only changes the
    rotation between the fixed transforms before and after it, so those are
    computed once and each column costs two short products.
    """
    q = _check_state(chain, state)
    full = _frames(chain, q)
    ee = chain.end_effectors[end_effector]
    Re, pe = _ee_pose(chain, [(R, p) for _, R, p in full], ee)
    J = np.zeros((6, chain.n_joints))
    for i in chain.ancestors(ee.joint):
        if mask is not None and not mask[i]:
            continue
        axis = chain.joints[i].axis
        R_pre, Ri, pi = full[i]
        B_R = Ri.T @ Re
        B_p = Ri.T @ (pe - pi)
        Mp = R_pre @ axis_angle_matrix(axis, q[i] + h)
        Mm = R_pre @ axis_angle_matrix(axis, q[i] - h)
        J[:3, i] = (Mp @ B_p - Mm @ B_p) / (2 * h)
        J[3:, i] = rotation_log((Mp @ B_R) @ (Mm @ B_R).T) / (2 * h)
    return J


def geometric_jacobian(chain: KinematicChain, state, end_effector: str,
                       mask: Sequence[bool] | None = None) -> np.ndarray:
    """Analytic 6xN Jacobian: column i is (z_i x (p - o_i), z_i)."""
    frames = joint_frames(chain, state)
    ee = chain.end_effectors[end_effector]
    _, p = _ee_pose(chain, frames, ee)
    J = np.zeros((6, chain.n_joints))
    for i in chain.ancestors(ee.joint):
        if mask is not None and not mask[i]:
            continue
        R, o = frames[i]
        z = R @ np.asarray(chain.joints[i].axis)
        J[:3, i] = np.cross(z, p - o)
        J[3:, i] = z
    return J


def clamp_to_limits(chain: KinematicChain, state) -> np.ndarray:
    q = _check_state(chain, state)
    return np.clip(q, chain.lower, chain.upper)


def min_travel_time(chain: KinematicChain, from_state, to_state) -> float:
    """Rest-to-rest lower bound for a synchronized joint move, in seconds."""
    a = _check_state(chain, from_state)
    b = _check_state(chain, to_state)
    return float(np.max(np.abs(b - a) / chain.max_speeds))


# --------------------------------------------------------------------------
# inverse kinematics

@dataclass(frozen=True, eq=False)
class IkTask:
    end_effector: str
    target: RigidTransform
    position_weight: float = 1.0
    orientation_weight: float = 1.0
    active_joints: tuple | None = None  # None: every joint may move
    priority: int = 1  # 1 is the most important level

    def __post_init__(self):
        if self.position_weight < 0 or self.orientation_weight < 0:
            raise ValueError("task weights must be non-negative")
        if self.position_weight == 0 and self.orientation_weight == 0:
            raise ValueError("task needs at least one nonzero weight")
        if self.active_joints is not None:
            object.__setattr__(self, "active_joints",
                               tuple(bool(a) for a in self.active_joints))


@dataclass(frozen=True)
class IkOptions:
    max_iters: int = 200
    tol: float = 1e-6
    damping: float = 1e-2
    limit_boost: float = 10.0
    limit_margin: float = math.radians(5.0)
    max_step: float = 0.2
    fd_step: float = 1e-6
    jacobian: str = "numeric"  # or "analytic"
    # restart from a seeded random state when a run stops improving; the
    # restarts share the max_iters budget
    stall_window: int = 20
    stall_ratio: float = 0.99
    restart_seed: int = 0


@dataclass(frozen=True)
class TaskResidual:
    end_effector: str
    position: float
    orientation: float


@dataclass(frozen=True)
class IkReport:
    converged: bool
    iterations: int
    residuals: tuple

    @property
    def max_position(self) -> float:
        return max(r.position for r in self.residuals)

    @property
    def max_orientation(self) -> float:
        return max(r.orientation for r in self.residuals)


def _task_errors(chain, q, tasks):
    frames = joint_frames(chain, q)
    errs = []
    for task in tasks:
        R, p = _ee_pose(chain, frames, chain.end_effectors[task.end_effector])
        errs.append((task.target.translation - p, orientation_error(task.target.rotation, R)))
    return errs


def _is_converged(tasks, errs, tol) -> bool:
    for task, (ep, eo) in zip(tasks, errs):
        if task.position_weight > 0 and np.linalg.norm(ep) >= tol:
            return False
        if task.orientation_weight > 0 and np.linalg.norm(eo) >= tol:
            return False
    return True


def _level_key(levels, tasks, errs, tol) -> tuple:
    """Per-priority squared error, most important level first; a level whose
    tasks are all within ``tol`` counts as zero so lower levels decide."""
    key = []
    for level in levels:
        total, done = 0.0, True
        for task, (ep, eo) in zip(tasks, errs):
            if task.priority != level:
                continue
            total += task.position_weight ** 2 * float(ep @ ep)
            total += task.orientation_weight ** 2 * float(eo @ eo)
            done = done and _is_converged([task], [(ep, eo)], tol)
        key.append(0.0 if done else total)
    return tuple(key)


def _residuals(tasks, errs) -> tuple:
    return tuple(TaskResidual(t.end_effector,
                              float(np.linalg.norm(ep)) if t.position_weight > 0 else 0.0,
                              float(np.linalg.norm(eo)) if t.orientation_weight > 0 else 0.0)
                 for t, (ep, eo) in zip(tasks, errs))


def _level_systems(levels, tasks, masks, errs, task_jacobian):
    systems = []
    for level in levels:
        rows, rhs = [], []
        for i, task in enumerate(tasks):
            if task.priority != level:
                continue
            J = task_jacobian(i, task)
            ep, eo = errs[i]
            if task.position_weight > 0:
                rows.append(task.position_weight * J[:3])
                rhs.append(task.position_weight * ep)
            if task.orientation_weight > 0:
                rows.append(task.orientation_weight * J[3:])
                rhs.append(task.orientation_weight * eo)
        systems.append((np.vstack(rows), np.concatenate(rhs)))
    return systems


def _solve_levels(systems, lam, free):
    n = lam.size
    Lam = np.diag(lam ** 2)
    F = np.diag(free.astype(float))
    dq = np.zeros(n)
    N = np.eye(n)
    for k, (J, e) in enumerate(systems):
        J = J @ F
        Jb = J @ N
        r = e - J @ dq
        dq = dq + N @ np.linalg.solve(Jb.T @ Jb + Lam, Jb.T @ r)
        if k + 1 < len(systems):
            N = N - np.linalg.pinv(Jb, rcond=1e-10) @ Jb
    return dq


def _prioritized_step(levels, tasks, masks, errs, task_jacobian, q, lo, hi, opts):
    """One damped, prioritized step with limit handling.

    Joints within ``limit_margin`` of a limit get ``limit_boost`` x damping
    when the plain step would carry them past that limit.  Joints sitting on
    a limit that the step pushes outward are frozen and the step re-solved.
    """
    systems = _level_systems(levels, tasks, masks, errs, task_jacobian)
    n = q.size
    free = np.ones(n, bool)
    base = np.full(n, opts.damping)
    for _ in range(n):
        dq = _solve_levels(systems, base, free)
        toward_lo = (q - lo < opts.limit_margin) & (q + dq < lo)
        toward_hi = (hi - q < opts.limit_margin) & (q + dq > hi)
        boost = toward_lo | toward_hi
        if boost.any():
            dq = _solve_levels(systems, np.where(boost, opts.damping * opts.limit_boost,
                                                 opts.damping), free)
        pinned = free & (((q <= lo) & (dq < 0)) | ((q >= hi) & (dq > 0)))
        if not pinned.any():
            return dq
        free &= ~pinned
        if not free.any():
            return np.zeros(n)
    return dq


def solve_ik(chain: KinematicChain, seed, tasks: Sequence[IkTask],
             opts: IkOptions | None = None) -> tuple[np.ndarray, IkReport]:
    """Prioritized damped-least-squares IK.

    Tasks sharing a priority are stacked (rows scaled by their weights);
    each lower level is solved inside the null space of all higher levels.
    Damping is per joint and boosted near joint limits; every iterate is
    clamped to the limits.  Returns the best state seen and a report whose
    ``converged`` flag the caller must check.
    """
    opts = opts or IkOptions()
    if not tasks:
        raise ValueError("solve_ik needs at least one task")
    n = chain.n_joints
    q = clamp_to_limits(chain, seed)

    masks = []
    for task in tasks:
        if task.end_effector not in chain.end_effectors:
            raise KeyError(f"unknown end effector {task.end_effector!r}")
        mask = np.ones(n, bool) if task.active_joints is None else np.array(task.active_joints)
        if mask.shape != (n,):
            raise ValueError("active_joints length must equal the joint count")
        on_path = np.zeros(n, bool)
        on_path[chain.ancestors(chain.end_effectors[task.end_effector].joint)] = True
        if not (mask & on_path).any():
            raise InfeasibleMaskError(f"no active joint moves {task.end_effector!r}")
        # joints off the path have zero Jacobian columns; dropping them here
        # also keeps stall restarts from disturbing unrelated limbs
        masks.append(mask & on_path)

    levels = sorted({t.priority for t in tasks})
    jac = geometric_jacobian if opts.jacobian == "analytic" else None
    rng = np.random.default_rng(opts.restart_seed)

    # Levels are brought in cumulatively: first the top level alone, then the
    # top two starting from that result, and so on.  Each phase keeps its best
    # state lexicographically, so a later phase can only be accepted where it
    # leaves every higher level at least as good as the previous phase did.
    iters = 0
    for k in range(1, len(levels) + 1):
        idx = [i for i, t in enumerate(tasks) if t.priority in levels[:k]]
        q, converged, used = _ik_phase(
            chain, q, [tasks[i] for i in idx], [masks[i] for i in idx], levels[:k],
            jac, rng, opts, opts.max_iters - iters)
        iters += used
    errs = _task_errors(chain, q, tasks)
    return q, IkReport(converged=_is_converged(tasks, errs, opts.tol), iterations=iters,
                       residuals=_residuals(tasks, errs))


def _ik_phase(chain, q, tasks, masks, levels, jac, rng, opts, budget):
    lo, hi = chain.lower, chain.upper

    def task_jacobian(i, task):
        if jac is not None:
            return jac(chain, q, task.end_effector, masks[i])
        return numeric_jacobian(chain, q, task.end_effector, masks[i], opts.fd_step)

    movable = np.logical_or.reduce(masks)
    errs = _task_errors(chain, q, tasks)
    best_q, best_key = q.copy(), _level_key(levels, tasks, errs, opts.tol)
    run_costs = [sum(best_key)]
    iters = 0
    converged = _is_converged(tasks, errs, opts.tol)
    while not converged and iters < budget:
        window = opts.stall_window
        if (len(run_costs) > window
                and min(run_costs[-window:]) > opts.stall_ratio * min(run_costs[:-window])):
            if best_key[0] == 0.0:
                # top level satisfied; restarting would only disturb it
                break
            q = np.where(movable, rng.uniform(lo, hi), q)
            run_costs = []
        else:
            dq = _prioritized_step(levels, tasks, masks, errs, task_jacobian, q, lo, hi, opts)
            step = np.linalg.norm(dq)
            if step > opts.max_step:
                dq *= opts.max_step / step
            q = np.clip(q + dq, lo, hi)
        iters += 1
        errs = _task_errors(chain, q, tasks)
        key = _level_key(levels, tasks, errs, opts.tol)
        run_costs.append(sum(key))
        if key < best_key:
            best_q, best_key = q.copy(), key
        converged = _is_converged(tasks, errs, opts.tol)
        if converged:
            best_q = q.copy()
    return best_q, converged, iters
