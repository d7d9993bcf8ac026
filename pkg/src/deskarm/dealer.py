"""Baccarat deal choreography and a timing/accuracy simulator.

The right hand picks every card from the shoe.  Banker cards go straight
to their slot; player cards are handed to the left hand at a rendezvous
in front of the body, and the left hand places them.  Moves are executed
one after another, each lasting the synchronized joint-space bound of the
slowest joint, plus fixed dwell times for grasp, hand-off and release.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Mapping

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .chain import IkOptions, IkTask, KinematicChain, load_chain, min_travel_time, solve_ik
from .transforms import RigidTransform

CARD_ORDER = ("player1", "banker1", "player2", "banker2", "player3", "banker3")


class UnreachablePoseError(RuntimeError):
    def __init__(self, task_index: int, pose_name: str, residual: float):
        super().__init__(f"task {task_index}: pose {pose_name!r} unreachable "
                         f"(residual {residual:.3g} m)")
        self.task_index = task_index
        self.pose_name = pose_name


def sigma_for_success(probability: float = 0.995, tolerance: float = 0.005) -> float:
    """Isotropic 2-D Gaussian sigma with P(|error| < tolerance) = probability.

    The radial error is Rayleigh distributed, so
    ``P(r < t) = 1 - exp(-t^2 / (2 sigma^2))``.
    """
    if not 0.0 < probability < 1.0:
        raise ValueError("probability must be in (0, 1)")
    return tolerance / math.sqrt(-2.0 * math.log(1.0 - probability))


# --------------------------------------------------------------------------
# layout and script

@dataclass(frozen=True)
class TableLayout:
    poses: Mapping[str, RigidTransform]
    picker: str = "right_palm"
    receiver: str = "left_palm"
    grasp_dwell: float = 0.5
    release_dwell: float = 0.3
    handoff_dwell: float = 0.4
    tolerance: float = 0.005
    chain: str = "sophia_body"

    def __post_init__(self):
        need = {"shoe", "pass_picker", "pass_receiver", *CARD_ORDER}
        missing = need - set(self.poses)
        if missing:
            raise ValueError(f"layout is missing poses: {sorted(missing)}")
        if min(self.grasp_dwell, self.release_dwell, self.handoff_dwell) < 0:
            raise ValueError("dwell times must be non-negative")
        if self.tolerance <= 0:
            raise ValueError("tolerance must be positive")


def layout_from_dict(doc: Mapping) -> TableLayout:
    poses = {}
    for name, p in doc.get("poses", {}).items():
        rpy = p.get("rpy")
        if rpy is None:
            rpy = [math.radians(a) for a in p.get("rpy_deg", [0.0, 0.0, 0.0])]
        poses[name] = RigidTransform.from_rpy(p["xyz"], rpy)
    keys = ("picker", "receiver", "grasp_dwell", "release_dwell", "handoff_dwell",
            "tolerance", "chain")
    return TableLayout(poses, **{k: doc[k] for k in keys if k in doc})


def load_layout(source="demo_table") -> TableLayout:
    """Layout from a built-in name, a TOML path or an already parsed mapping."""
    if isinstance(source, Mapping):
        return layout_from_dict(source)
    path = Path(source)
    if path.suffix == ".toml" or path.exists():
        text = path.read_text(encoding="utf-8")
    else:
        text = resources.files("deskarm.data").joinpath(f"{source}.toml").read_text()
    return layout_from_dict(tomllib.loads(text))


@dataclass(frozen=True)
class CardTask:
    card: str
    pick_pose: RigidTransform
    place_pose: RigidTransform
    via_pass: bool = False


@dataclass(frozen=True)
class DealScript:
    tasks: tuple
    layout: TableLayout

    def __post_init__(self):
        n = len(self.tasks)
        if not 4 <= n <= 6:
            raise ValueError("a deal has 4 base cards and at most 2 extra")


def build_script(extra_cards: int, layout: TableLayout) -> DealScript:
    """Player/banker alternation, player cards travelling via the hand-off."""
    if extra_cards not in (0, 1, 2):
        raise ValueError(f"extra_cards must be 0, 1 or 2, got {extra_cards!r}")
    tasks = []
    for card in CARD_ORDER[:4 + extra_cards]:
        tasks.append(CardTask(card, layout.poses["shoe"], layout.poses[card],
                              via_pass=card.startswith("player")))
    return DealScript(tuple(tasks), layout)


# --------------------------------------------------------------------------
# simulation

@dataclass(frozen=True)
class Segment:
    task: int
    kind: str          # move-pick, grasp, move-pass, handoff, move-place, release
    duration: float


@dataclass(frozen=True)
class DealReport:
    total_time: float
    segments: tuple
    per_card_times: tuple
    placement_errors: tuple
    success_count: int
    tolerance: float

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["task", "segment", "duration_s"])
        for s in self.segments:
            w.writerow([s.task, s.kind, repr(s.duration)])
        w.writerow([])
        w.writerow(["task", "card_time_s", "placement_error_m", "success"])
        for i, (t, e) in enumerate(zip(self.per_card_times, self.placement_errors)):
            w.writerow([i, repr(t), repr(e), int(e < self.tolerance)])
        w.writerow([])
        w.writerow(["total_time_s", repr(self.total_time)])
        w.writerow(["success_count", self.success_count])
        return buf.getvalue()


@dataclass(frozen=True)
class DealMotion:
    """Joint states visited by a deal, independent of speeds and noise."""
    states: tuple       # (task, kind, q) per move, starting with the seed
    script: DealScript


def _arm_mask(chain: KinematicChain, effector: str) -> np.ndarray:
    mask = np.zeros(chain.n_joints, dtype=bool)
    mask[chain.ancestors(chain.end_effectors[effector].joint)] = True
    return mask


def plan_deal_motion(script: DealScript, chain: KinematicChain, seed,
                     opts: IkOptions | None = None, reach_tol: float = 1e-4) -> DealMotion:
    """Solve every pick, hand-off and place pose by IK, one after another."""
    layout = script.layout
    opts = opts or IkOptions()
    pick_mask = _arm_mask(chain, layout.picker)
    recv_mask = _arm_mask(chain, layout.receiver)
    q = np.asarray(seed, dtype=float).copy()
    states = [(-1, "start", q.copy())]

    def reach(i, name, tasks):
        # continue from the current state; if that lands in a local minimum,
        # retry once with the moving arm(s) restarted from mid-range
        moving = np.logical_or.reduce([t.active_joints for t in tasks])
        worst = math.inf
        for start in (q, np.where(moving, chain.neutral(), q)):
            sol, rep = solve_ik(chain, start, tasks, opts)
            worst = max(r.position for r in rep.residuals)
            if worst <= reach_tol and max(r.orientation for r in rep.residuals) <= 10 * reach_tol:
                return sol
        raise UnreachablePoseError(i, name, worst)

    for i, task in enumerate(script.tasks):
        q = reach(i, "shoe", [IkTask(layout.picker, task.pick_pose, active_joints=pick_mask)])
        states.append((i, "move-pick", q.copy()))
        if task.via_pass:
            q = reach(i, "pass", [
                IkTask(layout.picker, layout.poses["pass_picker"], active_joints=pick_mask),
                IkTask(layout.receiver, layout.poses["pass_receiver"], active_joints=recv_mask)])
            states.append((i, "move-pass", q.copy()))
            q = reach(i, task.card, [IkTask(layout.receiver, task.place_pose,
                                            active_joints=recv_mask)])
        else:
            q = reach(i, task.card, [IkTask(layout.picker, task.place_pose,
                                            active_joints=pick_mask)])
        states.append((i, "move-place", q.copy()))
    return DealMotion(tuple(states), script)


def time_deal(motion: DealMotion, chain: KinematicChain,
              placement_errors=None) -> DealReport:
    """Timeline of a solved deal under the chain's speed caps."""
    layout = motion.script.layout
    n = len(motion.script.tasks)
    segs = []
    prev = motion.states[0][2]
    for task, kind, q in motion.states[1:]:
        segs.append(Segment(task, kind, min_travel_time(chain, prev, q)))
        prev = q
        if kind == "move-pick":
            segs.append(Segment(task, "grasp", layout.grasp_dwell))
        elif kind == "move-pass":
            segs.append(Segment(task, "handoff", layout.handoff_dwell))
        elif kind == "move-place":
            segs.append(Segment(task, "release", layout.release_dwell))
    per_card = [math.fsum(s.duration for s in segs if s.task == i) for i in range(n)]
    errors = tuple(float(e) for e in (np.zeros(n) if placement_errors is None
                                      else placement_errors))
    return DealReport(math.fsum(s.duration for s in segs), tuple(segs), tuple(per_card),
                      errors, sum(e < layout.tolerance for e in errors), layout.tolerance)


def sample_placement_errors(n: int, sigma: float, rng) -> np.ndarray:
    """Radial in-plane placement errors for ``n`` cards."""
    return np.hypot(*rng.normal(0.0, sigma, (2, n))) if sigma > 0 else np.zeros(n)


def simulate_deal(script: DealScript, chain: KinematicChain | None = None, seed=None,
                  noise: float = 0.0, rng_seed: int = 0,
                  opts: IkOptions | None = None) -> DealReport:
    """Solve, time and score one deal."""
    chain = chain or load_chain(script.layout.chain)
    seed = chain.neutral() if seed is None else seed
    motion = plan_deal_motion(script, chain, seed, opts)
    errors = sample_placement_errors(len(script.tasks), noise, np.random.default_rng(rng_seed))
    return time_deal(motion, chain, errors)


def placement_success_rate(trials: int, noise: float, tolerance: float = 0.005,
                           rng_seed: int = 0) -> float:
    """Fraction of ``trials`` seeded card placements landing within tolerance.

    Placement noise does not depend on the arm motion, so the batch skips
    the kinematics entirely.
    """
    errors = sample_placement_errors(trials, noise, np.random.default_rng(rng_seed))
    return float(np.mean(errors < tolerance))


def with_joint_speed(chain: KinematicChain, joint: int, max_speed: float) -> KinematicChain:
    """Copy of ``chain`` with one joint's speed cap replaced."""
    joints = list(chain.joints)
    joints[joint] = replace(joints[joint], max_speed=max_speed)
    return replace(chain, joints=tuple(joints))
