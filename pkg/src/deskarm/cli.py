"""Command-line entry point: ``deskarm <subcommand> [options]``.

Exit codes: 0 success, 1 usage error or malformed input file, 2 numeric
non-convergence (IK miss, unreachable pose), 3 empty or degenerate input,
4 performance targets missed (``deal --enforce-targets``).

Every subcommand accepts ``--config FILE``, a TOML file whose top-level
keys and ``[<subcommand>]`` table supply defaults for that subcommand's
flags; flags given on the command line win.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

EXIT_OK, EXIT_USAGE, EXIT_NO_CONVERGENCE, EXIT_EMPTY, EXIT_TARGETS = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _floats(text: str) -> list:
    try:
        return [float(v) for v in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _fmt(values) -> str:
    return "[" + ", ".join(f"{float(v):.6f}" for v in values) + "]"


def _print_pose(name, T):
    rpy = Rotation.from_matrix(T.rotation).as_euler("xyz")
    print(f"{name}: xyz={_fmt(T.translation)} rpy_deg={_fmt(np.degrees(rpy))}")


def _home_state(chain):
    return np.clip(np.zeros(chain.n_joints), chain.lower, chain.upper)


# --------------------------------------------------------------------------
# subcommands

def cmd_fk(args) -> int:
    from .chain import forward_kinematics, load_chain

    chain = load_chain(args.chain)
    q = _home_state(chain) if args.angles is None else np.asarray(args.angles, dtype=float)
    if args.degrees and args.angles is not None:
        q = np.radians(q)
    if q.shape != (chain.n_joints,):
        raise UsageError(f"--angles needs {chain.n_joints} values for {chain.name}, "
                         f"got {q.size}")
    for name, T in sorted(forward_kinematics(chain, q).items()):
        _print_pose(name, T)
    return EXIT_OK


def cmd_ik(args) -> int:
    from .chain import IkOptions, IkTask, forward_kinematics, load_chain, solve_ik
    from .transforms import RigidTransform

    chain = load_chain(args.chain)
    effector = args.effector or next(iter(chain.end_effectors))
    if effector not in chain.end_effectors:
        raise UsageError(f"unknown end effector {effector!r}; "
                         f"choose from {sorted(chain.end_effectors)}")
    if len(args.target) != 3 or len(args.rpy) != 3:
        raise UsageError("--target and --rpy take three numbers each")
    seed = _home_state(chain) if args.start is None else np.asarray(args.start, dtype=float)
    if seed.shape != (chain.n_joints,):
        raise UsageError(f"--start needs {chain.n_joints} values")
    target = RigidTransform.from_rpy(args.target, np.radians(args.rpy))
    task = IkTask(effector, target, orientation_weight=0.0 if args.position_only else 1.0)
    opts = IkOptions(max_iters=args.max_iters, tol=args.tol, damping=args.damping,
                     jacobian=args.jacobian, restart_seed=args.seed)
    q, rep = solve_ik(chain, seed, [task], opts)
    print("angles_rad=" + _fmt(q))
    print("angles_deg=" + _fmt(np.degrees(q)))
    for r in rep.residuals:
        orient = "n/a" if args.position_only else f"{r.orientation:.3e}"
        print(f"residual {r.end_effector}: position={r.position:.3e} m orientation={orient} rad")
    _print_pose(effector, forward_kinematics(chain, q)[effector])
    print(f"converged={rep.converged} iterations={rep.iterations}")
    return EXIT_OK if rep.converged else EXIT_NO_CONVERGENCE


def cmd_graspmap(args) -> int:
    from . import images
    from .grasp import (heuristic_predict, rasterize_ground_truth, read_rectangle_file,
                        save_grasp_map, select_best_grasp)

    if bool(args.rects) == bool(args.depth):
        raise UsageError("give rectangle files or --depth, not both or neither")
    if args.depth:
        depth = images.read_depth(args.depth)
        gmap = heuristic_predict(depth)
        provenance = f"heuristic_predict({Path(args.depth).name})"
    else:
        h, w = args.shape
        rects = []
        for path in args.rects:
            positive = not Path(path).stem.endswith("cneg")
            found, dropped = read_rectangle_file(Path(path).read_text(), positive)
            if dropped:
                print(f"warning: {path}: dropped {dropped} degenerate rectangle(s)",
                      file=sys.stderr)
            rects.extend(found)
        if not any(r.positive for r in rects):
            print("error: no valid positive rectangles", file=sys.stderr)
            return EXIT_EMPTY
        gmap = rasterize_ground_truth(rects, (int(h), int(w)))
        provenance = "rasterize_ground_truth(" + ", ".join(Path(p).name for p in args.rects) + ")"
    if gmap.q_img.max() <= 0:
        print("error: the grasp map is empty", file=sys.stderr)
        return EXIT_EMPTY
    out = save_grasp_map(gmap, args.out, provenance)
    g = select_best_grasp(gmap, smooth=args.sigma > 0, sigma=args.sigma or 1.0)
    print(f"wrote {out}")
    print(f"best grasp: u={g.center[0]} v={g.center[1]} angle_deg={math.degrees(g.angle):.3f} "
          f"width_px={g.width:.3f} quality={g.quality:.4f}")
    return EXIT_OK


def cmd_draw(args) -> int:
    from . import images
    from .chain import load_chain
    from .roodle import (NoForegroundError, UnreachableWaypointError, demo_calibration_points,
                         draw_image, fit_plane, read_calibration, trajectory_csv)

    image = images.read_gray(args.image)
    cal = (read_calibration(args.calibration) if args.calibration
           else fit_plane(demo_calibration_points()))
    chain = None if args.no_trajectory else load_chain(args.chain)
    try:
        res = draw_image(image, cal, chain=chain, contrast=args.contrast,
                         brightness=args.brightness, foreground=args.foreground,
                         epsilon=args.epsilon, max_seg_len=args.max_seg_len,
                         merge_angle_tol=math.radians(args.merge_angle_tol_deg),
                         scale=args.scale, source_image_id=Path(args.image).name)
    except NoForegroundError:
        print("error: no foreground in the image", file=sys.stderr)
        return EXIT_EMPTY
    except UnreachableWaypointError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NO_CONVERGENCE
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "drawing.svg").write_text(res.svg)
    print(f"strokes={len(res.plan.strokes)} pen_down_strokes={len(res.plan.pen_down_strokes)}")
    if res.trajectory:
        (out / "trajectory.csv").write_text(trajectory_csv(res.trajectory, chain.joint_names))
        print(f"waypoints={len(res.trajectory)} "
              f"estimated_time_s={res.trajectory[-1].time:.3f}")
    print(f"wrote {out / 'drawing.svg'}")
    return EXIT_OK


def cmd_deal(args) -> int:
    from .chain import load_chain
    from .dealer import (UnreachablePoseError, build_script, load_layout, plan_deal_motion,
                         sample_placement_errors, sigma_for_success, time_deal)

    if args.trials < 1:
        raise UsageError("--trials must be positive")
    layout = load_layout(args.layout)
    try:
        script = build_script(args.extra, layout)
    except ValueError as e:
        raise UsageError(str(e))
    chain = load_chain(layout.chain)
    noise = sigma_for_success() if args.noise is None else args.noise
    try:
        motion = plan_deal_motion(script, chain, chain.neutral())
    except UnreachablePoseError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NO_CONVERGENCE
    rng = np.random.default_rng(args.seed)
    errors = sample_placement_errors(args.trials * len(script.tasks), noise, rng)
    errors = errors.reshape(args.trials, len(script.tasks))
    report = time_deal(motion, chain, errors[0])
    rate = float(np.mean(errors < layout.tolerance))
    for s in report.segments:
        print(f"task {s.task} {s.kind:<10} {s.duration:8.3f} s")
    print(f"cards={len(script.tasks)} total_time_s={report.total_time:.3f}")
    print(f"noise_sigma_m={noise:.6g} trials={args.trials} success_rate={rate:.4f}")
    if args.csv:
        Path(args.csv).write_text(report.to_csv())
    if args.enforce_targets and not (report.total_time <= 25.0 and rate >= 0.995):
        print("targets missed (need total_time <= 25 s and success_rate >= 0.995)",
              file=sys.stderr)
        return EXIT_TARGETS
    return EXIT_OK


def cmd_binsim(args) -> int:
    from .bin_episode import (POLICIES, EpisodeConfig, RandomPolicy, load_episode_config,
                              run_policy, trace_csv, write_pgm, render_depth, GripperPose)

    if args.episodes < 1:
        raise UsageError("--episodes must be positive")
    cfg = load_episode_config(args.env_config) if args.env_config else EpisodeConfig()
    factories = dict(POLICIES)
    factories["random"] = lambda env: RandomPolicy(env.config, seed=args.seed)
    summary = run_policy(cfg, factories[args.policy], args.episodes, seed=args.seed)
    print(f"policy={args.policy} episodes={args.episodes} successes={summary.successes} "
          f"success_rate={summary.success_rate:.4f} "
          f"ci95=[{summary.ci_low:.4f}, {summary.ci_high:.4f}]")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        rows = [trace_csv(r, i) for i, r in enumerate(summary.results)]
        text = rows[0] + "".join(r.split("\n", 1)[1] for r in rows[1:])
        (out / "traces.csv").write_text(text)
        if args.renders:
            for i, r in enumerate(summary.results):
                write_pgm(out / f"episode_{i:04d}.pgm",
                          render_depth(r.objects, GripperPose(), cfg.camera))
        print(f"wrote {out / 'traces.csv'}")
    return EXIT_OK


def cmd_rules(args) -> int:
    from .rules import RuleError, format_facts, forward_chain, parse_atom, parse_program, query
    from .rules import KnowledgeBase

    texts = [Path(p).read_text() for p in [args.rules, *args.facts]]
    try:
        programs = [parse_program(t) for t in texts]
        facts = [f for p in programs for f in p.facts]
        rules = [r for p in programs for r in p.rules]
        kb = KnowledgeBase(frozenset(facts), tuple(rules))
        queries = [q for p in programs for q in p.queries] + [parse_atom(q) for q in args.query]
    except RuleError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    if not kb.facts and not kb.rules:
        print("error: no facts or rules", file=sys.stderr)
        return EXIT_EMPTY
    fix = forward_chain(kb)
    if not queries:
        sys.stdout.write(format_facts(fix.facts))
        return EXIT_OK
    for q in queries:
        bindings = query(fix, q)
        print(f"?- {q}.  % {len(bindings)} answer(s)")
        for b in bindings:
            print("   " + (json.dumps(b) if b else "true"))
    return EXIT_OK


# --------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = _Parser(prog="deskarm", description="Desk-scale arm control stack.",
                     formatter_class=fmt)
    common = _Parser(add_help=False)
    common.add_argument("--config", help="TOML file supplying flag defaults")
    common.add_argument("--seed", type=int, default=0, help="seed for every random draw")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, help_):
        p = sub.add_parser(name, parents=[common], help=help_, description=help_,
                           formatter_class=fmt)
        p.set_defaults(func=func)
        return p

    p = add("fk", cmd_fk, "forward kinematics: print every end-effector pose")
    p.add_argument("--chain", default="sophia_arm", help="built-in chain name or TOML path")
    p.add_argument("--angles", type=_floats, default=None,
                   help="joint angles, comma separated (default: home, all zero)")
    p.add_argument("--degrees", action="store_true", help="--angles are in degrees")

    p = add("ik", cmd_ik, "inverse kinematics for one end-effector pose")
    p.add_argument("--chain", default="sophia_arm", help="built-in chain name or TOML path")
    p.add_argument("--effector", default=None, help="end effector (default: the first)")
    p.add_argument("--target", type=_floats, required=True, help="x,y,z in metres")
    p.add_argument("--rpy", type=_floats, default=[0.0, 0.0, 0.0],
                   help="roll,pitch,yaw in degrees")
    p.add_argument("--position-only", action="store_true", help="ignore the orientation")
    p.add_argument("--start", type=_floats, default=None,
                   help="start angles in radians (default: home)")
    p.add_argument("--max-iters", type=int, default=200, help="iteration budget")
    p.add_argument("--tol", type=float, default=1e-6, help="convergence tolerance")
    p.add_argument("--damping", type=float, default=1e-2, help="damped least squares lambda")
    p.add_argument("--jacobian", choices=("numeric", "analytic"), default="numeric",
                   help="Jacobian route")

    p = add("graspmap", cmd_graspmap, "grasp maps from rectangle files or a depth image")
    p.add_argument("rects", nargs="*",
                   help="rectangle files (*cneg.txt are negatives, others positives)")
    p.add_argument("--depth", default=None, help="depth image (.pfm/.csv) for the predictor")
    p.add_argument("--shape", type=_floats, default=[480.0, 640.0], help="rows,cols")
    p.add_argument("--out", default="graspmap_out", help="output directory")
    p.add_argument("--sigma", type=float, default=2.0,
                   help="Gaussian smoothing of Q before the argmax (0 = none)")

    p = add("draw", cmd_draw, "vectorize an image and plan the pen trajectory")
    p.add_argument("image", help="grayscale image (PNG, PGM, ...)")
    p.add_argument("--calibration", default=None,
                   help="plane calibration file (default: the bundled table plane)")
    p.add_argument("--chain", default="sophia_arm", help="built-in chain name or TOML path")
    p.add_argument("--no-trajectory", action="store_true", help="skip the arm trajectory")
    p.add_argument("--out", default="draw_out", help="output directory")
    p.add_argument("--scale", type=float, default=0.001, help="metres per pixel")
    p.add_argument("--epsilon", type=float, default=1.0, help="simplification tolerance, px")
    p.add_argument("--max-seg-len", type=float, default=40.0, help="segment length cap, px")
    p.add_argument("--merge-angle-tol-deg", type=float, default=3.0,
                   help="collinear merge tolerance, degrees")
    p.add_argument("--foreground", choices=("bright", "dark"), default="bright",
                   help="which Otsu class is drawn")
    p.add_argument("--contrast", type=float, default=1.0, help="contrast gain")
    p.add_argument("--brightness", type=float, default=0.0, help="brightness offset")

    p = add("deal", cmd_deal, "simulate a baccarat deal")
    p.add_argument("--layout", default="demo_table", help="layout name or TOML path")
    p.add_argument("--extra", type=int, default=2, help="extra cards after the base four")
    p.add_argument("--trials", type=int, default=1000, help="seeded placement trials")
    p.add_argument("--noise", type=float, default=None,
                   help="placement sigma in metres (default: 99.5%% within tolerance)")
    p.add_argument("--csv", default=None, help="write the report CSV here")
    p.add_argument("--enforce-targets", action="store_true",
                   help="exit 4 unless total_time <= 25 s and success rate >= 0.995")

    p = add("binsim", cmd_binsim, "evaluate a policy on bin-grasping episodes")
    p.add_argument("--episodes", type=int, default=200, help="number of episodes")
    p.add_argument("--policy", choices=("baseline", "center", "oracle", "random"),
                   default="baseline", help="policy to run")
    p.add_argument("--env-config", default=None, help="episode config TOML")
    p.add_argument("--out", default=None, help="directory for traces.csv")
    p.add_argument("--renders", action="store_true", help="also write PGM renders")

    p = add("rules", cmd_rules, "forward-chain a rule program and answer queries")
    p.add_argument("rules", help="rules file")
    p.add_argument("--facts", action="append", default=[], help="facts file (repeatable)")
    p.add_argument("--query", action="append", default=[],
                   help="query pattern such as 'graspable(X)' (repeatable)")
    return parser


def _apply_config(parser, argv) -> None:
    """Load ``--config`` and install its values as subcommand defaults."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, rest = pre.parse_known_args(argv)
    if not known.config:
        return
    try:
        doc = tomllib.loads(Path(known.config).read_text(encoding="utf-8"))
    except (OSError, tomllib.TOMLDecodeError) as e:
        raise UsageError(f"cannot read config {known.config}: {e}")
    command = next((a for a in rest if not a.startswith("-")), None)
    subparsers = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    if command not in subparsers.choices:
        return
    sp = subparsers.choices[command]
    values = {k: v for k, v in doc.items() if not isinstance(v, dict)}
    values.update(doc.get(command, {}))
    dests = {a.dest for a in sp._actions}
    for key, value in values.items():
        dest = key.replace("-", "_")
        if dest not in dests or dest in ("config", "help"):
            raise UsageError(f"config key {key!r} is not an option of '{command}'")
        sp.set_defaults(**{dest: value})


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        _apply_config(parser, argv)
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
