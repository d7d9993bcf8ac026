import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from deskarm.chain import forward_kinematics, load_chain
from deskarm.dealer import (CARD_ORDER, DealScript, TableLayout, UnreachablePoseError,
                            build_script, layout_from_dict, load_layout,
                            placement_success_rate, plan_deal_motion,
                            sample_placement_errors, sigma_for_success, simulate_deal,
                            time_deal, with_joint_speed)
from deskarm.transforms import RigidTransform


@pytest.fixture(scope="module")
def layout():
    return load_layout()


@pytest.fixture(scope="module")
def body():
    return load_chain("sophia_body")


@pytest.fixture(scope="module")
def motion6(layout, body):
    return plan_deal_motion(build_script(2, layout), body, body.neutral())


# ---------------------------------------------------------------- script

@pytest.mark.parametrize("extra,n", [(0, 4), (1, 5), (2, 6)])
def test_script_length(layout, extra, n):
    script = build_script(extra, layout)
    assert len(script.tasks) == n
    assert [t.card for t in script.tasks] == list(CARD_ORDER[:n])


@pytest.mark.parametrize("extra", [3, -1, 1.5])
def test_script_rejects_bad_extra(layout, extra):
    with pytest.raises(ValueError):
        build_script(extra, layout)


def test_player_cards_use_pass(layout):
    for t in build_script(2, layout).tasks:
        assert t.via_pass == t.card.startswith("player")
        assert t.pick_pose is layout.poses["shoe"]


def test_script_task_count_invariant(layout):
    base = build_script(2, layout).tasks
    with pytest.raises(ValueError):
        DealScript(base[:3], layout)
    with pytest.raises(ValueError):
        DealScript(base + base[:1], layout)


def test_layout_requires_all_poses(layout):
    poses = dict(layout.poses)
    del poses["pass_receiver"]
    with pytest.raises(ValueError, match="pass_receiver"):
        TableLayout(poses)


def test_layout_rpy_forms_agree():
    base = {n: {"xyz": [0.3, 0.0, -0.3], "rpy_deg": [0.0, -60.0, 0.0]}
            for n in ("shoe", "pass_picker", "pass_receiver", *CARD_ORDER)}
    rad = {n: {"xyz": [0.3, 0.0, -0.3], "rpy": [0.0, -math.pi / 3, 0.0]} for n in base}
    a = layout_from_dict({"poses": base}).poses["shoe"]
    b = layout_from_dict({"poses": rad}).poses["shoe"]
    np.testing.assert_allclose(a.as_matrix(), b.as_matrix(), atol=1e-15)


def test_layout_from_toml_path(tmp_path, layout):
    p = tmp_path / "t.toml"
    p.write_text('handoff_dwell = 0.9\n' + "".join(
        f'[poses.{n}]\nxyz = [0.3, 0.0, -0.3]\n' for n in
        ("shoe", "pass_picker", "pass_receiver", *CARD_ORDER)))
    lay = load_layout(p)
    assert lay.handoff_dwell == 0.9 and lay.grasp_dwell == 0.5


# ---------------------------------------------------------------- motion and timing

def test_motion_reaches_every_pose(layout, body, motion6):
    for task, kind, q in motion6.states[1:]:
        t = motion6.script.tasks[task]
        if kind == "move-pick":
            checks = [(layout.picker, t.pick_pose)]
        elif kind == "move-pass":
            checks = [(layout.picker, layout.poses["pass_picker"]),
                      (layout.receiver, layout.poses["pass_receiver"])]
        else:
            checks = [(layout.receiver if t.via_pass else layout.picker, t.place_pose)]
        for ee, pose in checks:
            got = forward_kinematics(body, q)[ee]
            assert np.linalg.norm(got.translation - pose.translation) < 1e-4
        assert np.all(q >= body.lower - 1e-12) and np.all(q <= body.upper + 1e-12)


def test_six_card_deal_within_target(layout, body):
    rep = simulate_deal(build_script(2, layout), body)
    assert rep.total_time <= 25.0
    assert len(rep.per_card_times) == 6


def test_timing_additivity(layout, body, motion6):
    rep = time_deal(motion6, body)
    assert abs(rep.total_time - sum(s.duration for s in rep.segments)) < 1e-9
    assert abs(rep.total_time - sum(rep.per_card_times)) < 1e-9


def test_segment_structure(motion6, body):
    rep = time_deal(motion6, body)
    kinds = [s.kind for s in rep.segments if s.task == 0]
    assert kinds == ["move-pick", "grasp", "move-pass", "handoff", "move-place", "release"]
    kinds = [s.kind for s in rep.segments if s.task == 1]
    assert kinds == ["move-pick", "grasp", "move-place", "release"]
    dwell = {"grasp": 0.5, "release": 0.3, "handoff": 0.4}
    for s in rep.segments:
        if s.kind in dwell:
            assert s.duration == dwell[s.kind]
        else:
            assert s.duration >= 0


@settings(max_examples=25, deadline=None)
@given(joint=st.integers(0, 13), factor=st.floats(1.0, 10.0))
def test_faster_joint_never_slows_deal(motion6, body, joint, factor):
    base = time_deal(motion6, body).total_time
    fast = with_joint_speed(body, joint, body.joints[joint].max_speed * factor)
    assert time_deal(motion6, fast).total_time <= base + 1e-12


def test_slower_joint_never_speeds_deal(motion6, body):
    base = time_deal(motion6, body).total_time
    for j in range(body.n_joints):
        slow = with_joint_speed(body, j, body.joints[j].max_speed / 2)
        assert time_deal(motion6, slow).total_time >= base - 1e-12


def test_with_joint_speed_leaves_original(body):
    before = body.joints[3].max_speed
    with_joint_speed(body, 3, 99.0)
    assert body.joints[3].max_speed == before


def test_deal_is_deterministic(layout, body):
    script = build_script(2, layout)
    a = simulate_deal(script, body, noise=0.002, rng_seed=7)
    b = simulate_deal(script, body, noise=0.002, rng_seed=7)
    assert a == b
    assert a.to_csv() == b.to_csv()
    c = simulate_deal(script, body, noise=0.002, rng_seed=8)
    assert c.placement_errors != a.placement_errors


def test_unreachable_pose_identifies_task(layout, body):
    poses = dict(layout.poses)
    poses["banker2"] = RigidTransform.from_rpy([2.0, 0.0, 0.0], [0.0, 0.0, 0.0])
    lay = TableLayout(poses)
    with pytest.raises(UnreachablePoseError) as info:
        simulate_deal(build_script(2, lay), body)
    assert info.value.task_index == 3
    assert info.value.pose_name == "banker2"
    assert "task 3" in str(info.value)


# ---------------------------------------------------------------- accuracy

def test_zero_noise_all_succeed(layout, body):
    for extra in (0, 1, 2):
        rep = simulate_deal(build_script(extra, layout), body, noise=0.0)
        assert rep.success_count == 4 + extra
        assert all(e == 0.0 for e in rep.placement_errors)


def test_sigma_formula_against_rayleigh_cdf():
    for p in (0.5, 0.9, 0.995):
        s = sigma_for_success(p, 0.005)
        assert stats.rayleigh.cdf(0.005, scale=s) == pytest.approx(p, abs=1e-12)
    assert sigma_for_success() == pytest.approx(0.0015359816, rel=1e-7)
    with pytest.raises(ValueError):
        sigma_for_success(1.0)


def test_sampled_errors_are_rayleigh():
    s = 0.002
    e = sample_placement_errors(20000, s, np.random.default_rng(3))
    assert stats.kstest(e, "rayleigh", args=(0, s)).pvalue > 1e-3


def test_success_rate_matches_target():
    # binomial oracle: sd = sqrt(p (1-p) / n) ~ 7e-4, the band is about 4 sd
    rate = placement_success_rate(10_000, sigma_for_success(), 0.005, rng_seed=0)
    assert abs(rate - 0.995) <= 0.003


def test_success_rate_seeded():
    s = sigma_for_success()
    assert placement_success_rate(1000, s, rng_seed=5) == placement_success_rate(1000, s, rng_seed=5)


def test_report_csv(layout, body):
    rep = simulate_deal(build_script(0, layout), body, noise=0.004, rng_seed=1)
    text = rep.to_csv()
    assert text.startswith("task,segment,duration_s\n")
    assert f"total_time_s,{rep.total_time!r}" in text
    assert rep.success_count == sum(e < 0.005 for e in rep.placement_errors)
