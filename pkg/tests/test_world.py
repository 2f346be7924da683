import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import SMALL_RENDER, box_map
from navlearn.env import NavEnv
from navlearn.world import (Action, EnvSpecError, RewardConfig, RobotState, Terminal, check_collision,
                            compute_reward, load_env, normalize_angle, relative_goal, sample_target,
                            step_kinematics)


def test_empty_room_is_valid():
    m = load_env(box_map(6.0, 6.0, start_pose=[1, 1, 0], train_targets=[[5, 5]], test_targets=[[5, 1]]))
    assert m.train_targets == ((5.0, 5.0),) and m.test_targets == ((5.0, 1.0),)


def test_target_near_wall_is_rejected():
    with pytest.raises(EnvSpecError, match="target in obstacle"):
        load_env(box_map(train_targets=[[0.05, 2.0]]))


def test_missing_field_is_named():
    doc = box_map()
    del doc["robot_radius"]
    with pytest.raises(EnvSpecError, match="robot_radius"):
        load_env(doc)


def test_load_from_text_and_path(tmp_path):
    doc = box_map()
    path = tmp_path / "room.json"
    path.write_text(json.dumps(doc))
    assert load_env(path) == load_env(json.dumps(doc)) == load_env(doc)


def test_bundled_maps_load():
    from navlearn.config import bundled_path

    for name in ("desk", "env1", "env2"):
        m = load_env(bundled_path(f"{name}.json"))
        assert m.test_targets and m.train_targets


def test_overlapping_targets_rejected():
    with pytest.raises(EnvSpecError, match="overlap"):
        load_env(box_map(train_targets=[[2, 2]], test_targets=[[2, 2]]))


def test_straight_line_step():
    assert step_kinematics((0.0, 0.0, 0.0), (0.3, 0.0), 0.1) == pytest.approx((0.03, 0.0, 0.0))


def test_pure_rotation():
    assert step_kinematics((0.0, 0.0, 0.0), (0.0, math.pi), 0.5) == pytest.approx((0.0, 0.0, math.pi / 2))


def test_arc_matches_fine_euler():
    # forward Euler's own error is ~6e-6 at 1000 substeps, so the oracle uses 10000
    x, y, h = 0.0, 0.0, 0.0
    v, w, dt, n = 0.3, 1.0, 0.2, 10000
    for _ in range(n):
        x += v * math.cos(h) * dt / n
        y += v * math.sin(h) * dt / n
        h += w * dt / n
    got = step_kinematics((0.0, 0.0, 0.0), (v, w), dt)
    assert all(abs(a - b) < 1e-6 for a, b in zip(got, (x, y, h)))


def _wall_map():
    doc = box_map(10.0, 10.0, start_pose=[5, 8, 0], train_targets=[[8, 8]], test_targets=[])
    doc["walls"].append({"p1": [5.1, 4.0], "p2": [5.1, 6.0], "color": [1, 2, 3]})
    return load_env(doc)


def test_collision_cases():
    m = _wall_map()
    assert check_collision(m, (5.0, 5.0, 0.0))
    assert not check_collision(m, (5.5, 5.0, 0.0))


def test_touching_counts_as_free():
    m = _wall_map()
    assert not check_collision(m, (5.1 - 0.25, 5.0, 0.0), radius=0.25)
    assert check_collision(m, (5.1 - 0.25, 5.0, 0.0), radius=0.2500001)


def test_relative_goal_examples():
    assert relative_goal((0, 0, 0), (1, 1)) == pytest.approx((math.sqrt(2), math.pi / 4))
    assert relative_goal((0, 0, 0), (-1, 0)) == pytest.approx((1.0, math.pi))
    assert relative_goal((0, 0, math.pi / 2), (0, 2)) == pytest.approx((2.0, 0.0))
    assert relative_goal((1, 1, 0.3), (1, 1)) == (0.0, 0.0)


@settings(max_examples=200)
@given(st.floats(-100, 100))
def test_normalize_angle_range(a):
    b = normalize_angle(a)
    assert -math.pi < b <= math.pi
    assert math.isclose(math.cos(a), math.cos(b), abs_tol=1e-9)


def test_reward_examples():
    cfg = RewardConfig()
    s = lambda d, k=1: RobotState((0, 0, 0), (0, 0), d, d, k)  # noqa: E731
    out = compute_reward(s(1.0), s(1.0), True, cfg)
    assert (out.reward, out.terminal) == (-10.0, Terminal.COLLISION)
    out = compute_reward(s(1.0), s(0.3), False, cfg)
    assert (out.reward, out.terminal) == (10.0, Terminal.ARRIVAL)
    out = compute_reward(s(2.0), s(1.9), False, cfg)
    assert out.reward == pytest.approx(0.95) and out.terminal is Terminal.NONE


def test_timeout_at_max_steps():
    cfg = RewardConfig(max_steps=3)
    before = RobotState((0, 0, 0), (5, 5), 3.0, 3.0, 2)
    after = RobotState((0, 0, 0), (5, 5), 2.9, 3.0, 3)
    assert compute_reward(before, after, False, cfg).terminal is Terminal.TIMEOUT


def test_invalid_reward_config():
    with pytest.raises(ValueError):
        RewardConfig(r_collision=1.0)


def test_sample_target_singleton():
    m = load_env(box_map(test_targets=[]))
    rng = np.random.default_rng(0)
    assert all(sample_target(m, rng) == ((3.0, 3.0), False) for _ in range(20))


def test_sample_target_frequencies():
    m = load_env(box_map())
    rng = np.random.default_rng(1)
    draws = [sample_target(m, rng) for _ in range(10000)]
    frac_test = sum(is_test for _, is_test in draws) / len(draws)
    assert abs(frac_test - 0.5) < 0.02
    assert all(t == (3.0, 1.0) for t, is_test in draws if is_test)


def test_env_step_sequence_and_noise():
    m = load_env(box_map())
    env = NavEnv(m, render_cfg=SMALL_RENDER, odom_noise=(0.05, 0.02))
    obs = env.reset((3.0, 3.0), np.random.default_rng(0))
    assert obs.image.shape == (12, 16, 3) and obs.image.dtype == np.uint8
    with pytest.raises(ValueError):
        env.step(Action(0.1, 0.0))
    obs2, out = env.step(Action(0.1, 0.0), np.random.default_rng(1))
    assert out.new_state.step_count == 1
    assert obs2.prev_velocity == (0.1, 0.0) and obs2.prev_reward == out.reward
