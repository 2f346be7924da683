"""Episode driver: couples the world, the reward and the camera."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .render import RenderConfig, render_rgb
from .world import (
    Action,
    EnvironmentMap,
    RewardConfig,
    RobotState,
    StepOutcome,
    Terminal,
    check_collision,
    compute_reward,
    normalize_angle,
    relative_goal,
    step_kinematics,
)


@dataclass
class Observation:
    image: np.ndarray  # uint8 [H, W, 3]
    goal: tuple  # (distance m, bearing rad)
    prev_velocity: tuple = (0.0, 0.0)
    prev_reward: float = 0.0


@dataclass
class NavEnv:
    """One navigation episode at a time against a fixed map.

    ``odom_noise`` is the standard deviation of Gaussian noise added to the
    observed goal distance and bearing; it needs an rng on reset/step.
    """

    env_map: EnvironmentMap
    reward_cfg: RewardConfig = field(default_factory=RewardConfig)
    render_cfg: RenderConfig = field(default_factory=RenderConfig)
    dt: float = 0.2
    odom_noise: tuple = (0.0, 0.0)
    state: RobotState | None = field(default=None, init=False, repr=False)

    def reset(self, target, rng: np.random.Generator | None = None) -> Observation:
        self._check_rng(rng)
        pose = self.env_map.start_pose
        d, _ = relative_goal(pose, target)
        self.state = RobotState(pose, tuple(target), d, d, 0)
        return self._observe((0.0, 0.0), 0.0, rng)

    def step(self, action, rng: np.random.Generator | None = None) -> tuple[Observation, StepOutcome]:
        if self.state is None:
            raise RuntimeError("step() called before reset()")
        self._check_rng(rng)
        before = self.state
        pose = step_kinematics(before.pose, action, self.dt)
        d, _ = relative_goal(pose, before.target)
        after = RobotState(pose, before.target, d, before.d_t, before.step_count + 1)
        collided = check_collision(self.env_map, pose)
        outcome = compute_reward(before, after, collided, self.reward_cfg)
        self.state = after
        obs = self._observe((float(action[0]), float(action[1])), outcome.reward, rng)
        return obs, outcome

    def _check_rng(self, rng) -> None:
        if rng is None and (self.odom_noise[0] > 0 or self.odom_noise[1] > 0):
            raise ValueError("odometry noise is enabled but no rng was supplied")

    def _observe(self, prev_velocity, prev_reward, rng) -> Observation:
        st = self.state
        d, alpha = relative_goal(st.pose, st.target)
        if self.odom_noise[0] > 0 or self.odom_noise[1] > 0:
            d = abs(d + self.odom_noise[0] * rng.standard_normal())
            alpha = normalize_angle(alpha + self.odom_noise[1] * rng.standard_normal())
        image = render_rgb(self.env_map, st.pose, self.render_cfg)
        return Observation(image, (d, alpha), prev_velocity, prev_reward)


__all__ = ["Action", "NavEnv", "Observation", "Terminal"]


class BanditEnv:
    """One-step task with a constant observation.

    The reward ``-(linear - best_linear)^2 - (angular - best_angular)^2`` is
    maximized by a known action, which makes optimizer behavior checkable.
    Every episode ends after one step with a true terminal.
    """

    def __init__(self, render_cfg: RenderConfig = RenderConfig(), best=(0.2, 0.0)):
        self.render_cfg = render_cfg
        self.best = tuple(best)
        self.env_map = EnvironmentMap((), (0.0, 0.0, 1.0, 1.0), (0.5, 0.5, 0.0), ((0.9, 0.5),), (),
                                      0.05, 1.0, name="bandit")
        self.state: RobotState | None = None
        self._image = np.full((render_cfg.height, render_cfg.width, 3), 128, dtype=np.uint8)

    def reset(self, target, rng=None) -> Observation:
        pose = self.env_map.start_pose
        d, alpha = relative_goal(pose, target)
        self.state = RobotState(pose, tuple(target), d, d, 0)
        return Observation(self._image, (d, alpha))

    def step(self, action, rng=None) -> tuple[Observation, StepOutcome]:
        reward = -(action[0] - self.best[0]) ** 2 - (action[1] - self.best[1]) ** 2
        st = self.state
        self.state = RobotState(st.pose, st.target, st.d_t, st.d_t, st.step_count + 1)
        obs = Observation(self._image, (st.d_t, 0.0), (float(action[0]), float(action[1])), reward)
        return obs, StepOutcome(float(reward), Terminal.ARRIVAL, self.state)
