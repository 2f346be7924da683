"""Indoor world geometry: walls, unicycle kinematics, collisions and rewards.

Poses are ``(x, y, heading)`` tuples in meters and radians; headings are kept
in (-pi, pi].
"""

from __future__ import annotations

import enum
import json
import math
import os
from dataclasses import dataclass, field
from functools import cached_property
from typing import NamedTuple

import numpy as np

Pose = tuple  # (x, y, heading)
Point = tuple  # (x, y)


class EnvSpecError(ValueError):
    """An environment description is malformed or violates a map invariant."""


class Action(NamedTuple):
    linear: float
    angular: float


class Terminal(str, enum.Enum):
    NONE = "none"
    COLLISION = "collision"
    ARRIVAL = "arrival"
    TIMEOUT = "timeout"


@dataclass(frozen=True)
class Wall:
    p1: Point
    p2: Point
    color: tuple = (200, 200, 200)


@dataclass(frozen=True)
class EnvironmentMap:
    walls: tuple
    bounds: tuple  # (xmin, ymin, xmax, ymax)
    start_pose: Pose
    train_targets: tuple
    test_targets: tuple
    robot_radius: float
    max_range: float
    name: str = "unnamed"

    @cached_property
    def segments(self) -> np.ndarray:
        """Walls as an ``[n, 4]`` float64 array of ``x1, y1, x2, y2``."""
        if not self.walls:
            return np.zeros((0, 4))
        return np.array([[*w.p1, *w.p2] for w in self.walls], dtype=np.float64)

    @cached_property
    def colors(self) -> np.ndarray:
        if not self.walls:
            return np.zeros((0, 3))
        return np.array([w.color for w in self.walls], dtype=np.float64)

    @property
    def diagonal(self) -> float:
        xmin, ymin, xmax, ymax = self.bounds
        return math.hypot(xmax - xmin, ymax - ymin)

    @property
    def all_targets(self) -> tuple:
        return tuple(self.train_targets) + tuple(self.test_targets)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "bounds": list(self.bounds),
            "walls": [{"p1": list(w.p1), "p2": list(w.p2), "color": list(w.color)} for w in self.walls],
            "start_pose": list(self.start_pose),
            "robot_radius": self.robot_radius,
            "max_range": self.max_range,
            "train_targets": [list(t) for t in self.train_targets],
            "test_targets": [list(t) for t in self.test_targets],
        }


@dataclass
class RobotState:
    pose: Pose
    target: Point
    d_t: float
    d_prev: float
    step_count: int = 0


@dataclass(frozen=True)
class RewardConfig:
    r_collision: float = -10.0
    r_arrival: float = 10.0
    c_d: float = 0.5
    c_r: float = 10.0
    c_p: float = 0.05
    max_steps: int = 500

    def __post_init__(self):
        if not (self.r_collision < 0 and self.r_arrival > 0 and self.c_d > 0
                and self.c_r > 0 and self.c_p >= 0 and self.max_steps > 0):
            raise ValueError(f"invalid reward configuration: {self}")


@dataclass
class StepOutcome:
    reward: float
    terminal: Terminal
    new_state: RobotState = field(repr=False)


# -- geometry --------------------------------------------------------------------

def normalize_angle(a: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    a = math.remainder(a, 2.0 * math.pi)
    return math.pi if a <= -math.pi else a


def point_segment_distances(x: float, y: float, segments: np.ndarray) -> np.ndarray:
    if len(segments) == 0:
        return np.zeros(0)
    ax, ay, bx, by = segments.T
    ex, ey = bx - ax, by - ay
    len2 = ex * ex + ey * ey
    t = ((x - ax) * ex + (y - ay) * ey) / np.where(len2 > 0, len2, 1.0)
    t = np.clip(t, 0.0, 1.0)
    return np.hypot(x - (ax + t * ex), y - (ay + t * ey))


def step_kinematics(pose: Pose, action, dt: float) -> Pose:
    """Integrate the unicycle model exactly over ``dt`` at constant velocity."""
    x, y, h = pose
    v, w = action
    if abs(w) < 1e-6:
        x += v * dt * math.cos(h)
        y += v * dt * math.sin(h)
        h2 = h
    else:
        radius = v / w
        h2 = h + w * dt
        x += radius * (math.sin(h2) - math.sin(h))
        y -= radius * (math.cos(h2) - math.cos(h))
    return (x, y, normalize_angle(h2))


def check_collision(env_map: EnvironmentMap, pose, radius: float | None = None) -> bool:
    """True iff the robot disc overlaps a wall or leaves the shrunken bounds.

    Touching at exactly the robot radius counts as free.
    """
    r = env_map.robot_radius if radius is None else radius
    x, y = pose[0], pose[1]
    xmin, ymin, xmax, ymax = env_map.bounds
    if x - xmin < r or xmax - x < r or y - ymin < r or ymax - y < r:
        return True
    d = point_segment_distances(x, y, env_map.segments)
    return bool(d.size and d.min() < r)


def relative_goal(pose: Pose, target: Point) -> tuple[float, float]:
    """Distance and body-frame bearing of ``target``; bearing is 0 at zero distance."""
    dx = target[0] - pose[0]
    dy = target[1] - pose[1]
    d = math.hypot(dx, dy)
    if d == 0.0:
        return 0.0, 0.0
    return d, normalize_angle(math.atan2(dy, dx) - pose[2])


def compute_reward(state_before: RobotState, state_after: RobotState, collided: bool,
                   cfg: RewardConfig) -> StepOutcome:
    if collided:
        return StepOutcome(cfg.r_collision, Terminal.COLLISION, state_after)
    if state_after.d_t < cfg.c_d:
        return StepOutcome(cfg.r_arrival, Terminal.ARRIVAL, state_after)
    shaped = cfg.c_r * (state_before.d_t - state_after.d_t) - cfg.c_p
    kind = Terminal.TIMEOUT if state_after.step_count >= cfg.max_steps else Terminal.NONE
    return StepOutcome(shaped, kind, state_after)


def sample_target(env_map: EnvironmentMap, rng: np.random.Generator) -> tuple[Point, bool]:
    """Uniform draw over train and test targets; the flag marks held-out targets."""
    pool = env_map.all_targets
    if not pool:
        raise EnvSpecError("cannot sample a target: the map has no targets")
    idx = int(rng.integers(len(pool)))
    return tuple(pool[idx]), idx >= len(env_map.train_targets)


# -- loading ---------------------------------------------------------------------

_REQUIRED = ("bounds", "walls", "start_pose", "robot_radius", "max_range",
             "train_targets", "test_targets")


def _point(value, what: str, n: int = 2) -> tuple:
    try:
        pt = tuple(float(v) for v in value)
    except (TypeError, ValueError):
        raise EnvSpecError(f"{what}: expected {n} numbers, got {value!r}") from None
    if len(pt) != n or not all(math.isfinite(v) for v in pt):
        raise EnvSpecError(f"{what}: expected {n} finite numbers, got {value!r}")
    return pt


def load_env(source) -> EnvironmentMap:
    """Build a validated map from a JSON file path, JSON text or a dict."""
    if isinstance(source, dict):
        doc = source
    else:
        text = str(source)
        if isinstance(source, os.PathLike) or not text.lstrip().startswith("{"):
            try:
                with open(text) as fh:
                    text = fh.read()
            except OSError as exc:
                raise EnvSpecError(f"cannot read environment file {source}: {exc}") from None
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise EnvSpecError(f"malformed environment document: {exc}") from None
    if not isinstance(doc, dict):
        raise EnvSpecError("environment document must be a mapping")
    for key in _REQUIRED:
        if key not in doc:
            raise EnvSpecError(f"environment document is missing field '{key}'")

    bounds = _point(doc["bounds"], "bounds", 4)
    if not (bounds[0] < bounds[2] and bounds[1] < bounds[3]):
        raise EnvSpecError(f"bounds must be (xmin, ymin, xmax, ymax) with positive extent, got {bounds}")
    walls = []
    for i, w in enumerate(doc["walls"]):
        if not isinstance(w, dict) or "p1" not in w or "p2" not in w:
            raise EnvSpecError(f"walls[{i}] needs 'p1' and 'p2'")
        color = tuple(int(c) for c in w.get("color", (200, 200, 200)))
        if len(color) != 3 or not all(0 <= c <= 255 for c in color):
            raise EnvSpecError(f"walls[{i}].color must be three bytes, got {w.get('color')!r}")
        walls.append(Wall(_point(w["p1"], f"walls[{i}].p1"), _point(w["p2"], f"walls[{i}].p2"), color))
    start = _point(doc["start_pose"], "start_pose", 3)
    start = (start[0], start[1], normalize_angle(start[2]))
    try:
        radius = float(doc["robot_radius"])
        max_range = float(doc["max_range"])
    except (TypeError, ValueError):
        raise EnvSpecError("robot_radius and max_range must be numbers") from None
    if not radius > 0 or not max_range > 0:
        raise EnvSpecError("robot_radius and max_range must be positive")
    train = tuple(_point(p, f"train_targets[{i}]") for i, p in enumerate(doc["train_targets"]))
    test = tuple(_point(p, f"test_targets[{i}]") for i, p in enumerate(doc["test_targets"]))

    env_map = EnvironmentMap(tuple(walls), bounds, start, train, test, radius, max_range,
                             name=str(doc.get("name", "unnamed")))
    validate_map(env_map)
    return env_map


def validate_map(env_map: EnvironmentMap) -> None:
    if check_collision(env_map, env_map.start_pose):
        raise EnvSpecError(f"start pose {env_map.start_pose} collides with the map")
    for kind, targets in (("train", env_map.train_targets), ("test", env_map.test_targets)):
        for t in targets:
            if check_collision(env_map, t):
                raise EnvSpecError(f"target in obstacle: {kind} target {t} is within "
                                   f"robot_radius={env_map.robot_radius} of a wall or the bounds")
    shared = set(env_map.train_targets) & set(env_map.test_targets)
    if shared:
        raise EnvSpecError(f"train and test targets overlap at {sorted(shared)}")
    if not env_map.all_targets:
        raise EnvSpecError("the map defines no targets")
