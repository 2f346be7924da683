"""Greedy evaluation runs and record/trajectory export."""

from __future__ import annotations

import csv

import numpy as np

from .metrics import EpisodeRecord
from .policy import PolicyParameters
from .rollout import run_episode

RECORD_FIELDS = ("episode", "target_x", "target_y", "is_test", "arrival", "total_reward", "steps", "terminal")
TRAJECTORY_FIELDS = ("t", "x", "y", "heading", "d_t", "reward")


def evaluate(params: PolicyParameters, env, targets, n_episodes: int, seed: int = 0, *,
             trajectories: bool = False) -> list[EpisodeRecord]:
    """Run ``n_episodes`` mean-action episodes, cycling through ``targets``.

    Parameters are never modified.  ``seed`` only matters when the
    environment has odometry noise.
    """
    targets = [tuple(t) for t in targets]
    if not targets:
        raise ValueError("evaluate needs at least one target")
    held_out = {tuple(t) for t in env.env_map.test_targets}
    records = []
    for i in range(n_episodes):
        target = targets[i % len(targets)]
        rng = np.random.default_rng([seed, 3, i])
        result = run_episode(env, params, target, rng, greedy=True, trajectory=trajectories,
                             episode=i, is_test=target in held_out)
        records.append(result.record)
    return records


def select_targets(env_map, selector: str) -> list:
    if selector == "train":
        targets = list(env_map.train_targets)
    elif selector == "test":
        targets = list(env_map.test_targets)
    elif selector == "all":
        targets = list(env_map.all_targets)
    else:
        raise ValueError(f"unknown target selector {selector!r}")
    if not targets:
        raise ValueError(f"the map has no {selector} targets")
    return targets


def write_records_csv(records, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RECORD_FIELDS)
        for r in records:
            w.writerow([r.episode, r.target[0], r.target[1], int(r.is_test), int(r.arrival),
                        repr(float(r.total_reward)), r.steps, r.terminal.value])


def write_trajectory_csv(record: EpisodeRecord, path) -> None:
    if record.trajectory is None:
        raise ValueError("record has no captured trajectory")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRAJECTORY_FIELDS)
        for row in record.trajectory:
            w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])
