"""Running single episodes of a policy in a :class:`NavEnv`."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .env import NavEnv
from .metrics import EpisodeRecord
from .policy import PolicyParameters, forward, obs_arrays, reset_state
from .world import Terminal

TRUE_TERMINALS = (Terminal.COLLISION, Terminal.ARRIVAL)


@dataclass
class Transition:
    image: np.ndarray  # uint8 [H, W, 3]
    goal: np.ndarray  # raw (distance, bearing)
    prev: np.ndarray  # (v_lin, v_ang, reward) of the previous step
    u: np.ndarray  # pre-squash action
    log_prob_old: float
    reward: float
    value_old: float
    done: bool  # true terminal; timeouts are not done
    state: np.ndarray  # recurrent state [4, units] fed into this step
    advantage: float | None = None
    ret: float | None = None


@dataclass
class EpisodeResult:
    record: EpisodeRecord
    transitions: list = field(default_factory=list, repr=False)
    bootstrap_value: float = 0.0


def run_episode(env: NavEnv, params: PolicyParameters, target, rng: np.random.Generator, *,
                greedy: bool = False, collect: bool = False, trajectory: bool = False,
                episode: int = 0, is_test: bool = False) -> EpisodeResult:
    """Roll out until collision, arrival or timeout.

    ``greedy`` uses the squashed mean action; otherwise actions are sampled.
    ``collect`` keeps PPO transitions (requires sampling).
    """
    if collect and greedy:
        raise ValueError("training transitions need sampled actions")
    cfg = params.config
    obs = env.reset(target, rng)
    state = reset_state(cfg)
    transitions = []
    path = [(0, *env.state.pose, env.state.d_t, 0.0)] if trajectory else None
    total = 0.0
    while True:
        dist, value, next_state = forward(obs, state, params)
        if greedy:
            action, lp, u = dist.mode(), None, None
        else:
            action, lp, u = dist.sample(rng)
        next_obs, out = env.step(action, rng)
        total += out.reward
        if collect:
            goal, prev = obs_arrays(obs)
            transitions.append(Transition(
                obs.image, goal, prev, u, lp, out.reward, value,
                out.terminal in TRUE_TERMINALS, state.as_array().astype(np.float32)))
        if trajectory:
            st = out.new_state
            path.append((st.step_count, *st.pose, st.d_t, out.reward))
        if out.terminal is not Terminal.NONE:
            break
        obs, state = next_obs, next_state

    bootstrap = 0.0
    if collect and out.terminal is Terminal.TIMEOUT:
        _, bootstrap, _ = forward(next_obs, next_state, params)
    record = EpisodeRecord(episode, tuple(target), is_test, out.terminal is Terminal.ARRIVAL,
                           total, env.state.step_count, out.terminal, path)
    return EpisodeResult(record, transitions, bootstrap)
