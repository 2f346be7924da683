"""Clipped-surrogate PPO for the recurrent navigation policy.

The training loop follows the held-out-target protocol: episodes toward
training targets feed the experience buffer and trigger an update every
``episodes_per_update`` episodes; episodes toward held-out targets only
record arrival, and training stops once the held-out success rate over a full
window strictly exceeds the configured threshold.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .env import NavEnv
from .metrics import EpisodeRecord, MetricWindows, success_rate
from .policy import (
    PolicyParameters,
    RecurrentState,
    clamped_log_std,
    core_step,
    encode_images,
    log_jacobian,
)
from .rollout import EpisodeResult, run_episode
from .world import sample_target

log = logging.getLogger(__name__)
_LOG_2PI = math.log(2.0 * math.pi)


class DivergenceError(RuntimeError):
    """The PPO loss became non-finite; parameters were restored."""


@dataclass(frozen=True)
class PPOConfig:
    clip_eps: float = 0.2
    epochs: int = 4
    episodes_per_update: int = 8
    gamma: float = 0.99
    gae_lambda: float = 0.95
    learning_rate: float = 3e-4
    value_coef: float = 0.5
    entropy_coef: float = 0.005
    bptt_chunk: int = 32
    minibatches: int = 4
    max_grad_norm: float = 0.5
    target_success_rate: float = 0.6
    normalize_advantages: bool = True
    greedy_test_episodes: bool = False

    def __post_init__(self):
        if not 0 < self.clip_eps < 1:
            raise ValueError("clip_eps must lie in (0, 1)")
        if self.epochs < 1 or self.episodes_per_update < 1 or self.minibatches < 1 or self.bptt_chunk < 1:
            raise ValueError("epochs, episodes_per_update, minibatches and bptt_chunk must be >= 1")
        if not (0 <= self.gamma <= 1 and 0 <= self.gae_lambda <= 1):
            raise ValueError("gamma and gae_lambda must lie in [0, 1]")


# -- experience ------------------------------------------------------------------

@dataclass
class Episode:
    transitions: list
    bootstrap_value: float = 0.0


class ExperienceBuffer:
    """Completed training episodes awaiting an update, oldest first."""

    def __init__(self, capacity: int | None = None):
        self.capacity = capacity
        self.episodes: list[Episode] = []

    def __len__(self) -> int:
        return len(self.episodes)

    def add(self, result: EpisodeResult) -> None:
        if result.record.is_test:
            raise ValueError("held-out target episodes must not enter the experience buffer")
        if not result.transitions:
            raise ValueError("episode has no transitions")
        if self.capacity is not None and len(self.episodes) >= self.capacity:
            raise OverflowError(f"experience buffer is full ({self.capacity} episodes)")
        self.episodes.append(Episode(result.transitions, result.bootstrap_value))

    def peek(self, n: int) -> list[Episode]:
        if len(self.episodes) < n:
            raise ValueError(f"buffer holds {len(self.episodes)} episodes, update needs {n}")
        return self.episodes[:n]

    def remove(self, n: int) -> None:
        del self.episodes[:n]


# -- advantages ------------------------------------------------------------------

def gae(rewards, values, dones, bootstrap_value: float, gamma: float, lam: float):
    """Generalized advantage estimates and returns for one episode."""
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    T = len(rewards)
    adv = np.zeros(T)
    next_value, next_adv = float(bootstrap_value), 0.0
    for t in range(T - 1, -1, -1):
        live = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_value * live - values[t]
        next_adv = delta + gamma * lam * live * next_adv
        adv[t] = next_adv
        next_value = values[t]
    return adv, adv + values


def compute_gae(episode: list, gamma: float, lam: float, bootstrap_value: float = 0.0) -> list:
    """Fill ``advantage`` and ``ret`` on each transition (not normalized)."""
    if not episode:
        raise ValueError("cannot compute advantages of an empty episode")
    if any(t.value_old is None for t in episode):
        raise ValueError("transitions are missing value estimates")
    adv, ret = gae([t.reward for t in episode], [t.value_old for t in episode],
                   [t.done for t in episode], bootstrap_value, gamma, lam)
    for t, a, r in zip(episode, adv, ret):
        t.advantage, t.ret = float(a), float(r)
    return episode


def normalize(adv: np.ndarray) -> np.ndarray:
    if adv.size < 2:
        return adv - adv.mean() if adv.size else adv
    return (adv - adv.mean()) / max(adv.std(), 1e-8)


# -- loss ------------------------------------------------------------------------

def clipped_surrogate(ratio, advantage, eps):
    """Per-sample ``min(ratio * A, clip(ratio, 1 - eps, 1 + eps) * A)``.

    The clipped branch is evaluated as ``A + clip(ratio - 1, -eps, eps) * A``:
    the same value, but rounding can then never push it above ``A + eps |A|``.
    """
    ratio = np.asarray(ratio, dtype=np.float64)
    return np.minimum(ratio * advantage, advantage + np.clip(ratio - 1.0, -eps, eps) * advantage)


@dataclass
class ChunkBatch:
    """Time-major padded BPTT chunks: arrays are ``[L, B, ...]``."""

    images: np.ndarray
    goals: np.ndarray
    prevs: np.ndarray
    u: np.ndarray
    log_prob_old: np.ndarray
    log_jac: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray
    mask: np.ndarray
    init_state: np.ndarray  # [4, B, units]

    @property
    def n_samples(self) -> int:
        return int(self.mask.sum())


def make_chunks(episodes: list, chunk_len: int) -> list:
    """Split each episode into contiguous runs of at most ``chunk_len`` transitions."""
    chunks = []
    for ep in episodes:
        for start in range(0, len(ep), chunk_len):
            chunks.append(ep[start:start + chunk_len])
    return chunks


def collate(chunks: list, advantages: list | None = None) -> ChunkBatch:
    L = max(len(c) for c in chunks)
    B = len(chunks)
    first = chunks[0][0]
    images = np.zeros((L, B, *first.image.shape), dtype=np.uint8)
    goals = np.zeros((L, B, 2))
    prevs = np.zeros((L, B, 3))
    u = np.zeros((L, B, 2))
    lp_old = np.zeros((L, B))
    adv = np.zeros((L, B))
    ret = np.zeros((L, B))
    mask = np.zeros((L, B))
    init = np.stack([c[0].state for c in chunks], axis=1)
    for b, chunk in enumerate(chunks):
        for t, tr in enumerate(chunk):
            images[t, b] = tr.image
            goals[t, b] = tr.goal
            prevs[t, b] = tr.prev
            u[t, b] = tr.u
            lp_old[t, b] = tr.log_prob_old
            adv[t, b] = tr.advantage if advantages is None else advantages[b][t]
            ret[t, b] = tr.ret
            mask[t, b] = 1.0
    log_jac = log_jacobian(u).sum(axis=-1)
    return ChunkBatch(images, goals, prevs, u, lp_old, log_jac, adv, ret, mask, init)


def sequence_outputs(batch: ChunkBatch, params: PolicyParameters) -> tuple[Tensor, Tensor, Tensor]:
    """Re-run the network over the chunks with BPTT.

    Returns log-probabilities ``[L, B]``, values ``[L, B]`` and the clamped log-std.
    """
    L, B = batch.mask.shape
    feats = encode_images(batch.images.reshape(L * B, *batch.images.shape[2:]), params)
    state = RecurrentState.from_array(batch.init_state)
    log_std = clamped_log_std(params)
    inv_std = ad.exp(-log_std)
    const = -(log_std.sum()) - _LOG_2PI
    dt = ad.get_default_dtype()
    log_probs, values = [], []
    for t in range(L):
        mean, value, state = core_step(feats[t * B:(t + 1) * B], batch.goals[t], batch.prevs[t], state, params)
        z = (Tensor(batch.u[t].astype(dt)) - mean) * inv_std
        lp = -0.5 * ad.square(z).sum(axis=-1) + const - Tensor(batch.log_jac[t])
        log_probs.append(lp)
        values.append(value)
    return ad.stack(log_probs), ad.stack(values), log_std


def surrogate_loss(batch: ChunkBatch, params_new: PolicyParameters, eps: float
                   ) -> tuple[Tensor, Tensor, Tensor]:
    """Masked PPO policy loss, value loss and mean pre-squash entropy."""
    log_probs, values, log_std = sequence_outputs(batch, params_new)
    mask = Tensor(batch.mask)
    n = float(batch.mask.sum())
    ratio = ad.exp(log_probs - Tensor(batch.log_prob_old))
    if not np.all(np.isfinite(ratio.data[batch.mask > 0])):
        raise DivergenceError("non-finite probability ratio")
    adv = Tensor(batch.advantages)
    surr = ad.minimum(ratio * adv, adv + ad.clip(ratio - 1.0, -eps, eps) * adv)
    policy_loss = -(surr * mask).sum() * (1.0 / n)
    value_loss = (ad.square(values - Tensor(batch.returns)) * mask).sum() * (1.0 / n)
    entropy = (log_std + 0.5 * (_LOG_2PI + 1.0)).sum()
    return policy_loss, value_loss, entropy


# -- optimizer -------------------------------------------------------------------

class Adam:
    def __init__(self, params: list, lr: float = 3e-4, betas=(0.9, 0.999), eps: float = 1e-5):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        lr_t = self.lr * math.sqrt(1.0 - b2 ** self.t) / (1.0 - b1 ** self.t)
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data = p.data - (lr_t * m / (np.sqrt(v) + self.eps)).astype(p.data.dtype)

    def state_dict(self) -> dict:
        return {"t": self.t, "m": [m.copy() for m in self.m], "v": [v.copy() for v in self.v]}

    def load_state_dict(self, state: dict) -> None:
        self.t = int(state["t"])
        for dst, src in zip(self.m, state["m"]):
            dst[...] = np.asarray(src).reshape(dst.shape)
        for dst, src in zip(self.v, state["v"]):
            dst[...] = np.asarray(src).reshape(dst.shape)


def clip_grad_norm(params, max_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-6)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


def make_optimizer(params: PolicyParameters, cfg: PPOConfig) -> Adam:
    return Adam(list(params), lr=cfg.learning_rate)


# -- update ----------------------------------------------------------------------

def update(buffer: ExperienceBuffer, params: PolicyParameters, cfg: PPOConfig,
           optimizer: Adam | None = None, rng: np.random.Generator | None = None) -> dict:
    """One PPO update on the oldest ``episodes_per_update`` buffered episodes.

    Consumes those episodes.  On a non-finite loss the parameters and
    optimizer moments are restored and :class:`DivergenceError` is raised.
    """
    episodes = buffer.peek(cfg.episodes_per_update)
    optimizer = optimizer or make_optimizer(params, cfg)
    rng = rng or np.random.default_rng(0)

    for ep in episodes:
        compute_gae(ep.transitions, cfg.gamma, cfg.gae_lambda, ep.bootstrap_value)
    all_adv = np.array([t.advantage for ep in episodes for t in ep.transitions])
    if cfg.normalize_advantages:
        all_adv = normalize(all_adv)
    chunks = make_chunks([ep.transitions for ep in episodes], cfg.bptt_chunk)
    adv_chunks, i = [], 0
    for c in chunks:
        adv_chunks.append(all_adv[i:i + len(c)])
        i += len(c)

    # The minibatch partition is fixed for the whole update and the old
    # log-probabilities are recomputed with the same batched forward pass.
    # Float32 matmul results depend on the batch shape, so rollout-time values
    # can differ in the last bits and the ratio at theta_k would not be exactly 1.
    n_mb = min(cfg.minibatches, len(chunks))
    batches = [collate([chunks[j] for j in part], [adv_chunks[j] for j in part])
               for part in np.array_split(rng.permutation(len(chunks)), n_mb)]
    drift = 0.0
    with ad.no_grad():
        for batch in batches:
            lp, _, _ = sequence_outputs(batch, params)
            live = batch.mask > 0
            drift = max(drift, float(np.max(np.abs(lp.data[live] - batch.log_prob_old[live]))))
            batch.log_prob_old = lp.data.astype(np.float64)

    snapshot = [t.data.copy() for t in params]
    opt_snapshot = optimizer.state_dict()
    stats = {"policy_loss": 0.0, "value_loss": 0.0, "entropy": 0.0, "grad_norm": 0.0, "steps": 0,
             "log_prob_drift": drift}
    try:
        for _ in range(cfg.epochs):
            for b in rng.permutation(len(batches)):
                batch = batches[b]
                params.zero_grad()
                pl, vl, ent = surrogate_loss(batch, params, cfg.clip_eps)
                total = pl + cfg.value_coef * vl - cfg.entropy_coef * ent
                if not np.isfinite(total.data):
                    raise DivergenceError(f"non-finite PPO loss {float(total.data)}")
                total.backward()
                norm = clip_grad_norm(list(params), cfg.max_grad_norm)
                if not math.isfinite(norm):
                    raise DivergenceError("non-finite gradient norm")
                optimizer.step()
                params.bump()
                stats["policy_loss"] += float(pl.data)
                stats["value_loss"] += float(vl.data)
                stats["entropy"] += float(ent.data)
                stats["grad_norm"] += norm
                stats["steps"] += 1
    except DivergenceError:
        for t, saved in zip(params, snapshot):
            t.data = saved
        optimizer.load_state_dict(opt_snapshot)
        params.bump()
        raise
    finally:
        params.zero_grad()
    buffer.remove(cfg.episodes_per_update)
    for key in ("policy_loss", "value_loss", "entropy", "grad_norm"):
        stats[key] /= max(stats["steps"], 1)
    return stats


# -- Algorithm loop --------------------------------------------------------------

LOG_FIELDS = ("episode", "target_x", "target_y", "is_test", "steps", "total_reward",
              "terminal", "train_success", "test_success")


@dataclass
class TrainState:
    """Everything needed to continue training exactly where it stopped."""

    episode: int = 0
    updates: int = 0
    target_rng: np.random.Generator | None = None
    train_records: list = field(default_factory=list)
    test_records: list = field(default_factory=list)
    buffer: ExperienceBuffer = field(default_factory=ExperienceBuffer)


@dataclass
class TrainResult:
    params: PolicyParameters
    optimizer: Adam
    state: TrainState
    log_rows: list
    stopped_early: bool
    early_stop_rate: float | None = None


def log_row(rec: EpisodeRecord, train_rate, test_rate) -> dict:
    return {
        "episode": rec.episode,
        "target_x": rec.target[0],
        "target_y": rec.target[1],
        "is_test": int(rec.is_test),
        "steps": rec.steps,
        "total_reward": repr(float(rec.total_reward)),
        "terminal": rec.terminal.value,
        "train_success": "" if train_rate is None else repr(train_rate),
        "test_success": "" if test_rate is None else repr(test_rate),
    }


def episode_rng(seed: int, episode: int) -> np.random.Generator:
    return np.random.default_rng([seed, 1, episode])


def train(env: NavEnv, params: PolicyParameters, cfg: PPOConfig, seed: int, *,
          max_episodes: int = 5000, windows: MetricWindows = MetricWindows(),
          optimizer: Adam | None = None, state: TrainState | None = None,
          early_stop: bool = True, workers: int = 1,
          on_episode: Callable[[dict], None] | None = None,
          on_update: Callable[[TrainState, dict], None] | None = None,
          on_early_stop: Callable[[TrainState, float], None] | None = None) -> TrainResult:
    """Run the held-out-target training protocol until early stop or budget.

    Episode ``k`` draws its actions from ``episode_rng(seed, k)``, so a run
    is reproducible at ``workers=1``.
    """
    env_map = env.env_map
    early_stop = early_stop and bool(env_map.test_targets)
    optimizer = optimizer or make_optimizer(params, cfg)
    state = state or TrainState()
    if state.target_rng is None:
        state.target_rng = np.random.default_rng([seed, 0])
    rows = []
    pool = None
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        pool = ProcessPoolExecutor(max_workers=workers)

    def handle(result: EpisodeResult) -> bool:
        rec = result.record
        if rec.is_test:
            state.test_records.append(rec)
        else:
            state.train_records.append(rec)
            state.buffer.add(result)
        train_rate = success_rate(state.train_records, windows.train)[0] if state.train_records else None
        test_rate = success_rate(state.test_records, windows.test)[0] if state.test_records else None
        row = log_row(rec, train_rate, test_rate)
        rows.append(row)
        if on_episode:
            on_episode(row)
        while len(state.buffer) >= cfg.episodes_per_update:
            stats = update(state.buffer, params, cfg, optimizer,
                           np.random.default_rng([seed, 2, state.updates]))
            state.updates += 1
            log.debug("update %d: %s", state.updates, stats)
            if on_update:
                on_update(state, stats)
        if early_stop and rec.is_test:
            rate, provisional = success_rate(state.test_records, windows.test)
            if not provisional and rate > cfg.target_success_rate:
                if on_early_stop:
                    on_early_stop(state, rate)
                return True
        return False

    stopped, rate = False, None
    try:
        while state.episode < max_episodes and not stopped:
            n = 1 if pool is None else min(workers, max_episodes - state.episode)
            jobs = []
            for _ in range(n):
                target, is_test = sample_target(env_map, state.target_rng)
                jobs.append((state.episode, target, is_test))
                state.episode += 1
            if pool is None:
                results = [_episode_job(env, params, cfg, seed, *jobs[0])]
            else:
                snap = params.copy()
                results = list(pool.map(_episode_job, *zip(*[(env, snap, cfg, seed, *j) for j in jobs])))
            for result in results:
                if handle(result):
                    stopped = True
                    rate = success_rate(state.test_records, windows.test)[0]
                    break
    finally:
        if pool is not None:
            pool.shutdown()
    return TrainResult(params, optimizer, state, rows, stopped, rate)


def _episode_job(env, params, cfg: PPOConfig, seed: int, episode: int, target, is_test: bool) -> EpisodeResult:
    rng = episode_rng(seed, episode)
    if is_test:
        return run_episode(env, params, target, rng, greedy=cfg.greedy_test_episodes,
                           episode=episode, is_test=True)
    return run_episode(env, params, target, rng, collect=True, episode=episode)
