import numpy as np
import pytest

from conftest import SMALL_RENDER, box_map
from navlearn.env import NavEnv
from navlearn.metrics import EpisodeRecord
from navlearn.ppo import (DivergenceError, ExperienceBuffer, PPOConfig, clipped_surrogate, compute_gae, gae,
                          make_optimizer, normalize, update)
from navlearn.rollout import EpisodeResult, Transition, run_episode
from navlearn.world import load_env


def _tr(reward, value, done):
    return Transition(None, None, None, None, 0.0, reward, value, done, None)


def test_single_terminal_step():
    (t,) = compute_gae([_tr(1.0, 0.3, True)], 0.99, 0.95)
    assert t.advantage == pytest.approx(0.7) and t.ret == pytest.approx(1.0)


def test_two_step_undiscounted():
    adv, _ = gae([1.0, 2.0], [0.0, 0.0], [False, True], 0.0, 1.0, 1.0)
    assert adv.tolist() == [3.0, 2.0]


def test_lambda_zero_gives_td_errors():
    rng = np.random.default_rng(0)
    r, v = rng.normal(size=6), rng.normal(size=6)
    dones = [False] * 6
    boot, gamma = 0.7, 0.9
    adv, ret = gae(r, v, dones, boot, gamma, 0.0)
    nxt = np.append(v[1:], boot)
    assert np.allclose(adv, r + gamma * nxt - v, atol=1e-15)
    assert np.allclose(ret, adv + v)


def test_timeout_bootstraps_but_terminal_does_not():
    a_timeout, _ = gae([0.0], [0.0], [False], 2.0, 0.5, 0.95)
    a_terminal, _ = gae([0.0], [0.0], [True], 2.0, 0.5, 0.95)
    assert a_timeout[0] == 1.0 and a_terminal[0] == 0.0


def test_missing_values_rejected():
    with pytest.raises(ValueError):
        compute_gae([_tr(1.0, None, True)], 0.99, 0.95)
    with pytest.raises(ValueError):
        compute_gae([], 0.99, 0.95)


def test_surrogate_examples():
    assert clipped_surrogate(1.5, 1.0, 0.2) == pytest.approx(1.2)
    assert clipped_surrogate(0.5, -1.0, 0.2) == pytest.approx(-0.8)
    assert clipped_surrogate(1.0, 0.37, 0.2) == 0.37


def test_normalized_advantages():
    adv = normalize(np.random.default_rng(1).normal(5.0, 3.0, 257))
    assert abs(adv.mean()) < 1e-6 and abs(adv.std() - 1.0) < 1e-6
    assert normalize(np.full(4, 2.5)).tolist() == [0.0] * 4


def test_config_invariants():
    for bad in (dict(clip_eps=0.0), dict(clip_eps=1.0), dict(epochs=0), dict(episodes_per_update=0),
                dict(gamma=1.1), dict(gae_lambda=-0.1)):
        with pytest.raises(ValueError):
            PPOConfig(**bad)


@pytest.fixture
def env():
    m = load_env(box_map(train_targets=[[3.0, 3.0]], test_targets=[[3.0, 1.0]]))
    return NavEnv(m, render_cfg=SMALL_RENDER)


def _collect(env, params, n, seed=0):
    buf = ExperienceBuffer()
    for k in range(n):
        rng = np.random.default_rng([seed, k])
        buf.add(run_episode(env, params, (3.0, 3.0), rng, collect=True, episode=k))
    return buf


def test_buffer_rejects_held_out_episodes(env, small_params):
    result = run_episode(env, small_params, (3.0, 1.0), np.random.default_rng(0), collect=True, is_test=True)
    with pytest.raises(ValueError, match="held-out"):
        ExperienceBuffer().add(result)


def test_buffer_rejects_empty_episode():
    record = EpisodeRecord(0, (1.0, 1.0), False, True, 10.0, 0, "arrival")
    with pytest.raises(ValueError):
        ExperienceBuffer().add(EpisodeResult(record, []))


def test_update_needs_enough_episodes(env, small_params):
    buf = _collect(env, small_params, 1)
    with pytest.raises(ValueError):
        update(buf, small_params, PPOConfig(episodes_per_update=2))


def test_zero_learning_rate_leaves_params_bit_exact(env, small_params):
    buf = _collect(env, small_params, 3)
    before = [t.data.copy() for t in small_params]
    cfg = PPOConfig(episodes_per_update=2, epochs=1, learning_rate=0.0)
    update(buf, small_params, cfg, rng=np.random.default_rng(0))
    assert all(np.array_equal(a, t.data) for a, t in zip(before, small_params))
    assert len(buf) == 1


def test_update_changes_params_and_consumes_episodes(env, small_params):
    buf = _collect(env, small_params, 2)
    before = small_params.flat().copy()
    stats = update(buf, small_params, PPOConfig(episodes_per_update=2, bptt_chunk=4),
                   rng=np.random.default_rng(0))
    assert len(buf) == 0
    assert not np.array_equal(before, small_params.flat())
    assert stats["steps"] > 0 and stats["steps"] % 4 == 0  # whole epochs of minibatches
    assert all(t.grad is None for t in small_params)


def test_divergence_restores_parameters(env, small_params):
    cfg = PPOConfig(episodes_per_update=2, epochs=2, minibatches=2, bptt_chunk=1000, normalize_advantages=False)
    steps_before_failure = 0
    for seed in range(4):
        buf = _collect(env, small_params, 2, seed=seed)
        buf.episodes[1].transitions[0].reward = float("nan")
        opt = make_optimizer(small_params, cfg)
        inner = opt.step

        def counted():
            nonlocal steps_before_failure
            steps_before_failure += 1
            inner()

        opt.step = counted
        before = [t.data.copy() for t in small_params]
        with pytest.raises(DivergenceError):
            update(buf, small_params, cfg, opt, rng=np.random.default_rng(seed))
        assert all(np.array_equal(a, t.data) for a, t in zip(before, small_params))
        assert opt.t == 0 and not any(np.any(m) for m in opt.m)
        assert len(buf) == 2
    # the restore path was exercised after real optimizer steps, not only before the first one
    assert steps_before_failure > 0
