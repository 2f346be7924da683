import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import SMALL_POLICY
from navlearn import autodiff as ad
from navlearn.env import Observation
from navlearn.policy import (ActionDistribution, PolicyConfig, PolicyParameters, forward, log_prob, reset_state,
                             sample_action, squash, unsquash)


def _obs(cfg, rng, goal=(2.0, 0.3)):
    img = rng.integers(0, 256, (cfg.image_height, cfg.image_width, 3), dtype=np.uint8)
    return Observation(img, goal, (0.1, -0.2), 0.05)


def _zeroed(cfg):
    params = PolicyParameters.initialize(cfg, np.random.default_rng(0))
    for t in params:
        t.data[...] = 0
    params.bump()
    return params


def test_zero_params_give_center_action(small_config):
    params = _zeroed(small_config)
    dist, value, _ = forward(_obs(small_config, np.random.default_rng(1)), reset_state(small_config), params)
    assert np.array_equal(dist.mean, [0.0, 0.0]) and value == 0.0
    assert dist.mode() == pytest.approx((0.15, 0.0))


def test_forward_is_bit_deterministic(small_config, small_params):
    obs = _obs(small_config, np.random.default_rng(2))
    state = reset_state(small_config)
    d1, v1, s1 = forward(obs, state, small_params)
    d2, v2, s2 = forward(obs, state, small_params)
    assert d1.mean.tobytes() == d2.mean.tobytes() and v1 == v2
    assert s1.as_array().tobytes() == s2.as_array().tobytes()


def test_full_size_layer_widths():
    cfg = PolicyConfig()
    shapes = dict(cfg.param_shapes())
    assert shapes["lstm1.weight"] == (4 * 256, 32 + 2 + 256)
    assert shapes["lstm2.weight"] == (4 * 256, 256 + 3 + 256)
    assert shapes["fc.weight"] == (256, 256)
    assert reset_state(cfg).as_array().shape == (4, 256)


def test_image_shape_mismatch(small_config, small_params):
    bad = Observation(np.zeros((48, 64, 3), dtype=np.uint8), (1.0, 0.0))
    with pytest.raises(ValueError):
        forward(bad, reset_state(small_config), small_params)


def test_non_finite_parameter_detected(small_config, small_params):
    small_params["fc.bias"].data[0] = np.nan
    small_params.bump()
    with pytest.raises(FloatingPointError, match="fc.bias"):
        forward(_obs(small_config, np.random.default_rng(3)), reset_state(small_config), small_params)


def test_near_deterministic_sample():
    dist = ActionDistribution(np.zeros(2), np.full(2, -5.0))
    action, _ = sample_action(dist, np.random.default_rng(0))
    assert action == pytest.approx((0.15, 0.0), abs=0.01)


@settings(max_examples=200)
@given(st.floats(-30, 30), st.floats(-30, 30), st.floats(-5, 1), st.integers(0, 2 ** 32 - 1))
def test_samples_stay_inside_bounds(m1, m2, log_std, seed):
    dist = ActionDistribution(np.array([m1, m2]), np.full(2, log_std))
    action, lp = sample_action(dist, np.random.default_rng(seed))
    assert 0.0 < action.linear < 0.3 and -1.0 < action.angular < 1.0
    assert math.isfinite(lp)


def test_sample_log_prob_round_trip():
    rng = np.random.default_rng(4)
    for _ in range(200):
        dist = ActionDistribution(rng.normal(0, 1.5, 2), rng.uniform(-2, 0.5, 2))
        action, lp = sample_action(dist, rng)
        assert log_prob(dist, action) == pytest.approx(lp, abs=1e-6)


def test_density_integrates_to_one_per_dimension():
    dist = ActionDistribution(np.array([0.4, -0.3]), np.array([-0.2, -0.6]))
    n = 200001
    lin = np.linspace(0, 0.3, n)[1:-1]
    ang = np.linspace(-1, 1, n)[1:-1]
    # evaluate each marginal by holding the other action component fixed
    lp_lin = dist.log_prob_components(np.stack([lin, np.zeros_like(lin)], axis=-1))[:, 0]
    lp_ang = dist.log_prob_components(np.stack([np.full_like(ang, 0.15), ang], axis=-1))[:, 1]
    assert np.trapezoid(np.exp(lp_lin), lin) == pytest.approx(1.0, abs=0.01)
    assert np.trapezoid(np.exp(lp_ang), ang) == pytest.approx(1.0, abs=0.01)


def test_closed_form_log_prob_at_mean():
    mu = np.array([0.7, -0.4])
    dist = ActionDistribution(mu, np.zeros(2))
    action = squash(mu)
    sig = 1 / (1 + math.exp(-mu[0]))
    expected = (-math.log(2 * math.pi)
                - math.log(0.3 * sig * (1 - sig))
                - math.log(1 - math.tanh(mu[1]) ** 2))
    assert log_prob(dist, action) == pytest.approx(expected, abs=1e-9)


@pytest.mark.parametrize("action", [(0.3, 0.0), (0.0, 0.0), (0.1, 1.0), (0.1, -1.2)])
def test_log_prob_rejects_boundary_actions(action):
    with pytest.raises(ValueError):
        log_prob(ActionDistribution(np.zeros(2), np.zeros(2)), action)


def test_squash_unsquash_inverse():
    u = np.random.default_rng(5).normal(0, 3, (50, 2))
    assert np.allclose(unsquash(squash(u)), u, atol=1e-7)


def test_reset_state_is_zero_and_fresh(small_config):
    a, b = reset_state(small_config), reset_state(small_config)
    assert not a.as_array().any() and np.array_equal(a.as_array(), b.as_array())
    assert a.h1 is not b.h1


def test_forward_after_reset_ignores_history(small_config, small_params):
    rng = np.random.default_rng(6)
    first = _obs(small_config, rng)
    before, _, _ = forward(first, reset_state(small_config), small_params)
    state = reset_state(small_config)
    for _ in range(3):
        _, _, state = forward(_obs(small_config, rng), state, small_params)
    after, _, _ = forward(first, reset_state(small_config), small_params)
    assert before.mean.tobytes() == after.mean.tobytes()


def test_outputs_do_not_depend_on_future_inputs(small_config, small_params):
    rng = np.random.default_rng(7)
    seq = [_obs(small_config, rng) for _ in range(4)]
    other = seq[:2] + [_obs(small_config, rng) for _ in range(2)]

    def means(observations):
        state, out = reset_state(small_config), []
        for o in observations:
            dist, _, state = forward(o, state, small_params)
            out.append(dist.mean.copy())
        return out

    a, b = means(seq), means(other)
    assert all(np.array_equal(x, y) for x, y in zip(a[:2], b[:2]))
    assert not np.array_equal(a[3], b[3])


def test_actor_and_value_share_the_trunk(small_config, small_params):
    from navlearn.policy import core_step, encode_images

    rng = np.random.default_rng(8)
    img = rng.integers(0, 256, (1, small_config.image_height, small_config.image_width, 3), dtype=np.uint8)
    state = reset_state(small_config, batch=1)
    for head in ("actor", "value"):
        small_params.zero_grad()
        mean, value, _ = core_step(encode_images(img, small_params), np.array([[1.0, 0.2]]),
                                   np.zeros((1, 3)), state, small_params)
        (mean.sum() if head == "actor" else value.sum()).backward()
        assert np.abs(small_params["conv1.weight"].grad).sum() > 0
        assert np.abs(small_params["lstm1.weight"].grad).sum() > 0
    small_params.zero_grad()


def test_parameter_count_matches_manifest():
    cfg = PolicyConfig(distance_scale=5.0, **SMALL_POLICY)
    params = PolicyParameters.initialize(cfg, np.random.default_rng(0))
    assert params.count() == sum(int(np.prod(s)) for _, s in cfg.param_shapes())
    assert params.flat().dtype == np.float32 and params.flat().size == params.count()
    assert all(t.data.dtype == ad.get_default_dtype() for t in params)
