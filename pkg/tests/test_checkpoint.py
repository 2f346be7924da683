import numpy as np
import pytest

from conftest import SMALL_POLICY
from navlearn.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from navlearn.env import Observation
from navlearn.metrics import EpisodeRecord
from navlearn.policy import PolicyConfig, PolicyParameters, forward, reset_state
from navlearn.ppo import Adam


def _observations(cfg, n, seed=0):
    rng = np.random.default_rng(seed)
    return [Observation(rng.integers(0, 256, (cfg.image_height, cfg.image_width, 3), dtype=np.uint8),
                        (float(rng.uniform(0, 8)), float(rng.uniform(-3, 3))),
                        (float(rng.uniform(0, 0.3)), float(rng.uniform(-1, 1))), float(rng.normal())) for _ in range(n)]


def _outputs(params, observations):
    state, out = reset_state(params.config), []
    for obs in observations:
        dist, value, state = forward(obs, state, params)
        out.append(dist.mean.tobytes() + np.float64(value).tobytes() + state.as_array().tobytes())
    return out


@pytest.fixture
def saved(tmp_path, small_params):
    opt = Adam(list(small_params), lr=1e-3)
    for t in small_params:
        t.grad = np.ones_like(t.data)
    opt.step()
    small_params.zero_grad()
    rng = np.random.default_rng(11)
    rng.random(5)
    rec = EpisodeRecord(3, (1.5, 2.0), True, False, -3.25, 17, "collision")
    path = tmp_path / "p.nav"
    save_checkpoint(path, small_params, opt.state_dict(), run_config={"seed": 9}, episode=42, updates=5,
                    rng_state=rng.bit_generator.state, records=[rec])
    return path, small_params, opt, rng


def test_round_trip_forward_is_bit_identical(saved):
    path, params, _, _ = saved
    loaded = load_checkpoint(path, params.config).params
    obs = _observations(params.config, 10)
    assert _outputs(params, obs) == _outputs(loaded, obs)


def test_round_trip_metadata_and_rng(saved):
    path, _, opt, rng = saved
    ck = load_checkpoint(path)
    assert (ck.episode, ck.updates, ck.run_config) == (42, 5, {"seed": 9})
    assert ck.optimizer_state["t"] == opt.t == 1
    assert all(np.array_equal(a, b) for a, b in zip(ck.optimizer_state["m"], opt.m))
    restored = np.random.default_rng()
    restored.bit_generator.state = ck.rng_state
    assert np.array_equal(restored.random(4), rng.random(4))
    (rec,) = ck.records
    assert (rec.episode, rec.target, rec.is_test, rec.total_reward, rec.terminal.value) == \
           (3, (1.5, 2.0), True, -3.25, "collision")


def test_full_size_round_trip(tmp_path):
    cfg = PolicyConfig()
    params = PolicyParameters.initialize(cfg, np.random.default_rng(1))
    save_checkpoint(tmp_path / "big.nav", params)
    loaded = load_checkpoint(tmp_path / "big.nav", cfg).params
    obs = _observations(cfg, 2, seed=1)
    assert _outputs(params, obs) == _outputs(loaded, obs)


def test_truncated_by_one_byte(saved):
    path, *_ = saved
    path.write_bytes(path.read_bytes()[:-1])
    with pytest.raises(CheckpointError, match="payload"):
        load_checkpoint(path)


def test_truncated_header(saved):
    path, *_ = saved
    path.write_bytes(path.read_bytes()[:20])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(path)


def test_version_mismatch(saved):
    path, *_ = saved
    blob = bytearray(path.read_bytes())
    blob[0] = 7
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="version 7"):
        load_checkpoint(path)


def test_shape_mismatch_names_the_layer(saved):
    path, params, *_ = saved
    other = dict(SMALL_POLICY, conv=((6, 3, 2), (4, 3, 1), (4, 2, 1)))
    with pytest.raises(CheckpointError, match="conv1.weight"):
        load_checkpoint(path, PolicyConfig(distance_scale=params.config.distance_scale, **other))


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError, match="cannot read"):
        load_checkpoint(tmp_path / "absent.nav")
