"""Run configuration files.

Configs are INI files with one section per concern::

    [run]      seed, max_episodes, checkpoint_dir, checkpoint_every, workers, early_stop
    [env]      path (JSON map, relative to the config or a bundled name), kind, dt,
               odom_noise_distance, odom_noise_bearing
    [render]   width, height, fov_deg, height_scale, shade_k, ceiling, floor
    [reward]   r_collision, r_arrival, c_d, c_r, c_p, max_steps
    [policy]   conv, feature_dim, lstm_units, fc_units, log_std_init, init_seed
    [ppo]      clip_eps, epochs, episodes_per_update, gamma, gae_lambda, learning_rate, ...
    [metrics]  train_window, test_window

Missing keys take the defaults of the corresponding dataclass.
"""

from __future__ import annotations

import configparser
import dataclasses
import math
import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .metrics import MetricWindows
from .policy import PolicyConfig
from .ppo import PPOConfig
from .render import RenderConfig
from .world import RewardConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    env_path: str
    env_kind: str = "nav"
    dt: float = 0.2
    odom_noise: tuple = (0.0, 0.0)
    reward: RewardConfig = field(default_factory=RewardConfig)
    ppo: PPOConfig = field(default_factory=PPOConfig)
    render: RenderConfig = field(default_factory=RenderConfig)
    policy: dict = field(default_factory=dict)  # PolicyConfig overrides
    windows: MetricWindows = field(default_factory=MetricWindows)
    seed: int = 0
    init_seed: int | None = None
    max_episodes: int = 5000
    checkpoint_dir: str = "checkpoints"
    checkpoint_every: int = 50  # updates
    workers: int = 1
    early_stop: bool = True

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["render"]["ceiling"] = list(self.render.ceiling)
        d["render"]["floor"] = list(self.render.floor)
        d["odom_noise"] = list(self.odom_noise)
        return d


def bundled_path(name: str) -> Path:
    return Path(str(resources.files("navlearn") / "envs" / name))


def bundled_config(name: str) -> Path:
    return Path(str(resources.files("navlearn") / "configs" / name))


def resolve_env_path(value: str, base_dir: Path) -> str:
    candidates = [Path(value)] if os.path.isabs(value) else [base_dir / value, Path(value)]
    stem = value if value.endswith(".json") else value + ".json"
    candidates.append(bundled_path(os.path.basename(stem)))
    for c in candidates:
        if c.is_file():
            return str(c)
    raise ConfigError(f"environment file '{value}' not found (looked in {base_dir} and bundled maps)")


def _convert(raw: str, default, key: str):
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(v) for v in raw.split(","))
    except ValueError:
        raise ConfigError(f"bad value for '{key}': {raw!r}") from None
    return raw


def _fill(cls, section, defaults=None, rename=None, skip=()):
    rename = rename or {}
    base = defaults if defaults is not None else cls()
    kwargs = {}
    names = {f.name for f in dataclasses.fields(cls)}
    for key, raw in section.items():
        name = rename.get(key, key)
        if key in skip:
            continue
        if name not in names:
            raise ConfigError(f"unknown key '{key}' in section [{section.name}]")
        kwargs[name] = _convert(raw, getattr(base, name), key)
    try:
        return dataclasses.replace(base, **kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid [{section.name}] settings: {exc}") from None


def parse_conv(text: str) -> tuple:
    """``"8x5x2, 16x5x2"`` -> ((8, 5, 2), (16, 5, 2))."""
    try:
        layers = tuple(tuple(int(v) for v in item.strip().split("x")) for item in text.split(","))
    except ValueError:
        raise ConfigError(f"bad conv specification {text!r}") from None
    if len(layers) != 3 or any(len(layer) != 3 for layer in layers):
        raise ConfigError(f"conv needs three 'channels x kernel x stride' layers, got {text!r}")
    return layers


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    known = {"run", "env", "render", "reward", "policy", "ppo", "metrics"}
    extra = set(parser.sections()) - known
    if extra:
        raise ConfigError(f"unknown section(s) {sorted(extra)} in {path}")
    if not parser.has_option("env", "path"):
        raise ConfigError(f"{path}: [env] path is required")

    env = parser["env"]
    cfg = RunConfig(env_path=resolve_env_path(env["path"], path.parent))
    cfg.env_kind = env.get("kind", "nav")
    if cfg.env_kind not in ("nav", "bandit"):
        raise ConfigError(f"[env] kind must be 'nav' or 'bandit', got {cfg.env_kind!r}")
    cfg.dt = _convert(env.get("dt", "0.2"), 0.2, "dt")
    cfg.odom_noise = (_convert(env.get("odom_noise_distance", "0"), 0.0, "odom_noise_distance"),
                      _convert(env.get("odom_noise_bearing", "0"), 0.0, "odom_noise_bearing"))
    unknown = set(env) - {"path", "kind", "dt", "odom_noise_distance", "odom_noise_bearing"}
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} in section [env]")

    if parser.has_section("run"):
        run = parser["run"]
        for key in run:
            if key not in ("seed", "max_episodes", "checkpoint_dir", "checkpoint_every", "workers", "early_stop"):
                raise ConfigError(f"unknown key '{key}' in section [run]")
            setattr(cfg, key, _convert(run[key], getattr(cfg, key), key))
    if parser.has_section("reward"):
        cfg.reward = _fill(RewardConfig, parser["reward"])
    if parser.has_section("ppo"):
        cfg.ppo = _fill(PPOConfig, parser["ppo"])
    if parser.has_section("metrics"):
        cfg.windows = _fill(MetricWindows, parser["metrics"],
                            rename={"train_window": "train", "test_window": "test"})
    if parser.has_section("render"):
        sec = parser["render"]
        cfg.render = _fill(RenderConfig, sec, skip=("fov_deg",))
        if "fov_deg" in sec:
            cfg.render = dataclasses.replace(cfg.render, fov=math.radians(_convert(sec["fov_deg"], 0.0, "fov_deg")))
    if parser.has_section("policy"):
        sec = parser["policy"]
        overrides = {}
        for key, raw in sec.items():
            if key == "conv":
                overrides["conv"] = parse_conv(raw)
            elif key == "init_seed":
                cfg.init_seed = _convert(raw, 0, key)
            elif key in ("feature_dim", "lstm_units", "fc_units"):
                overrides[key] = _convert(raw, 0, key)
            elif key == "log_std_init":
                overrides[key] = _convert(raw, 0.0, key)
            else:
                raise ConfigError(f"unknown key '{key}' in section [policy]")
        cfg.policy = overrides

    env_seed = os.environ.get("NAVLEARN_SEED")
    if env_seed is not None:
        try:
            cfg.seed = int(env_seed)
        except ValueError:
            raise ConfigError(f"NAVLEARN_SEED must be an integer, got {env_seed!r}") from None
    if not -(2 ** 63) <= cfg.seed < 2 ** 64:
        raise ConfigError("seed must fit in 64 bits")
    return cfg


def policy_config_for(cfg: RunConfig, distance_scale: float) -> PolicyConfig:
    return PolicyConfig(image_height=cfg.render.height, image_width=cfg.render.width,
                        distance_scale=distance_scale, **cfg.policy)
