"""Stacked-LSTM navigation policy.

Image -> 3 conv layers -> FC feature layer -> LSTM-1 (features, goal)
-> LSTM-2 (LSTM-1 output, previous velocity, previous reward) -> FC -> heads.
The actor head gives the pre-squash mean of a diagonal Gaussian; linear
velocity is ``max_linear * sigmoid(u)`` and angular velocity is
``max_angular * tanh(u)``.  A scalar value head shares the whole trunk.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .env import Observation
from .world import Action

LOG_STD_MIN, LOG_STD_MAX = -5.0, 1.0
# keeps the squashed action strictly inside its open interval in float64
U_LIMIT = 15.0
_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class PolicyConfig:
    image_height: int = 48
    image_width: int = 64
    conv: tuple = ((8, 5, 2), (16, 5, 2), (32, 3, 2))  # (channels, kernel, stride)
    feature_dim: int = 32
    lstm_units: int = 256
    fc_units: int = 256
    distance_scale: float = 6.0 * math.sqrt(2.0)
    log_std_init: float = -0.5
    max_linear: float = 0.3
    max_angular: float = 1.0

    def conv_output_shape(self) -> tuple:
        c, h, w = 3, self.image_height, self.image_width
        for i, (ch, k, s) in enumerate(self.conv):
            if h < k or w < k:
                raise ValueError(f"conv{i + 1}: {h}x{w} input is smaller than its {k}x{k} kernel")
            c, h, w = ch, ad.conv_output_size(h, k, s), ad.conv_output_size(w, k, s)
        return c, h, w

    @property
    def flat_dim(self) -> int:
        c, h, w = self.conv_output_shape()
        return c * h * w

    def param_shapes(self) -> list:
        """Ordered ``(name, shape)`` manifest of every parameter."""
        shapes = []
        c_in = 3
        for i, (ch, k, _) in enumerate(self.conv):
            shapes += [(f"conv{i + 1}.weight", (ch, c_in, k, k)), (f"conv{i + 1}.bias", (ch,))]
            c_in = ch
        H, F = self.lstm_units, self.feature_dim
        shapes += [
            ("features.weight", (F, self.flat_dim)), ("features.bias", (F,)),
            ("lstm1.weight", (4 * H, F + 2 + H)), ("lstm1.bias", (4 * H,)),
            ("lstm2.weight", (4 * H, H + 3 + H)), ("lstm2.bias", (4 * H,)),
            ("fc.weight", (self.fc_units, H)), ("fc.bias", (self.fc_units,)),
            ("actor.weight", (2, self.fc_units)), ("actor.bias", (2,)),
            ("value.weight", (1, self.fc_units)), ("value.bias", (1,)),
            ("log_std", (2,)),
        ]
        return shapes


def _orthogonal(rng: np.random.Generator, shape, gain: float) -> np.ndarray:
    rows, cols = shape
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


class PolicyParameters:
    """Named, ordered network weights."""

    def __init__(self, config: PolicyConfig, tensors: dict):
        self.config = config
        self.tensors = tensors
        self.version = 0
        self._finite_version = -1

    @classmethod
    def initialize(cls, config: PolicyConfig, rng: np.random.Generator) -> "PolicyParameters":
        values = {}
        for name, shape in config.param_shapes():
            layer, kind = name.split(".") if "." in name else (name, "")
            if name == "log_std":
                v = np.full(shape, config.log_std_init)
            elif kind == "bias":
                v = np.zeros(shape)
                if layer.startswith("lstm"):
                    H = config.lstm_units
                    v[H:2 * H] = 1.0  # forget gate
            elif layer.startswith("conv"):
                fan_in = int(np.prod(shape[1:]))
                bound = 1.0 / math.sqrt(fan_in)
                v = rng.uniform(-bound, bound, size=shape)
            else:
                gain = 0.01 if layer in ("actor", "value") else 1.0
                v = _orthogonal(rng, shape, gain)
            # contiguous storage: BLAS rounding depends on memory layout, and a
            # reloaded checkpoint must reproduce outputs bit for bit
            values[name] = Tensor(np.ascontiguousarray(v), requires_grad=True, name=name)
        return cls(config, values)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.values())

    def items(self):
        return self.tensors.items()

    def manifest(self) -> list:
        return [(name, t.shape) for name, t in self.tensors.items()]

    def count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def flat(self, dtype=np.float32) -> np.ndarray:
        return np.concatenate([t.data.reshape(-1) for t in self.tensors.values()]).astype(dtype)

    def load_flat(self, flat: np.ndarray) -> None:
        offset = 0
        for t in self.tensors.values():
            n = t.size
            t.data = flat[offset:offset + n].reshape(t.shape).astype(t.data.dtype)
            offset += n
        if offset != flat.size:
            raise ValueError(f"flat vector has {flat.size} values, parameters need {offset}")
        self.bump()

    def copy(self) -> "PolicyParameters":
        return PolicyParameters(self.config, {
            name: Tensor(t.data.copy(), requires_grad=True, name=name) for name, t in self.tensors.items()
        })

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def bump(self) -> None:
        self.version += 1

    def digest(self) -> str:
        h = hashlib.sha256()
        for name, t in self.tensors.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()

    def assert_finite(self) -> None:
        if self._finite_version == self.version:
            return
        for name, t in self.tensors.items():
            if not np.all(np.isfinite(t.data)):
                raise FloatingPointError(f"non-finite values in parameter '{name}'")
        self._finite_version = self.version


class RecurrentState(NamedTuple):
    h1: Tensor
    c1: Tensor
    h2: Tensor
    c2: Tensor

    def as_array(self) -> np.ndarray:
        """``[4, units]`` (or ``[4, batch, units]``) copy of h1, c1, h2, c2."""
        return np.stack([t.data for t in self])

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "RecurrentState":
        return cls(*(Tensor(a) for a in arr))


def reset_state(config: PolicyConfig, batch: int | None = None) -> RecurrentState:
    shape = (config.lstm_units,) if batch is None else (batch, config.lstm_units)
    return RecurrentState(*(Tensor(np.zeros(shape)) for _ in range(4)))


# -- squashed Gaussian -------------------------------------------------------------

def _softplus(x):
    return np.logaddexp(0.0, x)


def squash(u: np.ndarray, max_linear: float = 0.3, max_angular: float = 1.0) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    lin = max_linear / (1.0 + np.exp(-u[..., 0]))
    ang = max_angular * np.tanh(u[..., 1])
    return np.stack([lin, ang], axis=-1)


def unsquash(action, max_linear: float = 0.3, max_angular: float = 1.0) -> np.ndarray:
    a = np.asarray(action, dtype=np.float64)
    lin, ang = a[..., 0] / max_linear, a[..., 1] / max_angular
    if np.any((lin <= 0) | (lin >= 1) | (ang <= -1) | (ang >= 1)):
        raise ValueError(f"action {action} is on or outside the open action bounds")
    return np.stack([np.log(lin) - np.log1p(-lin), np.arctanh(ang)], axis=-1)


def log_jacobian(u: np.ndarray, max_linear: float = 0.3, max_angular: float = 1.0) -> np.ndarray:
    """Per-dimension log |d action / d u|."""
    u = np.asarray(u, dtype=np.float64)
    lin = math.log(max_linear) - _softplus(-u[..., 0]) - _softplus(u[..., 0])
    ang = math.log(max_angular) + 2.0 * (math.log(2.0) - u[..., 1] - _softplus(-2.0 * u[..., 1]))
    return np.stack([lin, ang], axis=-1)


@dataclass
class ActionDistribution:
    """Diagonal Gaussian over pre-squash actions ``u``."""

    mean: np.ndarray
    log_std: np.ndarray
    max_linear: float = 0.3
    max_angular: float = 1.0

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.log_std = np.clip(np.asarray(self.log_std, dtype=np.float64), LOG_STD_MIN, LOG_STD_MAX)

    def gaussian_log_prob(self, u) -> np.ndarray:
        z = (np.asarray(u, dtype=np.float64) - self.mean) * np.exp(-self.log_std)
        return -0.5 * z * z - self.log_std - 0.5 * _LOG_2PI

    def log_prob_components(self, action) -> np.ndarray:
        u = unsquash(action, self.max_linear, self.max_angular)
        return self.gaussian_log_prob(u) - log_jacobian(u, self.max_linear, self.max_angular)

    def log_prob(self, action) -> float:
        return float(self.log_prob_components(action).sum())

    def log_prob_u(self, u) -> float:
        return float((self.gaussian_log_prob(u) - log_jacobian(u, self.max_linear, self.max_angular)).sum())

    def entropy(self) -> float:
        return float(np.sum(self.log_std + 0.5 * (_LOG_2PI + 1.0)))

    def mode(self) -> Action:
        a = squash(np.clip(self.mean, -U_LIMIT, U_LIMIT), self.max_linear, self.max_angular)
        return Action(float(a[0]), float(a[1]))

    def sample(self, rng: np.random.Generator) -> tuple[Action, float, np.ndarray]:
        """Draw an action; also returns its log-probability and pre-squash ``u``."""
        u = self.mean + np.exp(self.log_std) * rng.standard_normal(2)
        u = np.clip(u, -U_LIMIT, U_LIMIT)
        a = squash(u, self.max_linear, self.max_angular)
        return Action(float(a[0]), float(a[1])), self.log_prob_u(u), u


def sample_action(dist: ActionDistribution, rng: np.random.Generator) -> tuple[Action, float]:
    action, lp, _ = dist.sample(rng)
    return action, lp


def log_prob(dist: ActionDistribution, action) -> float:
    return dist.log_prob(action)


# -- network -------------------------------------------------------------------------

def images_to_input(images: np.ndarray, dtype=None) -> np.ndarray:
    """uint8 ``[..., H, W, 3]`` -> float ``[..., 3, H, W]`` in [0, 1]."""
    dtype = ad.get_default_dtype() if dtype is None else dtype
    x = np.moveaxis(np.asarray(images), -1, -3).astype(dtype)
    return x * dtype.type(1.0 / 255.0)


def encode_images(images: np.ndarray, params: PolicyParameters) -> Tensor:
    """Conv stack and feature layer on a batch of uint8 images ``[N, H, W, 3]``."""
    cfg = params.config
    if images.shape[1:] != (cfg.image_height, cfg.image_width, 3):
        raise ValueError(f"image batch shape {images.shape[1:]} does not match "
                         f"{(cfg.image_height, cfg.image_width, 3)}")
    x = Tensor(images_to_input(images))
    for i, (_, _, stride) in enumerate(cfg.conv):
        x = ad.relu(ad.conv2d(x, params[f"conv{i + 1}.weight"], params[f"conv{i + 1}.bias"], stride))
    x = ad.reshape(x, (x.shape[0], -1))
    return ad.relu(ad.dense(x, params["features.weight"], params["features.bias"]))


def scale_goal(goal: np.ndarray, config: PolicyConfig) -> np.ndarray:
    goal = np.asarray(goal, dtype=ad.get_default_dtype())
    return goal / np.array([config.distance_scale, math.pi], dtype=goal.dtype)


def core_step(features: Tensor, goal: np.ndarray, prev: np.ndarray, state: RecurrentState,
              params: PolicyParameters) -> tuple[Tensor, Tensor, RecurrentState]:
    """Recurrent part for one time step on a batch.

    ``goal`` is raw ``[B, 2]`` (distance, bearing); ``prev`` is
    ``[B, 3]`` (previous linear and angular velocity, previous reward).
    Returns pre-squash means ``[B, 2]``, values ``[B]`` and the next state.
    """
    cfg = params.config
    x1 = ad.concat([features, Tensor(scale_goal(goal, cfg))], axis=-1)
    h1, c1 = ad.lstm_cell(x1, state.h1, state.c1, params["lstm1.weight"], params["lstm1.bias"])
    x2 = ad.concat([h1, Tensor(np.asarray(prev, dtype=ad.get_default_dtype()))], axis=-1)
    h2, c2 = ad.lstm_cell(x2, state.h2, state.c2, params["lstm2.weight"], params["lstm2.bias"])
    hidden = ad.relu(ad.dense(h2, params["fc.weight"], params["fc.bias"]))
    mean = ad.dense(hidden, params["actor.weight"], params["actor.bias"])
    value = ad.dense(hidden, params["value.weight"], params["value.bias"])[..., 0]
    return mean, value, RecurrentState(h1, c1, h2, c2)


def clamped_log_std(params: PolicyParameters) -> Tensor:
    return ad.clip(params["log_std"], LOG_STD_MIN, LOG_STD_MAX)


def obs_arrays(obs: Observation) -> tuple[np.ndarray, np.ndarray]:
    prev = (obs.prev_velocity[0], obs.prev_velocity[1], obs.prev_reward)
    return np.asarray(obs.goal, dtype=np.float64), np.asarray(prev, dtype=np.float64)


def forward(obs: Observation, state: RecurrentState, params: PolicyParameters
            ) -> tuple[ActionDistribution, float, RecurrentState]:
    """Single-observation forward pass without gradient recording."""
    params.assert_finite()
    cfg = params.config
    with ad.no_grad():
        feats = encode_images(obs.image[None], params)
        goal, prev = obs_arrays(obs)
        batched = RecurrentState(*(Tensor(t.data[None]) for t in state))
        mean, value, nxt = core_step(feats, goal[None], prev[None], batched, params)
        log_std = clamped_log_std(params)
    dist = ActionDistribution(mean.data[0], log_std.data, cfg.max_linear, cfg.max_angular)
    return dist, float(value.data[0]), RecurrentState(*(Tensor(t.data[0]) for t in nxt))
