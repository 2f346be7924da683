"""Randomized finite-difference checks of every differentiable layer.

All checks run in float64.  Each ``check_*`` function draws one random
problem from ``rng`` and returns the worst relative error reported by
:func:`navlearn.autodiff.grad_check`.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .policy import PolicyConfig, PolicyParameters, RecurrentState, core_step, encode_images

EPS = 1.5e-4
# network trials whose ReLU inputs come closer than this to the kink are redrawn:
# a central difference straddling the kink is not a derivative
KINK_MARGIN = 1e-2

TINY_POLICY = PolicyConfig(image_height=8, image_width=8, conv=((2, 3, 2), (3, 2, 1), (2, 2, 1)),
                           feature_dim=3, lstm_units=3, fc_units=4, distance_scale=8.0)


def _t(rng, *shape, scale=1.0):
    return Tensor(scale * rng.standard_normal(shape))


def check_conv2d(rng: np.random.Generator) -> float:
    c_in = int(rng.integers(1, 4))
    c_out = int(rng.integers(1, 5))
    k = int(rng.integers(1, 4))
    stride = int(rng.integers(1, 3))
    h, w = int(rng.integers(k, 9)), int(rng.integers(k, 9))
    batch = int(rng.integers(1, 3))
    x, kern, bias = _t(rng, batch, c_in, h, w), _t(rng, c_out, c_in, k, k), _t(rng, c_out)
    out_shape = ad.conv2d(x, kern, bias, stride).shape
    coef = Tensor(rng.standard_normal(out_shape))
    return ad.grad_check(lambda x, kern, bias: (ad.conv2d(x, kern, bias, stride) * coef).sum(),
                         [x, kern, bias], EPS)


def check_dense(rng: np.random.Generator) -> float:
    n, m = int(rng.integers(1, 17)), int(rng.integers(1, 9))
    batch = int(rng.integers(1, 4))
    x, wt, b = _t(rng, batch, n), _t(rng, m, n), _t(rng, m)
    coef = Tensor(rng.standard_normal((batch, m)))
    return ad.grad_check(lambda x, wt, b: (ad.dense(x, wt, b) * coef).sum(), [x, wt, b], EPS)


def check_lstm(rng: np.random.Generator, steps: int = 5) -> float:
    n, units = int(rng.integers(1, 5)), int(rng.integers(1, 5))
    batch = int(rng.integers(1, 3))
    xs = [_t(rng, batch, n) for _ in range(steps)]
    h0, c0 = _t(rng, batch, units, scale=0.5), _t(rng, batch, units, scale=0.5)
    wt, b = _t(rng, 4 * units, n + units, scale=0.7), _t(rng, 4 * units, scale=0.5)
    coef_h = Tensor(rng.standard_normal((batch, units)))
    coef_c = Tensor(rng.standard_normal((batch, units)))

    def unrolled(h, c, wt, b, *xs):
        for x in xs:
            h, c = ad.lstm_cell(x, h, c, wt, b)
        return (h * coef_h).sum() + (c * coef_c).sum()

    return ad.grad_check(unrolled, [h0, c0, wt, b, *xs], EPS)


def check_network(rng: np.random.Generator, steps: int = 3, config: PolicyConfig = TINY_POLICY) -> float:
    """End-to-end check of the policy on a tiny configuration, unrolled ``steps`` times."""
    while True:
        loss, inputs = _network_problem(rng, steps, config)
        if _relu_margin(loss, inputs) > KINK_MARGIN:
            return ad.grad_check(loss, inputs, EPS)


def _relu_margin(loss, inputs) -> float:
    seen = []
    relu = ad.relu

    def recording(x):
        seen.append(np.min(np.abs(x.data)))
        return relu(x)

    ad.relu = recording
    try:
        with ad.no_grad():
            loss(*inputs)
    finally:
        ad.relu = relu
    return min(seen)


def _network_problem(rng, steps, config):
    params = PolicyParameters.initialize(config, rng)
    # redraw at unit-gain fan-in scale: the small-gain heads of a fresh policy shrink
    # upstream gradients toward the finite-difference noise floor
    for t in params:
        scale = 1.0 / np.sqrt(np.prod(t.shape[1:])) if t.ndim > 1 else 0.3
        t.data = scale * rng.standard_normal(t.shape)
    images = rng.integers(0, 256, size=(steps, config.image_height, config.image_width, 3), dtype=np.uint8)
    goals = np.column_stack([rng.uniform(0.1, 8.0, steps), rng.uniform(-np.pi, np.pi, steps)])
    prevs = rng.standard_normal((steps, 3))
    state0 = RecurrentState(*(_t(rng, 1, config.lstm_units, scale=0.3) for _ in range(4)))
    coef = rng.standard_normal((steps, 3))
    names = [name for name, _ in params.items()]

    def loss(*tensors):
        for name, t in zip(names, tensors):
            params.tensors[name] = t
        feats = encode_images(images, params)
        state = state0
        total = None
        for t in range(steps):
            mean, value, state = core_step(feats[t:t + 1], goals[t:t + 1], prevs[t:t + 1], state, params)
            term = (mean * Tensor(coef[t, :2])).sum() + value.sum() * coef[t, 2]
            total = term if total is None else total + term
        return total + (ad.clip(params["log_std"], -5.0, 1.0) * Tensor([0.7, -0.4])).sum()

    return loss, [params[n] for n in names]


CHECKS = {
    "conv2d": check_conv2d,
    "dense": check_dense,
    "lstm_cell (5-step unroll)": check_lstm,
    "network (tiny)": check_network,
}


def run_all(trials: int = 100, seed: int = 0) -> dict:
    """Worst relative error per layer over ``trials`` random problems."""
    results = {}
    with ad.precision(np.float64):
        for i, (name, fn) in enumerate(CHECKS.items()):
            worst = 0.0
            for trial in range(trials):
                worst = max(worst, fn(np.random.default_rng([seed, i, trial])))
            results[name] = worst
    return results
