"""Weight initialisation, including soft alignment of forward and feedback weights."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError
from .network import FeedbackParams, NetworkParams
from .numerics import gaussian

HE_SCALE = math.sqrt(2.0)


@dataclass(frozen=True)
class InitConfig:
    a: float = HE_SCALE  # forward std multiplier
    b: float = HE_SCALE  # feedback std multiplier
    theta_init: float = 90.0  # degrees

    def __post_init__(self):
        if not (self.a > 0 and self.b > 0):
            raise InvalidArgumentError("init scales a and b must be > 0")
        if not 0.0 <= self.theta_init <= 90.0:
            raise InvalidArgumentError(f"theta_init must be in [0, 90], got {self.theta_init}")


def _layer_shapes(dims):
    return list(zip(dims[1:], dims[:-1]))  # (out, in) per layer


def init_forward_plain(dims, a: float, rng: np.random.Generator) -> NetworkParams:
    """W_l ~ N(0, a^2 / fan_in), zero biases, for every layer."""
    if not a > 0:
        raise InvalidArgumentError("a must be > 0")
    weights = [gaussian(rng, o, i, 0.0, a / math.sqrt(i)) for o, i in _layer_shapes(dims)]
    return NetworkParams(weights, [np.zeros(o) for o, _ in _layer_shapes(dims)])


def init_feedback(dims, b: float, rng: np.random.Generator) -> FeedbackParams:
    """B_l ~ N(0, b^2 / fan_in) of shape (in, out) for layers 1..L-1."""
    if not b > 0:
        raise InvalidArgumentError("b must be > 0")
    mats: list[np.ndarray | None] = [None]
    for o, i in _layer_shapes(dims)[1:]:
        mats.append(gaussian(rng, i, o, 0.0, b / math.sqrt(i)))
    return FeedbackParams(mats)


def soft_align_init(feedback: FeedbackParams, theta_init: float, a: float,
                    rng: np.random.Generator, params: NetworkParams) -> NetworkParams:
    """Overwrite W_l (l >= 1) with ``B_l.T cos(theta) + R sin(theta)``.

    R is drawn fresh per layer from N(0, a^2 / fan_in). Layer 0 keeps the
    weights it already has in ``params``; all biases are zeroed.
    """
    if not 0.0 <= theta_init <= 90.0:
        raise InvalidArgumentError(f"theta_init must be in [0, 90], got {theta_init}")
    feedback.check_against(params)
    theta = math.radians(theta_init)
    # exact endpoints: cos(pi/2) is 6e-17 in floating point
    c = 1.0 if theta_init == 0 else (0.0 if theta_init == 90 else math.cos(theta))
    s = 0.0 if theta_init == 0 else (1.0 if theta_init == 90 else math.sin(theta))
    weights = [params.weights[0].copy()]
    for l in range(1, params.n_layers):
        bt = feedback.matrices[l].T
        out_dim, in_dim = bt.shape
        r = gaussian(rng, out_dim, in_dim, 0.0, a / math.sqrt(in_dim))
        weights.append(c * bt + s * r)
    return NetworkParams(weights, [np.zeros_like(b) for b in params.biases])


def initialize(dims, rule: str, cfg: InitConfig, rng: np.random.Generator
               ) -> tuple[NetworkParams, FeedbackParams]:
    """Forward and feedback weights for one of the rules ``bp``, ``fa``, ``ifa``.

    Feedback weights are always allocated so configs stay uniform; BP
    simply never reads them.
    """
    params = init_forward_plain(dims, cfg.a, rng)
    feedback = init_feedback(dims, cfg.b, rng)
    if rule == "ifa":
        params = soft_align_init(feedback, cfg.theta_init, cfg.a, rng, params)
    elif rule not in ("bp", "fa"):
        raise InvalidArgumentError(f"unknown rule {rule!r}")
    return params, feedback
