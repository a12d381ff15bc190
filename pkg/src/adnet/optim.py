"""Losses and the Adam update."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DataError, ParameterError, StateError
from .graph import ParamStore
from .ops import sigmoid, softmax

PROB_FLOOR = 1e-12


def binary_logistic_cost(theta_dot_x: float, y: int) -> float:
    """Single-sample logistic cost.

    The ``y == 0`` branch deliberately evaluates ``-log(sigmoid(1 - z))`` rather
    than the textbook ``-log(1 - sigmoid(z))``. Training never calls this; the
    classifier head uses ``softmax_cross_entropy``.
    """
    if y not in (0, 1):
        raise DataError(f"label must be 0 or 1, got {y!r}")
    z = float(theta_dot_x)
    p = sigmoid(np.float64(z if y == 1 else 1.0 - z))
    return -math.log(max(float(p), PROB_FLOOR))


def logistic_objective(theta_dot_x: Sequence[float], y: Sequence[int]) -> float:
    """Mean of ``binary_logistic_cost`` over the samples."""
    if len(theta_dot_x) != len(y):
        raise DataError("scores and labels differ in length")
    if len(y) == 0:
        raise DataError("need at least one sample")
    return sum(binary_logistic_cost(z, t) for z, t in zip(theta_dot_x, y)) / len(y)


@dataclass
class LossValue:
    mean_loss: float
    grad_logits: np.ndarray
    probs: np.ndarray


def softmax_cross_entropy(logits: np.ndarray, labels: Sequence[int]) -> LossValue:
    """Mean negative log-likelihood of ``labels`` and its gradient w.r.t. ``logits``."""
    n, k = logits.shape
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,):
        raise DataError(f"expected {n} labels, got {labels.shape[0] if labels.ndim else labels}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise DataError(f"labels must lie in [0, {k}), got {labels.tolist()}")
    probs = softmax(logits)
    picked = np.maximum(probs[np.arange(n), labels].astype(np.float64), PROB_FLOOR)
    loss = float(-np.log(picked).mean())
    grad = probs.copy()
    grad[np.arange(n), labels] -= 1
    grad /= n
    return LossValue(loss, grad, probs)


@dataclass
class AdamConfig:
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-7
    t: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ParameterError(f"learning rate must be positive, got {self.learning_rate}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ParameterError("moment decays must lie in [0, 1)")
        if not self.epsilon > 0:
            raise ParameterError("epsilon must be positive")
        if self.t < 0:
            raise ParameterError("step counter must be non-negative")


def adam_step(params: ParamStore, grads: dict[str, np.ndarray], cfg: AdamConfig) -> AdamConfig:
    """Apply one bias-corrected Adam update to every trainable entry, in place.

    ``cfg.t`` is incremented and ``cfg`` returned for convenience.
    """
    expected = set(params.trainable_names())
    got = set(grads)
    if got != expected:
        missing, extra = sorted(expected - got), sorted(got - expected)
        raise StateError(f"gradient names mismatch: missing {missing}, extra {extra}")
    cfg.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    corr1 = 1.0 - b1**cfg.t
    corr2 = 1.0 - b2**cfg.t
    for name in params.trainable_names():
        p = params.entry(name)
        g = grads[name]
        if g.shape != p.value.shape:
            raise StateError(f"gradient for {name}: shape {g.shape} vs {p.value.shape}")
        dt = p.value.dtype
        p.m = (b1 * p.m + (1 - b1) * g).astype(dt, copy=False)
        p.v = (b2 * p.v + (1 - b2) * (g * g)).astype(dt, copy=False)
        m_hat = p.m / corr1
        v_hat = p.v / corr2
        p.value = (p.value - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.epsilon)).astype(
            dt, copy=False
        )
    return cfg
