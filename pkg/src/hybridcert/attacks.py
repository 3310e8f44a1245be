"""Signed-gradient attacks: IFGSM (a training goal) and MI-FGSM (evaluation)."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .network import NetworkIR, concrete_forward

MIFGSM_MOMENTUM = 0.8
MIFGSM_ITERATIONS = 20
MIFGSM_STEP = 0.0031373


@dataclass(frozen=True)
class AttackConfig:
    iterations: int = MIFGSM_ITERATIONS
    momentum: float = MIFGSM_MOMENTUM
    step: float = MIFGSM_STEP

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("attack needs at least one iteration")
        if self.step <= 0:
            raise ValueError("attack step must be positive")
        if self.momentum < 0:
            raise ValueError("momentum must be nonnegative")


def _as_array(x, dtype) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, T.Tensor) else x, dtype=dtype)


def input_gradient(net: NetworkIR, x: np.ndarray, target) -> np.ndarray:
    """Gradient of the summed cross-entropy with respect to the input batch."""
    xt = T.Tensor(x, requires_grad=True)
    logits = concrete_forward(net, xt)
    loss = T.softmax_cross_entropy(logits, target) * float(x.shape[0])
    (g,) = T.grad(loss, [xt])
    return g


def ifgsm(net: NetworkIR, lower, upper, target, k: int) -> T.Tensor:
    """``k`` signed-gradient steps of size ``(u-l)/k`` from the box center, clamped to the box."""
    if k < 1:
        raise ValueError("IFGSM needs k >= 1")
    dtype = net.parameters()[0].dtype if net.params else T.default_dtype()
    lo, hi = _as_array(lower, dtype), _as_array(upper, dtype)
    if np.any(lo > hi):
        raise T.ContractError("attack box has lower > upper")
    target = np.asarray(target)
    x = (lo + hi) / 2
    step = (hi - lo) / k
    for _ in range(k):
        g = input_gradient(net, x, target)
        if not np.all(np.isfinite(g)):
            warnings.warn("IFGSM: non-finite input gradient, returning current iterate", RuntimeWarning)
            break
        x = np.clip(x + step * np.sign(g), lo, hi)
    return T.Tensor(x)


def mifgsm(net: NetworkIR, x, label, epsilon: float, momentum: float = MIFGSM_MOMENTUM,
           iterations: int = MIFGSM_ITERATIONS, step: float = MIFGSM_STEP,
           value_range=(0.0, 1.0)) -> T.Tensor:
    """Momentum iterative FGSM inside the clipped epsilon ball around ``x``."""
    AttackConfig(iterations, momentum, step)
    dtype = net.parameters()[0].dtype if net.params else T.default_dtype()
    x0 = _as_array(x, dtype)
    a, b = value_range
    lo = np.maximum(x0 - epsilon, a).astype(dtype)
    hi = np.minimum(x0 + epsilon, b).astype(dtype)
    label = np.asarray(label)
    acc = np.zeros_like(x0)
    adv = x0.copy()
    axes = tuple(range(1, x0.ndim))
    for _ in range(iterations):
        g = input_gradient(net, adv, label)
        if not np.all(np.isfinite(g)):
            warnings.warn("MI-FGSM: non-finite input gradient, returning current iterate", RuntimeWarning)
            break
        norm = np.abs(g).sum(axis=axes, keepdims=True)
        acc = momentum * acc + g / np.maximum(norm, np.finfo(dtype).tiny)
        adv = np.clip(adv + step * np.sign(acc), lo, hi).astype(dtype)
    return T.Tensor(adv)


def predict(net: NetworkIR, x, batch: int = 500) -> np.ndarray:
    x = np.asarray(x.data if isinstance(x, T.Tensor) else x)
    out = []
    with T.no_grad():
        for i in range(0, len(x), batch):
            out.append(concrete_forward(net, x[i:i + batch]).data.argmax(axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=int)


def attacked_correct(net: NetworkIR, x, labels, epsilon: float, value_range=(0.0, 1.0),
                     config: AttackConfig = AttackConfig(), batch: int = 500) -> np.ndarray:
    """Per example: clean prediction is right and the MI-FGSM point is still classified right."""
    x = np.asarray(x.data if isinstance(x, T.Tensor) else x)
    labels = np.asarray(labels)
    clean = predict(net, x, batch) == labels
    ok = np.zeros(len(x), dtype=bool)
    for i in range(0, len(x), batch):
        adv = mifgsm(net, x[i:i + batch], labels[i:i + batch], epsilon, config.momentum,
                     config.iterations, config.step, value_range)
        ok[i:i + batch] = predict(net, adv.data, batch) == labels[i:i + batch]
    return clean & ok
