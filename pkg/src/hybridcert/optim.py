"""Parameter update rules operating in place on ``Tensor.data``."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import Tensor


class NonFiniteGradient(FloatingPointError):
    pass


def _check_finite(params: Sequence[Tensor], grads: Sequence[np.ndarray]) -> None:
    for i, g in enumerate(grads):
        if g is not None and not np.all(np.isfinite(g)):
            raise NonFiniteGradient(
                f"non-finite gradient for parameter {i} (shape {params[i].shape}); step aborted")


def _check_state(params: Sequence[Tensor], buffers: list[np.ndarray]) -> None:
    for p, b in zip(params, buffers):
        if b.shape != p.shape:
            raise ValueError(f"optimizer state shape {b.shape} does not match parameter {p.shape}")


def sgd_momentum_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: dict,
                      lr: float, momentum: float = 0.0, weight_decay: float = 0.0) -> None:
    """SGD with heavy-ball momentum.

    ``weight_decay`` is coupled: it adds ``weight_decay * p`` to the gradient,
    i.e. the gradient of ``weight_decay/2 * ||p||^2`` added to the loss.
    """
    _check_finite(params, grads)
    buf = state.setdefault("momentum", [np.zeros_like(p.data) for p in params])
    _check_state(params, buf)
    for p, g, b in zip(params, grads, buf):
        if g is None:
            continue
        if weight_decay:
            g = g + weight_decay * p.data
        if momentum:
            b *= momentum
            b += g
            g = b
        p.data -= (lr * g).astype(p.dtype, copy=False)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: dict, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    _check_finite(params, grads)
    m = state.setdefault("m", [np.zeros_like(p.data) for p in params])
    v = state.setdefault("v", [np.zeros_like(p.data) for p in params])
    _check_state(params, m)
    state["t"] = t = state.get("t", 0) + 1
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p, g, mi, vi in zip(params, grads, m, v):
        if g is None:
            continue
        mi *= beta1
        mi += (1.0 - beta1) * g
        vi *= beta2
        vi += (1.0 - beta2) * g * g
        step = lr * (mi / c1) / (np.sqrt(vi / c2) + eps)
        p.data -= step.astype(p.dtype, copy=False)
