"""Evaluation of training goals: input abstraction and the combined training loss.

``goal_abstract`` turns an input box into an abstraction tree whose leaves are
points (``Tensor`` batches) or ``HybridZonotope`` elements and whose inner
nodes are ``(first, second)`` pairs, one per ``Mix``. ``training_loss``
pushes every leaf through the network and folds the leaf losses back up the
same tree.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import dsl as D
from . import tensor as T
from . import zonotope as Z
from .attacks import ifgsm
from .network import NetworkIR, NonFiniteBounds, abstract_forward, concrete_forward
from .tensor import ContractError, Tensor


class NonFiniteLoss(FloatingPointError):
    pass


def _unit(value: float, what: str) -> float:
    if not 0.0 <= value <= 1.0:
        warnings.warn(f"{what} evaluated to {value}, clamped into [0, 1]", RuntimeWarning)
        return min(max(value, 0.0), 1.0)
    return value


def _arr(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def center_of(d) -> np.ndarray:
    if isinstance(d, tuple):
        return center_of(d[0])
    if isinstance(d, Z.HybridZonotope):
        return d.center.data
    return _arr(d)


def upper_of(d) -> np.ndarray:
    if isinstance(d, tuple):
        return upper_of(d[0])
    if isinstance(d, Z.HybridZonotope):
        return Z.upper_bound(d).data
    return _arr(d)


def _shrink(lo: np.ndarray, hi: np.ndarray, delta: float):
    c, half = (lo + hi) / 2, (hi - lo) / 2
    return c - delta * half, c + delta * half


def goal_abstract(g: D.Goal, lower, upper, target, net: NetworkIR | None, t: float,
                  rng: np.random.Generator):
    """Abstraction of the box ``[lower, upper]`` (batched, [N, *shape]) prescribed by goal ``g``."""
    lo, hi = _arr(lower), _arr(upper)
    if np.any(lo > hi):
        raise ContractError("goal box has lower > upper")
    dtype = lo.dtype if lo.dtype.kind == "f" else T.default_dtype()
    lo, hi = lo.astype(dtype), hi.astype(dtype)

    if isinstance(g, D.Point):
        return Tensor((lo + hi) / 2)
    if isinstance(g, D.Normal):
        noise = rng.standard_normal(lo.shape).astype(dtype)
        return Tensor(np.clip((lo + hi) / 2 + (hi - lo) / 2 * noise, lo, hi))
    if isinstance(g, D.Uniform):
        return Tensor(np.clip(lo + (hi - lo) * rng.random(lo.shape).astype(dtype), lo, hi))
    if isinstance(g, D.IFGSM):
        if net is None:
            raise ValueError("IFGSM goal needs a network")
        return ifgsm(net, lo, hi, target, g.k)
    if isinstance(g, D.Box):
        return Z.abstract_box(lo, hi)
    if isinstance(g, D.Mix):
        return (goal_abstract(g.first, lo, hi, target, net, t, rng),
                goal_abstract(g.second, lo, hi, target, net, t, rng))
    if isinstance(g, D.Sub):
        delta = _unit(D.eval_schedule(g.width, t), "Sub width")
        return goal_abstract(g.inner, *_shrink(lo, hi, delta), target, net, t, rng)
    if isinstance(g, D.Sample):
        delta = _unit(D.eval_schedule(g.width, t), "Sample width")
        src = goal_abstract(g.source, *_shrink(lo, hi, 1.0 - g.ratio * delta), target, net, t, rng)
        b = center_of(src).astype(dtype)
        half = delta * (hi - lo) / 2
        return goal_abstract(g.target, b - half, b + half, target, net, t, rng)
    if isinstance(g, D.BiSample):
        x = upper_of(goal_abstract(g.first, lo, hi, target, net, t, rng)).astype(dtype)
        c = (lo + hi) / 2
        r = np.abs(x - c)
        return goal_abstract(g.second, c - r, c + r, target, net, t, rng)
    raise TypeError(f"not a goal: {g!r}")


def count_leaves(d) -> int:
    return count_leaves(d[0]) + count_leaves(d[1]) if isinstance(d, tuple) else 1


def worst_case_cross_entropy(h: Z.HybridZonotope, target) -> Tensor:
    """Cross-entropy of logits at their least favourable interval corner (lower for target, upper otherwise)."""
    bounds = Z.interval_concretize(h.flatten())
    target = np.asarray(target, dtype=np.int64).reshape(-1)
    onehot = np.zeros(bounds.lower.shape, dtype=bool)
    onehot[np.arange(len(target)), target] = True
    z = T.where(onehot, bounds.lower, bounds.upper)
    return T.softmax_cross_entropy(z, target)


@dataclass
class LossBreakdown:
    total: Tensor
    leaf_losses: list  # (path, goal text, loss value)
    deep_terms: list   # (path, weight, loss value)


def _leaf_loss(net, d, target, t, path, deep_sink):
    if isinstance(d, Z.HybridZonotope):
        try:
            out, terms = abstract_forward(net, d, t)
        except NonFiniteBounds as e:
            raise NonFiniteLoss(f"goal leaf {path}: {e}") from e
        loss = worst_case_cross_entropy(out, target)
        for w, l in terms:
            deep_sink.append((path, w, l))
    else:
        loss = T.softmax_cross_entropy(concrete_forward(net, d), target)
    if not np.isfinite(loss.data):
        raise NonFiniteLoss(f"goal leaf {path}: loss is {loss.item()}")
    return loss


def _fold(g, d, net, target, t, path, leaves, deep_sink):
    if isinstance(g, D.Mix):
        lam = _unit(D.eval_schedule(g.weight, t), "Mix weight")
        l1 = _fold(g.first, d[0], net, target, t, path + "0", leaves, deep_sink)
        l2 = _fold(g.second, d[1], net, target, t, path + "1", leaves, deep_sink)
        return l1 * (1.0 - lam) + l2 * lam
    loss = _leaf_loss(net, d, target, t, path or "root", deep_sink)
    leaves.append((path or "root", D.format_goal(g), loss.item()))
    return loss


def clipped_box(x, epsilon: float, value_range) -> tuple[np.ndarray, np.ndarray]:
    x = _arr(x)
    a, b = value_range
    return np.maximum(x - epsilon, a).astype(x.dtype), np.minimum(x + epsilon, b).astype(x.dtype)


def training_loss_breakdown(goal: D.Goal, net: NetworkIR, x, target, epsilon: float,
                            value_range, t: float, rng: np.random.Generator) -> LossBreakdown:
    lo, hi = clipped_box(x, epsilon, value_range)
    d = goal_abstract(goal, lo, hi, target, net, t, rng)
    leaves, deep = [], []
    total = _fold(goal, d, net, target, t, "", leaves, deep)
    for path, w, l in deep:
        total = total + l * w
    if not np.isfinite(total.data):
        raise NonFiniteLoss(f"training loss is {total.item()}")
    return LossBreakdown(total, leaves, [(p, w, l.item()) for p, w, l in deep])


def training_loss(goal: D.Goal, net: NetworkIR, x, target, epsilon: float, value_range,
                  t: float, rng: np.random.Generator) -> Tensor:
    """Goal loss of the batch ``x`` plus every weighted DeepLoss term from its abstract leaves."""
    return training_loss_breakdown(goal, net, x, target, epsilon, value_range, t, rng).total
