"""Abstract layers: identity on concrete values, rewrite the abstract element.

Index sets are per example: arrays of shape ``[N, k]`` sorted ascending. A
``-1`` entry is padding (used when pooling windows overlap and select the
same variable twice); it produces an all-zero correlated column.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ContractError, ShapeError, Tensor
from .zonotope import HybridZonotope, IntervalBatch, interval_concretize, total_error

ACTIVATIONS = {"relu": lambda t: t.relu()}


@dataclass(frozen=True)
class CorrelationStrategy:
    variant: str  # "all" | "fixed" | "max" | "maxpool"
    k: int | None = None
    pool: tuple[int, int, int, int] | None = None  # (c, w, h, s)

    def __post_init__(self):
        if self.variant not in ("all", "fixed", "max", "maxpool"):
            raise ContractError(f"unknown correlation variant {self.variant!r}")
        if self.variant in ("fixed", "max") and (self.k is None or self.k < 1):
            raise ContractError(f"{self.variant} correlation needs a positive k")
        if self.variant == "maxpool" and (self.pool is None or min(self.pool) < 1):
            raise ContractError("maxpool correlation needs positive (c, w, h, s)")

    @classmethod
    def all(cls):
        return cls("all")

    @classmethod
    def fixed(cls, k: int):
        return cls("fixed", k=k)

    @classmethod
    def max(cls, k: int):
        return cls("max", k=k)

    @classmethod
    def maxpool(cls, c: int, w: int, h: int, s: int):
        return cls("maxpool", pool=(c, w, h, s))


def select_correlation_indices(strategy: CorrelationStrategy, h: HybridZonotope,
                               is_first_layer: bool = False) -> np.ndarray:
    n, p = h.batch, h.p
    if strategy.variant == "all":
        return np.broadcast_to(np.arange(p), (n, p)).copy()
    if strategy.variant in ("fixed", "max") and strategy.k > p:
        raise ContractError(f"cannot correlate {strategy.k} of {p} variables")
    if strategy.variant == "fixed":
        k = strategy.k
        idx = np.array([(i * p) // k for i in range(k)])
        return np.broadcast_to(idx, (n, k)).copy()
    if strategy.variant == "max":
        ub = (h.center.data + total_error(h).data).reshape(n, p)
        order = np.argsort(-ub, axis=1, kind="stable")[:, :strategy.k]
        return np.sort(order, axis=1)
    stat = h.center.data if is_first_layer else h.uncorr.data
    return _maxpool_indices(stat, strategy.pool)


def _maxpool_indices(stat: np.ndarray, pool: tuple[int, int, int, int]) -> np.ndarray:
    c, w, h, s = pool
    if stat.ndim != 4:
        raise ShapeError(f"maxpool correlation needs [C,H,W] variables, got {stat.shape[1:]}")
    n, C, H, W = stat.shape
    if c > C or h > H or w > W:
        raise ContractError(f"pooling window {(c, h, w)} does not fit variables {(C, H, W)}")
    win = np.lib.stride_tricks.sliding_window_view(stat, (c, h, w), axis=(1, 2, 3))
    win = win[:, ::s, ::s, ::s]
    oc, oh, ow = win.shape[1:4]
    flat_arg = win.reshape(n, oc, oh, ow, -1).argmax(axis=-1)
    dc, rem = np.divmod(flat_arg, h * w)
    dh, dw = np.divmod(rem, w)
    cc = np.arange(oc)[None, :, None, None] * s + dc
    hh = np.arange(oh)[None, None, :, None] * s + dh
    ww = np.arange(ow)[None, None, None, :] * s + dw
    flat = ((cc * H + hh) * W + ww).reshape(n, -1)
    rows = [np.unique(r) for r in flat]
    width = max(len(r) for r in rows)
    out = np.full((n, width), -1, dtype=np.int64)
    for i, r in enumerate(rows):
        out[i, :len(r)] = r
    return out


def _check_index_set(P: np.ndarray, n: int, size: int, what: str) -> np.ndarray:
    P = np.asarray(P, dtype=np.int64)
    if P.ndim == 1:
        P = np.broadcast_to(P, (n, P.shape[0]))
    if P.shape[0] != n:
        raise ShapeError(f"index set has {P.shape[0]} rows for a batch of {n}")
    if np.any(P >= size) or np.any(P < -1):
        raise ContractError(f"{what} index out of range [0, {size})")
    for row in P:
        real = row[row >= 0]
        if len(np.unique(real)) != len(real):
            raise ContractError(f"duplicate {what} indices in {real.tolist()}")
    return np.sort(P, axis=1)


def correlate(h: HybridZonotope, P) -> HybridZonotope:
    """Move the uncorrelated error of the variables in ``P`` into fresh correlated terms.

    Variable ``P[t]`` gets new column ``m + t``; the represented set is unchanged.
    """
    n, p = h.batch, h.p
    P = _check_index_set(P, n, p, "variable")
    k = P.shape[1]
    if k == 0:
        return h
    flat_b = h.uncorr.reshape(n, p)
    onehot = np.zeros((k, n, p), dtype=bool)
    t_idx, n_idx = np.nonzero(P.T >= 0)
    onehot[t_idx, n_idx, P.T[t_idx, n_idx]] = True
    selected = onehot.any(axis=0)
    new_cols = T.where(onehot, flat_b.reshape(1, n, p), np.zeros((), dtype=h.center.dtype))
    corr = T.concat([h.corr.reshape(h.m, n, p), new_cols], axis=0)
    uncorr = T.where(selected, np.zeros((), dtype=h.center.dtype), flat_b)
    shape = (n,) + h.shape
    return HybridZonotope(h.center, uncorr.reshape(shape), corr.reshape((h.m + k,) + shape))


def select_decorrelation_removals(h: HybridZonotope, k: int) -> np.ndarray:
    """Indices of the ``m - k`` correlated terms with the smallest absolute column sums."""
    if k < 0 or k > h.m:
        raise ContractError(f"cannot keep {k} of {h.m} correlated terms")
    n = h.batch
    sums = np.abs(h.corr.data).reshape(h.m, n, h.p).sum(axis=2).T  # [N, m]
    order = np.argsort(sums, axis=1, kind="stable")[:, :h.m - k]
    return np.sort(order, axis=1)


def decorrelate(h: HybridZonotope, P) -> HybridZonotope:
    """Fold the correlated terms in ``P`` into the uncorrelated coefficient; survivors keep their order."""
    n, m = h.batch, h.m
    P = _check_index_set(P, n, m, "error-term")
    if P.shape[1] == 0:
        return h
    removed = np.zeros((m, n), dtype=bool)
    for i, row in enumerate(P):
        removed[row[row >= 0], i] = True
    if np.any(removed.sum(axis=0) != removed.sum(axis=0)[0]):
        raise ContractError("every example must drop the same number of correlated terms")
    extra = (1,) * len(h.shape)
    mask = removed.reshape(removed.shape + extra)
    folded = T.where(mask, h.corr.abs(), np.zeros((), dtype=h.center.dtype)).sum(axis=0)
    uncorr = h.uncorr + folded
    keep = np.argsort(removed, axis=0, kind="stable")[: m - int(removed[:, 0].sum())]  # [m', N]
    if keep.shape[0] == 0:
        corr = T.zeros((0,) + h.center.shape, dtype=h.center.dtype)
    else:
        index = np.broadcast_to(keep.reshape(keep.shape + extra), keep.shape + h.shape)
        corr = h.corr.gather(index, axis=0)
    return HybridZonotope(h.center, uncorr, corr)


def decorrelate_all(h: HybridZonotope) -> HybridZonotope:
    return decorrelate(h, np.broadcast_to(np.arange(h.m), (h.batch, h.m)))


def decorrelate_min(h: HybridZonotope, k: int) -> HybridZonotope:
    return decorrelate(h, select_decorrelation_removals(h, k))


def correlate_by(h: HybridZonotope, strategy: CorrelationStrategy, is_first_layer: bool = False) -> HybridZonotope:
    return correlate(h, select_correlation_indices(strategy, h, is_first_layer))


# -- DeepLoss ------------------------------------------------------------------

def _flat_bounds(c: IntervalBatch) -> tuple[Tensor, Tensor]:
    n = c.lower.shape[0]
    return c.lower.reshape(n, -1), c.upper.reshape(n, -1)


def deep_loss_naive(c: IntervalBatch, f: str = "relu") -> Tensor:
    """Per-example deep loss by comparing every pair of dimensions (quadratic)."""
    act = ACTIVATIONS[f]
    lo, hi = _flat_bounds(c)
    n, d = lo.shape
    not_self = ~np.eye(d, dtype=bool)
    # [N, i, j]: lower bound of i against upper bound of j and vice versa
    lb_mask = (lo.data[:, None, :] <= lo.data[:, :, None]) & not_self
    ub_mask = (hi.data[:, :, None] <= hi.data[:, None, :]) & not_self
    zero = np.zeros((), dtype=lo.dtype)
    lb_terms = T.where(lb_mask, act(hi.reshape(n, 1, d) - lo.reshape(n, d, 1)), zero)
    ub_terms = T.where(ub_mask, act(hi.reshape(n, d, 1) - lo.reshape(n, 1, d)), zero)
    total = lb_terms.max(axis=-1).sum(axis=1) + ub_terms.max(axis=-1).sum(axis=1)
    return total * (1.0 / (2 * d))


def _best_other(keys: Tensor, vals: np.ndarray) -> np.ndarray:
    """For each i, the index j != i with keys[j] <= keys[i] maximising vals[j]; -1 if none.

    Works on sorted prefixes: the candidates for i are the prefix up to the
    end of i's tie group. The best candidate is the prefix maximum unless that
    is i itself, in which case it is the prefix runner-up. The runner-up of a
    prefix is ``max_j min(v_j, max(v_0..v_{j-1}))``.
    """
    _, perm = T.sort_desc(Tensor(-keys.data))  # ascending keys, ties by lowest index
    n, d = perm.shape
    ks = np.take_along_axis(keys.data, perm, 1)
    vs = np.take_along_axis(vals, perm, 1)
    pos = np.broadcast_to(np.arange(d), (n, d))
    ninf = np.full((n, 1), -np.inf, dtype=vs.dtype)

    best = np.maximum.accumulate(vs, axis=1)
    prev_best = np.concatenate([ninf, best[:, :-1]], axis=1)
    best_at = np.maximum.accumulate(np.where(vs > prev_best, pos, 0), axis=1)
    prev_best_at = np.concatenate([np.zeros((n, 1), dtype=np.int64), best_at[:, :-1]], axis=1)

    cand = np.minimum(vs, prev_best)
    cand_at = np.where(vs <= prev_best, pos, prev_best_at)
    cand_at[:, 0] = -1
    second = np.maximum.accumulate(cand, axis=1)
    prev_second = np.concatenate([ninf, second[:, :-1]], axis=1)
    rec = np.where(cand > prev_second, pos, -1)
    rec[:, 0] = -1
    second_src = np.maximum.accumulate(rec, axis=1)
    second_at = np.where(second_src >= 0, np.take_along_axis(cand_at, np.maximum(second_src, 0), 1), -1)

    last_of_group = np.ones((n, d), dtype=bool)
    last_of_group[:, :-1] = ks[:, 1:] != ks[:, :-1]
    group_end = np.where(last_of_group, pos, d)
    group_end = np.minimum.accumulate(group_end[:, ::-1], axis=1)[:, ::-1]

    b1 = np.take_along_axis(best_at, group_end, 1)
    b2 = np.take_along_axis(second_at, group_end, 1)
    chosen_sorted = np.where(b1 != pos, b1, b2)
    chosen = np.where(chosen_sorted >= 0, np.take_along_axis(perm, np.maximum(chosen_sorted, 0), 1), -1)
    out = np.empty_like(chosen)
    np.put_along_axis(out, perm, chosen, 1)
    return out


def deep_loss_fast(c: IntervalBatch, f: str = "relu") -> Tensor:
    """Per-example deep loss in O(d log d) per example via sorting and prefix maxima."""
    act = ACTIVATIONS[f]
    lo, hi = _flat_bounds(c)
    d = lo.shape[1]
    zero = np.zeros((), dtype=lo.dtype)
    j_lb = _best_other(lo, hi.data)
    j_ub = _best_other(-hi, -lo.data)
    lb = T.where(j_lb >= 0, act(hi.gather(np.maximum(j_lb, 0), 1) - lo), zero)
    ub = T.where(j_ub >= 0, act(hi - lo.gather(np.maximum(j_ub, 0), 1)), zero)
    return (lb.sum(axis=1) + ub.sum(axis=1)) * (1.0 / (2 * d))


def deep_loss(c: IntervalBatch, f: str = "relu") -> Tensor:
    """Batch mean of the per-example deep loss."""
    return deep_loss_fast(c, f).mean()


def deep_loss_of(h: HybridZonotope, f: str = "relu") -> Tensor:
    return deep_loss(interval_concretize(h), f)
