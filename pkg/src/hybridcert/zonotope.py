"""Hybrid zonotopes and their abstract transformers.

An element over ``p`` variables is a triplet ``<center, uncorr, corr>``: each
variable ``v`` takes the values

    center[v] + uncorr[v] * beta[v] + sum_j corr[j, v] * e[j]

with every ``beta`` and ``e`` in ``[-1, 1]``. The correlated error terms ``e``
are shared by all variables, which is what lets the domain track
dependencies. A box is the special case with no correlated terms.

Layout: ``center`` and ``uncorr`` are ``[N, *shape]`` (leading batch axis);
``corr`` is ``[m, N, *shape]`` with the error-term axis first so linear maps
apply to it by folding ``m`` into the batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ContractError, ShapeError, Tensor


@dataclass(frozen=True)
class IntervalBatch:
    lower: Tensor
    upper: Tensor

    def width(self) -> np.ndarray:
        return self.upper.data - self.lower.data

    def contains(self, x, rtol: float = 1e-5, atol: float = 1e-6) -> np.ndarray:
        x = np.asarray(x.data if isinstance(x, Tensor) else x)
        lo, hi = self.lower.data, self.upper.data
        slack = atol + rtol * np.maximum(np.abs(lo), np.abs(hi))
        return (x >= lo - slack) & (x <= hi + slack)


@dataclass(frozen=True)
class HybridZonotope:
    center: Tensor
    uncorr: Tensor
    corr: Tensor

    def __post_init__(self):
        if self.center.shape != self.uncorr.shape:
            raise ShapeError(f"center {self.center.shape} and uncorrelated {self.uncorr.shape} differ")
        if self.corr.shape[1:] != self.center.shape:
            raise ShapeError(f"correlated coefficients {self.corr.shape} do not match center {self.center.shape}")
        if np.any(self.uncorr.data < 0):
            raise ContractError("uncorrelated error coefficients must be nonnegative")

    @property
    def m(self) -> int:
        return self.corr.shape[0]

    @property
    def batch(self) -> int:
        return self.center.shape[0]

    @property
    def shape(self) -> tuple[int, ...]:
        """Per-example variable shape."""
        return self.center.shape[1:]

    @property
    def p(self) -> int:
        return int(np.prod(self.shape))

    def reshape(self, *shape) -> HybridZonotope:
        n, m = self.batch, self.m
        return HybridZonotope(self.center.reshape((n,) + shape),
                              self.uncorr.reshape((n,) + shape),
                              self.corr.reshape((m, n) + shape))

    def flatten(self) -> HybridZonotope:
        return self.reshape(self.p)

    def detach(self) -> HybridZonotope:
        return HybridZonotope(self.center.detach(), self.uncorr.detach(), self.corr.detach())

    def __repr__(self) -> str:
        return f"HybridZonotope(batch={self.batch}, shape={self.shape}, m={self.m})"


def make(center, uncorr=None, corr=None) -> HybridZonotope:
    """Build an element from raw arrays; missing parts default to zero."""
    c = center if isinstance(center, Tensor) else T.tensor(center)
    b = T.zeros(c.shape, dtype=c.dtype) if uncorr is None else (
        uncorr if isinstance(uncorr, Tensor) else T.tensor(uncorr, dtype=c.dtype))
    e = T.zeros((0,) + c.shape, dtype=c.dtype) if corr is None else (
        corr if isinstance(corr, Tensor) else T.tensor(corr, dtype=c.dtype))
    return HybridZonotope(c, b, e)


def abstract_box(lower, upper) -> HybridZonotope:
    lo = lower.data if isinstance(lower, Tensor) else np.asarray(lower)
    hi = upper.data if isinstance(upper, Tensor) else np.asarray(upper)
    if lo.shape != hi.shape:
        raise ShapeError(f"box bounds have shapes {lo.shape} and {hi.shape}")
    if np.any(lo > hi):
        raise ContractError("box lower bound exceeds upper bound")
    dtype = lo.dtype if lo.dtype.kind == "f" else T.default_dtype()
    lo, hi = lo.astype(dtype), hi.astype(dtype)
    return make(T.tensor((lo + hi) / 2, dtype=dtype), T.tensor((hi - lo) / 2, dtype=dtype))


def point(x) -> HybridZonotope:
    return make(x if isinstance(x, Tensor) else T.tensor(x))


def evaluate_point(h: HybridZonotope, beta, e) -> np.ndarray:
    """Concrete point selected by uncorrelated terms ``beta`` ([N, *shape]) and correlated ``e`` ([m, N])."""
    beta = np.asarray(beta, dtype=np.float64)
    e = np.asarray(e, dtype=np.float64).reshape(h.m, h.batch)
    if beta.shape != h.center.shape:
        raise ShapeError(f"beta shape {beta.shape} != {h.center.shape}")
    if np.any(np.abs(beta) > 1) or np.any(np.abs(e) > 1):
        raise ContractError("error terms must lie in [-1, 1]")
    extra = (1,) * len(h.shape)
    corr = h.corr.data.astype(np.float64)
    return (h.center.data.astype(np.float64) + h.uncorr.data * beta
            + (corr * e.reshape(e.shape + extra)).sum(axis=0))


def total_error(h: HybridZonotope) -> Tensor:
    if h.m == 0:
        return h.uncorr
    return h.uncorr + h.corr.abs().sum(axis=0)


def interval_concretize(h: HybridZonotope) -> IntervalBatch:
    err = total_error(h)
    return IntervalBatch(h.center - err, h.center + err)


def upper_bound(h: HybridZonotope) -> Tensor:
    return h.center + total_error(h)


def affine_transform(h: HybridZonotope, weight: Tensor, bias: Tensor | None = None) -> HybridZonotope:
    """Apply ``x -> W x + b`` with ``W`` of shape [out, in] to a flat element."""
    if len(h.shape) != 1 or weight.shape[1] != h.shape[0]:
        raise ShapeError(f"affine: weight {weight.shape} cannot act on variables of shape {h.shape}")
    wt = weight.T
    c = h.center @ wt
    if bias is not None:
        c = c + bias
    b = h.uncorr @ weight.abs().T
    e = h.corr @ wt
    return HybridZonotope(c, b, e)


def conv_transform(h: HybridZonotope, kernel: Tensor, bias: Tensor | None,
                   stride: int, padding: int) -> HybridZonotope:
    """Convolution: same rule as the affine case, with ``|W|`` realised by convolving with ``|kernel|``."""
    if len(h.shape) != 3:
        raise ShapeError(f"conv expects [C,H,W] variables, got {h.shape}")
    n, m = h.batch, h.m
    c = T.conv2d(h.center, kernel, bias, stride, padding)
    b = T.conv2d(h.uncorr, kernel.abs(), None, stride, padding)
    if m:
        e = T.conv2d(h.corr.reshape((m * n,) + h.shape), kernel, None, stride, padding)
        e = e.reshape((m,) + c.shape)
    else:
        e = T.zeros((0,) + c.shape, dtype=c.dtype)
    return HybridZonotope(c, b, e)


def scale_shift(h: HybridZonotope, scale, shift) -> HybridZonotope:
    """Elementwise ``x * scale + shift`` with constant arrays broadcast over the variable shape."""
    s = np.asarray(scale, dtype=h.center.dtype)
    t = np.asarray(shift, dtype=h.center.dtype)
    return HybridZonotope(h.center * s + t, h.uncorr * np.abs(s), h.corr * s)


def relu_transform(h: HybridZonotope) -> HybridZonotope:
    """Sound ReLU.

    Without correlated terms this is the exact interval ReLU. Otherwise a
    crossing variable with bounds ``l < 0 < u`` is replaced by the minimal-area
    parallelogram ``lam*x + mu +- mu`` with ``lam = u/(u-l)`` and
    ``mu = -lam*l/2``; the new noise goes into the uncorrelated coefficient so
    ``m`` is unchanged.
    """
    bounds = interval_concretize(h)
    lo, hi = bounds.lower, bounds.upper
    dead = hi.data <= 0
    active = lo.data >= 0
    crossing = ~dead & ~active
    dtype = h.center.dtype

    if h.m == 0:
        lo_r, hi_r = lo.relu(), hi.relu()
        c = T.where(active, h.center, (lo_r + hi_r) * 0.5)
        b = T.where(active, h.uncorr, (hi_r - lo_r) * 0.5)
        return HybridZonotope(c, b, h.corr)

    denom = T.where(crossing, hi - lo, np.ones_like(hi.data))
    lam = T.where(crossing, hi / denom, active.astype(dtype))
    mu = T.where(crossing, lam * lo * -0.5, np.zeros_like(lo.data))
    return HybridZonotope(lam * h.center + mu, lam * h.uncorr + mu, h.corr * lam)


def add_transform(h1: HybridZonotope, h2: HybridZonotope) -> HybridZonotope:
    """Sum of two elements; correlated axes are zero-padded to the longer one."""
    if h1.center.shape != h2.center.shape:
        raise ShapeError(f"cannot add elements of shapes {h1.center.shape} and {h2.center.shape}")
    e1, e2 = h1.corr, h2.corr
    if h1.m < h2.m:
        e1 = _pad_terms(e1, h2.m)
    elif h2.m < h1.m:
        e2 = _pad_terms(e2, h1.m)
    return HybridZonotope(h1.center + h2.center, h1.uncorr + h2.uncorr, e1 + e2)


def _pad_terms(corr: Tensor, m: int) -> Tensor:
    extra = T.zeros((m - corr.shape[0],) + corr.shape[1:], dtype=corr.dtype)
    return T.concat([corr, extra], axis=0)


def is_finite(h: HybridZonotope) -> bool:
    return bool(np.all(np.isfinite(h.center.data)) and np.all(np.isfinite(h.uncorr.data))
                and np.all(np.isfinite(h.corr.data)))
