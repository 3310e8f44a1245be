"""Certification of epsilon-robustness with the Box or hybrid zonotope domain."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import abstract_layers as AL
from . import tensor as T
from . import zonotope as Z
from .attacks import predict
from .goals import clipped_box
from .network import NetworkIR, NonFiniteBounds, abstract_forward

DOMAINS = ("box", "hzono")


@dataclass(frozen=True)
class Certificate:
    example_id: int
    epsilon: float
    domain: str
    verdict: str          # "verified" | "unknown"
    margin: float         # min over other classes of a lower bound on logit[label] - logit[other]
    overflow: bool = False

    @property
    def verified(self) -> bool:
        return self.verdict == "verified"

    def to_json(self) -> str:
        d = asdict(self)
        d["margin"] = d["margin"] if np.isfinite(d["margin"]) else None
        return json.dumps(d)


def output_element(net: NetworkIR, lower: np.ndarray, upper: np.ndarray, domain: str,
                   correlate_input: bool = False) -> Z.HybridZonotope:
    """Abstract output for the input box.

    ``box`` is interval propagation with the abstract layers skipped. ``hzono`` starts from the same
    box (no correlated terms) and applies the network's abstract layers; with ``correlate_input`` every
    input dimension is correlated first.
    """
    if domain not in DOMAINS:
        raise ValueError(f"unknown domain {domain!r}; expected one of {DOMAINS}")
    h = Z.abstract_box(lower, upper)
    if domain == "box":
        out, _ = abstract_forward(net, h, deep_losses=False, abstract_layers=False)
    else:
        if correlate_input:
            h = AL.correlate_by(h.flatten(), AL.CorrelationStrategy.all()).reshape(*net.input_shape)
        out, _ = abstract_forward(net, h, deep_losses=False)
    return out.flatten()


def logit_margins(h: Z.HybridZonotope, labels) -> np.ndarray:
    """Per example ``min_{j != t} LB(z_t - z_j)`` using shared error terms, in float64."""
    labels = np.asarray(labels, dtype=np.int64)
    n = h.batch
    rows = np.arange(n)
    c = h.center.data.astype(np.float64)
    b = h.uncorr.data.astype(np.float64)
    e = h.corr.data.astype(np.float64)           # [m, N, k]
    dc = c[rows, labels][:, None] - c
    db = b[rows, labels][:, None] + b
    de = np.abs(e[:, rows, labels][:, :, None] - e).sum(axis=0) if h.m else 0.0
    lb = dc - db - de
    lb[rows, labels] = np.inf
    return lb.min(axis=1)


def certify_batch(net: NetworkIR, x, labels, epsilon: float, domain: str = "hzono",
                  first_id: int = 0, correlate_input: bool = False) -> list[Certificate]:
    x = np.asarray(x.data if isinstance(x, T.Tensor) else x)
    labels = np.asarray(labels)
    lo, hi = clipped_box(x, epsilon, net.value_range)
    with T.no_grad():
        try:
            out = output_element(net, lo, hi, domain, correlate_input)
            margins = logit_margins(out, labels)
            overflow = ~np.isfinite(margins)
        except NonFiniteBounds:
            margins = np.full(len(x), np.nan)
            overflow = np.ones(len(x), dtype=bool)
    return [Certificate(first_id + i, float(epsilon), domain,
                        "verified" if (not overflow[i] and margins[i] > 0) else "unknown",
                        float(margins[i]), bool(overflow[i]))
            for i in range(len(x))]


def verify_example(net: NetworkIR, x, label: int, epsilon: float, domain: str = "hzono",
                   example_id: int = 0, correlate_input: bool = False) -> Certificate:
    x = np.asarray(x.data if isinstance(x, T.Tensor) else x)
    return certify_batch(net, x[None], [label], epsilon, domain, example_id, correlate_input)[0]


@dataclass
class VerificationSummary:
    fraction: float
    certificates: list
    correct: np.ndarray

    @property
    def counts(self) -> dict:
        verified = sum(c.verified for c in self.certificates)
        return {"verified": verified, "unknown": len(self.certificates) - verified,
                "overflow": sum(c.overflow for c in self.certificates)}


def verified_robustness(net: NetworkIR, x, labels, epsilon: float, domain: str = "hzono",
                        limit: int | None = None, batch: int = 50,
                        correlate_input: bool = False) -> VerificationSummary:
    """Fraction of examples that are classified correctly and certified at ``epsilon``."""
    x = np.asarray(x.data if isinstance(x, T.Tensor) else x)
    labels = np.asarray(labels)
    if limit is not None:
        x, labels = x[:limit], labels[:limit]
    if len(x) == 0:
        raise ValueError("verified_robustness needs at least one example")
    correct = predict(net, x) == labels
    certs = []
    for i in range(0, len(x), batch):
        certs.extend(certify_batch(net, x[i:i + batch], labels[i:i + batch], epsilon, domain, i,
                                   correlate_input))
    good = np.array([c.verified for c in certs]) & correct
    return VerificationSummary(float(good.mean()), certs, correct)
