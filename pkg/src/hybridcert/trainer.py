"""Training loop driven by a goal expression, with per-epoch robustness evaluation."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import dsl as D
from . import tensor as T
from .attacks import AttackConfig, attacked_correct, predict
from .certifier import verified_robustness
from .data import Dataset
from .goals import NonFiniteLoss, training_loss
from .network import NetworkIR, NonFiniteBounds, save_weights
from .optim import NonFiniteGradient, adam_step, sgd_momentum_step

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    goal: str = "Baseline"           # preset name or DSL text
    epsilon: float = 0.1
    epochs: int = 10
    batch_size: int = 100
    optimizer: str = "adam"          # adam | sgd
    lr: float = 1e-3
    momentum: float = 0.9
    l2: float = 0.0
    lr_milestones: tuple = ()
    lr_factor: float = 0.1
    schedule_scale: float = 1.0      # stretch factor applied to every schedule horizon in the goal
    seed: int = 0
    eval_limit: int | None = 500     # examples used by the per-epoch evaluation
    final_eval_limit: int | None = None
    eval_every: int = 1
    domain: str = "hzono"
    augment: bool = False
    out_dir: str | None = None

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be nonnegative")
        if self.batch_size < 1:
            raise ValueError("batch size must be positive")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if list(self.lr_milestones) != sorted(self.lr_milestones):
            raise ValueError("learning-rate milestones must be ascending")
        self.lr_milestones = tuple(self.lr_milestones)


@dataclass
class EpochRow:
    epoch: int
    t: float
    loss: float
    accuracy: float | None
    attacked_accuracy: float | None
    verified_robustness: float | None
    seconds: float
    evaluated: int = 0
    verified_and_attacked: int | None = None  # examples both certified and broken by the attack


@dataclass
class RunReport:
    rows: list = field(default_factory=list)
    final: dict | None = None
    certificates: list = field(default_factory=list)
    first_loss: float | None = None


def lr_at(lr0: float, milestones, epoch: float, factor: float = 0.1) -> float:
    """Initial rate times ``factor`` for each milestone already reached."""
    return lr0 * factor ** sum(1 for m in milestones if m <= epoch)


def resolve_goal(text: str, scale: float = 1.0) -> D.Goal:
    try:
        g = D.preset(text)
    except KeyError:
        g = D.parse_goal(text)
    if scale != 1.0:
        g = D.map_schedules(g, lambda s: D.scale_schedule(s, scale))
    return g


def batch_rng(seed: int, *key: int) -> np.random.Generator:
    """Counter-based stream for one (seed, key...) address."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, *key])))


def l2_penalty(params) -> T.Tensor:
    total = None
    for p in params:
        term = (p * p).sum()
        total = term if total is None else total + term
    return total


def augment_batch(x: np.ndarray, rng: np.random.Generator, pad: int = 4) -> np.ndarray:
    """Random crop after zero padding plus random horizontal flip (image batches [N, C, H, W])."""
    n, _, h, w = x.shape
    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    dy = rng.integers(0, 2 * pad + 1, size=n)
    dx = rng.integers(0, 2 * pad + 1, size=n)
    out = np.stack([padded[i, :, dy[i]:dy[i] + h, dx[i]:dx[i] + w] for i in range(n)])
    flip = rng.random(n) < 0.5
    out[flip] = out[flip, :, :, ::-1]
    return out


def evaluate(net: NetworkIR, ds: Dataset, epsilon: float, domain: str = "hzono",
             limit: int | None = None, attack: AttackConfig = AttackConfig()):
    """Standard, attacked and verified accuracy on the first ``limit`` examples."""
    sub = ds.take(limit)
    correct = predict(net, sub.x) == sub.y
    attacked = attacked_correct(net, sub.x, sub.y, epsilon, net.value_range, attack)
    summary = verified_robustness(net, sub.x, sub.y, epsilon, domain)
    verified = np.array([c.verified for c in summary.certificates]) & correct
    return {
        "accuracy": float(correct.mean()),
        "attacked_accuracy": float(attacked.mean()),
        "verified_robustness": float(verified.mean()),
        "evaluated": len(sub),
        "verified_and_attacked": int((verified & ~attacked).sum()),
    }, summary.certificates


def train(config: TrainConfig, net: NetworkIR, train_set: Dataset, test_set: Dataset,
          on_row: Callable[[dict], None] | None = None) -> RunReport:
    goal = resolve_goal(config.goal, config.schedule_scale)
    params = net.parameters()
    state: dict = {}
    report = RunReport()
    out = Path(config.out_dir) if config.out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    metrics = (out / "metrics.jsonl").open("w") if out else None
    best = -1.0
    n = len(train_set)
    seen = 0
    bad_streak = 0

    def emit(row: dict) -> None:
        if metrics:
            metrics.write(json.dumps(row) + "\n")
            metrics.flush()
        if on_row:
            on_row(row)

    try:
        for epoch in range(config.epochs):
            start = time.perf_counter()
            order = batch_rng(config.seed, epoch, 0).permutation(n)
            lr = lr_at(config.lr, config.lr_milestones, epoch, config.lr_factor)
            losses = []
            for b, i in enumerate(range(0, n, config.batch_size)):
                idx = order[i:i + config.batch_size]
                t = seen / n
                rng = batch_rng(config.seed, epoch, b + 1)
                x = train_set.x[idx]
                if config.augment:
                    x = augment_batch(x, rng)
                try:
                    loss = training_loss(goal, net, x, train_set.y[idx], config.epsilon,
                                         net.value_range, t, rng)
                    if config.l2:
                        loss = loss + l2_penalty(params) * config.l2
                    grads = T.grad(loss, params)
                    if config.optimizer == "adam":
                        adam_step(params, grads, state, lr)
                    else:
                        sgd_momentum_step(params, grads, state, lr, config.momentum)
                    bad_streak = 0
                    losses.append(loss.item())
                    if report.first_loss is None:
                        report.first_loss = loss.item()
                except (NonFiniteLoss, NonFiniteBounds, NonFiniteGradient) as e:
                    bad_streak += 1
                    log.warning("epoch %d batch %d skipped: %s", epoch, b, e)
                    if bad_streak >= 2:
                        raise TrainingDiverged(
                            f"non-finite loss on two consecutive batches (epoch {epoch}, batch {b}): {e}; "
                            "abstract bounds are overflowing, try decorrelate layers, a smaller width "
                            "or a lower learning rate") from e
                seen += len(idx)

            row = EpochRow(epoch, seen / n, float(np.mean(losses)) if losses else float("nan"),
                           None, None, None, 0.0)
            if (epoch + 1) % config.eval_every == 0 or epoch == config.epochs - 1:
                stats, _ = evaluate(net, test_set, config.epsilon, config.domain, config.eval_limit)
                row.accuracy = stats["accuracy"]
                row.attacked_accuracy = stats["attacked_accuracy"]
                row.verified_robustness = stats["verified_robustness"]
                row.evaluated = stats["evaluated"]
                row.verified_and_attacked = stats["verified_and_attacked"]
                if out and row.verified_robustness > best:
                    best = row.verified_robustness
                    save_weights(net, out / "best.dfai")
            row.seconds = time.perf_counter() - start
            if out:
                save_weights(net, out / "last.dfai")
            report.rows.append(row)
            emit(asdict(row))
            log.info("epoch %d t=%.2f loss=%.4f acc=%s att=%s ver=%s (%.1fs)", epoch, row.t, row.loss,
                     row.accuracy, row.attacked_accuracy, row.verified_robustness, row.seconds)

        stats, certs = evaluate(net, test_set, config.epsilon, config.domain, config.final_eval_limit)
        report.final = {"summary": True, **stats}
        report.certificates = certs
        emit(report.final)
        if out:
            with (out / "certificates.jsonl").open("w") as f:
                for c in certs:
                    f.write(c.to_json() + "\n")
    finally:
        if metrics:
            metrics.close()
    return report
