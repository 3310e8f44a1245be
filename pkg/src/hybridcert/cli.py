"""Command-line entry point: train, verify, attack, dsl, net-check.

Exit status is 0 on success, 1 on a runtime failure and 2 on a usage error.
Failures print one JSON object on a single stderr line.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import dsl as D
from .attacks import AttackConfig, attacked_correct, predict
from .certifier import DOMAINS, verified_robustness
from .data import load_dataset
from .network import load_network, load_weights, save_weights, shape_trace
from .trainer import TrainConfig, train


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _fail(kind: str, message: str, code: int) -> int:
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)
    return code


def _common(p: argparse.ArgumentParser, *, needs_data: bool = True) -> None:
    p.add_argument("--net", required=True, help="network description file")
    p.add_argument("--weights", help="DFAI weights file")
    if needs_data:
        p.add_argument("--data", required=True,
                       help="mnist:DIR | idx:TRI,TRL,TEI,TEL | blobs:N[,NOISE[,SEED]] | moons:N[,NOISE[,SEED]]")
    p.add_argument("--epsilon", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--limit", type=int, help="number of test examples to evaluate (train: per epoch)")
    p.add_argument("--threads", type=int, default=1, help="BLAS threads")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="hybridcert", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    tr = sub.add_parser("train", help="train a network with a goal expression")
    _common(tr)
    goal = tr.add_mutually_exclusive_group()
    goal.add_argument("--goal", help="goal expression in the objective language")
    goal.add_argument("--preset", help="named training scheme, e.g. Baseline or Adv_5IS")
    tr.add_argument("--epochs", type=int, default=10)
    tr.add_argument("--batch", type=int, default=100)
    tr.add_argument("--optimizer", choices=("adam", "sgd"), default="adam")
    tr.add_argument("--lr", type=float, default=1e-3)
    tr.add_argument("--momentum", type=float, default=0.9)
    tr.add_argument("--l2", type=float, default=0.0)
    tr.add_argument("--milestones", default="", help="comma-separated epochs where the rate is multiplied")
    tr.add_argument("--lr-factor", type=float, default=0.1)
    tr.add_argument("--schedule-scale", type=float, default=1.0,
                    help="multiply every schedule horizon in the goal by this factor")
    tr.add_argument("--domain", choices=DOMAINS, default="hzono")
    tr.add_argument("--eval-every", type=int, default=1)
    tr.add_argument("--final-limit", type=int, help="test examples for the final evaluation (default: all)")
    tr.add_argument("--augment", action="store_true")
    tr.add_argument("--out", help="output directory for metrics, certificates and checkpoints")

    ve = sub.add_parser("verify", help="certify robustness on the test split")
    _common(ve)
    ve.add_argument("--domain", choices=DOMAINS, default="hzono")
    ve.add_argument("--out", help="write certificates as JSON lines to this file")

    at = sub.add_parser("attack", help="attacked accuracy under MI-FGSM")
    _common(at)
    at.add_argument("--momentum", type=float, default=AttackConfig.momentum)
    at.add_argument("--iterations", type=int, default=AttackConfig.iterations)
    at.add_argument("--step", type=float, default=AttackConfig.step)

    ds = sub.add_parser("dsl", help="parse, print and evaluate objective expressions")
    what = ds.add_mutually_exclusive_group(required=True)
    what.add_argument("--goal", help="parse a goal and print its canonical form")
    what.add_argument("--preset", help="print a named training scheme")
    what.add_argument("--schedule", help="parse a schedule and print its canonical form")
    what.add_argument("--eval-schedule", help="evaluate a schedule at --t")
    what.add_argument("--list-presets", action="store_true")
    ds.add_argument("--t", type=float, help="time in fractional epochs")

    nc = sub.add_parser("net-check", help="parse a network file and print its shape trace")
    nc.add_argument("--net", required=True)
    return ap


def _load(args, truncate: bool = True):
    train_set, test_set = load_dataset(args.data)
    net = load_network(args.net, value_range=test_set.value_range, rng=np.random.default_rng(args.seed))
    if args.weights:
        load_weights(net, args.weights)
    if truncate and args.limit is not None:
        test_set = test_set.take(args.limit)
    return net, train_set, test_set


def _cmd_train(args) -> int:
    net, train_set, test_set = _load(args, truncate=False)   # --limit only sizes the per-epoch evaluation
    milestones = tuple(float(m) for m in args.milestones.split(",") if m.strip())
    cfg = TrainConfig(goal=args.goal or args.preset or "Baseline", epsilon=args.epsilon, epochs=args.epochs,
                      batch_size=args.batch, optimizer=args.optimizer, lr=args.lr, momentum=args.momentum,
                      l2=args.l2, lr_milestones=milestones, lr_factor=args.lr_factor,
                      schedule_scale=args.schedule_scale, seed=args.seed, eval_limit=args.limit,
                      final_eval_limit=args.final_limit, eval_every=args.eval_every, domain=args.domain,
                      augment=args.augment, out_dir=args.out)
    train(cfg, net, train_set, test_set, on_row=lambda row: print(json.dumps(row), flush=True))
    if args.out:
        save_weights(net, Path(args.out) / "final.dfai")
    return 0


def _cmd_verify(args) -> int:
    net, _, test_set = _load(args)
    summary = verified_robustness(net, test_set.x, test_set.y, args.epsilon, args.domain)
    if args.out:
        with open(args.out, "w") as f:
            for c in summary.certificates:
                f.write(c.to_json() + "\n")
    print(json.dumps({"epsilon": args.epsilon, "domain": args.domain, "examples": len(test_set),
                      "accuracy": float(summary.correct.mean()),
                      "verified_robustness": summary.fraction, **summary.counts}))
    return 0


def _cmd_attack(args) -> int:
    net, _, test_set = _load(args)
    cfg = AttackConfig(args.iterations, args.momentum, args.step)
    ok = attacked_correct(net, test_set.x, test_set.y, args.epsilon, net.value_range, cfg)
    acc = float((predict(net, test_set.x) == test_set.y).mean())
    print(json.dumps({"epsilon": args.epsilon, "examples": len(test_set), "accuracy": acc,
                      "attacked_accuracy": float(ok.mean()), "momentum": cfg.momentum,
                      "iterations": cfg.iterations, "step": cfg.step}))
    return 0


def _cmd_dsl(args) -> int:
    if args.list_presets:
        for name in D.preset_names():
            print(f"{name}\t{D.PRESETS[name]}")
    elif args.goal is not None:
        print(D.format_goal(D.parse_goal(args.goal)))
    elif args.preset is not None:
        print(D.format_goal(D.preset(args.preset)))
    elif args.schedule is not None:
        print(D.format_schedule(D.parse_schedule(args.schedule)))
    else:
        if args.t is None:
            raise UsageError("--eval-schedule needs --t")
        if args.t < 0:
            raise UsageError("--t must be nonnegative")
        print(D.format_number(D.eval_schedule(D.parse_schedule(args.eval_schedule), args.t)))
    return 0


def _cmd_net_check(args) -> int:
    net = load_network(args.net)
    print("\n".join(shape_trace(net)))
    return 0


COMMANDS = {"train": _cmd_train, "verify": _cmd_verify, "attack": _cmd_attack,
            "dsl": _cmd_dsl, "net-check": _cmd_net_check}


def _thread_limit(n: int | None):
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        return nullcontext()
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        return _fail("usage", str(e), 2)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit(getattr(args, "threads", None)):
            return COMMANDS[args.command](args)
    except UsageError as e:
        return _fail("usage", str(e), 2)
    except (OSError, ValueError, ArithmeticError, KeyError, RuntimeError) as e:
        return _fail(type(e).__name__, str(e).strip("'\""), 1)


if __name__ == "__main__":
    sys.exit(main())
