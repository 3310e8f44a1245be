import json

import numpy as np
import pytest

from hybridcert import network as N
from hybridcert.certifier import verified_robustness
from hybridcert.data import blobs, train_test_split
from hybridcert.trainer import (TrainConfig, TrainingDiverged, augment_batch, batch_rng, evaluate, lr_at,
                                resolve_goal, train)
from hybridcert import dsl as D

NET = "input d=2\nlinear out=16\nrelu\nlinear out=16\nrelu\nlinear out=2"


def blob_split(n=600, seed=0):
    return train_test_split(blobs(n, seed=seed), 0.25, seed)


def fresh_net(text=NET, seed=0):
    return N.parse_network(text, value_range=(-1.0, 1.0), rng=np.random.default_rng(seed))


class TestSchedules:
    @pytest.mark.parametrize("epoch, want", [(5, 0.1), (10, 0.01), (15, 0.01), (25, 0.001)])
    def test_lr_at(self, epoch, want):
        assert lr_at(0.1, (10, 20), epoch) == pytest.approx(want, rel=1e-12)

    def test_milestones_must_ascend(self):
        with pytest.raises(ValueError):
            TrainConfig(lr_milestones=(20, 10))

    @pytest.mark.parametrize("kw", [dict(epsilon=-0.1), dict(batch_size=0), dict(lr=0.0), dict(optimizer="rmsprop")])
    def test_invalid_config(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)

    def test_resolve_goal(self):
        assert resolve_goal("Baseline") == D.preset("Baseline")
        assert resolve_goal("Mix(Point, Box, Lin(0, 1, 8, 2))", 0.5) == D.parse_goal("Mix(Point, Box, Lin(0, 1, 4, 1))")


class TestTrain:
    def test_point_training_separates_blobs(self):
        tr, te = blob_split()
        report = train(TrainConfig(goal="Point", epsilon=0.0, epochs=20, batch_size=32, lr=0.01,
                                   eval_every=20), fresh_net(), tr, te)
        assert report.final["accuracy"] >= 0.99

    def test_baseline_ordering_every_epoch(self, tmp_path):
        tr, te = blob_split()
        cfg = TrainConfig(goal="Baseline", epsilon=0.1, epochs=6, batch_size=32, lr=0.01, schedule_scale=0.02,
                          eval_limit=100, out_dir=str(tmp_path))
        rows = []
        report = train(cfg, fresh_net(), tr, te, on_row=rows.append)
        for r in report.rows:
            assert r.verified_robustness <= r.attacked_accuracy <= r.accuracy
        assert report.final["verified_and_attacked"] == 0
        assert report.final["verified_robustness"] <= report.final["attacked_accuracy"] <= report.final["accuracy"]
        logged = [json.loads(l) for l in (tmp_path / "metrics.jsonl").read_text().splitlines()]
        assert logged == rows and logged[-1]["summary"] is True
        assert [r["epoch"] for r in logged[:-1]] == list(range(6))
        assert all(np.isfinite(r["loss"]) for r in logged[:-1])
        assert all(0 <= r[k] <= 1 for r in logged[:-1]
                   for k in ("accuracy", "attacked_accuracy", "verified_robustness"))

    def test_fractional_epoch_clock(self):
        tr, te = blob_split(200)
        rows = train(TrainConfig(goal="Point", epochs=3, batch_size=64, eval_limit=10), fresh_net(), tr, te).rows
        assert [r.t for r in rows] == [1.0, 2.0, 3.0]

    def test_determinism(self, tmp_path):
        tr, te = blob_split()
        cfg = dict(goal="Mix(Normal, Sub(0.5, Box), 0.5)", epsilon=0.1, epochs=2, batch_size=32, seed=7,
                   eval_limit=50)
        a = train(TrainConfig(**cfg), fresh_net(seed=3), tr, te)
        b = train(TrainConfig(**cfg), fresh_net(seed=3), tr, te)
        assert a.first_loss == b.first_loss
        assert [r.loss for r in a.rows] == [r.loss for r in b.rows]
        assert [c.to_json() for c in a.certificates] == [c.to_json() for c in b.certificates]
        c = train(TrainConfig(**{**cfg, "seed": 8}), fresh_net(seed=3), tr, te)
        assert c.rows[0].loss != a.rows[0].loss

    def test_checkpoint_round_trip(self, tmp_path):
        tr, te = blob_split()
        net = fresh_net()
        train(TrainConfig(goal="Baseline", epsilon=0.1, epochs=3, batch_size=32, schedule_scale=0.01,
                          out_dir=str(tmp_path)), net, tr, te)
        before = verified_robustness(net, te.x, te.y, 0.1).fraction
        other = fresh_net(seed=42)
        N.load_weights(other, tmp_path / "last.dfai")
        assert verified_robustness(other, te.x, te.y, 0.1).fraction == before
        assert (tmp_path / "best.dfai").exists()
        certs = (tmp_path / "certificates.jsonl").read_text().splitlines()
        assert len(certs) == len(te)

    def test_l2_and_sgd(self):
        tr, te = blob_split(200)
        report = train(TrainConfig(goal="Point", epochs=2, optimizer="sgd", lr=0.05, l2=1e-3,
                                   lr_milestones=(1,), eval_limit=20), fresh_net(), tr, te)
        assert np.isfinite(report.rows[-1].loss)

    def test_divergence_halts(self):
        tr, te = blob_split(200)
        net = fresh_net()
        for p in net.parameters():
            p.data[:] = 3e38
        with pytest.raises(TrainingDiverged, match="two consecutive"), np.errstate(all="ignore"):
            train(TrainConfig(goal="Box", epsilon=0.1, epochs=1, batch_size=32), net, tr, te)

    def test_evaluate_triad(self):
        tr, te = blob_split()
        stats, certs = evaluate(fresh_net(), te, 0.1, "hzono", 100)
        assert stats["verified_robustness"] <= stats["attacked_accuracy"] <= stats["accuracy"]
        assert stats["evaluated"] == 100 and len(certs) == 100


class TestHelpers:
    def test_batch_rng_streams(self):
        a = batch_rng(1, 0, 1).random(4)
        assert np.array_equal(a, batch_rng(1, 0, 1).random(4))
        assert not np.array_equal(a, batch_rng(1, 0, 2).random(4))
        assert not np.array_equal(a, batch_rng(2, 0, 1).random(4))

    def test_augment_shapes_and_content(self, rng):
        x = rng.uniform(size=(6, 3, 8, 8)).astype(np.float32)
        out = augment_batch(x, np.random.default_rng(0))
        assert out.shape == x.shape
        # each output is a shifted, possibly mirrored window of the zero-padded input
        for o, i in zip(out, x):
            padded = np.pad(i, ((0, 0), (4, 4), (4, 4)))
            found = any(np.array_equal(o, w) or np.array_equal(o, w[:, :, ::-1])
                        for dy in range(9) for dx in range(9) for w in [padded[:, dy:dy + 8, dx:dx + 8]])
            assert found
