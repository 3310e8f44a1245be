import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hybridcert import network as N
from hybridcert import tensor as T
from hybridcert import zonotope as Z
from hybridcert.tensor import ShapeError

from conftest import random_mlp_text, toy_network, toy_output, triplets


class TestParse:
    def test_minimal_image_net(self):
        net = N.parse_network("input c=1 h=8 w=8\nflatten\nlinear out=10")
        assert len(net.layers) == 3
        assert net.input_shape == (1, 8, 8) and net.output_shape == (10,)
        assert net.param_shapes() == {"1.weight": (10, 64), "1.bias": (10,)}

    def test_comments_and_blank_lines(self):
        net = N.parse_network("# header\n\ninput d=4   # flat\nlinear out=2\n\n")
        assert [l.kind for l in net.layers] == ["input", "linear"]

    def test_toy_net_parses(self):
        net = toy_network()
        assert [l.kind for l in net.layers] == ["input", "linear", "correlate_max", "linear",
                                                 "decorrelate_min", "linear"]

    def test_layer_before_input(self):
        with pytest.raises(N.NetworkSyntaxError) as e:
            N.parse_network("correlate_max k=2\ninput d=3\nlinear out=3")
        assert e.value.line == 1

    def test_second_input(self):
        with pytest.raises(N.NetworkSyntaxError) as e:
            N.parse_network("input d=3\nlinear out=3\ninput d=3")
        assert e.value.line == 3

    @pytest.mark.parametrize("text, line", [
        ("input d=3\nfrobnicate", 2),
        ("input d=3\nlinear", 2),
        ("input d=3\nlinear out=3 k=2", 2),
        ("input d=3\nlinear out=zero", 2),
        ("input d=3\nlinear out=0", 2),
        ("input c=1 h=4 w=4\nlinear out=3", 2),
        ("input c=1 h=5 w=5\nconv out=2 k=2 s=2 p=0", 2),
        ("input d=3\nlinear out=3\ncorrelate_max k=4", 3),
        ("input d=3\ndeep_loss weight=\"Lin(0,1\"", 2),
        ("input d=3\nnormalize mean=0 std=0", 2),
        ("input d=4\nresidual {\nlinear out=3\n}", 2),
        ("input d=4\nresidual {\nlinear out=4\n", 3),
    ])
    def test_errors_carry_line(self, text, line):
        with pytest.raises(N.NetworkSyntaxError) as e:
            N.parse_network(text)
        assert e.value.line == line

    def test_conv_and_pool_shapes(self):
        net = N.parse_network("input c=3 h=8 w=8\nconv out=4 k=3 s=1 p=1\nrelu\n"
                              "correlate_maxpool c=1 w=2 h=2 s=2\nconv out=8 k=4 s=2 p=1\nflatten\nlinear out=5")
        assert net.param_shapes()["0.weight"] == (4, 3, 3, 3)
        assert net.param_shapes()["3.weight"] == (8, 4, 4, 4)
        assert net.param_shapes()["5.weight"] == (5, 128)

    def test_format_round_trip(self):
        text = ("input c=1 h=6 w=6\nnormalize mean=0.5 std=0.25\nconv out=2 k=3 s=1 p=1\nrelu\n"
                "residual {\n  conv out=2 k=3 s=1 p=1\n  relu\n} {\n}\ncorrelate_fixed k=3\nflatten\n"
                "linear out=7\ndecorrelate_min k=2\ndeep_loss weight=\"Until(5, Lin(0, 1, 2, 3), 0)\" f=relu\n"
                "linear out=3")
        layers = N.parse_network(text).layers
        again = N.parse_network(N.format_network(layers)).layers
        assert N.structure(layers) == N.structure(again)

    def test_shape_trace(self):
        trace = N.shape_trace(N.parse_network("input c=1 h=8 w=8\nflatten\nlinear out=10"))
        assert any("(10,)" in line for line in trace)
        assert trace[-1] == "parameters: 650"

    def test_parameter_count_of_shipped_mnist_net(self):
        from pathlib import Path
        net = N.load_network(Path(__file__).parents[1] / "nets" / "mnist_ffnn.net")
        assert sum(p.data.size for p in net.parameters()) == 119910
        relus = sum(1 for l in net.layers if l.kind == "relu")
        assert relus == 5


class TestConcreteForward:
    def test_abstract_layers_only_is_identity(self, rng):
        net = N.parse_network("input d=5\ncorrelate_all\ndecorrelate_min k=1\ncorrelate_max k=2\n"
                              "decorrelate_all\ndeep_loss weight=\"1\"")
        x = rng.normal(size=(4, 5)).astype(np.float32)
        np.testing.assert_array_equal(N.concrete_forward(net, x).data, x)

    def test_identity_residual_doubles(self, rng):
        net = N.parse_network("input d=4\nresidual {\n} {\n}")
        x = rng.normal(size=(3, 4)).astype(np.float32)
        np.testing.assert_array_equal(N.concrete_forward(net, x).data, 2 * x)

    def test_normalize(self):
        net = N.parse_network("input c=2 h=1 w=1\nnormalize mean=1,2 std=2,4")
        x = np.array([[[[3.0]], [[6.0]]]], dtype=np.float32)
        np.testing.assert_allclose(N.concrete_forward(net, x).data.ravel(), [1.0, 1.0])

    def test_input_shape_checked(self):
        net = N.parse_network("input d=3\nlinear out=2")
        with pytest.raises(ShapeError):
            N.concrete_forward(net, np.zeros((1, 4), dtype=np.float32))

    def test_abstract_layers_do_not_change_predictions(self, rng):
        for _ in range(10):
            text = random_mlp_text(rng)
            with_layers = N.parse_network(text, rng=np.random.default_rng(7))
            plain_text = "\n".join(l for l in text.splitlines() if l.split()[0] not in N.ABSTRACT_KINDS)
            plain = N.parse_network(plain_text)
            for a, b in zip(with_layers.parameters(), plain.parameters()):
                b.data = a.data.copy()
            x = rng.normal(size=(5,) + with_layers.input_shape).astype(np.float32)
            np.testing.assert_array_equal(N.concrete_forward(with_layers, x).data,
                                          N.concrete_forward(plain, x).data)

    def test_skipping_abstract_layers_gives_box_pass(self, rng, f64):
        net = N.parse_network("input d=3\nlinear out=4\nrelu\ncorrelate_all\nlinear out=4\n"
                              "decorrelate_min k=1\nrelu\nlinear out=2", rng=rng)
        net.astype(np.float64)
        plain = N.parse_network("input d=3\nlinear out=4\nrelu\nlinear out=4\nrelu\nlinear out=2")
        plain.astype(np.float64)
        for a, b in zip(net.parameters(), plain.parameters()):
            b.data = a.data.copy()
        h = Z.abstract_box(np.zeros((2, 3)), np.ones((2, 3)))
        skipped, _ = N.abstract_forward(net, h, abstract_layers=False)
        box, _ = N.abstract_forward(plain, h)
        assert skipped.m == 0
        np.testing.assert_array_equal(skipped.center.data, box.center.data)
        np.testing.assert_array_equal(skipped.uncorr.data, box.uncorr.data)


class TestToyPipeline:
    """Triplets of the three-neuron toy pipeline after every layer."""

    def test_after_first_affine(self):
        assert triplets(toy_output(1)) == [(0, 0.75, ()), (0, 1.25, ()), (0, 0.5, ())]

    def test_after_correlate_max(self):
        assert triplets(toy_output(2)) == [(0, 0, (0.75, 0)), (0, 0, (0, 1.25)), (0, 0.5, (0, 0))]

    def test_after_second_affine(self):
        got = triplets(toy_output(3))
        want = [(0, 0, (1, -1)), (0, 0, (1, 0.5)), (0, 0, (0, 0))]
        for g, w in zip(got, want):
            assert g[:2] == w[:2]
            np.testing.assert_allclose(g[2], w[2], rtol=0, atol=1e-15)

    def test_after_decorrelate_min(self):
        got = triplets(toy_output(4))
        want = [(0, 1, (1,)), (0, 0.5, (1,)), (0, 0, (0,))]
        np.testing.assert_allclose(np.array([[g[0], g[1], *g[2]] for g in got]),
                                   np.array([[w[0], w[1], *w[2]] for w in want]), rtol=0, atol=1e-15)

    def test_final_outputs_match_annotation(self):
        # The annotated first output <0, 0, (1)> is asserted exactly as stated; it cannot be
        # produced by any last-layer weights, so this assertion is expected to fail.
        got = triplets(toy_output())
        want = [(0, 0, (1,)), (0, 0.5, (0.5,)), (0, 0, (0,))]
        np.testing.assert_allclose(np.array([[g[0], g[1], *g[2]] for g in got]),
                                   np.array([[w[0], w[1], *w[2]] for w in want]), rtol=0, atol=1e-15)

    def test_final_attainable_outputs(self):
        got = triplets(toy_output())
        np.testing.assert_allclose([got[1][0], got[1][1], *got[1][2]], [0, 0.5, 0.5], atol=1e-15)
        np.testing.assert_allclose([got[2][0], got[2][1], *got[2][2]], [0, 0, 0], atol=1e-15)

    @settings(max_examples=300, deadline=None)
    @given(st.floats(-10, 10), st.floats(-10, 10), st.floats(-10, 10))
    def test_toy_first_output_unreachable(self, a, b, c):
        # After DecorrelateMin the inputs are <0,1,(1)>, <0,0.5,(1)>, <0,0,(0)>. A row (a, b, c)
        # yields uncorrelated error |a| + 0.5|b| and correlated coefficient a + b, so zero
        # uncorrelated error forces a zero correlated coefficient.
        net = toy_network()
        net.params["4.weight"].data = np.array([[a, b, c], [0, 0, 0], [0, 0, 0]], dtype=np.float64)
        with T.precision(np.float64):
            out, _ = N.abstract_forward(net, Z.abstract_box(-np.ones((1, 3)), np.ones((1, 3))))
        center, uncorr, corr = triplets(out)[0]
        assert not (uncorr == 0 and corr == (1.0,))
        np.testing.assert_allclose(uncorr, abs(a) + 0.5 * abs(b), rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(corr[0], a + b, rtol=1e-12, atol=1e-12)


class TestAbstractForward:
    def test_degenerate_input_matches_concrete(self, rng, f64):
        for _ in range(10):
            net = N.parse_network(random_mlp_text(rng), rng=rng)
            net.astype(np.float64)
            x = rng.normal(size=(3,) + net.input_shape)
            out, _ = N.abstract_forward(net, Z.point(x))
            np.testing.assert_allclose(out.center.data, N.concrete_forward(net, x).data, rtol=1e-12, atol=1e-12)
            np.testing.assert_array_equal(Z.total_error(out).data, 0)

    def test_linear_only_degenerate_has_zero_error(self, f64):
        net = N.parse_network("input d=3\nlinear out=4\nlinear out=2")
        net.astype(np.float64)
        out, _ = N.abstract_forward(net, Z.point(np.ones((1, 3))))
        np.testing.assert_array_equal(Z.total_error(out).data, 0)

    def test_sampled_points_inside_output(self, rng, f64):
        for _ in range(5):
            net = N.parse_network(random_mlp_text(rng), rng=rng)
            net.astype(np.float64)
            lo = rng.uniform(-1, 0, size=(2,) + net.input_shape)
            hi = lo + rng.uniform(0, 0.5, size=lo.shape)
            out, _ = N.abstract_forward(net, Z.abstract_box(lo, hi))
            box = Z.interval_concretize(out)
            xs = rng.uniform(lo, hi, size=(500,) + lo.shape)
            ys = N.concrete_forward(net, xs.reshape((-1,) + net.input_shape)).data.reshape(500, *out.center.shape)
            for y in ys:
                assert box.contains(y, rtol=1e-9, atol=1e-9).all()

    def test_deep_loss_terms_collected(self, f64):
        net = N.parse_network("input d=3\nlinear out=4\ndeep_loss weight=\"Lin(0, 1, 0, 10)\"\nlinear out=2")
        net.astype(np.float64)
        h = Z.abstract_box(-np.ones((1, 3)), np.ones((1, 3)))
        _, terms = N.abstract_forward(net, h, t=5.0)
        assert len(terms) == 1 and terms[0][0] == 0.5
        _, none = N.abstract_forward(net, h, deep_losses=False)
        assert none == []

    def test_deep_loss_skipped_for_degenerate(self, f64):
        net = N.parse_network("input d=3\nlinear out=4\ndeep_loss weight=\"1\"")
        net.astype(np.float64)
        _, terms = N.abstract_forward(net, Z.point(np.ones((1, 3))))
        assert terms == []

    def test_overflow_names_layer(self):
        net = N.parse_network("input d=2\nlinear out=2\nrelu\nlinear out=2")
        net.params["0.weight"].data[:] = 1.0
        net.params["0.bias"].data[:] = 1.0
        net.params["2.weight"].data[:] = 3e38
        h = Z.abstract_box(np.zeros((1, 2), dtype=np.float32), np.ones((1, 2), dtype=np.float32))
        with pytest.raises(N.NonFiniteBounds) as e, np.errstate(over="ignore"):
            N.abstract_forward(net, h)
        assert "2" in str(e.value)

    def test_maxpool_correlation_at_input_ranks_by_center(self, f64):
        # Before any affine layer the pooling statistic is the center, afterwards the radius.
        net = N.parse_network("input c=1 h=1 w=2\ncorrelate_maxpool c=1 w=2 h=1 s=2")
        lo = np.array([[[[0.8, 0.0]]]])
        hi = np.array([[[[1.0, 0.6]]]])
        out, _ = N.abstract_forward(net, Z.abstract_box(lo, hi))
        assert out.m == 1
        np.testing.assert_allclose(out.uncorr.data.ravel(), [0.0, 0.3])

    def test_residual_identity_pair_doubles(self, f64):
        net = N.parse_network("input d=2\nresidual {\n} {\n}")
        out, _ = N.abstract_forward(net, Z.abstract_box(np.zeros((1, 2)), np.ones((1, 2))))
        np.testing.assert_array_equal(out.center.data, [[1, 1]])
        np.testing.assert_array_equal(Z.total_error(out).data, [[1, 1]])


class TestWeights:
    def test_round_trip(self, tmp_path, rng):
        text = "input c=1 h=4 w=4\nconv out=2 k=3 s=1 p=0\nflatten\nlinear out=3"
        a = N.parse_network(text, rng=rng)
        N.save_weights(a, tmp_path / "w.dfai")
        b = N.parse_network(text, rng=np.random.default_rng(99))
        N.load_weights(b, tmp_path / "w.dfai")
        for name in a.params:
            np.testing.assert_array_equal(a.params[name].data, b.params[name].data)

    def test_bad_magic(self, tmp_path):
        (tmp_path / "w.dfai").write_bytes(b"NOPE" + bytes(16))
        with pytest.raises(N.WeightsFormatError, match="magic"):
            N.load_weights(N.parse_network("input d=2\nlinear out=1"), tmp_path / "w.dfai")

    def test_shape_mismatch(self, tmp_path):
        N.save_weights(N.parse_network("input d=2\nlinear out=3"), tmp_path / "w.dfai")
        with pytest.raises(N.WeightsFormatError, match="shape"):
            N.load_weights(N.parse_network("input d=2\nlinear out=1"), tmp_path / "w.dfai")

    def test_truncated(self, tmp_path):
        net = N.parse_network("input d=2\nlinear out=3")
        N.save_weights(net, tmp_path / "w.dfai")
        data = (tmp_path / "w.dfai").read_bytes()
        (tmp_path / "w.dfai").write_bytes(data[:-3])
        with pytest.raises(N.WeightsFormatError, match="truncated"):
            N.load_weights(net, tmp_path / "w.dfai")

    def test_trailing_bytes(self, tmp_path):
        net = N.parse_network("input d=2\nlinear out=3")
        N.save_weights(net, tmp_path / "w.dfai")
        with open(tmp_path / "w.dfai", "ab") as f:
            f.write(b"\0")
        with pytest.raises(N.WeightsFormatError, match="trailing"):
            N.load_weights(net, tmp_path / "w.dfai")
