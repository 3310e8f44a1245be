import numpy as np
import pytest

from hybridcert import tensor as T


@pytest.fixture
def f64():
    with T.precision(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def central_difference(f, arrays, step=1e-5):
    """Numerical gradient of scalar ``f()`` w.r.t. each array in ``arrays`` (modified in place)."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = a[i]
            a[i] = old + step
            hi = f()
            a[i] = old - step
            lo = f()
            a[i] = old
            g[i] = (hi - lo) / (2 * step)
        grads.append(g)
    return grads


def rel_error(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b))))


# Toy three-neuron pipeline with hand-set weights; every layer is exact up to the
# correlation bookkeeping, so all intermediate triplets are known in closed form.
TOY_LAYERS = [
    "linear out=3",
    "correlate_max k=2",
    "linear out=3",
    "decorrelate_min k=1",
    "linear out=3",
]
TOY_WEIGHTS = {
    "0.weight": [[0.25, 0.25, 0.25], [0.5, 0.5, 0.25], [0.25, 0.25, 0.0]],
    "2.weight": [[4 / 3, -0.8, 0.0], [4 / 3, 0.4, 0.0], [0.0, 0.0, 0.0]],
    # Best attainable last layer: the second and third rows reproduce the annotated
    # values, the first row cannot (see test_toy_first_output_unreachable).
    "4.weight": [[1.0, 0.0, 0.0], [0.5, 0.0, 0.0], [0.0, 0.0, 0.0]],
}


def toy_network(depth=len(TOY_LAYERS)):
    """The toy net truncated after ``depth`` layers, weights set, biases zero, in f64."""
    from hybridcert import network as N

    net = N.parse_network("\n".join(["input d=3"] + TOY_LAYERS[:depth]))
    net.astype(np.float64)
    for name, p in net.params.items():
        p.data = np.asarray(TOY_WEIGHTS[name], dtype=np.float64) if name in TOY_WEIGHTS else np.zeros(p.shape)
    return net


def toy_output(depth=len(TOY_LAYERS)):
    """Abstract output of the truncated toy net on the unit box around 0."""
    from hybridcert import network as N
    from hybridcert import zonotope as Z

    with T.precision(np.float64):
        h = Z.abstract_box(-np.ones((1, 3)), np.ones((1, 3)))
        out, _ = N.abstract_forward(toy_network(depth), h)
    return out


def triplets(h):
    """Per-variable (center, uncorr, corr tuple) of the first example, as floats."""
    return [(float(h.center.data[0, i]), float(h.uncorr.data[0, i]),
             tuple(float(v) for v in h.corr.data[:, 0, i])) for i in range(h.shape[0])]


def random_mlp_text(rng, abstract=True, max_layers=4, max_width=64, d=None):
    """Random small fully connected network description, optionally with abstract layers."""
    d = d or int(rng.integers(1, 9))
    lines = [f"input d={d}"]
    width = d
    for _ in range(int(rng.integers(0, max_layers))):
        width = int(rng.integers(1, max_width + 1))
        lines.append(f"linear out={width}")
        if rng.random() < 0.8:
            lines.append("relu")
        if abstract and rng.random() < 0.6:
            kind = rng.choice(["correlate_all", "correlate_fixed", "correlate_max", "decorrelate_all",
                               "decorrelate_min", "deep_loss"])
            if kind in ("correlate_fixed", "correlate_max"):
                lines.append(f"{kind} k={int(rng.integers(1, width + 1))}")
            elif kind == "decorrelate_min":
                lines.append(f"decorrelate_min k={int(rng.integers(0, 4))}")
            elif kind == "deep_loss":
                lines.append('deep_loss weight="Lin(0,1,1,1)"')
            else:
                lines.append(kind)
    lines.append(f"linear out={int(rng.integers(2, 11))}")
    return "\n".join(lines)


def tiny_net(seed=0):
    """2-16-16-2 ReLU network in f64."""
    from hybridcert import network as N

    net = N.parse_network("input d=2\nlinear out=16\nrelu\nlinear out=16\nrelu\nlinear out=2",
                          value_range=(-1.0, 1.0), rng=np.random.default_rng(seed))
    net.astype(np.float64)
    for name, p in net.params.items():
        if name.endswith(".bias"):
            p.data = np.random.default_rng(seed + 1).normal(scale=0.1, size=p.shape)
    return net


def norm_rel_error(a, b):
    """``|a - b| / max(|a|, |b|)`` in the Euclidean norm over the whole array."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale == 0 else float(np.linalg.norm(a - b) / scale)


def param_gradient_check(loss_fn, net, step=1e-5):
    """Worst per-parameter relative error between autodiff and central differences."""
    params = net.parameters()
    analytic = T.grad(loss_fn(), params)
    numeric = central_difference(lambda: float(loss_fn().data), [p.data for p in params], step)
    return max(norm_rel_error(a, n) for a, n in zip(analytic, numeric))


# One line per acceptance criterion, printed at the end of the session.
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record_acceptance(number: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[number] = (bool(ok), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
