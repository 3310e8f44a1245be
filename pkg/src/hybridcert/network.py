"""Network description language, parameters, and concrete/abstract forward passes.

A network file is a sequence of statements, one per line, ``#`` starting a
comment::

    input c=1 h=28 w=28
    flatten
    linear out=100
    relu
    correlate_all
    linear out=10

``input d=N`` declares a flat input. ``residual { ... } { ... }`` sums two
branches; a missing second block is the identity branch. ``normalize
mean=... std=...`` is a frozen per-channel affine map (comma-separated lists
allowed).
"""

from __future__ import annotations

import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import abstract_layers as AL
from . import tensor as T
from . import zonotope as Z
from .dsl import SCHEDULE_TYPES, DSLError, eval_schedule, format_schedule, parse_schedule
from .tensor import ShapeError, Tensor


class NetworkSyntaxError(ValueError):
    def __init__(self, msg: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {msg}" if line is not None else msg)


class NonFiniteBounds(FloatingPointError):
    def __init__(self, layer: str, kind: str):
        self.layer = layer
        super().__init__(f"abstract bounds became non-finite at layer {layer} ({kind}); "
                         "consider a decorrelate layer or a smaller width")


@dataclass(frozen=True)
class Layer:
    kind: str
    args: tuple = ()            # sorted (key, value) pairs
    branches: tuple = ()        # for residual: (layers_a, layers_b)
    line: int | None = field(default=None, compare=False)

    def arg(self, key):
        return dict(self.args)[key]


_INT_ARGS = {
    "input": None,  # handled separately
    "linear": ("out",),
    "conv": ("out", "k", "s", "p"),
    "relu": (),
    "flatten": (),
    "correlate_all": (),
    "correlate_fixed": ("k",),
    "correlate_max": ("k",),
    "correlate_maxpool": ("c", "w", "h", "s"),
    "decorrelate_all": (),
    "decorrelate_min": ("k",),
}
ABSTRACT_KINDS = {"correlate_all", "correlate_fixed", "correlate_max", "correlate_maxpool",
                  "decorrelate_all", "decorrelate_min", "deep_loss"}

_TOKEN = re.compile(r'\s*(?:(?P<brace>[{}])|(?P<kv>[A-Za-z_]\w*=(?:"[^"]*"|[^\s{}"]+))'
                    r'|(?P<word>[A-Za-z_]\w*))')


def _tokenize(text: str):
    toks = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0]
        pos = 0
        while pos < len(line):
            if not line[pos:].strip():
                break
            m = _TOKEN.match(line, pos)
            if not m:
                raise NetworkSyntaxError(f"cannot read {line[pos:].strip()!r}", lineno)
            kind = m.lastgroup
            toks.append((kind, m.group(kind), lineno))
            pos = m.end()
        toks.append(("eol", None, lineno))
    return toks


class _Parser:
    def __init__(self, text: str):
        self.toks = _tokenize(text)
        self.i = 0

    def _skip_eol(self):
        while self.i < len(self.toks) and self.toks[self.i][0] == "eol":
            self.i += 1

    def block(self, closing: bool) -> list[Layer]:
        layers = []
        while True:
            self._skip_eol()
            if self.i >= len(self.toks):
                if closing:
                    raise NetworkSyntaxError("unterminated residual block", self.toks[-1][2] if self.toks else None)
                return layers
            kind, val, line = self.toks[self.i]
            if kind == "brace" and val == "}":
                if not closing:
                    raise NetworkSyntaxError("unexpected '}'", line)
                self.i += 1
                return layers
            if kind != "word":
                raise NetworkSyntaxError(f"expected a layer name, found {val!r}", line)
            self.i += 1
            layers.append(self.statement(val, line))

    def statement(self, name: str, line: int) -> Layer:
        if name == "residual":
            return self.residual(line)
        kv = {}
        while self.i < len(self.toks) and self.toks[self.i][0] == "kv":
            key, _, value = self.toks[self.i][1].partition("=")
            if key in kv:
                raise NetworkSyntaxError(f"repeated argument {key!r}", line)
            kv[key] = value
            self.i += 1
        if self.i < len(self.toks) and self.toks[self.i][0] not in ("eol", "brace"):
            raise NetworkSyntaxError(f"unexpected {self.toks[self.i][1]!r} after {name}", line)
        return _make_layer(name, kv, line)

    def residual(self, line: int) -> Layer:
        branches = []
        while len(branches) < 2:
            j = self.i
            while j < len(self.toks) and self.toks[j][0] == "eol":
                j += 1
            if j >= len(self.toks) or self.toks[j][:2] != ("brace", "{"):
                break
            self.i = j + 1
            branches.append(tuple(self.block(closing=True)))
        if not branches:
            raise NetworkSyntaxError("residual needs at least one '{ ... }' block", line)
        if len(branches) == 1:
            branches.append(())
        return Layer("residual", (), tuple(branches), line)


def _int_arg(name: str, key: str, value: str, line: int) -> int:
    try:
        v = int(value)
    except ValueError:
        raise NetworkSyntaxError(f"{name}: {key} must be an integer, got {value!r}", line) from None
    zero_ok = key == "p" or (name == "decorrelate_min" and key == "k")
    if v < 0 or (v == 0 and not zero_ok):
        raise NetworkSyntaxError(f"{name}: {key} must be {'nonnegative' if zero_ok else 'positive'}, got {v}", line)
    return v


def _floats(name: str, key: str, value: str, line: int) -> tuple[float, ...]:
    try:
        return tuple(float(x) for x in value.split(","))
    except ValueError:
        raise NetworkSyntaxError(f"{name}: {key} must be a number list, got {value!r}", line) from None


def _expect_keys(name: str, kv: dict, want: set, line: int) -> None:
    if set(kv) != want:
        missing, extra = want - set(kv), set(kv) - want
        parts = []
        if missing:
            parts.append("missing " + ", ".join(sorted(missing)))
        if extra:
            parts.append("unexpected " + ", ".join(sorted(extra)))
        raise NetworkSyntaxError(f"{name}: " + "; ".join(parts), line)


def _make_layer(name: str, kv: dict, line: int) -> Layer:
    if name == "input":
        if set(kv) == {"d"}:
            return Layer("input", (("d", _int_arg(name, "d", kv["d"], line)),), line=line)
        _expect_keys(name, kv, {"c", "h", "w"}, line)
        return Layer("input", tuple(sorted((k, _int_arg(name, k, v, line)) for k, v in kv.items())), line=line)
    if name == "normalize":
        _expect_keys(name, kv, {"mean", "std"}, line)
        mean, std = _floats(name, "mean", kv["mean"], line), _floats(name, "std", kv["std"], line)
        if any(s == 0 for s in std):
            raise NetworkSyntaxError("normalize: std must be nonzero", line)
        return Layer("normalize", (("mean", mean), ("std", std)), line=line)
    if name == "deep_loss":
        if "f" in kv and kv["f"] not in AL.ACTIVATIONS:
            raise NetworkSyntaxError(f"deep_loss: unknown activation {kv['f']!r}", line)
        _expect_keys(name, kv, {"weight"} | ({"f"} & set(kv)), line)
        text = kv["weight"].strip('"')
        try:
            sched = parse_schedule(text)
        except DSLError as e:
            raise NetworkSyntaxError(f"deep_loss weight: {e}", line) from None
        return Layer("deep_loss", (("f", kv.get("f", "relu")), ("weight", sched)), line=line)
    if name not in _INT_ARGS:
        raise NetworkSyntaxError(f"unknown layer {name!r}", line)
    keys = _INT_ARGS[name]
    _expect_keys(name, kv, set(keys), line)
    return Layer(name, tuple(sorted((k, _int_arg(name, k, kv[k], line)) for k in keys)), line=line)


# -- shape inference and parameters ---------------------------------------------

def _conv_out(size: int, k: int, s: int, p: int, line) -> int:
    num = size + 2 * p - k
    if num < 0 or num % s:
        raise NetworkSyntaxError(f"conv: input size {size} with k={k} s={s} p={p} "
                                 "does not give an integer output size", line)
    return num // s + 1


def _infer(layers, shape, prefix, params):
    """Walk ``layers`` from input ``shape``; returns output shape and records parameter shapes."""
    for idx, layer in enumerate(layers):
        name = f"{prefix}{idx}"
        kind, line = layer.kind, layer.line
        if kind == "input":
            raise NetworkSyntaxError("input must appear exactly once, as the first statement", line)
        if kind == "linear":
            if len(shape) != 1:
                raise NetworkSyntaxError(f"linear needs a flat input, got shape {shape}; add flatten", line)
            out = layer.arg("out")
            params[f"{name}.weight"] = (out, shape[0])
            params[f"{name}.bias"] = (out,)
            shape = (out,)
        elif kind == "conv":
            if len(shape) != 3:
                raise NetworkSyntaxError(f"conv needs a [c,h,w] input, got shape {shape}", line)
            out, k, s, p = (layer.arg(x) for x in ("out", "k", "s", "p"))
            params[f"{name}.weight"] = (out, shape[0], k, k)
            params[f"{name}.bias"] = (out,)
            shape = (out, _conv_out(shape[1], k, s, p, line), _conv_out(shape[2], k, s, p, line))
        elif kind == "flatten":
            shape = (int(np.prod(shape)),)
        elif kind == "normalize":
            channels = shape[0] if len(shape) == 3 else 1
            for key in ("mean", "std"):
                if len(layer.arg(key)) not in (1, channels):
                    raise NetworkSyntaxError(f"normalize: {key} needs 1 or {channels} values", line)
        elif kind in ("correlate_fixed", "correlate_max"):
            p = int(np.prod(shape))
            if layer.arg("k") > p:
                raise NetworkSyntaxError(f"{kind}: k={layer.arg('k')} exceeds {p} variables", line)
        elif kind == "correlate_maxpool":
            c, w, h, s = (layer.arg(x) for x in ("c", "w", "h", "s"))
            if len(shape) != 3 or c > shape[0] or h > shape[1] or w > shape[2]:
                raise NetworkSyntaxError(f"correlate_maxpool window ({c},{h},{w}) does not fit shape {shape}", line)
        elif kind == "residual":
            a, b = layer.branches
            sa = _infer(a, shape, f"{name}.a", params)
            sb = _infer(b, shape, f"{name}.b", params)
            if sa != sb:
                raise NetworkSyntaxError(f"residual branches produce shapes {sa} and {sb}", line)
            shape = sa
    return shape


def _input_shape(layer: Layer) -> tuple[int, ...]:
    args = dict(layer.args)
    if "d" in args:
        return (args["d"],)
    return (args["c"], args["h"], args["w"])


@dataclass
class NetworkIR:
    layers: tuple[Layer, ...]
    params: dict[str, Tensor]
    input_shape: tuple[int, ...]
    output_shape: tuple[int, ...]
    value_range: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        if self.value_range[0] > self.value_range[1]:
            raise ValueError(f"data range {self.value_range} is empty")

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: v.shape for k, v in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def init_params(self, rng: np.random.Generator, dtype=None) -> None:
        """Uniform(+-sqrt(6/fan_in)) weights and zero biases."""
        dtype = dtype or T.default_dtype()
        for name, p in self.params.items():
            if name.endswith(".bias"):
                p.data = np.zeros(p.shape, dtype=dtype)
            else:
                fan_in = int(np.prod(p.shape[1:]))
                bound = np.sqrt(6.0 / fan_in)
                p.data = rng.uniform(-bound, bound, size=p.shape).astype(dtype)

    def astype(self, dtype) -> None:
        for p in self.params.values():
            p.data = p.data.astype(dtype)


def parse_network(text: str, value_range=(0.0, 1.0), rng: np.random.Generator | None = None) -> NetworkIR:
    layers = _Parser(text).block(closing=False)
    if not layers or layers[0].kind != "input":
        line = layers[0].line if layers else None
        raise NetworkSyntaxError("the first statement must be input", line)
    in_shape = _input_shape(layers[0])
    shapes: dict[str, tuple] = {}
    out_shape = _infer(layers[1:], in_shape, "", shapes)
    params = {name: Tensor(np.zeros(s, dtype=T.default_dtype()), requires_grad=True) for name, s in shapes.items()}
    net = NetworkIR(tuple(layers), params, in_shape, out_shape, tuple(value_range))
    net.init_params(rng if rng is not None else np.random.default_rng(0))
    return net


def load_network(path, value_range=(0.0, 1.0), rng=None) -> NetworkIR:
    return parse_network(Path(path).read_text(), value_range, rng)


# -- printing -------------------------------------------------------------------

def _format_value(v) -> str:
    if isinstance(v, tuple):
        return ",".join(repr(float(x)) for x in v)
    if isinstance(v, SCHEDULE_TYPES):
        return f'"{format_schedule(v)}"'
    return str(v)


def _format_layers(layers, indent: str) -> list[str]:
    out = []
    for layer in layers:
        if layer.kind == "input":
            args = dict(layer.args)
            keys = ("d",) if "d" in args else ("c", "h", "w")
            out.append(indent + "input " + " ".join(f"{k}={args[k]}" for k in keys))
        elif layer.kind == "residual":
            out.append(indent + "residual {")
            out.extend(_format_layers(layer.branches[0], indent + "  "))
            out.append(indent + "} {")
            out.extend(_format_layers(layer.branches[1], indent + "  "))
            out.append(indent + "}")
        else:
            parts = [layer.kind] + [f"{k}={_format_value(v)}" for k, v in layer.args]
            out.append(indent + " ".join(parts))
    return out


def format_network(net_or_layers) -> str:
    layers = net_or_layers.layers if isinstance(net_or_layers, NetworkIR) else net_or_layers
    return "\n".join(_format_layers(layers, "")) + "\n"


def structure(layers) -> tuple:
    """Line-number-free structural key of a layer list."""
    return tuple((l.kind, l.args, tuple(structure(b) for b in l.branches)) for l in layers)


def shape_trace(net: NetworkIR) -> list[str]:
    lines = []
    shape = net.input_shape

    def walk(layers, shape, indent):
        for layer in layers:
            if layer.kind == "input":
                lines.append(f"{indent}input -> {shape}")
                continue
            if layer.kind == "residual":
                lines.append(f"{indent}residual {{")
                sa = walk(layer.branches[0], shape, indent + "  ")
                lines.append(f"{indent}}} {{")
                walk(layer.branches[1], shape, indent + "  ")
                lines.append(f"{indent}}} -> {sa}")
                shape = sa
                continue
            shape = _infer([layer], shape, "_", {})
            lines.append(f"{indent}{_format_layers([layer], '')[0]} -> {shape}")
        return shape

    walk(net.layers, shape, "")
    n = sum(int(np.prod(p.shape)) for p in net.params.values())
    lines.append(f"parameters: {n}")
    return lines


# -- forward passes -------------------------------------------------------------

def _norm_arrays(layer: Layer, shape, dtype):
    mean = np.asarray(layer.arg("mean"), dtype=dtype)
    std = np.asarray(layer.arg("std"), dtype=dtype)
    if len(shape) == 3:
        mean, std = mean.reshape(-1, 1, 1), std.reshape(-1, 1, 1)
    return mean, std


def _concrete(net: NetworkIR, layers, x: Tensor, prefix: str) -> Tensor:
    for idx, layer in enumerate(layers):
        name = f"{prefix}{idx}"
        kind = layer.kind
        if kind == "linear":
            x = T.matmul(x, net.params[f"{name}.weight"].T) + net.params[f"{name}.bias"]
        elif kind == "conv":
            x = T.conv2d(x, net.params[f"{name}.weight"], net.params[f"{name}.bias"],
                         layer.arg("s"), layer.arg("p"))
        elif kind == "relu":
            x = x.relu()
        elif kind == "flatten":
            x = x.reshape(x.shape[0], -1)
        elif kind == "normalize":
            mean, std = _norm_arrays(layer, x.shape[1:], x.dtype)
            x = (x - mean) * (1.0 / std)
        elif kind == "residual":
            a, b = layer.branches
            x = _concrete(net, a, x, f"{name}.a") + _concrete(net, b, x, f"{name}.b")
    return x


def concrete_forward(net: NetworkIR, x) -> Tensor:
    """Logits for a batch ``x`` of shape [N, *input_shape]; abstract layers are identities."""
    x = x if isinstance(x, Tensor) else T.tensor(x)
    if x.shape[1:] != net.input_shape:
        raise ShapeError(f"input shape {x.shape[1:]} does not match network input {net.input_shape}")
    return _concrete(net, net.layers[1:], x, "")


@dataclass
class _Pass:
    t: float
    deep_terms: list
    affine_seen: bool = False
    deep_losses: bool = True
    abstract_layers: bool = True


def _check(h: Z.HybridZonotope, name: str, kind: str) -> None:
    if not Z.is_finite(h):
        raise NonFiniteBounds(name, kind)


def _abstract(net: NetworkIR, layers, h: Z.HybridZonotope, prefix: str, st: _Pass) -> Z.HybridZonotope:
    for idx, layer in enumerate(layers):
        name = f"{prefix}{idx}"
        kind = layer.kind
        if kind in ABSTRACT_KINDS and not st.abstract_layers:
            continue
        if kind == "linear":
            h = Z.affine_transform(h, net.params[f"{name}.weight"], net.params[f"{name}.bias"])
            st.affine_seen = True
        elif kind == "conv":
            h = Z.conv_transform(h, net.params[f"{name}.weight"], net.params[f"{name}.bias"],
                                 layer.arg("s"), layer.arg("p"))
            st.affine_seen = True
        elif kind == "relu":
            h = Z.relu_transform(h)
        elif kind == "flatten":
            h = h.flatten()
        elif kind == "normalize":
            mean, std = _norm_arrays(layer, h.shape, h.center.dtype)
            h = Z.scale_shift(h, 1.0 / std, -mean / std)
        elif kind == "correlate_all":
            h = AL.correlate_by(h, AL.CorrelationStrategy.all(), not st.affine_seen)
        elif kind == "correlate_fixed":
            h = AL.correlate_by(h, AL.CorrelationStrategy.fixed(layer.arg("k")), not st.affine_seen)
        elif kind == "correlate_max":
            h = AL.correlate_by(h, AL.CorrelationStrategy.max(layer.arg("k")), not st.affine_seen)
        elif kind == "correlate_maxpool":
            pool = tuple(layer.arg(x) for x in ("c", "w", "h", "s"))
            h = AL.correlate_by(h, AL.CorrelationStrategy.maxpool(*pool), not st.affine_seen)
        elif kind == "decorrelate_all":
            h = AL.decorrelate_all(h)
        elif kind == "decorrelate_min":
            # keep at most k terms: fewer may exist, e.g. in a pure Box pass
            h = AL.decorrelate_min(h, min(layer.arg("k"), h.m))
        elif kind == "deep_loss":
            # a degenerate element has no overlap to penalise
            if st.deep_losses and np.any(Z.total_error(h).data != 0):
                weight = eval_schedule(layer.arg("weight"), st.t)
                st.deep_terms.append((weight, AL.deep_loss_of(h, layer.arg("f"))))
        elif kind == "residual":
            a, b = layer.branches
            seen = st.affine_seen
            ha = _abstract(net, a, h, f"{name}.a", st)
            seen_a, st.affine_seen = st.affine_seen, seen
            hb = _abstract(net, b, h, f"{name}.b", st)
            st.affine_seen = st.affine_seen or seen_a
            h = Z.add_transform(ha, hb)
        _check(h, name, kind)
    return h


def abstract_forward(net: NetworkIR, h: Z.HybridZonotope, t: float = 0.0, deep_losses: bool = True,
                     abstract_layers: bool = True) -> tuple[Z.HybridZonotope, list]:
    """Push ``h`` through the network; returns the output element and DeepLoss terms ``(weight, loss)``.

    With ``abstract_layers=False`` correlation, decorrelation and DeepLoss layers are skipped.
    """
    if h.shape != net.input_shape:
        raise ShapeError(f"element shape {h.shape} does not match network input {net.input_shape}")
    st = _Pass(t, [], deep_losses=deep_losses, abstract_layers=abstract_layers)
    return _abstract(net, net.layers[1:], h, "", st), st.deep_terms


# -- weights file ---------------------------------------------------------------

MAGIC = b"DFAI"
VERSION = 1


class WeightsFormatError(ValueError):
    pass


def save_weights(net: NetworkIR, path) -> None:
    chunks = [MAGIC, struct.pack("<I", VERSION)]
    for p in net.params.values():
        chunks.append(struct.pack("<I", p.ndim))
        chunks.append(struct.pack(f"<{p.ndim}I", *p.shape))
        chunks.append(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_weights(net: NetworkIR, path) -> None:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise WeightsFormatError(f"{path}: bad magic {buf[:4]!r}")
    pos = 4

    def u32s(n):
        nonlocal pos
        if pos + 4 * n > len(buf):
            raise WeightsFormatError(f"{path}: truncated at offset {pos}")
        vals = struct.unpack_from(f"<{n}I", buf, pos)
        pos += 4 * n
        return vals

    (version,) = u32s(1)
    if version != VERSION:
        raise WeightsFormatError(f"{path}: unsupported version {version}")
    loaded = []
    for name, p in net.params.items():
        (rank,) = u32s(1)
        dims = u32s(rank)
        if tuple(dims) != p.shape:
            raise WeightsFormatError(f"{path}: parameter {name} has shape {tuple(dims)}, network expects {p.shape}")
        size = 4 * int(np.prod(dims))
        if pos + size > len(buf):
            raise WeightsFormatError(f"{path}: truncated at offset {pos}")
        loaded.append(np.frombuffer(buf, dtype="<f4", count=size // 4, offset=pos).reshape(dims))
        pos += size
    if pos != len(buf):
        raise WeightsFormatError(f"{path}: {len(buf) - pos} trailing bytes")
    for p, arr in zip(net.params.values(), loaded):
        p.data = arr.astype(p.dtype)
