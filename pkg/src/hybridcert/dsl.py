"""Training-objective language: schedules and goal constructors.

Grammar::

    expr  := NUMBER | call
    call  := IDENT [ "_" INT ] [ "(" expr ("," expr)* ")" ]

Schedules are ``Lin(a, b, m, n)``, ``Until(m, s1, s2)`` and plain numbers
(constants, also spelled ``Const(v)``). Goals are ``Point``, ``Normal``,
``Uniform``, ``IFGSM_k`` / ``IFGSM(k)``, ``Box``, ``Mix(g1, g2, lam)``,
``Sub(delta, g)``, ``Sample(delta, [r,] gs, gt)`` and ``BiSample(g1, g2)``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Union


class DSLError(ValueError):
    def __init__(self, msg: str, column: int | None = None, text: str | None = None):
        self.column = column
        where = f" at column {column}" if column is not None else ""
        super().__init__(f"{msg}{where}" + (f": {text!r}" if text is not None else ""))


# -- schedules ------------------------------------------------------------------

@dataclass(frozen=True)
class Const:
    value: float


@dataclass(frozen=True)
class Lin:
    start: float
    end: float
    wait: float
    span: float

    def __post_init__(self):
        if self.span <= 0:
            raise DSLError("Lin needs a positive annealing length")
        if self.wait < 0:
            raise DSLError("Lin needs a nonnegative start time")


@dataclass(frozen=True)
class Until:
    switch: float
    first: "Schedule"
    then: "Schedule"

    def __post_init__(self):
        if self.switch < 0:
            raise DSLError("Until needs a nonnegative switch time")


Schedule = Union[Const, Lin, Until]


def eval_schedule(s: Schedule, t: float) -> float:
    if isinstance(s, Const):
        return s.value
    if isinstance(s, Lin):
        if t <= s.wait:
            return s.start
        if t >= s.wait + s.span:
            return s.end
        return s.start + (s.end - s.start) * (t - s.wait) / s.span
    if isinstance(s, Until):
        return eval_schedule(s.first, t) if t < s.switch else eval_schedule(s.then, t - s.switch)
    raise TypeError(f"not a schedule: {s!r}")


def scale_schedule(s: Schedule, factor: float) -> Schedule:
    """Stretch every time horizon of ``s`` by ``factor``."""
    if isinstance(s, Lin):
        return Lin(s.start, s.end, s.wait * factor, s.span * factor)
    if isinstance(s, Until):
        return Until(s.switch * factor, scale_schedule(s.first, factor), scale_schedule(s.then, factor))
    return s


# -- goals ----------------------------------------------------------------------

@dataclass(frozen=True)
class Point:
    pass


@dataclass(frozen=True)
class Normal:
    pass


@dataclass(frozen=True)
class Uniform:
    pass


@dataclass(frozen=True)
class IFGSM:
    k: int

    def __post_init__(self):
        if self.k < 1:
            raise DSLError("IFGSM needs a positive iteration count")


@dataclass(frozen=True)
class Box:
    pass


@dataclass(frozen=True)
class Mix:
    first: "Goal"
    second: "Goal"
    weight: Schedule


@dataclass(frozen=True)
class Sub:
    width: Schedule
    inner: "Goal"


@dataclass(frozen=True)
class Sample:
    width: Schedule
    ratio: float
    source: "Goal"
    target: "Goal"

    def __post_init__(self):
        if not 0 <= self.ratio <= 1:
            raise DSLError(f"Sample ratio must be in [0, 1], got {self.ratio}")


@dataclass(frozen=True)
class BiSample:
    first: "Goal"
    second: "Goal"


Goal = Union[Point, Normal, Uniform, IFGSM, Box, Mix, Sub, Sample, BiSample]
GOAL_TYPES = (Point, Normal, Uniform, IFGSM, Box, Mix, Sub, Sample, BiSample)
SCHEDULE_TYPES = (Const, Lin, Until)


def goal_leaves(g: Goal) -> list[Goal]:
    """Leaves of the Mix tree (non-Mix subgoals), left to right."""
    if isinstance(g, Mix):
        return goal_leaves(g.first) + goal_leaves(g.second)
    return [g]


# -- lexer/parser ---------------------------------------------------------------

_TOKEN = re.compile(r"\s*(?:(?P<num>[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)"
                    r"|(?P<ident>[A-Za-z][A-Za-z0-9]*)(?:_(?P<sub>\d+))?"
                    r"|(?P<punct>[(),]))")


@dataclass
class _Node:
    """Untyped call tree produced by the parser before validation."""
    name: str | None
    value: float | None
    sub: int | None
    args: list["_Node"] | None
    column: int


def _tokenize(text: str):
    pos, out = 0, []
    text = text.rstrip()
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m or m.end() == pos:
            col = pos + len(text[pos:]) - len(text[pos:].lstrip()) + 1
            raise DSLError("unexpected character", col, text[col - 1:col])
        col = m.start(next(k for k in ("num", "ident", "punct") if m.group(k) is not None)) + 1
        if m.group("num") is not None:
            if m.end() < len(text) and (text[m.end()].isalnum() or text[m.end()] in "._"):
                raise DSLError("malformed number", col, text[col - 1:m.end() + 1])
            out.append(("num", m.group("num"), col))
        elif m.group("ident") is not None:
            out.append(("ident", (m.group("ident"), m.group("sub")), col))
        else:
            out.append((m.group("punct"), m.group("punct"), col))
        pos = m.end()
    out.append(("end", None, len(text) + 1))
    return out


class _Parser:
    def __init__(self, text: str):
        self.toks = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.toks[self.i]

    def take(self, kind: str):
        tok = self.toks[self.i]
        if tok[0] != kind:
            raise DSLError(f"expected {kind!r}, found {tok[1] if tok[1] is not None else 'end of input'!r}", tok[2])
        self.i += 1
        return tok

    def expr(self) -> _Node:
        kind, val, col = self.peek()
        if kind == "num":
            self.i += 1
            try:
                return _Node(None, float(val), None, None, col)
            except ValueError:
                raise DSLError("malformed number", col, val) from None
        if kind == "ident":
            self.i += 1
            name, sub = val
            args = None
            if self.peek()[0] == "(":
                self.i += 1
                args = [self.expr()]
                while self.peek()[0] == ",":
                    self.i += 1
                    args.append(self.expr())
                self.take(")")
            return _Node(name, None, int(sub) if sub is not None else None, args, col)
        raise DSLError("expected a number or constructor", col, val)

    def parse(self) -> _Node:
        node = self.expr()
        self.take("end")
        return node


def _arity(node: _Node, *allowed: int) -> list[_Node]:
    args = node.args or []
    if len(args) not in allowed:
        want = " or ".join(map(str, allowed))
        raise DSLError(f"{node.name} takes {want} argument(s), got {len(args)}", node.column)
    return args


def _number(node: _Node, what: str) -> float:
    if node.value is None:
        raise DSLError(f"{what} must be a number", node.column)
    return node.value


def _schedule(node: _Node) -> Schedule:
    if node.value is not None:
        return Const(node.value)
    if node.sub is not None:
        raise DSLError(f"{node.name} takes no subscript", node.column)
    if node.name == "Const":
        (v,) = _arity(node, 1)
        return Const(_number(v, "Const value"))
    if node.name == "Lin":
        a, b, m, n = (_number(x, "Lin argument") for x in _arity(node, 4))
        try:
            return Lin(a, b, m, n)
        except DSLError as e:
            raise DSLError(str(e), node.column) from None
    if node.name == "Until":
        m, s1, s2 = _arity(node, 3)
        switch = _number(m, "Until switch time")
        if switch < 0:
            raise DSLError("Until needs a nonnegative switch time", m.column)
        return Until(switch, _schedule(s1), _schedule(s2))
    raise DSLError(f"unknown schedule constructor {node.name!r}", node.column)


_LEAVES = {"Point": Point, "Normal": Normal, "Uniform": Uniform, "Box": Box}


def _goal(node: _Node) -> Goal:
    if node.value is not None:
        raise DSLError("expected a goal constructor, found a number", node.column)
    name = node.name
    if name in _LEAVES:
        _arity(node, 0)
        # the only subscript that appears on a leaf is Uniform_1 (sampling ratio 1, the default)
        if node.sub is not None and not (name == "Uniform" and node.sub == 1):
            raise DSLError(f"{name} takes no subscript", node.column)
        return _LEAVES[name]()
    if name == "IFGSM":
        if node.sub is not None:
            _arity(node, 0)
            if node.sub < 1:
                raise DSLError("IFGSM needs a positive iteration count", node.column)
            return IFGSM(node.sub)
        (k,) = _arity(node, 1)
        kv = _number(k, "IFGSM iteration count")
        if kv != int(kv) or kv < 1:
            raise DSLError("IFGSM iteration count must be a positive integer", k.column)
        return IFGSM(int(kv))
    if node.sub is not None:
        raise DSLError(f"{name} takes no subscript", node.column)
    if name == "Mix":
        g1, g2, lam = _arity(node, 3)
        return Mix(_goal(g1), _goal(g2), _schedule(lam))
    if name == "Sub":
        d, g = _arity(node, 2)
        return Sub(_schedule(d), _goal(g))
    if name == "Sample":
        args = _arity(node, 3, 4)
        if len(args) == 4:
            d, r, gs, gt = args
            ratio = _number(r, "Sample ratio")
        else:
            (d, gs, gt), ratio = args, 1.0
        try:
            return Sample(_schedule(d), ratio, _goal(gs), _goal(gt))
        except DSLError as e:
            if e.column is None:
                raise DSLError(str(e), node.column) from None
            raise
    if name == "BiSample":
        g1, g2 = _arity(node, 2)
        return BiSample(_goal(g1), _goal(g2))
    raise DSLError(f"unknown goal constructor {name!r}", node.column)


def parse_goal(text: str) -> Goal:
    return _goal(_Parser(text).parse())


def parse_schedule(text: str) -> Schedule:
    return _schedule(_Parser(text).parse())


# -- printing -------------------------------------------------------------------

def format_number(v: float) -> str:
    if float(v).is_integer():
        return str(int(v))
    return repr(float(v))


def format_schedule(s: Schedule) -> str:
    if isinstance(s, Const):
        return format_number(s.value)
    if isinstance(s, Lin):
        return f"Lin({format_number(s.start)}, {format_number(s.end)}, {format_number(s.wait)}, {format_number(s.span)})"
    if isinstance(s, Until):
        return f"Until({format_number(s.switch)}, {format_schedule(s.first)}, {format_schedule(s.then)})"
    raise TypeError(f"not a schedule: {s!r}")


def format_goal(g: Goal) -> str:
    if isinstance(g, (Point, Normal, Uniform, Box)):
        return type(g).__name__
    if isinstance(g, IFGSM):
        return f"IFGSM_{g.k}"
    if isinstance(g, Mix):
        return f"Mix({format_goal(g.first)}, {format_goal(g.second)}, {format_schedule(g.weight)})"
    if isinstance(g, Sub):
        return f"Sub({format_schedule(g.width)}, {format_goal(g.inner)})"
    if isinstance(g, Sample):
        return (f"Sample({format_schedule(g.width)}, {format_number(g.ratio)}, "
                f"{format_goal(g.source)}, {format_goal(g.target)})")
    if isinstance(g, BiSample):
        return f"BiSample({format_goal(g.first)}, {format_goal(g.second)})"
    raise TypeError(f"not a goal: {g!r}")


def map_schedules(g: Goal, fn) -> Goal:
    """Rebuild ``g`` with ``fn`` applied to every schedule it carries."""
    if isinstance(g, Mix):
        return Mix(map_schedules(g.first, fn), map_schedules(g.second, fn), fn(g.weight))
    if isinstance(g, Sub):
        return Sub(fn(g.width), map_schedules(g.inner, fn))
    if isinstance(g, Sample):
        return Sample(fn(g.width), g.ratio, map_schedules(g.source, fn), map_schedules(g.target, fn))
    if isinstance(g, BiSample):
        return BiSample(map_schedules(g.first, fn), map_schedules(g.second, fn))
    return g


# -- presets --------------------------------------------------------------------

# Strings as printed in the training-scheme table. ``{k}`` is the IFGSM
# iteration count carried in the preset name (Adv_5IS -> k = 5).
PRESETS: dict[str, str] = {
    "Baseline": "Mix(Point, Sub(Lin(0, 1, 150, 10), Box), Lin(0, 0.5, 150, 10))",
    "InSamp": "Mix(Point, Sample(Lin(0, 1, 150, 10), 0.5, Normal, Box), Lin(0, 0.5, 150, 10))",
    "InSampLPA": "Mix(Point, Sub(Lin(0,1,150,10), Sample(Lin(0,1,150,10), 0.5, Normal, Box)), Lin(0, 0.5, 150, 10))",
    "Adv_kIS": "Mix(Sub(Lin(0, 1, 20, 20), IFGSM_{k}), Sample(Lin(0, 1, 150, 10), 0.5, Normal, Box), Lin(0, 0.5, 150, 10))",
    "Adv_kISLPA": ("Mix(Sub(Lin(0, 1, 20, 20), IFGSM_{k}), "
                   "Sub(Lin(0,1,150,10),Sample(Lin(0, 1, 150, 10), 0.5, Normal, Box)), Lin(0, 0.5, 150, 10))"),
    "Adv_kISLPAUS": ("Mix(Sub(Lin(0, 1, 20, 20), IFGSM_{k}), "
                     "Sub(Lin(0,1,150,10),Sample(Lin(0, 1, 150, 10), Uniform_1, Box)), Lin(0, 0.35, 150, 10))"),
    "Baseline_S18": "Mix(Point, Sub(Lin(0, 1, 200, 40), Box), Lin(0, 0.5, 200, 40))",
    "InSamp_S18": "Mix(Point, Sample(Lin(0, 1, 200, 40), 0.5, Normal, Box), Lin(0, 0.5, 200, 40))",
    "Adv_kIS_S18": "Mix(Sub(Lin(0, 1, 20, 20), IFGSM_{k}), Sample(Lin(0, 1, 200, 40), 0.5, Normal, Box), Lin(0, 0.5, 200, 40))",
    "Adv_kISLPA_R18": ("Mix(Sub(Lin(0, 1, 20, 20), IFGSM_{k}), "
                       "Sub(Lin(0,1,200,40),Sample(Lin(0, 1, 200, 40), 1, Uniform, Box)), Lin(0, 0.5, 200, 40))"),
    "InSampLPA_R34": "Mix(Point, Sub(Lin(0,1,200,40), Sample(Lin(0, 1, 200, 40), 1, Uniform, Box)), Lin(0, 0.5, 200, 40))",
    "Adv_kISLPA_D100": ("Mix(IFGSM_{k}, Sub(Lin(0,1,150,50),Sample(Lin(0, 1, 150, 50), 1, Uniform, Box)), "
                        "Lin(0, 0.5, 150, 50))"),
    # The printed form is unbalanced and lacks BiSample's second goal; Box is restored there.
    "BiAdv_L": "Mix(IFGSM_2, BiSample(Sub(Lin(0, 1, 150, 30), IFGSM_3), Box), Lin(0, 0.6, 200, 30))",
}

RECONSTRUCTED = frozenset({"BiAdv_L"})

_ADV = re.compile(r"^(Adv_)(\d+)(.*)$")


def preset_names() -> list[str]:
    return list(PRESETS)


def preset_text(name: str) -> str:
    """DSL text for a preset; ``Adv_<k>...`` names fill in the IFGSM iteration count."""
    if name in PRESETS and "{k}" not in PRESETS[name]:
        return PRESETS[name]
    m = _ADV.match(name)
    if m:
        key = m.group(1) + "k" + m.group(3)
        if key in PRESETS:
            return PRESETS[key].replace("{k}", m.group(2))
    if name in PRESETS:
        raise KeyError(f"preset {name!r} needs an iteration count, e.g. {name.replace('_k', '_1', 1)!r}")
    raise KeyError(f"unknown preset {name!r}; known: {', '.join(PRESETS)}")


def preset(name: str) -> Goal:
    return parse_goal(preset_text(name))
