"""Algebraic structures, transformations and a randomized law checker.

A structure bundles a value domain with named unary and binary operators,
fold-style aggregators and a list of declared algebraic laws.  All operators
are vectorized: they accept Python scalars as well as numpy arrays, which is
what the layered circuit runtime relies on.

Real-valued structures additionally carry the analytic partial derivatives
of their operators (used by reverse mode) and an independent dual-number
implementation of each operator (used as the forward-mode oracle).
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Sequence

import numpy as np

__all__ = [
    "Dual",
    "Law",
    "LawVerdict",
    "LawReport",
    "Structure",
    "Transformation",
    "ClampMonitor",
    "CLAMP_MONITOR",
    "make_boolean",
    "make_probability",
    "make_fuzzy",
    "make_dual",
    "iverson",
    "fuzzy_score",
    "get_structure",
    "get_transformation",
    "check_laws",
    "with_laws",
    "STRUCTURE_NAMES",
]


# ---------------------------------------------------------------------------
# dual numbers


class Dual:
    """Dual number ``primal + tangent * eps`` with ``eps**2 == 0``.

    Both parts may be numpy arrays of the same shape.
    """

    __slots__ = ("primal", "tangent")

    def __init__(self, primal, tangent=0.0):
        self.primal = np.asarray(primal, dtype=float) if isinstance(primal, (list, tuple)) else primal
        self.tangent = np.asarray(tangent, dtype=float) if isinstance(tangent, (list, tuple)) else tangent

    @staticmethod
    def lift(x) -> "Dual":
        return x if isinstance(x, Dual) else Dual(x, 0.0 * np.asarray(x, dtype=float))

    def __add__(self, other):
        o = Dual.lift(other)
        return Dual(self.primal + o.primal, self.tangent + o.tangent)

    __radd__ = __add__

    def __sub__(self, other):
        o = Dual.lift(other)
        return Dual(self.primal - o.primal, self.tangent - o.tangent)

    def __rsub__(self, other):
        o = Dual.lift(other)
        return Dual(o.primal - self.primal, o.tangent - self.tangent)

    def __mul__(self, other):
        o = Dual.lift(other)
        return Dual(self.primal * o.primal, self.primal * o.tangent + self.tangent * o.primal)

    __rmul__ = __mul__

    def __neg__(self):
        return Dual(-self.primal, -self.tangent)

    def __repr__(self) -> str:
        return f"Dual({self.primal!r}, {self.tangent!r})"

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dual):
            return NotImplemented
        return bool(np.all(self.primal == other.primal) and np.all(self.tangent == other.tangent))

    __hash__ = None  # mutable-array container


def _where(cond, a: Dual, b: Dual) -> Dual:
    return Dual(np.where(cond, a.primal, b.primal), np.where(cond, a.tangent, b.tangent))


def dual_min(a: Dual, b: Dual) -> Dual:
    # ties resolve to the left operand
    return _where(np.asarray(a.primal) <= np.asarray(b.primal), a, b)


def dual_max(a: Dual, b: Dual) -> Dual:
    return _where(np.asarray(a.primal) >= np.asarray(b.primal), a, b)


def _dual_zero_like(a: Dual) -> Dual:
    return Dual(0.0 * np.asarray(a.primal, dtype=float), 0.0 * np.asarray(a.tangent, dtype=float))


def _dual_const_like(a: Dual, value: float) -> Dual:
    z = _dual_zero_like(a)
    return Dual(z.primal + value, z.tangent)


def _dual_clip01(a: Dual) -> Dual:
    return Dual(np.clip(a.primal, 0.0, 1.0), a.tangent)


# ---------------------------------------------------------------------------
# laws


@dataclass(frozen=True)
class Law:
    """A declared algebraic law.

    ``kind`` is one of ``commutative``, ``associative``, ``distributes``,
    ``neutral``, ``annihilator`` and ``idempotent``.  For ``distributes`` the
    law reads ``op`` distributes over ``other``.
    """

    kind: str
    op: str
    other: str | None = None
    element: Any = None

    def describe(self) -> str:
        if self.kind == "distributes":
            return f"distributes({self.op} over {self.other})"
        if self.kind in ("neutral", "annihilator"):
            return f"{self.kind}({self.op})={self.element!r}"
        return f"{self.kind}({self.op})"


@dataclass(frozen=True)
class LawVerdict:
    law: Law
    passed: bool
    samples: int
    counterexample: tuple | None = None


@dataclass(frozen=True)
class LawReport:
    structure: str
    verdicts: tuple[LawVerdict, ...]

    @property
    def passed(self) -> bool:
        return all(v.passed for v in self.verdicts)

    def failed(self) -> list[LawVerdict]:
        return [v for v in self.verdicts if not v.passed]

    def verdict(self, description: str) -> LawVerdict:
        for v in self.verdicts:
            if v.law.describe() == description:
                return v
        raise KeyError(description)


# ---------------------------------------------------------------------------
# clamping diagnostics


class ClampMonitor:
    """Counts fuzzy clamp events larger than ``threshold``."""

    def __init__(self, threshold: float = 1e-9):
        self.threshold = threshold
        self.events = 0
        self.max_violation = 0.0

    def reset(self) -> None:
        self.events = 0
        self.max_violation = 0.0

    def clip(self, x):
        clipped = np.clip(x, 0.0, 1.0)
        if np.ndim(x) == 0:
            dev = abs(float(x) - float(clipped))
        else:
            dev = float(np.max(np.abs(np.asarray(x) - clipped))) if np.size(x) else 0.0
        if dev > self.threshold:
            self.events += 1
            self.max_violation = max(self.max_violation, dev)
        return clipped if np.ndim(x) else float(clipped)


CLAMP_MONITOR = ClampMonitor()


# ---------------------------------------------------------------------------
# structures


@dataclass(frozen=True, eq=False)
class Structure:
    name: str
    value_kind: str
    unary_ops: Mapping[str, Callable]
    binary_ops: Mapping[str, Callable]
    aggregators: Mapping[str, str]
    laws: tuple[Law, ...]
    sampler: Callable[[np.random.Generator, int], Any]
    plus: str | None = None
    times: str | None = None
    aliases: Mapping[str, str] = field(default_factory=dict)
    # d op(a, b) / da and / db, elementwise; only for real-valued structures
    binary_partials: Mapping[str, Callable] = field(default_factory=dict)
    unary_partials: Mapping[str, Callable] = field(default_factory=dict)
    dual_binary: Mapping[str, Callable] = field(default_factory=dict)
    dual_unary: Mapping[str, Callable] = field(default_factory=dict)

    def __repr__(self) -> str:
        return f"Structure({self.name!r})"

    @property
    def differentiable(self) -> bool:
        return self.value_kind in ("real", "fuzzy")

    def resolve_op(self, name: str) -> str:
        name = self.aliases.get(name, name)
        if name not in self.binary_ops and name not in self.unary_ops:
            raise KeyError(f"structure {self.name!r} has no operator {name!r}")
        return name

    def has_op(self, name: str) -> bool:
        name = self.aliases.get(name, name)
        return name in self.binary_ops or name in self.unary_ops

    def apply(self, op: str, *args):
        op = self.resolve_op(op)
        if len(args) == 1:
            return self.unary_ops[op](args[0])
        if len(args) == 2:
            return self.binary_ops[op](args[0], args[1])
        raise TypeError("operators are unary or binary")

    def neutral(self, op: str):
        op = self.resolve_op(op)
        for law in self.laws:
            if law.kind == "neutral" and law.op == op:
                return law.element
        return None

    def annihilator(self, op: str):
        op = self.resolve_op(op)
        for law in self.laws:
            if law.kind == "annihilator" and law.op == op:
                return law.element
        return None

    def declares(self, kind: str, op: str, other: str | None = None) -> bool:
        op = self.resolve_op(op)
        other = self.resolve_op(other) if other is not None else None
        return any(l.kind == kind and l.op == op and l.other == other for l in self.laws)

    def fold(self, aggregator: str, values: Sequence):
        """Left fold of ``values`` with the aggregator's binary operator."""
        op = self.aggregators[aggregator]
        fn = self.binary_ops[op]
        values = list(values)
        if not values:
            e = self.neutral(op)
            if e is None:
                raise ValueError(f"empty aggregation over {self.name!r} without neutral element")
            return e
        acc = values[0]
        for v in values[1:]:
            acc = fn(acc, v)
        return acc


def _bool_sampler(rng, n):
    return rng.random(n) < 0.5


def _real_sampler(rng, n):
    x = rng.exponential(2.0, n)
    special = rng.random(n)
    x = np.where(special < 0.05, 0.0, x)
    x = np.where((special >= 0.05) & (special < 0.1), 1.0, x)
    return x


_FUZZY_GRID = np.array([0.0, 0.25, 0.4, 0.5, 0.7, 1.0])


def _fuzzy_sampler(rng, n):
    x = rng.random(n)
    pick = rng.random(n) < 0.2
    return np.where(pick, rng.choice(_FUZZY_GRID, n), x)


def _dual_sampler(rng, n):
    return Dual(_real_sampler(rng, n) * rng.choice([-1.0, 1.0], n), rng.normal(size=n))


def _semiring_laws(plus: str, times: str, zero, one, *, distributive=True, idempotent=False):
    laws = [
        Law("commutative", plus),
        Law("associative", plus),
        Law("neutral", plus, element=zero),
        Law("commutative", times),
        Law("associative", times),
        Law("neutral", times, element=one),
        Law("annihilator", times, element=zero),
    ]
    if distributive:
        laws.append(Law("distributes", times, plus))
    if idempotent:
        laws += [Law("idempotent", plus), Law("idempotent", times)]
    return laws


def make_boolean() -> Structure:
    """Boolean algebra with disjunction, conjunction and negation."""
    laws = _semiring_laws("or", "and", False, True, idempotent=True)
    laws += [Law("annihilator", "or", element=True), Law("distributes", "or", "and")]
    return Structure(
        name="bool",
        value_kind="bool",
        unary_ops={"not": np.logical_not},
        binary_ops={"or": np.logical_or, "and": np.logical_and},
        aggregators={"any": "or", "all": "and", "sum": "or", "prod": "and"},
        laws=tuple(laws),
        sampler=_bool_sampler,
        plus="or",
        times="and",
        aliases={"+": "or", "*": "and", "∨": "or", "∧": "and", "¬": "not"},
    )


def _ones(a, b=None):
    return np.ones_like(np.asarray(a, dtype=float)) if np.ndim(a) else 1.0


def make_probability() -> Structure:
    """Probability semiring over the nonnegative reals."""
    return Structure(
        name="prob",
        value_kind="real",
        unary_ops={},
        binary_ops={"+": np.add, "*": np.multiply},
        aggregators={"sum": "+", "prod": "*"},
        laws=tuple(_semiring_laws("+", "*", 0.0, 1.0)),
        sampler=_real_sampler,
        plus="+",
        times="*",
        aliases={"×": "*", "plus": "+", "times": "*"},
        binary_partials={
            "+": lambda a, b: (_ones(a), _ones(b)),
            "*": lambda a, b: (b, a),
        },
        dual_binary={"+": lambda a, b: a + b, "*": lambda a, b: a * b},
    )


def _fuzzy_product(clip):
    ops = {
        "and": lambda a, b: clip(np.multiply(a, b)),
        "or": lambda a, b: clip(a + b - a * b),
    }
    partials = {
        "and": lambda a, b: (b, a),
        "or": lambda a, b: (1.0 - b, 1.0 - a),
    }
    duals = {
        "and": lambda a, b: _dual_clip01(a * b),
        "or": lambda a, b: _dual_clip01(a + b - a * b),
    }
    return ops, partials, duals


def _step(cond):
    return np.where(cond, 1.0, 0.0) if np.ndim(cond) else float(bool(cond))


def _fuzzy_godel(clip):
    ops = {"and": np.minimum, "or": np.maximum}
    # subgradient goes to the attaining child, ties to the left operand
    partials = {
        "and": lambda a, b: (_step(np.asarray(a) <= b), _step(np.asarray(a) > b)),
        "or": lambda a, b: (_step(np.asarray(a) >= b), _step(np.asarray(a) < b)),
    }
    duals = {"and": dual_min, "or": dual_max}
    return ops, partials, duals


def _fuzzy_lukasiewicz(clip):
    ops = {
        "and": lambda a, b: np.maximum(0.0, a + b - 1.0),
        "or": lambda a, b: np.minimum(1.0, a + b),
    }

    def d_and(a, b):
        g = _step(np.asarray(a) + b - 1.0 > 0.0)
        return g, g

    def d_or(a, b):
        g = _step(np.asarray(a) + b < 1.0)
        return g, g

    def dual_and(a, b):
        s = a + b - 1.0
        return _where(np.asarray(s.primal) > 0.0, s, _dual_zero_like(s))

    def dual_or(a, b):
        s = a + b
        return _where(np.asarray(s.primal) < 1.0, s, _dual_const_like(s, 1.0))

    return ops, {"and": d_and, "or": d_or}, {"and": dual_and, "or": dual_or}


_FUZZY_KINDS = {
    "product": _fuzzy_product,
    "godel": _fuzzy_godel,
    "lukasiewicz": _fuzzy_lukasiewicz,
}


def make_fuzzy(kind: str = "product", monitor: ClampMonitor | None = None) -> Structure:
    """Fuzzy logic over ``[0, 1]`` for the product, Gödel or Łukasiewicz t-norm."""
    if kind not in _FUZZY_KINDS:
        raise ValueError(f"unknown t-norm {kind!r}; expected one of {sorted(_FUZZY_KINDS)}")
    mon = monitor or CLAMP_MONITOR
    ops, partials, duals = _FUZZY_KINDS[kind](mon.clip)
    ops = {k: (lambda f: lambda a, b: mon.clip(f(a, b)))(f) for k, f in ops.items()}
    laws = [
        Law("commutative", "or"),
        Law("associative", "or"),
        Law("neutral", "or", element=0.0),
        Law("annihilator", "or", element=1.0),
        Law("commutative", "and"),
        Law("associative", "and"),
        Law("neutral", "and", element=1.0),
        Law("annihilator", "and", element=0.0),
    ]
    if kind == "godel":
        laws += [
            Law("idempotent", "or"),
            Law("idempotent", "and"),
            Law("distributes", "and", "or"),
            Law("distributes", "or", "and"),
        ]
    return Structure(
        name=f"fuzzy:{kind}",
        value_kind="fuzzy",
        unary_ops={"not": lambda a: mon.clip(1.0 - np.asarray(a, dtype=float)) if np.ndim(a) else mon.clip(1.0 - a)},
        binary_ops=ops,
        aggregators={"any": "or", "all": "and", "sum": "or", "prod": "and"},
        laws=tuple(laws),
        sampler=_fuzzy_sampler,
        plus="or",
        times="and",
        aliases={"+": "or", "*": "and", "∨": "or", "∧": "and", "¬": "not"},
        binary_partials=partials,
        unary_partials={"not": lambda a: -_ones(a)},
        dual_binary=duals,
        dual_unary={"not": lambda a: _dual_clip01(1.0 - a)},
    )


def make_dual() -> Structure:
    """Dual numbers with the sum and product rules of differentiation."""
    zero = Dual(0.0, 0.0)
    one = Dual(1.0, 0.0)
    return Structure(
        name="dual",
        value_kind="dual",
        unary_ops={},
        binary_ops={"+": lambda a, b: Dual.lift(a) + b, "*": lambda a, b: Dual.lift(a) * b},
        aggregators={"sum": "+", "prod": "*"},
        laws=tuple(_semiring_laws("+", "*", zero, one)),
        sampler=_dual_sampler,
        plus="+",
        times="*",
        aliases={"plus": "+", "times": "*"},
    )


def with_laws(s: Structure, extra: Sequence[Law]) -> Structure:
    """Copy of ``s`` with additional (possibly false) law declarations."""
    return dataclasses.replace(s, laws=tuple(s.laws) + tuple(extra))


# ---------------------------------------------------------------------------
# transformations


@dataclass(frozen=True, eq=False)
class Transformation:
    name: str
    source: str
    target: str
    map: Callable
    # maps conjunction to the target product always and disjunction to the
    # target sum whenever the disjuncts are mutually exclusive
    homomorphic_under_determinism: bool = False

    def __call__(self, x):
        return self.map(x)

    def __repr__(self) -> str:
        return f"Transformation({self.name!r}: {self.source} -> {self.target})"


def _iverson_map(x):
    if np.ndim(x):
        return np.where(np.asarray(x, dtype=bool), 1.0, 0.0)
    return 1.0 if bool(x) else 0.0


def iverson() -> Transformation:
    """Iverson bracket from the Boolean algebra to the probability semiring."""
    return Transformation("iverson", "bool", "prob", _iverson_map, homomorphic_under_determinism=True)


def fuzzy_score() -> Transformation:
    """Reads a fuzzy score as a nonnegative real (expected-score semantics)."""
    return Transformation("score", "fuzzy:*", "prob", lambda x: np.asarray(x, dtype=float) if np.ndim(x) else float(x))


# ---------------------------------------------------------------------------
# registry

STRUCTURE_NAMES = ("bool", "prob", "fuzzy:godel", "fuzzy:lukasiewicz", "fuzzy:product", "dual")

_STRUCTURES: dict[str, Structure] = {}


def get_structure(name: str) -> Structure:
    if name not in _STRUCTURES:
        if name == "bool":
            _STRUCTURES[name] = make_boolean()
        elif name == "prob":
            _STRUCTURES[name] = make_probability()
        elif name == "dual":
            _STRUCTURES[name] = make_dual()
        elif name.startswith("fuzzy:"):
            _STRUCTURES[name] = make_fuzzy(name.split(":", 1)[1])
        else:
            raise KeyError(f"unknown structure {name!r}")
    return _STRUCTURES[name]


_TRANSFORMS = {"iverson": iverson(), "score": fuzzy_score()}


def get_transformation(name: str) -> Transformation:
    try:
        return _TRANSFORMS[name]
    except KeyError:
        raise KeyError(f"unknown transformation {name!r}") from None


def transformation_accepts(t: Transformation, source: str) -> bool:
    if t.source.endswith(":*"):
        return source.startswith(t.source[:-1])
    return t.source == source


# ---------------------------------------------------------------------------
# law checking


def _close(s: Structure, x, y):
    if s.value_kind == "bool":
        return np.asarray(x) == np.asarray(y)
    if s.value_kind == "dual":
        return _close_real(x.primal, y.primal) & _close_real(x.tangent, y.tangent)
    return _close_real(x, y)


def _close_real(x, y):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    return np.abs(x - y) <= 1e-9 + 1e-9 * np.maximum(np.abs(x), np.abs(y))


def _index(s: Structure, v, i):
    if s.value_kind == "dual":
        return (float(v.primal[i]), float(v.tangent[i]))
    item = np.asarray(v)[i]
    return bool(item) if s.value_kind == "bool" else float(item)


def _const(s: Structure, e, n):
    if s.value_kind == "dual":
        return Dual(np.full(n, float(e.primal)), np.full(n, float(e.tangent)))
    return np.full(n, e, dtype=bool if s.value_kind == "bool" else float)


def check_laws(s: Structure, samples: int = 1000, seed: int = 0) -> LawReport:
    """Test every declared law of ``s`` on ``samples`` random value tuples."""
    if samples < 1:
        raise ValueError("samples must be >= 1")
    rng = np.random.default_rng(seed)
    a, b, c = s.sampler(rng, samples), s.sampler(rng, samples), s.sampler(rng, samples)
    verdicts = []
    for law in s.laws:
        f = s.binary_ops[law.op]
        if law.kind == "commutative":
            lhs, rhs, args = f(a, b), f(b, a), (a, b)
        elif law.kind == "associative":
            lhs, rhs, args = f(f(a, b), c), f(a, f(b, c)), (a, b, c)
        elif law.kind == "idempotent":
            lhs, rhs, args = f(a, a), a, (a,)
        elif law.kind == "neutral":
            e = _const(s, law.element, samples)
            ok = _close(s, f(a, e), a) & _close(s, f(e, a), a)
            verdicts.append(_verdict(s, law, ok, (a,), samples))
            continue
        elif law.kind == "annihilator":
            z = _const(s, law.element, samples)
            ok = _close(s, f(a, z), z) & _close(s, f(z, a), z)
            verdicts.append(_verdict(s, law, ok, (a,), samples))
            continue
        elif law.kind == "distributes":
            g = s.binary_ops[law.other]
            lhs, rhs, args = f(a, g(b, c)), g(f(a, b), f(a, c)), (a, b, c)
        else:
            raise ValueError(f"unknown law kind {law.kind!r}")
        verdicts.append(_verdict(s, law, _close(s, lhs, rhs), args, samples))
    return LawReport(s.name, tuple(verdicts))


def _verdict(s, law, ok, args, samples):
    ok = np.asarray(ok)
    if bool(np.all(ok)):
        return LawVerdict(law, True, samples)
    i = int(np.argmin(ok))
    return LawVerdict(law, False, samples, tuple(_index(s, x, i) for x in args))
