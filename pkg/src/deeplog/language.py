"""Terms, atoms, algebraic formulas, labelling declarations and models.

Formulas are immutable trees (or DAGs, when subtrees are shared).  Every node
carries the id of the structure its value lives in.  Hashes are cached on the
node so that shared subformulas hash in linear time.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields
from itertools import product
from typing import Any, Iterable, Iterator, Mapping, Sequence

import numpy as np

from .algebra import STRUCTURE_NAMES, get_structure, get_transformation, transformation_accepts

__all__ = [
    "Variable",
    "Atom",
    "PredicateSignature",
    "Constant",
    "Formula",
    "AlgAtom",
    "Const",
    "Unary",
    "Binary",
    "AggAtom",
    "AggVar",
    "Transform",
    "Interpretation",
    "LabelEntry",
    "LabellingSpec",
    "FormulaDef",
    "Model",
    "Diagnostic",
    "ModelError",
    "substitute",
    "free_variables",
    "atoms_of",
    "check_well_formed",
    "herbrand_base",
    "fold_binary",
    "HERBRAND_LIMIT",
]

HERBRAND_LIMIT = 10_000_000


# ---------------------------------------------------------------------------
# terms


@dataclass(frozen=True, order=True)
class Variable:
    name: str

    def __str__(self) -> str:
        return self.name


Term = Any  # str | int | Variable


def term_str(t) -> str:
    return str(t)


def is_ground_term(t) -> bool:
    return not isinstance(t, Variable)


@dataclass(frozen=True)
class Atom:
    predicate: str
    args: tuple = ()

    def __post_init__(self):
        if not isinstance(self.args, tuple):
            object.__setattr__(self, "args", tuple(self.args))

    @property
    def arity(self) -> int:
        return len(self.args)

    def is_ground(self) -> bool:
        return all(is_ground_term(a) for a in self.args)

    def variables(self) -> list[Variable]:
        return [a for a in self.args if isinstance(a, Variable)]

    def __str__(self) -> str:
        if not self.args:
            return self.predicate
        return f"{self.predicate}({', '.join(term_str(a) for a in self.args)})"

    def __repr__(self) -> str:
        return f"Atom({self})"


@dataclass(frozen=True)
class PredicateSignature:
    name: str
    domains: tuple[str, ...] = ()

    @property
    def arity(self) -> int:
        return len(self.domains)


@dataclass(frozen=True)
class Constant:
    symbol: Any
    payload: tuple[float, ...] | None = None


# ---------------------------------------------------------------------------
# formulas


class Formula:
    """Base class of formula nodes."""

    structure: str

    def __hash__(self) -> int:
        h = self.__dict__.get("_hash")
        if h is None:
            h = hash((type(self).__name__,) + tuple(getattr(self, f.name) for f in fields(self)))
            object.__setattr__(self, "_hash", h)
        return h

    def children(self) -> tuple["Formula", ...]:
        return ()

    def __str__(self) -> str:
        from .parser import print_formula

        return print_formula(self)


@dataclass(frozen=True, eq=True)
class AlgAtom(Formula):
    atom: Atom
    structure: str

    __hash__ = Formula.__hash__


@dataclass(frozen=True, eq=True)
class Const(Formula):
    value: Any
    structure: str

    __hash__ = Formula.__hash__


@dataclass(frozen=True, eq=True)
class Unary(Formula):
    op: str
    child: Formula
    structure: str

    __hash__ = Formula.__hash__

    def children(self):
        return (self.child,)


@dataclass(frozen=True, eq=True)
class Binary(Formula):
    op: str
    left: Formula
    right: Formula
    structure: str

    __hash__ = Formula.__hash__

    def children(self):
        return (self.left, self.right)


@dataclass(frozen=True, eq=True)
class AggAtom(Formula):
    atom: Atom
    aggregator: str
    child: Formula
    structure: str

    __hash__ = Formula.__hash__

    def children(self):
        return (self.child,)


@dataclass(frozen=True, eq=True)
class AggVar(Formula):
    var: Variable
    domain: str
    aggregator: str
    child: Formula
    structure: str

    __hash__ = Formula.__hash__

    def children(self):
        return (self.child,)


@dataclass(frozen=True, eq=True)
class Transform(Formula):
    target: str
    transformation: str
    child: Formula

    __hash__ = Formula.__hash__

    @property
    def structure(self) -> str:  # type: ignore[override]
        return self.target

    def children(self):
        return (self.child,)


def fold_binary(op: str, items: Sequence[Formula], structure: str) -> Formula:
    """Left-nested ``Binary`` chain ``((a op b) op c) ...``."""
    items = list(items)
    if not items:
        raise ValueError("fold_binary needs at least one operand")
    acc = items[0]
    for x in items[1:]:
        acc = Binary(op, acc, x, structure)
    return acc


def exactly_one(atoms: Sequence[Atom], structure: str = "bool") -> Formula:
    """Boolean constraint that exactly one of ``atoms`` is true."""
    lits = [AlgAtom(a, structure) for a in atoms]
    parts = [fold_binary("or", lits, structure)]
    for i in range(len(lits)):
        for j in range(i + 1, len(lits)):
            parts.append(Unary("not", Binary("and", lits[i], lits[j], structure), structure))
    return fold_binary("and", parts, structure)


def _walk(f: Formula) -> Iterator[Formula]:
    seen: set[int] = set()
    stack = [f]
    while stack:
        g = stack.pop()
        if id(g) in seen:
            continue
        seen.add(id(g))
        yield g
        stack.extend(reversed(g.children()))


def atoms_of(f: Formula) -> list[Atom]:
    """Distinct atoms of algebraic-atom leaves, in first-occurrence order."""
    out: dict[Atom, None] = {}

    def go(g: Formula, memo: set):
        if id(g) in memo:
            return
        memo.add(id(g))
        if isinstance(g, AlgAtom):
            out.setdefault(g.atom)
        for c in g.children():
            go(c, memo)

    go(f, set())
    return list(out)


# ---------------------------------------------------------------------------
# variables and substitution


def free_variables(f: Formula) -> list[Variable]:
    """Variables outside every enclosing AggVar binder, first-occurrence order."""
    out: dict[Variable, None] = {}
    seen: set = set()

    def go(g: Formula, bound: frozenset):
        if (id(g), bound) in seen:
            return
        seen.add((id(g), bound))
        if isinstance(g, (AlgAtom, AggAtom)):
            for v in g.atom.variables():
                if v not in bound:
                    out.setdefault(v)
        if isinstance(g, AggVar):
            bound = bound | {g.var}
        for c in g.children():
            go(c, bound)

    go(f, frozenset())
    return list(out)


class SubstitutionError(ValueError):
    pass


def _subst_atom(a: Atom, sigma: Mapping[Variable, Any]) -> Atom:
    if not any(isinstance(x, Variable) and x in sigma for x in a.args):
        return a
    return Atom(a.predicate, tuple(sigma.get(x, x) if isinstance(x, Variable) else x for x in a.args))


def substitute(
    f: Formula, sigma: Mapping[Variable, Any], model: "Model | None" = None, *, partial: bool = False
) -> Formula:
    """Replace free variables by constants; AggVar-bound variables are left alone.

    When ``model`` is given, each constant is checked against the domain of
    every predicate position its variable occupies.
    """
    sigma = {(Variable(k) if isinstance(k, str) else k): v for k, v in sigma.items()}
    if not partial:
        missing = [v for v in free_variables(f) if v not in sigma]
        if missing:
            raise SubstitutionError(f"unassigned free variable(s): {', '.join(map(str, missing))}")
    if model is not None:
        _check_assignment(f, sigma, model)
    memo: dict[tuple[int, frozenset], Formula] = {}

    def go(g: Formula, bound: frozenset) -> Formula:
        key = (id(g), bound)
        if key in memo:
            return memo[key]
        active = {k: v for k, v in sigma.items() if k not in bound}
        if isinstance(g, AlgAtom):
            r = AlgAtom(_subst_atom(g.atom, active), g.structure)
        elif isinstance(g, Const):
            r = g
        elif isinstance(g, Unary):
            r = Unary(g.op, go(g.child, bound), g.structure)
        elif isinstance(g, Binary):
            r = Binary(g.op, go(g.left, bound), go(g.right, bound), g.structure)
        elif isinstance(g, AggAtom):
            r = AggAtom(_subst_atom(g.atom, active), g.aggregator, go(g.child, bound), g.structure)
        elif isinstance(g, AggVar):
            r = AggVar(g.var, g.domain, g.aggregator, go(g.child, bound | {g.var}), g.structure)
        elif isinstance(g, Transform):
            r = Transform(g.target, g.transformation, go(g.child, bound))
        else:
            raise TypeError(f"not a formula node: {g!r}")
        if r == g:
            r = g
        memo[key] = r
        return r

    return go(f, frozenset())


def _check_assignment(f: Formula, sigma, model: "Model"):
    for v, positions in variable_positions(f).items():
        if v not in sigma:
            continue
        c = sigma[v]
        for pred, i in positions:
            dom = model.domain_of(pred, i)
            if c not in dom:
                raise SubstitutionError(
                    f"constant {c!r} for {v} is outside domain of {pred} argument {i + 1}"
                )


def variable_positions(f: Formula) -> dict[Variable, list[tuple[str, int]]]:
    out: dict[Variable, list[tuple[str, int]]] = {}
    for g in _walk(f):
        if isinstance(g, (AlgAtom, AggAtom)):
            for i, a in enumerate(g.atom.args):
                if isinstance(a, Variable):
                    out.setdefault(a, []).append((g.atom.predicate, i))
    return out


# ---------------------------------------------------------------------------
# interpretations


class Interpretation(dict):
    """Partial map from ground atoms to truth values.

    ``truth_domain`` is ``"bool"`` or ``"fuzzy"``.
    """

    def __init__(self, values: Mapping | Iterable = (), truth_domain: str = "bool"):
        super().__init__(values)
        self.truth_domain = truth_domain
        for k, v in self.items():
            self._validate(k, v)

    def _validate(self, k, v):
        if not isinstance(k, Atom) or not k.is_ground():
            raise ValueError(f"interpretations map ground atoms, got {k!r}")
        if self.truth_domain == "bool":
            if not isinstance(v, (bool, np.bool_)):
                raise ValueError(f"boolean interpretation got {v!r} for {k}")
        elif not (0.0 <= float(v) <= 1.0):
            raise ValueError(f"fuzzy value {v!r} for {k} outside [0, 1]")

    def extend(self, atom: Atom, value) -> "Interpretation":
        """Copy with ``atom := value`` (the ``I[a:=z]`` notation)."""
        out = Interpretation(self, self.truth_domain)
        out._validate(atom, value)
        dict.__setitem__(out, atom, value)
        return out


# ---------------------------------------------------------------------------
# labelling declarations

LABEL_KINDS = ("table", "categorical", "perceptual", "identity")


@dataclass(frozen=True)
class LabelEntry:
    """How the label of ``predicate`` in ``structure`` is produced.

    ``group`` is the argument position holding the class of a categorical
    (exactly-one) predicate, or ``None`` for independent atoms.  ``table``
    maps ground atoms (or ``"*"``) to a ``(label_if_true, label_if_false)``
    pair.
    """

    predicate: str
    structure: str
    kind: str
    group: int | None = None
    table: Mapping[Any, tuple] = field(default_factory=dict)
    dim: int | None = None
    hidden: int = 0
    line: int = field(default=0, compare=False)

    @property
    def key(self) -> tuple[str, str]:
        return (self.predicate, self.structure)

    @property
    def normalized(self) -> bool:
        """True when the labels of each atom (or group) sum to one."""
        if self.structure != "prob":
            return False
        if self.kind in ("categorical", "perceptual"):
            return True
        if self.kind == "table" and self.group is None:
            return all(abs(float(t) + float(f) - 1.0) <= 1e-12 for t, f in self.table.values())
        return False

    def lookup(self, atom: Atom) -> tuple:
        if atom in self.table:
            return self.table[atom]
        if "*" in self.table:
            return self.table["*"]
        raise KeyError(f"no table label for {atom}")


class LabellingSpec:
    """Collection of label entries keyed by ``(predicate, structure)``."""

    def __init__(self, entries: Iterable[LabelEntry] = ()):
        self.entries: dict[tuple[str, str], LabelEntry] = {}
        for e in entries:
            self.add(e)

    def add(self, e: LabelEntry) -> None:
        if e.key in self.entries:
            raise ModelError([Diagnostic(e.line, 0, f"duplicate labelling entry for {e.predicate} @ {e.structure}")])
        if e.kind not in LABEL_KINDS:
            raise ValueError(f"unknown label kind {e.kind!r}")
        self.entries[e.key] = e

    def get(self, predicate: str, structure: str) -> LabelEntry | None:
        return self.entries.get((predicate, structure))

    def __getitem__(self, key) -> LabelEntry:
        return self.entries[key]

    def __contains__(self, key) -> bool:
        return key in self.entries

    def __iter__(self):
        return iter(self.entries.values())

    def __len__(self) -> int:
        return len(self.entries)

    def __eq__(self, other) -> bool:
        return isinstance(other, LabellingSpec) and self.entries == other.entries

    def group_position(self, predicate: str) -> int | None:
        for e in self.entries.values():
            if e.predicate == predicate and e.group is not None:
                return e.group
        return None


# ---------------------------------------------------------------------------
# model


@dataclass(frozen=True)
class FormulaDef:
    name: str
    parameters: tuple[tuple[Variable, str], ...]
    body: Formula


@dataclass(frozen=True)
class Diagnostic:
    line: int
    col: int
    message: str
    severity: str = "error"

    def __str__(self) -> str:
        return f"{self.line}:{self.col}: {self.severity}: {self.message}"


class ModelError(ValueError):
    def __init__(self, diagnostics: Sequence[Diagnostic]):
        self.diagnostics = list(diagnostics)
        super().__init__("; ".join(str(d) for d in self.diagnostics))


@dataclass(eq=False)
class Model:
    structures: tuple[str, ...] = ()
    domains: dict[str, tuple] = field(default_factory=dict)
    tensors: dict[Any, np.ndarray] = field(default_factory=dict)
    predicates: dict[str, PredicateSignature] = field(default_factory=dict)
    truth: str = "bool"
    labels: LabellingSpec = field(default_factory=LabellingSpec)
    formulas: dict[str, FormulaDef] = field(default_factory=dict)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Model):
            return NotImplemented
        return (
            self.structures == other.structures
            and self.domains == other.domains
            and self.predicates == other.predicates
            and self.truth == other.truth
            and self.labels == other.labels
            and self.formulas == other.formulas
            and self.tensors.keys() == other.tensors.keys()
            and all(np.array_equal(self.tensors[k], other.tensors[k]) for k in self.tensors)
        )

    def domain_of(self, predicate: str, position: int) -> tuple:
        sig = self.predicates[predicate]
        return self.domains[sig.domains[position]]

    def group_position(self, predicate: str) -> int | None:
        return self.labels.group_position(predicate)

    def group_key(self, atom: Atom):
        """Identity of the exactly-one group an atom belongs to, or None."""
        g = self.group_position(atom.predicate)
        if g is None:
            return None
        return (atom.predicate, atom.args[:g] + atom.args[g + 1 :])

    def group_atoms(self, atom: Atom) -> list[Atom]:
        g = self.group_position(atom.predicate)
        if g is None:
            return [atom]
        return [
            Atom(atom.predicate, atom.args[:g] + (c,) + atom.args[g + 1 :])
            for c in self.domain_of(atom.predicate, g)
        ]

    def herbrand_key(self, atom: Atom) -> tuple:
        preds = list(self.predicates)
        key: list = [preds.index(atom.predicate) if atom.predicate in self.predicates else len(preds)]
        sig = self.predicates.get(atom.predicate)
        for i, a in enumerate(atom.args):
            if sig is not None and not isinstance(a, Variable):
                dom = self.domains.get(sig.domains[i], ())
                key.append((0, dom.index(a)) if a in dom else (1, str(a)))
            else:
                key.append((2, str(a)))
        return tuple(key)

    def formula(self, name: str) -> Formula:
        return self.formulas[name].body

    def payload(self, symbol) -> np.ndarray:
        try:
            return self.tensors[symbol]
        except KeyError:
            raise KeyError(f"missing payload for constant {symbol!r}") from None


def herbrand_base(m: Model, limit: int = HERBRAND_LIMIT) -> list[Atom]:
    """All ground atoms, predicates in declaration order, arguments in domain order."""
    total = 0
    for sig in m.predicates.values():
        n = 1
        for d in sig.domains:
            n *= len(m.domains[d])
        total += n
    if total > limit:
        raise ValueError(f"Herbrand base of {total} atoms exceeds the limit of {limit}")
    out = []
    for sig in m.predicates.values():
        for args in product(*(m.domains[d] for d in sig.domains)):
            out.append(Atom(sig.name, tuple(args)))
    return out


# ---------------------------------------------------------------------------
# static checks


def _formula_diagnostics(m: Model, name: str, f: Formula) -> list[Diagnostic]:
    diags: list[Diagnostic] = []

    def err(msg, severity="error"):
        diags.append(Diagnostic(0, 0, f"formula {name}: {msg}", severity))

    for g in _walk(f):
        s = g.structure
        if s not in STRUCTURE_NAMES:
            err(f"unknown structure {s!r}")
            continue
        st = get_structure(s)
        if isinstance(g, AlgAtom):
            if g.atom.predicate not in m.predicates:
                err(f"unknown predicate {g.atom.predicate}")
            elif m.labels.get(g.atom.predicate, s) is None:
                err(f"no labelling for {g.atom.predicate} @ {s}")
        elif isinstance(g, (Unary, Binary)):
            if not st.has_op(g.op):
                err(f"structure {s} has no operator {g.op!r}")
            for c in g.children():
                if c.structure != s:
                    err(f"operand of {g.op} is over {c.structure}, expected {s}")
        elif isinstance(g, Transform):
            try:
                t = get_transformation(g.transformation)
            except KeyError:
                err(f"unknown transformation {g.transformation!r}")
                continue
            if not transformation_accepts(t, g.child.structure) or t.target != g.target:
                err(
                    f"transformation direction mismatch: {g.transformation} maps {t.source} -> {t.target}, "
                    f"used as {g.child.structure} -> {g.target}"
                )
        elif isinstance(g, (AggAtom, AggVar)):
            if g.aggregator not in st.aggregators:
                err(f"structure {s} has no aggregator {g.aggregator!r}")
            if g.child.structure != s:
                err(f"aggregation body is over {g.child.structure}, expected {s}")
            if isinstance(g, AggAtom) and g.atom not in atoms_of(g.child):
                err(f"vacuous aggregation over {g.atom}", "warning")
            if isinstance(g, AggAtom) and m.truth == "fuzzy":
                err("aggregation over atoms needs an enumerable (boolean) truth domain")
            if isinstance(g, AggVar) and g.domain not in m.domains:
                err(f"unknown domain {g.domain!r}")
    return diags


def check_well_formed(m: Model) -> list[Diagnostic]:
    """Static consistency diagnostics; an empty list means the model is well formed."""
    diags: list[Diagnostic] = []
    if m.truth not in ("bool", "fuzzy"):
        diags.append(Diagnostic(0, 0, f"truth domain must be bool or fuzzy, got {m.truth!r}"))
    for s in m.structures:
        if s not in STRUCTURE_NAMES:
            diags.append(Diagnostic(0, 0, f"unknown structure {s!r}"))
    for sig in m.predicates.values():
        for d in sig.domains:
            if d not in m.domains:
                diags.append(Diagnostic(0, 0, f"predicate {sig.name}: unknown domain {d!r}"))
            elif not m.domains[d]:
                diags.append(Diagnostic(0, 0, f"domain {d!r} is empty"))
    for e in m.labels:
        if e.predicate not in m.predicates:
            diags.append(Diagnostic(e.line, 0, f"label for unknown predicate {e.predicate}"))
    for fd in m.formulas.values():
        diags.extend(_formula_diagnostics(m, fd.name, fd.body))
    return diags
