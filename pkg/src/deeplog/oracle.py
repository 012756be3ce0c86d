"""Reference semantics by direct recursion and exhaustive enumeration.

Nothing here is fast.  Enumeration visits truth values in the order false
then true, atoms in Herbrand order and domain constants in declared order,
so golden values are reproducible bit for bit.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Mapping, Sequence

import numpy as np

from .algebra import get_structure, get_transformation
from .language import (
    AggAtom,
    AggVar,
    AlgAtom,
    Atom,
    Binary,
    Const,
    Formula,
    Interpretation,
    LabellingSpec,
    Model,
    Transform,
    Unary,
    Variable,
    atoms_of,
    fold_binary,
)
from .params import ParameterStore, bind_labels

__all__ = [
    "OracleError",
    "OracleResult",
    "evaluate",
    "evaluate_counted",
    "brute_force_wmc",
    "enumerate_models",
    "wmc_formula",
    "eval_bool_table",
    "ENUMERATION_LIMIT",
]

ENUMERATION_LIMIT = 24


class OracleError(ValueError):
    pass


@dataclass(frozen=True)
class OracleResult:
    value: Any
    enumerated_interpretations: int
    enumerated_assignments: int


def _ground(atom: Atom, env: Mapping[Variable, Any]) -> Atom:
    if atom.is_ground():
        return atom
    args = tuple(env.get(a, a) if isinstance(a, Variable) else a for a in atom.args)
    out = Atom(atom.predicate, args)
    if not out.is_ground():
        raise OracleError(f"atom {out} is not ground under the assignment")
    return out


class _Evaluator:
    def __init__(self, m: Model, store: ParameterStore | None, labels: LabellingSpec | None = None):
        self.m = m
        self.store = store
        if labels is not None and labels is not m.labels:
            m = Model(m.structures, m.domains, m.tensors, m.predicates, m.truth, labels, m.formulas)
        self.bindings = bind_labels(m, None)
        self.interps = 0
        self.assigns = 0

    def payload(self, c):
        return self.m.payload(c)

    def label(self, atom: Atom, structure: str, truth):
        b = self.bindings.get((atom.predicate, structure))
        if b is None:
            raise OracleError(f"labelling lookup miss for {atom} @ {structure}")
        if b.entry.kind in ("categorical", "perceptual") and self.store is None:
            raise OracleError(f"label of {atom} @ {structure} needs parameters")
        try:
            return b.value(self.store, atom, truth, self.payload)
        except KeyError as exc:
            raise OracleError(str(exc.args[0])) from None

    def run(self, f: Formula, env: dict, interp: Interpretation):
        if isinstance(f, AlgAtom):
            a = _ground(f.atom, env)
            truth = interp.get(a)
            b = self.bindings.get((a.predicate, f.structure))
            needs_truth = b is None or b.entry.kind == "identity" or f.structure == "prob"
            if truth is None and needs_truth:
                raise OracleError(f"atom {a} is unassigned outside any binder")
            return self.label(a, f.structure, truth)
        if isinstance(f, Const):
            return f.value
        if isinstance(f, Unary):
            return get_structure(f.structure).apply(f.op, self.run(f.child, env, interp))
        if isinstance(f, Binary):
            s = get_structure(f.structure)
            return s.apply(f.op, self.run(f.left, env, interp), self.run(f.right, env, interp))
        if isinstance(f, Transform):
            return get_transformation(f.transformation)(self.run(f.child, env, interp))
        if isinstance(f, AggAtom):
            if interp.truth_domain != "bool" or self.m.truth == "fuzzy":
                raise OracleError(
                    "aggregation over fuzzy atoms is not enumerable; use the Dirac-delta "
                    "expectation mode of the circuit runtime instead"
                )
            a = _ground(f.atom, env)
            s = get_structure(f.structure)
            vals = []
            for z in (False, True):
                if not isinstance(f.child, AggAtom):
                    self.interps += 1
                vals.append(self.run(f.child, env, interp.extend(a, z)))
            return s.fold(f.aggregator, vals)
        if isinstance(f, AggVar):
            s = get_structure(f.structure)
            vals = []
            for c in self.m.domains[f.domain]:
                if not isinstance(f.child, AggVar):
                    self.assigns += 1
                vals.append(self.run(f.child, {**env, f.var: c}, interp))
            return s.fold(f.aggregator, vals)
        raise TypeError(f"not a formula node: {f!r}")


def evaluate_counted(
    m: Model,
    f: Formula,
    sigma: Mapping | None = None,
    i: Interpretation | Mapping | None = None,
    store: ParameterStore | None = None,
) -> OracleResult:
    sigma = {(Variable(k) if isinstance(k, str) else k): v for k, v in (sigma or {}).items()}
    if i is None:
        i = Interpretation({}, "fuzzy" if m.truth == "fuzzy" else "bool")
    elif not isinstance(i, Interpretation):
        i = Interpretation(i, "fuzzy" if m.truth == "fuzzy" else "bool")
    ev = _Evaluator(m, store)
    v = ev.run(f, dict(sigma), i)
    return OracleResult(v, ev.interps, ev.assigns)


def evaluate(
    m: Model,
    f: Formula,
    sigma: Mapping | None = None,
    i: Interpretation | Mapping | None = None,
    store: ParameterStore | None = None,
):
    """Label of ``f`` under assignment ``sigma`` and interpretation ``i``."""
    return evaluate_counted(m, f, sigma, i, store).value


# ---------------------------------------------------------------------------
# enumeration


def eval_bool_table(f: Formula, columns: Mapping[Atom, np.ndarray], n_rows: int) -> np.ndarray:
    """Vectorized evaluation of a purely Boolean formula over truth-table columns."""
    memo: dict[int, np.ndarray] = {}

    def go(g: Formula) -> np.ndarray:
        k = id(g)
        if k in memo:
            return memo[k]
        if g.structure != "bool":
            raise OracleError(f"expected a Boolean formula, found a node over {g.structure}")
        if isinstance(g, AlgAtom):
            if g.atom not in columns:
                raise OracleError(f"atom {g.atom} is not in the enumerated atom list")
            r = columns[g.atom]
        elif isinstance(g, Const):
            r = np.full(n_rows, bool(g.value))
        elif isinstance(g, Unary):
            r = np.logical_not(go(g.child))
        elif isinstance(g, Binary):
            fn = np.logical_or if g.op == "or" else np.logical_and
            r = fn(go(g.left), go(g.right))
        else:
            raise OracleError(f"unsupported node in Boolean logic: {type(g).__name__}")
        memo[k] = r
        return r

    return go(f)


def _sorted_atoms(m: Model | None, atoms: Sequence[Atom]) -> list[Atom]:
    atoms = list(dict.fromkeys(atoms))
    if m is None:
        return atoms
    return sorted(atoms, key=m.herbrand_key)


def _guard(n: int):
    if n > ENUMERATION_LIMIT:
        raise OracleError(f"{n} atoms exceed the enumeration limit of {ENUMERATION_LIMIT}")


def _columns(atoms: Sequence[Atom], true_first: bool) -> dict[Atom, np.ndarray]:
    n = len(atoms)
    rows = np.arange(2**n, dtype=np.int64)
    cols = {}
    for j, a in enumerate(atoms):
        bit = ((rows >> (n - 1 - j)) & 1).astype(bool)
        cols[a] = ~bit if true_first else bit
    return cols


def brute_force_wmc(
    m: Model,
    logic: Formula,
    weights: LabellingSpec | None = None,
    store: ParameterStore | None = None,
    atoms: Sequence[Atom] | None = None,
) -> float:
    """Sum over all interpretations of ``iverson(logic) * prod of weights``.

    The summation order matches :func:`evaluate` on :func:`wmc_formula`, so
    both return bit-identical floats.
    """
    atoms = _sorted_atoms(m, atoms if atoms is not None else atoms_of(logic))
    n = len(atoms)
    _guard(n)
    cols = _columns(atoms, true_first=False)
    sat = eval_bool_table(logic, cols, 2**n)
    t = np.where(sat, 1.0, 0.0)
    ev = _Evaluator(m, store, weights)
    w = None
    for a in atoms:
        wt = float(ev.label(a, "prob", True))
        wf = float(ev.label(a, "prob", False))
        col = np.where(cols[a], wt, wf)
        w = col if w is None else w * col
    v = t * w if w is not None else t
    for _ in range(n):
        v = v.reshape(-1, 2)
        v = v[:, 0] + v[:, 1]
    return float(v[0])


def wmc_formula(logic: Formula, atoms: Sequence[Atom], m: Model | None = None) -> Formula:
    """The canonical formula ``sum_a1 ... sum_an iverson(logic) * w(a1) * ... * w(an)``."""
    atoms = _sorted_atoms(m, atoms)
    body = Transform("prob", "iverson", logic)
    if atoms:
        w = fold_binary("*", [AlgAtom(a, "prob") for a in atoms], "prob")
        body = Binary("*", body, w, "prob")
    for a in reversed(atoms):
        body = AggAtom(a, "sum", body, "prob")
    return body


def enumerate_models(logic: Formula, atoms: Sequence[Atom]) -> list[Interpretation]:
    """All satisfying total interpretations, lexicographic with true before false."""
    atoms = list(atoms)
    _guard(len(atoms))
    missing = [a for a in atoms_of(logic) if a not in set(atoms)]
    if missing:
        raise OracleError(f"atoms {', '.join(map(str, missing))} are missing from the atom list")
    cols = _columns(atoms, true_first=True)
    sat = eval_bool_table(logic, cols, 2 ** len(atoms))
    out = []
    for r in np.flatnonzero(sat):
        out.append(Interpretation({a: bool(cols[a][r]) for a in atoms}, "bool"))
    return out
