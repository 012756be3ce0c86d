"""Reader and printer for the model-file format.

A model file is a sequence of ``.``-terminated statements::

    structure prob, bool.
    domain video = {t1, t2}.
    tensor t1 = [0.1, 0.9].
    pred burglary(video).
    truth bool.
    label burglary @ prob : table(burglary(t1)=0.7, *=0.5).
    label burglary @ bool : identity.
    formula q(V:video) := sum<burglary(V)> transform<prob, iverson>(burglary(V)@bool) * burglary(V)@prob.

Line comments start with ``%``.  The printer always emits operators in
function form (``times<prob>(a, b)``) so that printing and reparsing is the
identity on models.
"""
from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .algebra import STRUCTURE_NAMES, get_structure
from .language import (
    AggAtom,
    AggVar,
    AlgAtom,
    Atom,
    Binary,
    Const,
    Diagnostic,
    Formula,
    FormulaDef,
    LabelEntry,
    LabellingSpec,
    Model,
    ModelError,
    PredicateSignature,
    Transform,
    Unary,
    Variable,
)

__all__ = ["parse_model", "print_model", "print_formula", "parse_formula"]

AGGREGATORS = ("sum", "prod", "max", "min", "any", "all")

_TOKEN = re.compile(
    r"""
    (?P<ws>[ \t\r]+|%[^\n]*)
  | (?P<nl>\n)
  | (?P<num>-?\d+\.\d+(?:[eE][-+]?\d+)?|-?\d+[eE][-+]?\d+|-?\d+)
  | (?P<name>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<sym>:=|\.\.|[()\[\]{}<>,.:@|*+=])
    """,
    re.VERBOSE,
)


@dataclass(frozen=True)
class Tok:
    kind: str
    text: str
    line: int
    col: int


def tokenize(text: str) -> list[Tok]:
    toks = []
    line, start = 1, 0
    pos = 0
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m:
            raise ModelError([Diagnostic(line, pos - start + 1, f"unexpected character {text[pos]!r}")])
        kind = m.lastgroup
        if kind == "nl":
            line += 1
            start = m.end()
        elif kind != "ws":
            toks.append(Tok(kind, m.group(), line, m.start() - start + 1))
        pos = m.end()
    toks.append(Tok("eof", "", line, pos - start + 1))
    return toks


class _Parser:
    def __init__(self, text: str):
        self.toks = tokenize(text)
        self.i = 0
        self.diags: list[Diagnostic] = []
        self.model = Model()
        self._labels: list[LabelEntry] = []
        self._label_keys: set = set()

    # -- token helpers
    @property
    def tok(self) -> Tok:
        return self.toks[self.i]

    def peek(self, k: int = 1) -> Tok:
        return self.toks[min(self.i + k, len(self.toks) - 1)]

    def fail(self, msg: str, tok: Tok | None = None):
        t = tok or self.tok
        raise ModelError([Diagnostic(t.line, t.col, msg)])

    def at(self, text: str) -> bool:
        return self.tok.text == text and self.tok.kind in ("sym", "name")

    def expect(self, text: str) -> Tok:
        if not self.at(text):
            self.fail(f"expected {text!r}, found {self.tok.text or 'end of input'!r}")
        t = self.tok
        self.i += 1
        return t

    def accept(self, text: str) -> bool:
        if self.at(text):
            self.i += 1
            return True
        return False

    def name(self) -> str:
        if self.tok.kind != "name":
            self.fail(f"expected identifier, found {self.tok.text!r}")
        t = self.tok.text
        self.i += 1
        return t

    def number(self):
        if self.tok.kind != "num":
            self.fail(f"expected number, found {self.tok.text!r}")
        t = self.tok.text
        self.i += 1
        return float(t) if any(c in t for c in ".eE") else int(t)

    def error(self, msg: str, tok: Tok):
        self.diags.append(Diagnostic(tok.line, tok.col, msg))

    # -- statements
    def parse(self) -> Model:
        m = self.model
        while self.tok.kind != "eof":
            start = self.tok
            kw = self.name()
            if kw == "structure":
                names = [self.structure_name()]
                while self.accept(","):
                    names.append(self.structure_name())
                m.structures = m.structures + tuple(names)
            elif kw == "domain":
                self.domain()
            elif kw == "tensor":
                sym = self.constant()
                self.expect("=")
                self.expect("[")
                vals = []
                if not self.at("]"):
                    vals.append(float(self.number()))
                    while self.accept(","):
                        vals.append(float(self.number()))
                self.expect("]")
                m.tensors[sym] = np.asarray(vals, dtype=float)
            elif kw == "pred":
                self.pred(start)
            elif kw == "truth":
                t = self.name()
                if t not in ("bool", "fuzzy"):
                    self.error(f"truth domain must be bool or fuzzy, got {t!r}", start)
                m.truth = t
            elif kw == "label":
                self.label(start)
            elif kw == "formula":
                self.formula_def(start)
            else:
                self.fail(f"unknown statement {kw!r}", start)
            self.expect(".")
        if self.diags:
            raise ModelError(self.diags)
        m.labels = LabellingSpec(self._labels)
        return m

    def structure_name(self) -> str:
        t = self.tok
        n = self.name()
        if n == "fuzzy" and self.at(":") and self.peek().kind == "name":
            self.i += 1
            n = f"fuzzy:{self.name()}"
        if n not in STRUCTURE_NAMES:
            self.error(f"unknown structure id {n!r}", t)
        return n

    def constant(self):
        if self.tok.kind == "num":
            v = self.number()
            if isinstance(v, float):
                self.fail("constants must be identifiers or integers")
            return v
        t = self.tok
        n = self.name()
        if n[0].isupper() or n[0] == "_":
            self.fail(f"expected a constant, found variable {n}", t)
        return n

    def domain(self):
        n = self.name()
        self.expect("=")
        self.expect("{")
        if self.tok.kind == "num" and self.peek().text == "..":
            lo = self.number()
            self.expect("..")
            hi = self.number()
            vals = tuple(range(lo, hi + 1))
        else:
            vals = []
            if not self.at("}"):
                vals.append(self.constant())
                while self.accept(","):
                    vals.append(self.constant())
            vals = tuple(vals)
        self.expect("}")
        if not vals:
            self.error(f"domain {n!r} is empty", self.tok)
        self.model.domains[n] = vals

    def pred(self, start: Tok):
        n = self.name()
        doms = []
        if self.accept("(") and not self.accept(")"):
            doms.append(self.name())
            while self.accept(","):
                doms.append(self.name())
            self.expect(")")
        for d in doms:
            if d not in self.model.domains:
                self.error(f"unknown domain {d!r} in predicate {n}", start)
        self.model.predicates[n] = PredicateSignature(n, tuple(doms))

    def label(self, start: Tok):
        pred = self.name()
        self.expect("@")
        struct = self.structure_name()
        self.expect(":")
        kind_tok = self.tok
        kind = self.name()
        sig = self.model.predicates.get(pred)
        if sig is None:
            self.error(f"label for undeclared predicate {pred}", start)
        opts: dict = {}
        table: dict = {}
        if kind == "table":
            self.expect("(")
            while True:
                if self.accept("*"):
                    key = "*"
                else:
                    key = self.atom(ground_only=True)
                self.expect("=")
                t = float(self.number())
                f = None
                if self.accept("|"):
                    f = float(self.number())
                if f is None:
                    f = 1.0 - t if struct == "prob" else t
                table[key] = (t, f)
                if not self.accept(","):
                    break
            self.expect(")")
        elif kind in ("categorical", "perceptual"):
            if self.accept("("):
                while not self.at(")"):
                    k = self.name()
                    self.expect("=")
                    if self.tok.kind == "name":
                        opts[k] = self.name()
                    else:
                        opts[k] = self.number()
                    if not self.accept(","):
                        break
                self.expect(")")
        elif kind != "identity":
            self.fail(f"unknown label kind {kind!r}", kind_tok)
        group = opts.get("group", "none")
        if group == "last":
            group = (sig.arity - 1) if sig else 0
        elif group == "none":
            group = None
        elif isinstance(group, int):
            group = group - 1
        else:
            self.error(f"bad group option {group!r}", kind_tok)
            group = None
        if group is not None and sig is not None and not (0 <= group < sig.arity):
            self.error(f"group position out of range for {pred}", kind_tok)
        if (pred, struct) in self._label_keys:
            self.error(f"duplicate labelling entry for {pred} @ {struct}", start)
        self._label_keys.add((pred, struct))
        dim = opts.get("dim")
        self._labels.append(
            LabelEntry(
                pred,
                struct,
                kind,
                group=group,
                table=table,
                dim=int(dim) if dim is not None else None,
                hidden=int(opts.get("hidden", 0)),
                line=start.line,
            )
        )

    def formula_def(self, start: Tok):
        n = self.name()
        params = []
        if self.accept("("):
            while not self.at(")"):
                v = self.variable()
                self.expect(":")
                d = self.name()
                if d not in self.model.domains:
                    self.error(f"unknown domain {d!r}", start)
                params.append((v, d))
                if not self.accept(","):
                    break
            self.expect(")")
        self.expect(":=")
        self._var_types: dict[Variable, str] = {v: d for v, d in params}
        self._typed_at: dict[Variable, Tok] = {v: start for v, _ in params}
        body = self.expr()
        self.model.formulas[n] = FormulaDef(n, tuple(params), body)

    def variable(self) -> Variable:
        t = self.tok
        n = self.name()
        if not (n[0].isupper() or n[0] == "_"):
            self.fail(f"expected a variable, found {n}", t)
        return Variable(n)

    # -- terms and atoms
    def atom(self, ground_only: bool = False) -> Atom:
        t = self.tok
        pred = self.name()
        args = []
        if self.accept("(") and not self.accept(")"):
            while True:
                at = self.tok
                if self.tok.kind == "name" and (self.tok.text[0].isupper() or self.tok.text[0] == "_"):
                    if ground_only:
                        self.fail("table entries must be ground atoms")
                    args.append(Variable(self.name()))
                else:
                    args.append(self.constant())
                args[-1] = (args[-1], at)
                if not self.accept(","):
                    break
            self.expect(")")
        sig = self.model.predicates.get(pred)
        if sig is None:
            self.error(f"undeclared predicate {pred}", t)
            return Atom(pred, tuple(a for a, _ in args))
        if len(args) != sig.arity:
            self.error(f"arity mismatch: {pred} expects {sig.arity} arguments, got {len(args)}", t)
            return Atom(pred, tuple(a for a, _ in args))
        for i, (a, at) in enumerate(args):
            dom_name = sig.domains[i]
            if isinstance(a, Variable):
                types = getattr(self, "_var_types", {})
                prev = types.get(a)
                if prev is None:
                    types[a] = dom_name
                elif prev != dom_name:
                    self.error(f"variable {a} used with domains {prev!r} and {dom_name!r}", at)
            elif dom_name in self.model.domains and a not in self.model.domains[dom_name]:
                self.error(f"constant outside domain: {a!r} is not in {dom_name!r}", at)
        return Atom(pred, tuple(a for a, _ in args))

    # -- expressions
    def expr(self) -> Formula:
        left = self.and_expr()
        while self.at("+") or self.at("or"):
            op_tok = self.tok
            self.i += 1
            right = self.and_expr()
            left = self.binary(op_tok.text, left, right, op_tok)
        return left

    def and_expr(self) -> Formula:
        left = self.unary()
        while self.at("*") or self.at("and"):
            op_tok = self.tok
            self.i += 1
            right = self.unary()
            left = self.binary(op_tok.text, left, right, op_tok)
        return left

    def binary(self, op: str, left: Formula, right: Formula, tok: Tok) -> Formula:
        s = left.structure
        if right.structure != s:
            self.fail(f"operands of {op!r} live in {s} and {right.structure}", tok)
        st = get_structure(s) if s in STRUCTURE_NAMES else None
        if st is None or not st.has_op(op) or st.resolve_op(op) not in st.binary_ops:
            self.fail(f"structure {s} has no binary operator {op!r}", tok)
        return Binary(st.resolve_op(op), left, right, s)

    def unary(self) -> Formula:
        if self.at("not") and self.peek().text != "<":
            tok = self.tok
            self.i += 1
            child = self.unary()
            st = get_structure(child.structure)
            if not st.has_op("not"):
                self.fail(f"structure {child.structure} has no negation", tok)
            return Unary(st.resolve_op("not"), child, child.structure)
        return self.primary()

    def primary(self) -> Formula:
        t = self.tok
        if self.accept("("):
            e = self.expr()
            self.expect(")")
            return e
        if t.kind == "num":
            v = self.number()
            self.expect("@")
            s = self.structure_name()
            return Const(float(v), s)
        if t.kind == "sym" and t.text in "+*" and self.peek().text == "<":
            self.i += 1
            return self.func_form(t.text, t)
        if t.kind != "name":
            self.fail(f"unexpected {t.text!r} in formula")
        nxt = self.peek()
        if t.text in ("true", "false") and nxt.text == "@":
            self.i += 2
            return Const(t.text == "true", self.structure_name())
        if t.text in AGGREGATORS and nxt.text == "<":
            return self.aggregation()
        if t.text == "transform" and nxt.text == "<":
            self.i += 2
            target = self.structure_name()
            self.expect(",")
            tname = self.name()
            self.expect(">")
            self.expect("(")
            child = self.expr()
            self.expect(")")
            return Transform(target, tname, child)
        if nxt.text == "<":
            self.i += 1
            return self.func_form(t.text, t)
        a = self.atom()
        self.expect("@")
        return AlgAtom(a, self.structure_name())

    def func_form(self, op: str, tok: Tok) -> Formula:
        self.expect("<")
        s = self.structure_name()
        self.expect(">")
        self.expect("(")
        args = [self.expr()]
        while self.accept(","):
            args.append(self.expr())
        self.expect(")")
        st = get_structure(s)
        if not st.has_op(op):
            self.fail(f"structure {s} has no operator {op!r}", tok)
        name = st.resolve_op(op)
        for a in args:
            if a.structure != s:
                self.fail(f"operand of {op} lives in {a.structure}, expected {s}", tok)
        if name in st.unary_ops:
            if len(args) != 1:
                self.fail(f"{op} is unary", tok)
            return Unary(name, args[0], s)
        if len(args) < 2:
            self.fail(f"{op} needs at least two operands", tok)
        acc = args[0]
        for a in args[1:]:
            acc = Binary(name, acc, a, s)
        return acc

    def aggregation(self) -> Formula:
        agg = self.name()
        self.expect("<")
        if (
            self.tok.kind == "name"
            and (self.tok.text[0].isupper() or self.tok.text[0] == "_")
            and self.peek().text == "in"
        ):
            v = self.variable()
            self.expect("in")
            dom = self.name()
            if dom not in self.model.domains:
                self.fail(f"unknown domain {dom!r}")
            self.expect(">")
            types = getattr(self, "_var_types", {})
            outer = types.get(v)
            types[v] = dom
            body = self.expr()
            if outer is None:
                types.pop(v, None)
            else:
                types[v] = outer
            return AggVar(v, dom, agg, body, body.structure)
        a = self.atom()
        self.expect(">")
        body = self.expr()
        return AggAtom(a, agg, body, body.structure)


def parse_model(text: str) -> Model:
    """Parse a model file; raises ``ModelError`` carrying positioned diagnostics."""
    return _Parser(text).parse()


def parse_formula(text: str, model: Model) -> Formula:
    """Parse a single formula expression against the declarations of ``model``."""
    p = _Parser(text)
    p.model = model
    p._var_types = {}
    f = p.expr()
    if p.tok.kind != "eof" and not (p.at(".") and p.peek().kind == "eof"):
        p.fail(f"trailing input {p.tok.text!r}")
    if p.diags:
        raise ModelError(p.diags)
    return f


# ---------------------------------------------------------------------------
# printing

_FUNC_NAMES = {"+": "plus", "*": "times"}


def _const_str(c) -> str:
    return repr(c) if isinstance(c, float) else str(c)


def _atom_str(a: Atom) -> str:
    if not a.args:
        return a.predicate
    return f"{a.predicate}({', '.join(_const_str(x) if not isinstance(x, Variable) else x.name for x in a.args)})"


def print_formula(f: Formula) -> str:
    if isinstance(f, AlgAtom):
        return f"{_atom_str(f.atom)}@{f.structure}"
    if isinstance(f, Const):
        if isinstance(f.value, (bool, np.bool_)):
            return f"{'true' if f.value else 'false'}@{f.structure}"
        return f"{float(f.value)!r}@{f.structure}"
    if isinstance(f, Unary):
        return f"{_FUNC_NAMES.get(f.op, f.op)}<{f.structure}>({print_formula(f.child)})"
    if isinstance(f, Binary):
        return f"{_FUNC_NAMES.get(f.op, f.op)}<{f.structure}>({print_formula(f.left)}, {print_formula(f.right)})"
    if isinstance(f, AggAtom):
        return f"{f.aggregator}<{_atom_str(f.atom)}>({print_formula(f.child)})"
    if isinstance(f, AggVar):
        return f"{f.aggregator}<{f.var.name} in {f.domain}>({print_formula(f.child)})"
    if isinstance(f, Transform):
        return f"transform<{f.target}, {f.transformation}>({print_formula(f.child)})"
    raise TypeError(f"not a formula: {f!r}")


def print_model(m: Model) -> str:
    out = []
    if m.structures:
        out.append(f"structure {', '.join(m.structures)}.")
    for name, vals in m.domains.items():
        ints = all(isinstance(v, int) and not isinstance(v, bool) for v in vals)
        if ints and len(vals) > 1 and list(vals) == list(range(vals[0], vals[-1] + 1)):
            out.append(f"domain {name} = {{{vals[0]}..{vals[-1]}}}.")
        else:
            out.append(f"domain {name} = {{{', '.join(_const_str(v) for v in vals)}}}.")
    for sym, vec in m.tensors.items():
        out.append(f"tensor {sym} = [{', '.join(repr(float(x)) for x in vec)}].")
    for sig in m.predicates.values():
        out.append(f"pred {sig.name}({', '.join(sig.domains)})." if sig.domains else f"pred {sig.name}.")
    out.append(f"truth {m.truth}.")
    for e in m.labels:
        out.append(f"label {e.predicate} @ {e.structure} : {_label_str(e)}.")
    for fd in m.formulas.values():
        params = ", ".join(f"{v.name}:{d}" for v, d in fd.parameters)
        head = f"formula {fd.name}({params})" if params else f"formula {fd.name}"
        out.append(f"{head} :=\n    {print_formula(fd.body)}.")
    return "\n".join(out) + "\n"


def _label_str(e: LabelEntry) -> str:
    group = "none" if e.group is None else str(e.group + 1)
    if e.kind == "identity":
        return "identity"
    if e.kind == "table":
        parts = []
        for k, (t, f) in e.table.items():
            key = "*" if k == "*" else _atom_str(k)
            parts.append(f"{key}={t!r}|{f!r}")
        return f"table({', '.join(parts)})"
    if e.kind == "categorical":
        return f"categorical(group={group})"
    opts = [f"hidden={e.hidden}", f"group={group}"]
    if e.dim is not None:
        opts.insert(0, f"dim={e.dim}")
    return f"perceptual({', '.join(opts)})"
