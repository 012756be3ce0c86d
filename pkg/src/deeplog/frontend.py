"""Logic-program front end.

Parses a small Prolog dialect with ``l :: f`` and neural annotations, grounds
programs over finite domains, and proves queries by SLD resolution.  Proofs
are collected into a hash-consed Boolean DAG whose leaves are annotated
facts; :func:`to_deeplog` wraps the result as weighted-model-counting
formulas over a generated :class:`~deeplog.language.Model`.

Conventions: variables start with an upper-case letter or ``_``; lists are
``'.'``/``'[]'`` structures; arithmetic is over integers.  Negation (``\\+``
or ``not``) is only allowed on annotated facts.
"""
from __future__ import annotations

import re
import sys
from dataclasses import dataclass, field
from itertools import count, product
from typing import Any, Iterator, Mapping, Sequence

import numpy as np

from .compiler import FALSE, TRUE, K_AND, K_OR, NnfManager
from .language import (
    AlgAtom,
    Atom,
    Binary,
    Const,
    Diagnostic,
    FormulaDef,
    Formula,
    LabelEntry,
    LabellingSpec,
    Model,
    PredicateSignature,
    Unary,
    Variable,
    exactly_one,
    fold_binary,
)

__all__ = [
    "Struct",
    "Clause",
    "Annotation",
    "Program",
    "ProgramError",
    "ProofError",
    "parse_program",
    "parse_term",
    "Prover",
    "ProofResult",
    "prove",
    "prove_dag",
    "count_proofs",
    "ground_program",
    "GroundProgram",
    "grounded_formula",
    "Translation",
    "to_deeplog",
    "compile_answers",
    "complete_groups",
    "make_list",
    "list_items",
    "term_to_str",
    "BUILTINS",
    "parse_query",
    "build_model",
    "walk",
    "unify",
    "resolve",
    "Literal",
    "NIL",
]

DEFAULT_DEPTH_LIMIT = 10_000
GROUNDING_LIMIT = 1_000_000


class ProgramError(ValueError):
    def __init__(self, message: str, line: int = 0, col: int = 0):
        self.line, self.col = line, col
        super().__init__(f"{line}:{col}: {message}" if line else message)


class ProofError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# terms


class Struct:
    """Compound term (or atom, when ``args`` is empty) with a cached hash."""

    __slots__ = ("name", "args", "_h")

    def __init__(self, name: str, args: tuple = ()):
        self.name = name
        self.args = tuple(args)
        self._h = hash((name, self.args))

    def __hash__(self) -> int:
        return self._h

    def __eq__(self, other) -> bool:
        if self is other:
            return True
        return (
            isinstance(other, Struct) and self._h == other._h and self.name == other.name and self.args == other.args
        )

    def __repr__(self) -> str:
        return f"Struct({term_to_str(self)})"

    def __str__(self) -> str:
        return term_to_str(self)

    @property
    def indicator(self) -> tuple[str, int]:
        return (self.name, len(self.args))


NIL = "[]"


def make_list(items: Sequence, tail=NIL):
    out = tail
    for x in reversed(list(items)):
        out = Struct(".", (x, out))
    return out


def list_items(t) -> list | None:
    out = []
    while isinstance(t, Struct) and t.name == "." and len(t.args) == 2:
        out.append(t.args[0])
        t = t.args[1]
    return out if t == NIL else None


def term_to_str(t) -> str:
    if isinstance(t, Variable):
        return t.name
    if isinstance(t, Struct):
        items = list_items(t)
        if items is not None:
            return "[" + ", ".join(term_to_str(x) for x in items) + "]"
        if t.name == "." and len(t.args) == 2:
            head, tail = [], t
            while isinstance(tail, Struct) and tail.name == ".":
                head.append(tail.args[0])
                tail = tail.args[1]
            return "[" + ", ".join(term_to_str(x) for x in head) + " | " + term_to_str(tail) + "]"
        if not t.args:
            return t.name
        return f"{t.name}({', '.join(term_to_str(a) for a in t.args)})"
    return str(t)


def term_vars(t, out: list | None = None) -> list[Variable]:
    out = [] if out is None else out
    if isinstance(t, Variable):
        if t not in out:
            out.append(t)
    elif isinstance(t, Struct):
        for a in t.args:
            term_vars(a, out)
    return out


def is_ground(t) -> bool:
    if isinstance(t, Variable):
        return False
    if isinstance(t, Struct):
        return all(is_ground(a) for a in t.args)
    return True


# ---------------------------------------------------------------------------
# program structure


@dataclass(frozen=True)
class Annotation:
    """Label attached to a fact.

    ``kind`` is ``"prob"`` for ``p :: f`` or ``"neural"`` for network
    annotations.  A neural annotation with ``class_pos`` set is categorical:
    exactly one class holds per assignment of the other arguments.
    """

    kind: str
    head: Struct
    prob: float | None = None
    net: str | None = None
    class_pos: int | None = None
    classes: tuple | None = None
    line: int = 0


@dataclass(frozen=True)
class Literal:
    term: Any
    negated: bool = False

    def __str__(self) -> str:
        return ("\\+ " if self.negated else "") + term_to_str(self.term)


@dataclass(frozen=True)
class Clause:
    head: Struct
    body: tuple[Literal, ...] = ()
    line: int = 0

    def __str__(self) -> str:
        if not self.body:
            return f"{term_to_str(self.head)}."
        return f"{term_to_str(self.head)} :- {', '.join(map(str, self.body))}."


@dataclass
class Program:
    clauses: list[Clause] = field(default_factory=list)
    annotations: list[Annotation] = field(default_factory=list)
    queries: list[tuple[tuple[Literal, ...], ...]] = field(default_factory=list)
    diagnostics: list[Diagnostic] = field(default_factory=list)

    def predicates(self) -> list[tuple[str, int]]:
        seen: dict[tuple[str, int], None] = {}
        for a in self.annotations:
            seen.setdefault(a.head.indicator)
        for c in self.clauses:
            seen.setdefault(c.head.indicator)
            for lit in c.body:
                if isinstance(lit.term, Struct) and lit.term.indicator not in BUILTINS:
                    seen.setdefault(lit.term.indicator)
        return list(seen)

    def clauses_for(self, indicator: tuple[str, int]) -> list[Clause]:
        return [c for c in self.clauses if c.head.indicator == indicator]

    def annotated(self) -> dict[tuple[str, int], list[Annotation]]:
        out: dict[tuple[str, int], list[Annotation]] = {}
        for a in self.annotations:
            out.setdefault(a.head.indicator, []).append(a)
        return out


# ---------------------------------------------------------------------------
# parsing

_TOKEN = re.compile(
    r"""
    (?P<ws>\s+|%[^\n]*)
  | (?P<num>\d+\.\d+(?:[eE][-+]?\d+)?|\d+)
  | (?P<var>[A-Z_][A-Za-z0-9_]*)
  | (?P<name>[a-z][A-Za-z0-9_]*|'[^']*')
  | (?P<sym>:-|\?-|::|\\\+|=:=|=\\=|\\=|=<|>=|\*\*|//|[-+*/<>=()\[\],;|.])
    """,
    re.VERBOSE,
)

_INFIX = {
    "is": (700, "xfx"), "=": (700, "xfx"), "\\=": (700, "xfx"), "<": (700, "xfx"), ">": (700, "xfx"),
    "=<": (700, "xfx"), ">=": (700, "xfx"), "=:=": (700, "xfx"), "=\\=": (700, "xfx"),
    "+": (500, "yfx"), "-": (500, "yfx"),
    "*": (400, "yfx"), "/": (400, "yfx"), "//": (400, "yfx"), "mod": (400, "yfx"), "div": (400, "yfx"),
    "**": (200, "xfx"),
}


@dataclass
class _Tok:
    kind: str
    text: str
    line: int
    col: int


def _tokenize(text: str) -> list[_Tok]:
    out, pos, line, line_start = [], 0, 1, 0
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None:
            raise ProgramError(f"unexpected character {text[pos]!r}", line, pos - line_start + 1)
        kind = m.lastgroup
        s = m.group()
        if kind != "ws":
            out.append(_Tok(kind, s, line, pos - line_start + 1))
        nl = s.count("\n")
        if nl:
            line += nl
            line_start = pos + s.rfind("\n") + 1
        pos = m.end()
    out.append(_Tok("eof", "", line, pos - line_start + 1))
    return out


class _Parser:
    def __init__(self, text: str):
        self.toks = _tokenize(text)
        self.i = 0
        self.vars: dict[str, Variable] = {}
        self.anon = count()

    @property
    def tok(self) -> _Tok:
        return self.toks[self.i]

    def fail(self, msg: str):
        t = self.tok
        found = t.text or "end of input"
        raise ProgramError(f"{msg} (found {found!r})", t.line, t.col)

    def at(self, text: str) -> bool:
        t = self.tok
        return t.text == text and t.kind in ("sym", "name")

    def expect(self, text: str) -> None:
        if not self.at(text):
            self.fail(f"expected {text!r}")
        self.i += 1

    def accept(self, text: str) -> bool:
        if self.at(text):
            self.i += 1
            return True
        return False

    # -- terms
    def term(self, max_prec: int = 999):
        left = self.prefix()
        while True:
            t = self.tok
            if t.kind not in ("sym", "name") or t.text not in _INFIX:
                return left
            prec, typ = _INFIX[t.text]
            if prec > max_prec:
                return left
            self.i += 1
            right_max = prec - 1 if typ in ("xfx", "yfx") else prec
            right = self.term(right_max)
            left = Struct(t.text, (left, right))
            if typ == "xfx":
                # xfx operators do not chain
                t2 = self.tok
                if t2.text in _INFIX and _INFIX[t2.text][0] == prec:
                    self.fail("operator priority clash")

    def prefix(self):
        t = self.tok
        if t.kind == "num":
            self.i += 1
            return float(t.text) if "." in t.text else int(t.text)
        if t.kind == "var":
            self.i += 1
            if t.text == "_":
                return Variable(f"_G{next(self.anon)}")
            return self.vars.setdefault(t.text, Variable(t.text))
        if t.text == "-" and t.kind == "sym":
            self.i += 1
            if self.tok.kind == "num":
                v = self.prefix()
                return -v
            return Struct("-", (self.term(200),))
        if t.text == "(":
            self.i += 1
            inner = self.term(1200)
            self.expect(")")
            return inner
        if t.text == "[":
            self.i += 1
            if self.accept("]"):
                return NIL
            items = [self.term(999)]
            while self.accept(","):
                items.append(self.term(999))
            tail = NIL
            if self.accept("|"):
                tail = self.term(999)
            self.expect("]")
            return make_list(items, tail)
        if t.kind == "name" or (t.kind == "sym" and t.text == "\\+"):
            self.i += 1
            name = t.text[1:-1] if t.text.startswith("'") else t.text
            if self.tok.text == "(" and self.tok.kind == "sym" and name != "\\+":
                self.i += 1
                args = [self.term(999)]
                while self.accept(","):
                    args.append(self.term(999))
                self.expect(")")
                return Struct(name, tuple(args))
            if name == "\\+":
                return Struct("\\+", (self.term(900),))
            return Struct(name) if name != "[]" else NIL
        self.fail("expected a term")

    # -- bodies: nested and/or trees
    def body(self):
        alts = [self.conj()]
        while self.accept(";"):
            alts.append(self.conj())
        return alts[0] if len(alts) == 1 else ("or", alts)

    def conj(self):
        items = [self.goal()]
        while self.accept(","):
            items.append(self.goal())
        return items[0] if len(items) == 1 else ("and", items)

    def goal(self):
        if self.at("(") :
            # a parenthesised sub-body may contain ';'
            save = self.i
            self.i += 1
            inner = self.body()
            if self.accept(")"):
                if self.tok.text in _INFIX:
                    self.i = save
                else:
                    return inner
            else:
                self.i = save
        neg = False
        if self.accept("\\+"):
            neg = True
        t = self.term(999)
        if isinstance(t, Struct) and t.name in ("not", "\\+") and len(t.args) == 1:
            neg, t = not neg, t.args[0]
        if not isinstance(t, Struct):
            self.fail("expected a goal")
        return ("lit", Literal(t, neg))

    # -- statements
    def statements(self, prog: Program):
        while self.tok.kind != "eof":
            self.vars = {}
            start = self.tok
            if self.accept("?-"):
                prog.queries.append(tuple(_dnf(self.body())))
                self.expect(".")
                continue
            first = self.term(999)
            if self.accept("::"):
                head = self.term(999)
                if not isinstance(head, Struct):
                    self.fail("annotation target must be an atom")
                self.expect(".")
                prog.annotations.append(_annotation(first, head, start.line))
                continue
            if not isinstance(first, Struct):
                raise ProgramError("clause head must be an atom", start.line, start.col)
            if self.accept(":-"):
                tree = self.body()
                self.expect(".")
                for conj in _dnf(tree):
                    prog.clauses.append(Clause(first, conj, start.line))
            else:
                self.expect(".")
                prog.clauses.append(Clause(first, (), start.line))


def _dnf(tree) -> list[tuple[Literal, ...]]:
    kind = tree[0]
    if kind == "lit":
        return [(tree[1],)]
    if kind == "or":
        out = []
        for t in tree[1]:
            out.extend(_dnf(t))
        return out
    parts = [_dnf(t) for t in tree[1]]
    return [tuple(x for conj in combo for x in conj) for combo in product(*parts)]


def _annotation(label, head: Struct, line: int) -> Annotation:
    if isinstance(label, (int, float)):
        p = float(label)
        if not 0.0 <= p <= 1.0:
            raise ProgramError(f"probability {p} outside [0, 1]", line)
        return Annotation("prob", head, prob=p, line=line)
    if not isinstance(label, Struct):
        raise ProgramError("annotation label must be a number or a network term", line)
    if label.name == "nn" and len(label.args) == 4:
        net, _inputs, out, classes = label.args
        items = list_items(classes)
        if items is None or not isinstance(out, Variable) or out not in head.args:
            raise ProgramError("nn/4 annotation needs an output variable of the head and a class list", line)
        return Annotation("neural", head, net=term_to_str(net), class_pos=head.args.index(out),
                          classes=tuple(items), line=line)
    if label.name == "nn" and len(label.args) == 2:
        return Annotation("neural", head, net=term_to_str(label.args[0]), line=line)
    # net(Args) :: pred(Args) -- categorical when classes are supplied later
    return Annotation("neural", head, net=label.name, line=line)


def parse_term(text: str):
    p = _Parser(text)
    t = p.term(1200)
    if p.tok.kind != "eof":
        p.fail("trailing input after term")
    return t


def parse_program(text: str, categories: Mapping[str, Sequence] | None = None) -> Program:
    """Parse clause text; ``categories`` gives class lists for ``net(I,N) :: p(I,N)`` forms.

    A class list applies to the last argument, or to position ``k`` when given
    as ``(k, classes)``.
    """
    prog = Program()
    _Parser(text).statements(prog)
    categories = dict(categories or {})
    anns = []
    for a in prog.annotations:
        spec = categories.get(a.head.name)
        if a.kind == "neural" and a.class_pos is None and spec is not None:
            if isinstance(spec, tuple) and len(spec) == 2 and isinstance(spec[0], int) and not isinstance(spec[1], int):
                pos, classes = spec
            else:
                pos, classes = len(a.head.args) - 1, spec
            a = Annotation("neural", a.head, net=a.net, class_pos=pos, classes=tuple(classes), line=a.line)
        anns.append(a)
    prog.annotations = anns
    _check_program(prog)
    return prog


def _check_program(prog: Program) -> None:
    seen: dict[Any, int] = {}
    annotated = set()
    for a in prog.annotations:
        key = a.head if is_ground(a.head) else a.head.indicator
        if key in seen or a.head.indicator in seen:
            raise ProgramError(f"duplicate annotation for {term_to_str(a.head)} (first at line {seen.get(key, seen.get(a.head.indicator))})", a.line)
        seen[key] = a.line
        if not is_ground(a.head):
            seen[a.head.indicator] = a.line
        annotated.add(a.head.indicator)
    for c in prog.clauses:
        if c.head.indicator in annotated:
            raise ProgramError(f"{c.head.name}/{len(c.head.args)} is annotated and cannot also be defined by clauses", c.line)
        if c.head.indicator in BUILTINS:
            raise ProgramError(f"cannot redefine built-in {c.head.name}/{len(c.head.args)}", c.line)
        bound: set = set()
        for lit in c.body:
            if not lit.negated:
                if lit.term.indicator in BUILTINS:
                    if lit.term.name in ("between", "length"):
                        bound.update(term_vars(lit.term.args[-1]))
                    elif lit.term.name in ("is", "="):
                        bound.update(term_vars(lit.term))
                else:
                    bound.update(term_vars(lit.term))
            elif lit.term.indicator not in annotated:
                raise ProgramError(
                    f"negation of {term_to_str(lit.term)}: only annotated facts may be negated", c.line
                )
        free = [v for v in term_vars(c.head) if v not in bound]
        if c.body and free:
            prog.diagnostics.append(Diagnostic(
                c.line, 0, f"clause for {c.head.name}/{len(c.head.args)} is not range-restricted in "
                + ", ".join(v.name for v in free), "warning"))


# ---------------------------------------------------------------------------
# unification and built-ins


def walk(t, s: Mapping):
    while isinstance(t, Variable) and t in s:
        t = s[t]
    return t


def resolve(t, s: Mapping):
    t = walk(t, s)
    if isinstance(t, Struct) and t.args:
        return Struct(t.name, tuple(resolve(a, s) for a in t.args))
    return t


def unify(a, b, s: dict) -> dict | None:
    """Most general unifier extending ``s`` (a fresh dict), or None."""
    out = dict(s)
    stack = [(a, b)]
    while stack:
        x, y = stack.pop()
        x, y = walk(x, out), walk(y, out)
        if x is y or (type(x) is type(y) and x == y and not isinstance(x, Struct)):
            continue
        if isinstance(x, Variable):
            out[x] = y
        elif isinstance(y, Variable):
            out[y] = x
        elif isinstance(x, Struct) and isinstance(y, Struct):
            if x.name != y.name or len(x.args) != len(y.args):
                return None
            stack.extend(zip(x.args, y.args))
        elif isinstance(x, bool) or isinstance(y, bool) or x != y or type(x) is not type(y):
            return None
    return out


def _arith(t, s):
    t = walk(t, s)
    if isinstance(t, bool):
        raise ProofError(f"not a number: {t}")
    if isinstance(t, int):
        return t
    if isinstance(t, Variable):
        raise ProofError(f"arithmetic on unbound variable {t.name}")
    if isinstance(t, Struct):
        if len(t.args) == 1 and t.name == "-":
            return -_arith(t.args[0], s)
        if len(t.args) == 2:
            a, b = _arith(t.args[0], s), _arith(t.args[1], s)
            op = t.name
            if op == "+":
                return a + b
            if op == "-":
                return a - b
            if op == "*":
                return a * b
            if op == "**":
                return a**b
            if op in ("//", "div"):
                return a // b if op == "div" else int(a / b)
            if op == "mod":
                return a % b
            if op == "/":
                if a % b == 0:
                    return a // b
                raise ProofError(f"non-integral division {a}/{b}")
        raise ProofError(f"unsupported arithmetic {term_to_str(t)}")
    raise ProofError(f"not a number: {t!r}")


_CMP = {"<": int.__lt__, ">": int.__gt__, "=<": int.__le__, ">=": int.__ge__, "=:=": int.__eq__, "=\\=": int.__ne__}


def _builtin(goal: Struct, s: dict) -> Iterator[dict]:
    name, args = goal.name, goal.args
    if name == "between":
        lo, hi = _arith(args[0], s), _arith(args[1], s)
        x = walk(args[2], s)
        if isinstance(x, Variable):
            for v in range(lo, hi + 1):
                yield {**s, x: v}
        elif isinstance(x, int) and lo <= x <= hi:
            yield s
        return
    if name == "is":
        v = _arith(args[1], s)
        r = unify(args[0], v, s)
        if r is not None:
            yield r
        return
    if name == "length":
        items = list_items(resolve(args[0], s))
        if items is None:
            raise ProofError(f"length/2 needs a proper list, got {term_to_str(resolve(args[0], s))}")
        r = unify(args[1], len(items), s)
        if r is not None:
            yield r
        return
    if name == "=":
        r = unify(args[0], args[1], s)
        if r is not None:
            yield r
        return
    if name == "\\=":
        if unify(args[0], args[1], s) is None:
            yield s
        return
    if name in _CMP:
        if _CMP[name](_arith(args[0], s), _arith(args[1], s)):
            yield s
        return
    raise ProofError(f"unsupported built-in {name}/{len(args)}")


BUILTINS = {
    ("between", 3), ("is", 2), ("length", 2), ("=", 2), ("\\=", 2),
    ("<", 2), (">", 2), ("=<", 2), (">=", 2), ("=:=", 2), ("=\\=", 2),
}


# ---------------------------------------------------------------------------
# proving


def _to_const(t):
    if isinstance(t, Struct) and not t.args:
        return t.name
    if isinstance(t, (str, int)) and not isinstance(t, bool):
        return t
    raise ProofError(f"annotated fact argument {term_to_str(t)} is not a constant")


def _head_atom(t: Struct) -> Atom:
    return Atom(t.name, tuple(_to_const(a) for a in t.args))


class _Groups:
    """Exactly-one group lookup for the proof manager, derived from annotations."""

    def __init__(self, prog: Program):
        self.order = {}
        self.cat: dict[str, Annotation] = {}
        for a in prog.annotations:
            self.order.setdefault(a.head.name, len(self.order))
            if a.class_pos is not None:
                self.cat[a.head.name] = a

    def group_key(self, atom: Atom):
        a = self.cat.get(atom.predicate)
        if a is None:
            return None
        g = a.class_pos
        return (atom.predicate, atom.args[:g] + atom.args[g + 1 :])

    def group_atoms(self, atom: Atom) -> list[Atom]:
        a = self.cat.get(atom.predicate)
        if a is None:
            return [atom]
        g = a.class_pos
        return [Atom(atom.predicate, atom.args[:g] + (c,) + atom.args[g + 1 :]) for c in a.classes]

    def herbrand_key(self, atom: Atom) -> tuple:
        def k(x):
            return (0, x, "") if isinstance(x, int) else (1, 0, str(x))

        return (self.order.get(atom.predicate, len(self.order)),) + tuple(k(x) for x in atom.args)


def _var_paths(t, path=(), out=None) -> list[tuple[Variable, tuple]]:
    out = [] if out is None else out
    if isinstance(t, Variable):
        out.append((t, path))
    elif isinstance(t, Struct):
        for i, a in enumerate(t.args):
            _var_paths(a, path + (i,), out)
    return out


def _at(t, path):
    for i in path:
        t = t.args[i]
    return t


def _replace(t, items: list[tuple[tuple, Any]]):
    """Copy of ``t`` with the subterms at the given paths replaced; ground parts are shared."""
    if len(items) == 1 and not items[0][0]:
        return items[0][1]
    by_arg: dict[int, list] = {}
    for path, v in items:
        by_arg.setdefault(path[0], []).append((path[1:], v))
    args = list(t.args)
    for i, sub in by_arg.items():
        args[i] = _replace(args[i], sub)
    return Struct(t.name, tuple(args))


def _variant_key(t):
    names: dict[Variable, int] = {}

    def go(x):
        if isinstance(x, Variable):
            return ("$V", names.setdefault(x, len(names)))
        if isinstance(x, Struct):
            return (x.name,) + tuple(go(a) for a in x.args)
        return x

    return go(t)


class Prover:
    """SLD resolution with answer memoization per call variant.

    Every answer to a goal carries a node of the shared :class:`NnfManager`
    describing under which truth values of the annotated facts it holds
    (the disjunction of its proofs).
    """

    def __init__(self, program: Program, depth_limit: int = DEFAULT_DEPTH_LIMIT, size_limit: int = 20_000_000):
        self.program = program
        self.depth_limit = depth_limit
        self.groups = _Groups(program)
        self.manager = NnfManager(self.groups, size_limit=size_limit)
        self.memo: dict[Any, list[tuple[Any, int]]] = {}
        self.active: set = set()
        self.fresh = count()
        self.steps = 0
        self._clauses: dict[tuple[str, int], list[Clause]] = {}
        for c in program.clauses:
            self._clauses.setdefault(c.head.indicator, []).append(c)
        self._anns = program.annotated()

    def rename(self, c: Clause) -> Clause:
        k = next(self.fresh)
        m = {v: Variable(f"{v.name}#{k}") for v in term_vars(c.head)}
        for lit in c.body:
            for v in term_vars(lit.term):
                m.setdefault(v, Variable(f"{v.name}#{k}"))
        return Clause(_subst(c.head, m), tuple(Literal(_subst(l.term, m), l.negated) for l in c.body), c.line)

    # -- goals
    def solve(self, goals: Sequence[Literal], s: dict, node: int = TRUE, depth: int = 0,
              i: int = 0) -> Iterator[tuple[dict, int]]:
        if i == len(goals):
            yield s, node
            return
        and_ = self.manager.and_
        for s2, n2 in self.solve_literal(goals[i], s, depth):
            n3 = and_([node, n2]) if n2 != TRUE else node
            if n3 == FALSE:
                continue
            yield from self.solve(goals, s2, n3, depth, i + 1)

    def solve_literal(self, lit: Literal, s: dict, depth: int) -> Iterator[tuple[dict, int]]:
        g = walk(lit.term, s)
        if not isinstance(g, Struct):
            raise ProofError(f"goal {term_to_str(g)} is not callable")
        ind = g.indicator
        if ind in self._anns:
            yield from self._facts(g, s, lit.negated)
            return
        if lit.negated:
            raise ProofError(f"negation of {term_to_str(g)}: only annotated facts may be negated")
        if ind in BUILTINS:
            for s2 in _builtin(g, s):
                yield s2, TRUE
            return
        g = resolve(g, s)
        paths = _var_paths(g)
        for ans, node in self.table(g, depth + 1):
            if paths:
                s2 = dict(s)
                for v, path in paths:
                    s2[v] = _at(ans, path)
            else:
                s2 = s
            yield s2, node

    def _facts(self, g: Struct, s: dict, negated: bool) -> Iterator[tuple[dict, int]]:
        mgr = self.manager
        for a in self._anns[g.indicator]:
            k = next(self.fresh)
            head = _subst(a.head, {v: Variable(f"{v.name}#{k}") for v in term_vars(a.head)})
            s2 = unify(g, head, s)
            if s2 is None:
                continue
            choices = [s2]
            if a.class_pos is not None:
                cls = walk(g.args[a.class_pos], s2)
                if isinstance(cls, Variable):
                    if negated:
                        raise ProofError(f"negated categorical fact {term_to_str(resolve(g, s))} must be ground")
                    choices = [{**s2, cls: c} for c in a.classes]
                elif _to_const(cls) not in a.classes:
                    continue
            for s3 in choices:
                t = resolve(g, s3)
                if not is_ground(t):
                    raise ProofError(f"annotated fact {term_to_str(t)} is called with unbound arguments")
                yield s3, mgr.lit(_head_atom(t), not negated)

    def table(self, g: Struct, depth: int) -> list[tuple[Any, int]]:
        key = _variant_key(g)
        hit = self.memo.get(key)
        if hit is not None:
            return hit
        if depth > self.depth_limit:
            raise ProofError(f"proof depth limit of {self.depth_limit} exceeded at {term_to_str(g)}")
        if key in self.active:
            raise ProofError(f"recursive call {term_to_str(g)} does not decrease its arguments")
        self.active.add(key)
        try:
            answers: dict[Any, list[int]] = {}
            gpaths = _var_paths(g)
            for c in self._clauses.get(g.indicator, []):
                self.steps += 1
                c = self.rename(c)
                s0 = unify(c.head, g, {})
                if s0 is None:
                    continue
                for s1, n in self.solve(c.body, s0, TRUE, depth):
                    ans = g
                    if gpaths:
                        items = [(path, resolve(v, s1)) for v, path in gpaths]
                        for _, x in items:
                            if not is_ground(x):
                                raise ProofError(f"non-ground answer {term_to_str(resolve(g, s1))} (floundering)")
                        ans = _replace(g, items)
                    answers.setdefault(ans, []).append(n)
        finally:
            self.active.discard(key)
        out = []
        for ans, nodes in answers.items():
            n = self.manager.or_(nodes)
            if n != FALSE:
                out.append((ans, n))
        self.memo[key] = out
        return out

    def answers(self, query) -> list[tuple[Any, int]]:
        """All ground answers of a query (atom, or DNF of literal tuples) with their proof nodes."""
        if isinstance(query, str):
            query = parse_query(query)
        if isinstance(query, Struct):
            query = ((Literal(query),),)
        if isinstance(query, Literal):
            query = ((query,),)
        vs: list[Variable] = []
        for conj in query:
            for lit in conj:
                term_vars(lit.term, vs)
        goal = Struct("$query", tuple(vs))
        clauses = [Clause(goal, conj) for conj in query]
        saved = self._clauses.get(goal.indicator)
        self._clauses[goal.indicator] = clauses
        try:
            res = self._run(lambda: self.table(goal, 0))
        finally:
            if saved is None:
                self._clauses.pop(goal.indicator, None)
            else:
                self._clauses[goal.indicator] = saved
            self.memo.pop(_variant_key(goal), None)
        if len(query) == 1 and len(query[0]) == 1 and not query[0][0].negated:
            # report answers as instances of the single query atom
            atom = query[0][0].term
            out = []
            for ans, n in res:
                s = unify(goal, ans, {})
                out.append((resolve(atom, s), n))
            return out
        return res

    def _run(self, fn):
        old = sys.getrecursionlimit()
        sys.setrecursionlimit(max(old, 50_000))
        try:
            return fn()
        except RecursionError:
            raise ProofError("recursion too deep while proving (depth limit)") from None
        finally:
            sys.setrecursionlimit(old)


def _subst(t, m: Mapping):
    if isinstance(t, Variable):
        return m.get(t, t)
    if isinstance(t, Struct) and t.args:
        return Struct(t.name, tuple(_subst(a, m) for a in t.args))
    return t


def parse_query(text: str):
    text = text.strip()
    if text.startswith("?-"):
        text = text[2:]
    text = text.rstrip(".")
    p = _Parser(text + " .")
    tree = p.body()
    p.expect(".")
    return tuple(_dnf(tree))


@dataclass
class ProofResult:
    manager: NnfManager
    answers: list  # ground answer terms
    roots: list[int]
    steps: int = 0

    def root_of(self, answer) -> int:
        if isinstance(answer, str):
            answer = parse_term(answer)
        for a, r in zip(self.answers, self.roots):
            if a == answer:
                return r
        return FALSE

    def atoms(self) -> list[Atom]:
        """Annotated ground facts mentioned by any proof, in first-use order."""
        seen = set()
        for r in self.roots:
            seen |= self.manager.atoms_in(r)
        return [self.manager.atoms[i] for i in sorted(seen)]


def prove_dag(program: Program, query, depth_limit: int = DEFAULT_DEPTH_LIMIT, prover: Prover | None = None) -> ProofResult:
    """Proof DAG of every ground answer of ``query``."""
    pv = prover or Prover(program, depth_limit)
    res = pv.answers(query)
    return ProofResult(pv.manager, [a for a, _ in res], [n for _, n in res], pv.steps)


def prove(program: Program, query, depth_limit: int = DEFAULT_DEPTH_LIMIT) -> Formula:
    """Boolean formula over annotated facts: the disjunction of the query's proofs."""
    if isinstance(query, str):
        query = parse_term(query)
    if not is_ground(query):
        raise ProofError(f"prove needs a ground query, got {term_to_str(query)}")
    r = prove_dag(program, query, depth_limit)
    if not r.roots:
        return Const(False, "bool")
    return r.manager.to_formula(r.roots[0])


def count_proofs(manager: NnfManager, node: int) -> int:
    """Number of proof conjunctions represented by a proof DAG node."""
    memo: dict[int, int] = {}
    for x in manager.reachable(node):
        k = manager.kind[x]
        if k == K_OR:
            memo[x] = sum(memo[c] for c in manager.data[x])
        elif k == K_AND:
            v = 1
            for c in manager.data[x]:
                v *= memo[c]
            memo[x] = v
        else:
            memo[x] = 0 if x == FALSE else 1
    return memo[node]


# ---------------------------------------------------------------------------
# full grounding


@dataclass
class GroundProgram:
    clauses: list[tuple[Struct, tuple[Literal, ...]]]
    per_clause: list[int]

    @property
    def size(self) -> int:
        return len(self.clauses)


def _var_domains(c: Clause, domains: Mapping[str, Sequence[Sequence]]) -> dict[Variable, Sequence]:
    out: dict[Variable, Sequence] = {}
    for t in (c.head,) + tuple(l.term for l in c.body):
        if not isinstance(t, Struct) or t.indicator in BUILTINS:
            continue
        doms = domains.get(t.name)
        for i, a in enumerate(t.args):
            if isinstance(a, Variable) and a not in out and doms is not None:
                out[a] = list(doms[i])
    return out


def ground_program(program: Program, domains: Mapping[str, Sequence[Sequence]],
                   limit: int = GROUNDING_LIMIT) -> GroundProgram:
    """All ground instances of every clause whose built-ins succeed.

    ``domains`` maps a predicate name to one constant list per argument; a
    variable ranges over the domain of its first occurrence.
    """
    out: list = []
    per = []
    for c in program.clauses:
        vs = term_vars(c.head)
        for lit in c.body:
            term_vars(lit.term, vs)
        doms = _var_domains(c, domains)
        missing = [v.name for v in vs if v not in doms]
        if missing:
            raise ProgramError(f"no domain for variable(s) {', '.join(missing)} of clause at line {c.line}", c.line)
        size = int(np.prod([len(doms[v]) for v in vs], dtype=object)) if vs else 1
        if len(out) + size > limit:
            raise ProgramError(f"grounding exceeds the limit of {limit} clauses", c.line)
        n0 = len(out)
        for combo in product(*[doms[v] for v in vs]):
            s = dict(zip(vs, combo))
            body = []
            ok = True
            for lit in c.body:
                t = resolve(lit.term, s)
                if t.indicator in BUILTINS:
                    if not any(True for _ in _builtin(t, s)):
                        ok = False
                        break
                else:
                    body.append(Literal(t, lit.negated))
            if ok:
                out.append((resolve(c.head, s), tuple(body)))
        per.append(len(out) - n0)
    return GroundProgram(out, per)


def grounded_formula(ground: GroundProgram, query, program: Program) -> Formula:
    """Boolean formula of a ground atom under the completion of a ground program."""
    if isinstance(query, str):
        query = parse_term(query)
    rules: dict[Any, list[tuple[Literal, ...]]] = {}
    for h, body in ground.clauses:
        rules.setdefault(h, []).append(body)
    anns = program.annotated()
    memo: dict[Any, Formula] = {}
    active: set = set()

    def fact(t: Struct) -> Formula | None:
        a = _head_atom(t)
        for ann in anns[t.indicator]:
            if unify(ann.head, t, {}) is not None:
                if ann.class_pos is not None and a.args[ann.class_pos] not in ann.classes:
                    return None
                return AlgAtom(a, "bool")
        return None

    def go(t) -> Formula:
        if t in memo:
            return memo[t]
        if t.indicator in anns:
            r = fact(t) or Const(False, "bool")
        else:
            if t in active:
                raise ProgramError(f"cyclic ground dependency through {term_to_str(t)}")
            active.add(t)
            alts = []
            for body in rules.get(t, []):
                parts = []
                for lit in body:
                    f = go(lit.term)
                    parts.append(Unary("not", f, "bool") if lit.negated else f)
                alts.append(fold_binary("and", parts, "bool") if parts else Const(True, "bool"))
            active.discard(t)
            r = fold_binary("or", alts, "bool") if alts else Const(False, "bool")
        memo[t] = r
        return r

    return go(query)


# ---------------------------------------------------------------------------
# translation into a model


@dataclass
class Translation:
    model: Model
    answers: list
    logic: list[Formula]
    formulas: list[Formula]
    names: list[str]
    proofs: ProofResult
    atoms: list[Atom]

    def formula(self, answer) -> Formula:
        if isinstance(answer, str):
            answer = parse_term(answer)
        return self.formulas[self.answers.index(answer)]


def _name(t) -> str:
    s = term_to_str(t)
    s = re.sub(r"[^A-Za-z0-9_]+", "_", s).strip("_")
    return s or "query"


def build_model(program: Program, atoms: Sequence[Atom], label_kind: str = "categorical",
                payloads: Mapping[Any, np.ndarray] | None = None, hidden: int = 0,
                extra_constants: Mapping[str, Sequence] | None = None, structure: str = "prob") -> Model:
    """Model with one predicate per annotated predicate mentioned by ``atoms``.

    Probabilistic facts get table labels; neural annotations get categorical
    logits or, with ``label_kind="perceptual"``, a network over ``payloads``.
    """
    anns = program.annotated()
    preds: dict[str, list[list]] = {}
    for a in atoms:
        cols = preds.setdefault(a.predicate, [[] for _ in a.args])
        for i, x in enumerate(a.args):
            if x not in cols[i]:
                cols[i].append(x)
    for pred, extra in (extra_constants or {}).items():
        cols = preds.get(pred)
        if cols is not None:
            for i, xs in enumerate(extra):
                for x in xs:
                    if x not in cols[i]:
                        cols[i].append(x)
    domains: dict[str, tuple] = {}
    signatures: dict[str, PredicateSignature] = {}
    labels = LabellingSpec()
    for pred, cols in preds.items():
        ann_list = anns[(pred, len(cols))]
        ann = ann_list[0]
        names = []
        for i, col in enumerate(cols):
            if ann.class_pos == i:
                dom = tuple(ann.classes)
                dname = f"{pred}_class"
            else:
                dom = tuple(col)
                dname = f"{pred}_{i}"
            domains[dname] = dom
            names.append(dname)
        signatures[pred] = PredicateSignature(pred, tuple(names))
        if ann.kind == "prob":
            table = {}
            for a2 in ann_list:
                if is_ground(a2.head):
                    table[_head_atom(a2.head)] = (a2.prob, 1.0 - a2.prob)
                else:
                    table["*"] = (a2.prob, 1.0 - a2.prob)
            labels.add(LabelEntry(pred, "prob", "table", None, table))
        elif label_kind == "perceptual":
            labels.add(LabelEntry(pred, structure, "perceptual", ann.class_pos, {}, None, hidden))
        else:
            labels.add(LabelEntry(pred, structure, "categorical", ann.class_pos))
        labels.add(LabelEntry(pred, "bool", "identity"))
    tensors = {}
    if payloads:
        for k, v in payloads.items():
            tensors[k] = np.asarray(v, dtype=float)
    structures = ("prob", "bool") if structure == "prob" else (structure, "prob", "bool")
    return Model(structures, domains, tensors, signatures, "bool", labels, {})


def complete_groups(groups, atoms: Sequence[Atom]) -> list[Atom]:
    """``atoms`` plus every other class of each categorical group they touch."""
    full: dict[Atom, None] = {}
    for a in atoms:
        for b in groups.group_atoms(a):
            full.setdefault(b)
    return list(full)


def to_deeplog(
    program: Program,
    query,
    label_kind: str = "categorical",
    payloads: Mapping[Any, np.ndarray] | None = None,
    hidden: int = 0,
    lift: Mapping[str, str] | None = None,
    depth_limit: int = DEFAULT_DEPTH_LIMIT,
    prover: Prover | None = None,
    build_formulas: bool = True,
) -> Translation:
    """Prove ``query`` and wrap each ground answer as a WMC formula.

    The logic part of every formula is the disjunction of proofs conjoined
    with an exactly-one constraint per categorical group used; the sum runs
    over every ground annotated fact of the translation.  ``lift`` renames
    constants (e.g. image placeholders) to variables so one formula serves a
    whole batch.
    """
    proofs = prove_dag(program, query, depth_limit, prover)
    mgr = proofs.manager
    groups = mgr.model
    full = complete_groups(groups, proofs.atoms())
    model = build_model(program, full, label_kind, payloads, hidden)
    full.sort(key=model.herbrand_key)
    logic, formulas, names = [], [], []
    if build_formulas:
        from .oracle import wmc_formula

        eo = []
        seen_groups = []
        for a in full:
            key = groups.group_key(a)
            if key is not None and key not in seen_groups:
                seen_groups.append(key)
                eo.append(exactly_one(groups.group_atoms(a), "bool"))
        for ans, root in zip(proofs.answers, proofs.roots):
            phi = mgr.to_formula(root)
            if eo:
                phi = fold_binary("and", [phi] + eo, "bool")
            logic.append(phi)
            formulas.append(wmc_formula(phi, full, model))
    names = [_name(a) for a in proofs.answers]
    if lift:
        sigma = {c: Variable(v) for c, v in lift.items()}
        logic = [_lift(f, sigma) for f in logic]
        formulas = [_lift(f, sigma) for f in formulas]
    else:
        sigma = {}
    params = tuple((v, _lift_domain(model, v, sigma)) for v in dict.fromkeys(sigma.values()))
    for n, f in zip(names, formulas):
        model.formulas[n] = FormulaDef(n, params, f)
    return Translation(model, proofs.answers, logic, formulas, names, proofs, full)


def _lift(f: Formula, sigma: Mapping) -> Formula:
    from .language import AggAtom, Transform

    memo: dict[int, Formula] = {}

    def atom(a: Atom) -> Atom:
        return Atom(a.predicate, tuple(sigma.get(x, x) for x in a.args))

    def go(g: Formula) -> Formula:
        k = id(g)
        if k in memo:
            return memo[k]
        if isinstance(g, AlgAtom):
            r: Formula = AlgAtom(atom(g.atom), g.structure)
        elif isinstance(g, Unary):
            r = Unary(g.op, go(g.child), g.structure)
        elif isinstance(g, Binary):
            r = Binary(g.op, go(g.left), go(g.right), g.structure)
        elif isinstance(g, Transform):
            r = Transform(g.target, g.transformation, go(g.child))
        elif isinstance(g, AggAtom):
            r = AggAtom(atom(g.atom), g.aggregator, go(g.child), g.structure)
        else:
            r = g
        memo[k] = r
        return r

    return go(f)


def _lift_domain(model: Model, var: Variable, sigma: Mapping) -> str:
    consts = [c for c, v in sigma.items() if v == var]
    for name, sig in model.predicates.items():
        for i, d in enumerate(sig.domains):
            if any(c in model.domains[d] for c in consts):
                return d
    raise ProgramError(f"lifted constant(s) {consts} do not occur in the translation")



def compile_answers(tr: Translation, method: str = "auto", optimize: bool = True,
                    lift: Mapping[str, str] | None = None, stats=None):
    """One circuit with a root per answer, straight from the proof DAG."""
    from .compiler import compile_roots

    rename = {c: Variable(v) for c, v in (lift or {}).items()}
    return compile_roots(tr.proofs.manager, tr.proofs.roots, tr.atoms, tr.model, method=method,
                         optimize=optimize, names=tr.names, stats=stats, rename=rename or None)
