"""Knowledge compilation and circuit rewriting.

Boolean formulas are turned into hash-consed NNF DAGs, compiled top-down by
Shannon expansion into smooth d-DNNF, and mapped onto algebraic circuits by
pushing the Iverson transformation down to the literals.

Categorical (exactly-one) groups are treated as multi-valued variables: a
split over a group has one branch per class, and a branch asserts the class
literal together with the negation of every other class.  The compiled
d-DNNF is therefore equivalent to the input conjoined with the exactly-one
constraint of every group it mentions.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Any, Callable, Iterable, Mapping, Sequence

import numpy as np

from .algebra import get_structure, get_transformation
from .circuit import CONST, LEAF, TRANSFORM, Circuit, CircuitBuilder, LeafRef
from .language import (
    AggAtom,
    AggVar,
    AlgAtom,
    Atom,
    Binary,
    Const,
    Formula,
    LabellingSpec,
    Model,
    Transform,
    Unary,
    fold_binary,
    substitute,
)

__all__ = [
    "CompileError",
    "CompilationStats",
    "NnfManager",
    "Nnf",
    "DdnnfReport",
    "to_nnf",
    "shannon_compile",
    "check_d_dnnf",
    "push_transformation",
    "resolve_aggregations",
    "compile_fuzzy",
    "compile_formula",
    "simplify",
    "split_wmc",
    "model_count",
    "nnf_wmc",
    "compile_wmc_many",
    "compile_roots",
    "nnf_fuzzy_circuit",
    "compile_many",
    "smooth_nnf",
    "is_ddnnf_modulo_groups",
    "ddnnf_to_circuit",
    "SIZE_LIMIT",
]

SIZE_LIMIT = 1_000_000
TRUE, FALSE = 0, 1
K_TRUE, K_FALSE, K_LIT, K_AND, K_OR = range(5)


class CompileError(ValueError):
    pass


@dataclass
class CompilationStats:
    input_atoms: int = 0
    ddnnf_nodes: int = 0
    circuit_nodes: int = 0
    cache_hits: int = 0
    wall_time: float = 0.0
    fast_path: bool = False

    def as_dict(self) -> dict:
        return dict(self.__dict__)


# ---------------------------------------------------------------------------
# NNF manager


class NnfManager:
    """Hash-consed NNF nodes with integer ids.

    Literals are signed atom numbers (``+i`` / ``-i`` for atom ``i - 1``).
    Each node caches a bitmask over *variables*, where every ungrouped atom
    is its own variable and every categorical group is one variable.
    """

    def __init__(self, model: Model | None = None, size_limit: int = SIZE_LIMIT):
        self.model = model
        self.size_limit = size_limit
        self.kind: list[int] = [K_TRUE, K_FALSE]
        self.data: list[Any] = [None, None]
        self.mask: list[int] = [0, 0]
        self.table: dict[tuple, int] = {}
        self.atoms: list[Atom] = []
        self.atom_id: dict[Atom, int] = {}
        self.atom_var: list[int] = []
        self.var_atoms: list[list[int]] = []
        self.var_group: list[Any] = []  # group key, or None for an ungrouped atom
        self._group_var: dict[Any, int] = {}
        self._pad: dict[int, int] = {}
        self._blocks: dict[tuple[int, int], tuple[int, ...]] = {}

    def __len__(self) -> int:
        return len(self.kind)

    # -- atoms and variables
    def atom_index(self, atom: Atom) -> int:
        i = self.atom_id.get(atom)
        if i is not None:
            return i
        key = self.model.group_key(atom) if self.model is not None else None
        if key is None:
            i = self._new_atom(atom)
            self.atom_var.append(len(self.var_atoms))
            self.var_atoms.append([i])
            self.var_group.append(None)
            return i
        if key in self._group_var:
            raise CompileError(f"atom {atom} is not a member of its categorical group")
        v = len(self.var_atoms)
        self._group_var[key] = v
        self.var_atoms.append([])
        self.var_group.append(key)
        for member in self.model.group_atoms(atom):
            j = self._new_atom(member)
            self.atom_var.append(v)
            self.var_atoms[v].append(j)
        if atom not in self.atom_id:
            raise CompileError(f"atom {atom} is outside the class domain of its group")
        return self.atom_id[atom]

    def _new_atom(self, atom: Atom) -> int:
        i = len(self.atoms)
        self.atoms.append(atom)
        self.atom_id[atom] = i
        return i

    def is_grouped(self, atom_index: int) -> bool:
        return self.var_group[self.atom_var[atom_index]] is not None

    def var_bit(self, atom_index: int) -> int:
        return 1 << self.atom_var[atom_index]

    def vars_of(self, mask: int) -> list[int]:
        out, v = [], 0
        while mask:
            if mask & 1:
                out.append(v)
            mask >>= 1
            v += 1
        return out

    # -- node construction
    def _intern(self, key: tuple, kind: int, data, mask: int) -> int:
        n = self.table.get(key)
        if n is not None:
            return n
        n = len(self.kind)
        if n >= self.size_limit:
            raise CompileError(f"NNF exceeds the size limit of {self.size_limit} nodes")
        self.kind.append(kind)
        self.data.append(data)
        self.mask.append(mask)
        self.table[key] = n
        return n

    def lit(self, atom: Atom | int, positive: bool = True) -> int:
        i = atom if isinstance(atom, int) else self.atom_index(atom)
        code = (i + 1) if positive else -(i + 1)
        return self._intern(("L", code), K_LIT, code, self.var_bit(i))

    def and_(self, children: Iterable[int]) -> int:
        out: set[int] = set()
        kind, data = self.kind, self.data
        for c in children:
            k = kind[c]
            if k == K_TRUE:
                continue
            if k == K_FALSE:
                return FALSE
            if k == K_AND:
                out.update(data[c])
            else:
                out.add(c)
        if not out:
            return TRUE
        if len(out) == 1:
            return next(iter(out))
        lits = {data[c] for c in out if kind[c] == K_LIT}
        if lits:
            seen_groups = set()
            for l in lits:
                if -l in lits:
                    return FALSE
                if l > 0 and self.is_grouped(l - 1):
                    v = self.atom_var[l - 1]
                    if v in seen_groups:
                        return FALSE
                    seen_groups.add(v)
        ch = tuple(sorted(out))
        m = 0
        for c in ch:
            m |= self.mask[c]
        return self._intern(("A", ch), K_AND, ch, m)

    def or_(self, children: Iterable[int]) -> int:
        out: set[int] = set()
        kind, data = self.kind, self.data
        for c in children:
            k = kind[c]
            if k == K_FALSE:
                continue
            if k == K_TRUE:
                return TRUE
            if k == K_OR:
                out.update(data[c])
            else:
                out.add(c)
        if not out:
            return FALSE
        if len(out) == 1:
            return next(iter(out))
        ch = tuple(sorted(out))
        m = 0
        for c in ch:
            m |= self.mask[c]
        return self._intern(("O", ch), K_OR, ch, m)

    def and_raw(self, children: Sequence[int]) -> int:
        """Conjunction node kept exactly as given (no flattening or dedup)."""
        ch = tuple(children)
        m = 0
        for c in ch:
            m |= self.mask[c]
        return self._intern(("Araw", ch), K_AND, ch, m)

    def or_raw(self, children: Sequence[int]) -> int:
        ch = tuple(children)
        m = 0
        for c in ch:
            m |= self.mask[c]
        return self._intern(("Oraw", ch), K_OR, ch, m)

    def block(self, var: int, k: int) -> tuple[int, ...]:
        """Literals of class ``k`` of a group: the class and every other class negated."""
        b = self._blocks.get((var, k))
        if b is None:
            atoms = self.var_atoms[var]
            b = tuple(self.lit(a, j == k) for j, a in enumerate(atoms))
            self._blocks[(var, k)] = b
        return b

    def pad_unit(self, var: int) -> int:
        """A node over ``var`` that is true in every (exactly-one) world."""
        u = self._pad.get(var)
        if u is None:
            atoms = self.var_atoms[var]
            if self.var_group[var] is None:
                u = self.or_([self.lit(atoms[0], True), self.lit(atoms[0], False)])
            else:
                u = self.or_([self.and_(self.block(var, k)) for k in range(len(atoms))])
            self._pad[var] = u
        return u

    def pad(self, node: int, need: int) -> int:
        missing = need & ~self.mask[node]
        if not missing or node == FALSE:
            return node
        return self.and_([node] + [self.pad_unit(v) for v in self.vars_of(missing)])

    # -- conversion
    def from_formula(self, f: Formula) -> int:
        """NNF of a Boolean formula (negations pushed to the literals)."""
        memo: dict[tuple[int, bool], int] = {}

        def go(g: Formula, pos: bool) -> int:
            key = (id(g), pos)
            r = memo.get(key)
            if r is not None:
                return r
            if g.structure != "bool":
                raise CompileError(f"non-Boolean node encountered: {type(g).__name__} over {g.structure}")
            if isinstance(g, AlgAtom):
                r = self.lit(g.atom, pos)
            elif isinstance(g, Const):
                r = TRUE if bool(g.value) == pos else FALSE
            elif isinstance(g, Unary):
                if g.op != "not":
                    raise CompileError(f"unsupported Boolean operator {g.op!r}")
                r = go(g.child, not pos)
            elif isinstance(g, Binary):
                if g.op not in ("and", "or"):
                    raise CompileError(f"unsupported Boolean operator {g.op!r}")
                a, b = go(g.left, pos), go(g.right, pos)
                conj = (g.op == "and") == pos
                r = self.and_([a, b]) if conj else self.or_([a, b])
            else:
                raise CompileError(f"non-Boolean node encountered: {type(g).__name__}")
            memo[key] = r
            return r

        return go(f, True)

    def to_formula(self, n: int) -> Formula:
        memo: dict[int, Formula] = {}

        def go(x: int) -> Formula:
            if x in memo:
                return memo[x]
            k = self.kind[x]
            if k == K_TRUE:
                r: Formula = Const(True, "bool")
            elif k == K_FALSE:
                r = Const(False, "bool")
            elif k == K_LIT:
                code = self.data[x]
                r = AlgAtom(self.atoms[abs(code) - 1], "bool")
                if code < 0:
                    r = Unary("not", r, "bool")
            else:
                r = fold_binary("and" if k == K_AND else "or", [go(c) for c in self.data[x]], "bool")
            memo[x] = r
            return r

        return go(n)

    def to_str(self, n: int) -> str:
        k = self.kind[n]
        if k == K_TRUE:
            return "true"
        if k == K_FALSE:
            return "false"
        if k == K_LIT:
            code = self.data[n]
            s = str(self.atoms[abs(code) - 1])
            return s if code > 0 else f"¬{s}"
        sep = " ∧ " if k == K_AND else " ∨ "
        return "(" + sep.join(self.to_str(c) for c in self.data[n]) + ")"

    def reachable(self, n: int) -> list[int]:
        """Nodes reachable from ``n``, children before parents."""
        seen: set[int] = set()
        order: list[int] = []
        stack = [(n, False)]
        while stack:
            x, done = stack.pop()
            if done:
                order.append(x)
                continue
            if x in seen:
                continue
            seen.add(x)
            stack.append((x, True))
            if self.kind[x] in (K_AND, K_OR):
                for c in self.data[x]:
                    if c not in seen:
                        stack.append((c, False))
        return order

    def atoms_in(self, n: int) -> set[int]:
        out = set()
        for x in self.reachable(n):
            if self.kind[x] == K_LIT:
                out.add(abs(self.data[x]) - 1)
        return out

    # -- conditioning
    def condition(self, n: int, assign: Mapping[int, bool]) -> int:
        vmask = 0
        for a in assign:
            vmask |= self.var_bit(a)
        memo: dict[int, int] = {}
        kind, data, mask = self.kind, self.data, self.mask

        def go(x: int) -> int:
            if not (mask[x] & vmask):
                return x
            r = memo.get(x)
            if r is not None:
                return r
            k = kind[x]
            if k == K_LIT:
                code = data[x]
                v = assign.get(abs(code) - 1)
                r = x if v is None else (TRUE if v == (code > 0) else FALSE)
            elif k == K_AND:
                r = self.and_([go(c) for c in data[x]])
            else:
                r = self.or_([go(c) for c in data[x]])
            memo[x] = r
            return r

        return go(n)


@dataclass(frozen=True)
class Nnf:
    """Handle on one node of an :class:`NnfManager`."""

    manager: NnfManager
    root: int

    def __str__(self) -> str:
        return self.manager.to_str(self.root)

    def atoms(self) -> list[Atom]:
        return [self.manager.atoms[i] for i in sorted(self.manager.atoms_in(self.root))]

    @property
    def size(self) -> int:
        return len(self.manager.reachable(self.root))

    def to_formula(self) -> Formula:
        return self.manager.to_formula(self.root)

    def is_true(self) -> bool:
        return self.root == TRUE

    def is_false(self) -> bool:
        return self.root == FALSE


def to_nnf(f: Formula, model: Model | None = None, manager: NnfManager | None = None) -> Nnf:
    mgr = manager or NnfManager(model)
    return Nnf(mgr, mgr.from_formula(f))


# ---------------------------------------------------------------------------
# Shannon compilation


class _Compiler:
    def __init__(self, mgr: NnfManager, order: Sequence[Atom] | None, herbrand_key: Callable | None):
        self.mgr = mgr
        self.cache: dict[int, int] = {}
        self.hits = 0
        self.explicit = order
        self.key = herbrand_key
        self.rank: dict[int, int] = {}

    def set_order(self, roots: Sequence[int]) -> None:
        mgr = self.mgr
        nv = len(mgr.var_atoms)
        if self.explicit is not None:
            ranked = []
            for a in self.explicit:
                v = mgr.atom_var[mgr.atom_index(a)]
                if v not in ranked:
                    ranked.append(v)
            rest = [v for v in range(nv) if v not in ranked]
            ranked += rest
        else:
            counts = [0] * nv
            seen: set[int] = set()
            for r in roots:
                for x in mgr.reachable(r):
                    if x in seen:
                        continue
                    seen.add(x)
                    if mgr.kind[x] in (K_AND, K_OR):
                        for c in mgr.data[x]:
                            if mgr.kind[c] == K_LIT:
                                counts[mgr.atom_var[abs(mgr.data[c]) - 1]] += 1
                if mgr.kind[r] == K_LIT:
                    counts[mgr.atom_var[abs(mgr.data[r]) - 1]] += 1

            def vkey(v):
                atoms = [mgr.atoms[a] for a in mgr.var_atoms[v]]
                h = min(self.key(a) for a in atoms) if self.key is not None else min(mgr.var_atoms[v])
                return (-counts[v], h)

            ranked = sorted(range(nv), key=vkey)
        self.rank = {v: i for i, v in enumerate(ranked)}
        self.ranked = ranked

    def pick(self, mask: int) -> int:
        for v in self.ranked:
            if mask >> v & 1:
                return v
        raise AssertionError("no variable in mask")

    def components(self, n: int) -> list[int] | None:
        mgr = self.mgr
        ch = mgr.data[n]
        parent = list(range(len(ch)))

        def find(i):
            while parent[i] != i:
                parent[i] = parent[parent[i]]
                i = parent[i]
            return i

        owner: dict[int, int] = {}
        for i, c in enumerate(ch):
            for v in mgr.vars_of(mgr.mask[c]):
                j = owner.get(v)
                if j is None:
                    owner[v] = i
                else:
                    ri, rj = find(i), find(j)
                    if ri != rj:
                        parent[ri] = rj
        groups: dict[int, list[int]] = {}
        for i, c in enumerate(ch):
            groups.setdefault(find(i), []).append(c)
        if len(groups) == 1:
            return None
        return [mgr.and_(g) for g in groups.values()]

    def compile(self, n: int) -> int:
        mgr = self.mgr
        if n == TRUE or n == FALSE:
            return n
        hit = self.cache.get(n)
        if hit is not None:
            self.hits += 1
            return hit
        k = mgr.kind[n]
        if k == K_LIT and not mgr.is_grouped(abs(mgr.data[n]) - 1):
            r = n
        else:
            comps = self.components(n) if k == K_AND else None
            if comps is not None:
                r = mgr.and_([self.compile(c) for c in comps])
            else:
                r = self.split(n)
        self.cache[n] = r
        return r

    def split(self, n: int) -> int:
        mgr = self.mgr
        m = mgr.mask[n]
        v = self.pick(m)
        need = m & ~(1 << v)
        atoms = mgr.var_atoms[v]
        branches = []
        if mgr.var_group[v] is None:
            a = atoms[0]
            for val in (True, False):
                r = self.compile(mgr.condition(n, {a: val}))
                if r != FALSE:
                    branches.append(mgr.and_([mgr.lit(a, val), mgr.pad(r, need)]))
        else:
            for kk in range(len(atoms)):
                assign = {a: (j == kk) for j, a in enumerate(atoms)}
                r = self.compile(mgr.condition(n, assign))
                if r != FALSE:
                    branches.append(mgr.and_(list(mgr.block(v, kk)) + [mgr.pad(r, need)]))
        return mgr.or_(branches)


def shannon_compile(
    n: Nnf | Formula,
    order: Sequence[Atom] | None = None,
    model: Model | None = None,
    stats: CompilationStats | None = None,
) -> Nnf:
    """Smooth d-DNNF equivalent to ``n`` (conjoined with exactly-one group constraints)."""
    if isinstance(n, Formula):
        n = to_nnf(n, model)
    out = compile_many(n.manager, [n.root], order=order, stats=stats)
    return Nnf(n.manager, out[0])


def compile_many(
    mgr: NnfManager,
    roots: Sequence[int],
    order: Sequence[Atom] | None = None,
    stats: CompilationStats | None = None,
) -> list[int]:
    """Compile several roots with one shared cache."""
    t0 = time.perf_counter()
    key = mgr.model.herbrand_key if mgr.model is not None else None
    comp = _Compiler(mgr, order, key)
    comp.set_order(roots)
    out = [comp.compile(r) for r in roots]
    if stats is not None:
        stats.cache_hits += comp.hits
        stats.wall_time += time.perf_counter() - t0
        stats.input_atoms = max(stats.input_atoms, len(mgr.atoms))
        nodes: set[int] = set()
        for r in out:
            nodes.update(mgr.reachable(r))
        stats.ddnnf_nodes = len(nodes)
    return out


# ---------------------------------------------------------------------------
# structural checks


@dataclass(frozen=True)
class DdnnfReport:
    decomposable: bool
    deterministic: bool
    smooth: bool
    determinism_method: str = "structural"
    offending: tuple = ()

    @property
    def ok(self) -> bool:
        return self.decomposable and self.deterministic and self.smooth


class _Forced:
    """Literals every model of a node must satisfy."""

    def __init__(self, mgr: NnfManager):
        self.mgr = mgr
        self.memo: dict[int, dict[int, bool]] = {}

    def of(self, n: int) -> dict[int, bool]:
        r = self.memo.get(n)
        if r is not None:
            return r
        mgr = self.mgr
        k = mgr.kind[n]
        if k == K_LIT:
            code = mgr.data[n]
            r = {abs(code) - 1: code > 0}
        elif k == K_AND:
            r = {}
            for c in mgr.data[n]:
                r.update(self.of(c))
        elif k == K_OR:
            ch = mgr.data[n]
            first = self.of(ch[0])
            r = dict(first)
            for c in ch[1:]:
                other = self.of(c)
                r = {a: v for a, v in r.items() if other.get(a) == v}
                if not r:
                    break
        else:
            r = {}
        self.memo[n] = r
        return r

    def exclusive(self, a: dict[int, bool], b: dict[int, bool]) -> bool:
        mgr = self.mgr
        small, large = (a, b) if len(a) <= len(b) else (b, a)
        for atom, v in small.items():
            w = large.get(atom)
            if w is not None and w != v:
                return True
        ga = {mgr.atom_var[x]: x for x, v in a.items() if v and mgr.is_grouped(x)}
        if ga:
            for x, v in b.items():
                if v and mgr.is_grouped(x):
                    y = ga.get(mgr.atom_var[x])
                    if y is not None and y != x:
                        return True
        return False


def _or_children_exclusive(forced: _Forced, ch: Sequence[int]) -> bool:
    mgr = forced.mgr
    fs = [forced.of(c) for c in ch]
    if len(ch) > 8:
        # partition check: the positive class of groups forced by every child
        common = None
        for f in fs:
            gv = {mgr.atom_var[x]: x for x, v in f.items() if v and mgr.is_grouped(x)}
            common = dict.fromkeys(gv) if common is None else {g: None for g in common if g in gv}
        if common:
            keys = set()
            gs = sorted(common)
            for f in fs:
                gv = {mgr.atom_var[x]: x for x, v in f.items() if v and mgr.is_grouped(x)}
                keys.add(tuple(gv[g] for g in gs))
            if len(keys) == len(fs):
                return True
    for i in range(len(fs)):
        for j in range(i + 1, len(fs)):
            if not forced.exclusive(fs[i], fs[j]):
                return False
    return True


def _and_decomposable(mgr: NnfManager, ch: Sequence[int]) -> bool:
    seen = 0
    group_lits: dict[int, list[int]] = {}
    for c in ch:
        if mgr.kind[c] == K_LIT and mgr.is_grouped(abs(mgr.data[c]) - 1):
            group_lits.setdefault(mgr.atom_var[abs(mgr.data[c]) - 1], []).append(mgr.data[c])
            continue
        m = mgr.mask[c]
        if seen & m:
            return False
        seen |= m
    for v, codes in group_lits.items():
        if seen >> v & 1:
            return False
        atoms = [abs(x) for x in codes]
        if len(set(atoms)) != len(atoms) or sum(1 for x in codes if x > 0) > 1:
            return False
    return True


def _enumerate_overlap(mgr: NnfManager, a: int, b: int, limit: int = 20) -> bool | None:
    atoms = sorted(mgr.atoms_in(a) | mgr.atoms_in(b))
    if len(atoms) > limit:
        return None
    n = len(atoms)
    rows = np.arange(2**n, dtype=np.int64)
    cols = {x: ((rows >> j) & 1).astype(bool) for j, x in enumerate(atoms)}
    memo: dict[int, np.ndarray] = {}

    def ev(x: int) -> np.ndarray:
        if x in memo:
            return memo[x]
        k = mgr.kind[x]
        if k == K_TRUE:
            r = np.ones(2**n, dtype=bool)
        elif k == K_FALSE:
            r = np.zeros(2**n, dtype=bool)
        elif k == K_LIT:
            code = mgr.data[x]
            r = cols[abs(code) - 1] if code > 0 else ~cols[abs(code) - 1]
        elif k == K_AND:
            r = np.logical_and.reduce([ev(c) for c in mgr.data[x]])
        else:
            r = np.logical_or.reduce([ev(c) for c in mgr.data[x]])
        memo[x] = r
        return r

    both = ev(a) & ev(b)
    # worlds violating exactly-one for a group never count
    for v in {mgr.atom_var[x] for x in atoms if mgr.is_grouped(x)}:
        members = [x for x in mgr.var_atoms[v] if x in cols]
        if len(members) == len(mgr.var_atoms[v]):
            both &= np.sum([cols[x] for x in members], axis=0) == 1
        else:
            both &= np.sum([cols[x] for x in members], axis=0) <= 1
    return bool(both.any())


def check_d_dnnf(n: Nnf, enumeration_limit: int = 20) -> DdnnfReport:
    """Decomposability, determinism and smoothness of every node under ``n``.

    Determinism is first established structurally (complementary literals or
    different classes of one group); otherwise pairs of disjuncts are checked
    by enumeration when they mention at most ``enumeration_limit`` atoms.
    """
    mgr = n.manager
    forced = _Forced(mgr)
    dec = det = smooth = True
    method = "structural"
    bad = []
    for x in mgr.reachable(n.root):
        k = mgr.kind[x]
        if k == K_AND:
            if not _and_decomposable(mgr, mgr.data[x]):
                dec = False
                bad.append(("and", x))
        elif k == K_OR:
            ch = mgr.data[x]
            masks = {mgr.mask[c] for c in ch}
            if len(masks) > 1:
                smooth = False
                bad.append(("smooth", x))
            if not _or_children_exclusive(forced, ch):
                ok = True
                for i in range(len(ch)):
                    for j in range(i + 1, len(ch)):
                        if forced.exclusive(forced.of(ch[i]), forced.of(ch[j])):
                            continue
                        overlap = _enumerate_overlap(mgr, ch[i], ch[j], enumeration_limit)
                        method = "enumeration"
                        if overlap is None or overlap:
                            ok = False
                            break
                    if not ok:
                        break
                if not ok:
                    det = False
                    bad.append(("or", x))
    return DdnnfReport(dec, det, smooth, method, tuple(bad))


def smooth_nnf(mgr: NnfManager, root: int) -> int:
    """Pad disjuncts so that every disjunction mentions one variable set."""
    memo: dict[int, int] = {}
    for x in mgr.reachable(root):
        k = mgr.kind[x]
        if k == K_AND:
            memo[x] = mgr.and_([memo[c] for c in mgr.data[x]])
        elif k == K_OR:
            ch = [memo[c] for c in mgr.data[x]]
            m = 0
            for c in ch:
                m |= mgr.mask[c]
            memo[x] = mgr.or_([mgr.pad(c, m) for c in ch])
        else:
            memo[x] = x
    return memo[root]


def is_ddnnf_modulo_groups(mgr: NnfManager, roots: Sequence[int]) -> bool:
    """True when prover output can skip Shannon expansion.

    Requires decomposable conjunctions, mutually exclusive disjunctions and
    no negated class literals (which would need a split of their group).
    """
    forced = _Forced(mgr)
    seen: set[int] = set()
    for r in roots:
        for x in mgr.reachable(r):
            if x in seen:
                continue
            seen.add(x)
            k = mgr.kind[x]
            if k == K_LIT:
                code = mgr.data[x]
                if code < 0 and mgr.is_grouped(abs(code) - 1):
                    return False
            elif k == K_AND:
                if not _and_decomposable(mgr, mgr.data[x]):
                    return False
            elif k == K_OR:
                if not _or_children_exclusive(forced, mgr.data[x]):
                    return False
    return True


# ---------------------------------------------------------------------------
# counting helpers (exact, for tests)


def model_count(n: Nnf, atoms: Sequence[Atom] | None = None) -> int:
    """Number of (exactly-one respecting) models of a smooth d-DNNF over ``atoms``."""
    mgr = n.manager
    memo: dict[int, int] = {}
    for x in mgr.reachable(n.root):
        k = mgr.kind[x]
        if k == K_TRUE:
            memo[x] = 1
        elif k == K_FALSE:
            memo[x] = 0
        elif k == K_LIT:
            memo[x] = 1
        elif k == K_AND:
            v = 1
            for c in mgr.data[x]:
                v *= memo[c]
            memo[x] = v
        else:
            memo[x] = sum(memo[c] for c in mgr.data[x])
    count = memo[n.root]
    if atoms is not None and count:
        have = mgr.mask[n.root]
        for v in {mgr.atom_var[mgr.atom_index(a)] for a in atoms}:
            if not have >> v & 1:
                count *= 2 if mgr.var_group[v] is None else len(mgr.var_atoms[v])
    return count


def nnf_wmc(n: Nnf, weights: Mapping[Atom, tuple[float, float]]) -> float:
    """Weighted count of a d-DNNF with ``weights[atom] = (w_true, w_false)``."""
    mgr = n.manager
    memo: dict[int, float] = {}
    for x in mgr.reachable(n.root):
        k = mgr.kind[x]
        if k == K_TRUE:
            memo[x] = 1.0
        elif k == K_FALSE:
            memo[x] = 0.0
        elif k == K_LIT:
            code = mgr.data[x]
            wt, wf = weights[mgr.atoms[abs(code) - 1]]
            memo[x] = wt if code > 0 else wf
        elif k == K_AND:
            v = 1.0
            for c in mgr.data[x]:
                v *= memo[c]
            memo[x] = v
        else:
            memo[x] = sum(memo[c] for c in mgr.data[x])
    return memo[n.root]


# ---------------------------------------------------------------------------
# circuits from d-DNNF


def _literal_leaf(b: CircuitBuilder, mgr: NnfManager, code: int, weight_of: Callable | None) -> int:
    a = abs(code) - 1
    atom = mgr.atoms[a]
    if mgr.is_grouped(a) and code < 0:
        return b.const(1.0, "prob")
    if weight_of is not None:
        return weight_of(b, atom, code > 0)
    return b.leaf(LeafRef(atom.predicate, atom.args, code > 0, "prob"))


def ddnnf_to_circuit(
    b: CircuitBuilder, mgr: NnfManager, roots: Sequence[int], weight_of: Callable | None = None,
    memo: dict | None = None,
) -> list[int]:
    """Map ∧→×, ∨→+ and literals to label leaves, for several roots at once."""
    memo = {} if memo is None else memo
    out = []
    for r in roots:
        for x in mgr.reachable(r):
            if x in memo:
                continue
            k = mgr.kind[x]
            if k == K_TRUE:
                memo[x] = b.const(1.0, "prob")
            elif k == K_FALSE:
                memo[x] = b.const(0.0, "prob")
            elif k == K_LIT:
                memo[x] = _literal_leaf(b, mgr, mgr.data[x], weight_of)
            else:
                memo[x] = b.op_node("prob", "*" if k == K_AND else "+", [memo[c] for c in mgr.data[x]])
        out.append(memo[r])
    return out


def push_transformation(
    n: Nnf, t: str = "iverson", weights: LabellingSpec | None = None, check: bool = True
) -> Circuit:
    """Circuit over the transformation's target with literals read as label leaves."""
    tr = get_transformation(t)
    if not tr.homomorphic_under_determinism:
        raise CompileError(f"transformation {t} cannot be pushed through d-DNNF")
    if check:
        rep = check_d_dnnf(n)
        if not (rep.decomposable and rep.deterministic):
            raise CompileError("push_transformation needs a deterministic, decomposable NNF")
    b = CircuitBuilder()
    root = ddnnf_to_circuit(b, n.manager, [n.root])[0]
    return b.build([root], metadata={"source": "d-DNNF"})


# ---------------------------------------------------------------------------
# aggregation resolution


@dataclass
class WmcShape:
    atoms: list[Atom]
    logic: Formula
    weights: dict[Atom, list[Formula]]


def _factors(f: Formula) -> list[Formula]:
    if isinstance(f, Binary) and f.op == "*" and f.structure == "prob":
        return _factors(f.left) + _factors(f.right)
    return [f]


def split_wmc(f: Formula) -> WmcShape:
    """Pull apart ``sum_atoms iverson(logic) * weights`` into its pieces."""
    atoms = []
    g = f
    while isinstance(g, AggAtom):
        if g.structure != "prob" or g.aggregator != "sum":
            raise CompileError("only summation over atoms in the probability semiring is compiled")
        atoms.append(g.atom)
        g = g.child
    logic_parts = []
    weights: dict[Atom, list[Formula]] = {}
    for fac in _factors(g):
        if isinstance(fac, Transform):
            if fac.transformation != "iverson":
                raise CompileError(f"cannot push transformation {fac.transformation!r} to the leaves")
            logic_parts.append(fac.child)
        elif isinstance(fac, AlgAtom) and fac.structure == "prob":
            weights.setdefault(fac.atom, []).append(fac)
        elif isinstance(fac, Const) and fac.structure == "prob":
            weights.setdefault(None, []).append(fac)
        elif isinstance(fac, Binary) and fac.op == "+":
            raise CompileError(
                "non-factorized weight (a sum inside the weight product); encode dependencies "
                "with auxiliary atoms and factorized weights instead"
            )
        else:
            raise CompileError(f"unsupported factor in aggregation body: {type(fac).__name__}")
    if not logic_parts:
        raise CompileError("aggregation body has no transformed logic part")
    logic = fold_binary("and", logic_parts, "bool")
    for a in weights:
        if a is not None and a not in atoms:
            raise CompileError(f"weight atom {a} is not aggregated")
    return WmcShape(atoms, logic, weights)


def _group_check(mgr: NnfManager, atoms: Sequence[Atom]):
    agg = set(atoms)
    for a in atoms:
        i = mgr.atom_index(a)
        if mgr.is_grouped(i):
            members = [mgr.atoms[j] for j in mgr.var_atoms[mgr.atom_var[i]]]
            if not all(m in agg for m in members):
                raise CompileError(f"aggregation must cover the full class domain of the group of {a}")


def resolve_aggregations(
    f: Formula,
    model: Model,
    optimize: bool = True,
    order: Sequence[Atom] | None = None,
    stats: CompilationStats | None = None,
    name: str = "",
) -> Circuit:
    """Single circuit for a weighted-model-counting formula."""
    return compile_wmc_many([f], model, optimize=optimize, order=order, stats=stats, names=[name])


def compile_wmc_many(
    formulas: Sequence[Formula],
    model: Model,
    optimize: bool = True,
    order: Sequence[Atom] | None = None,
    stats: CompilationStats | None = None,
    names: Sequence[str] = (),
) -> Circuit:
    t0 = time.perf_counter()
    stats = stats if stats is not None else CompilationStats()
    mgr = NnfManager(model)
    shapes = [split_wmc(f) for f in formulas]
    roots = []
    for sh in shapes:
        roots.append(mgr.from_formula(sh.logic))
        for a in sh.atoms:
            mgr.atom_index(a)
        _group_check(mgr, sh.atoms)
        missing = [mgr.atoms[i] for i in mgr.atoms_in(roots[-1]) if mgr.atoms[i] not in set(sh.atoms)]
        if missing:
            raise CompileError(f"logic atom {missing[0]} is not aggregated")
    compiled = compile_many(mgr, roots, order=order, stats=stats)
    b = CircuitBuilder()
    out_roots = [
        _assemble(b, mgr, r, ddnnf_to_circuit(b, mgr, [r], _weight_fn(sh.weights), {})[0], sh.atoms,
                  _weight_fn(sh.weights), [c.value for c in sh.weights.get(None, [])])
        for sh, r in zip(shapes, compiled)
    ]
    c = b.build(out_roots, tuple(names) if any(names) else (), {"source": "wmc"})
    if optimize:
        c = simplify(c, model=model)
    stats.circuit_nodes = len(c)
    stats.wall_time = time.perf_counter() - t0
    return c


def _assemble(b: CircuitBuilder, mgr: NnfManager, r: int, top: int, atoms: Sequence[Atom], weight_of: Callable,
              consts: Sequence[float] = ()) -> int:
    """``top`` times the marginal of every aggregated atom that root ``r`` does not mention."""
    factors = [top]
    have = mgr.mask[r]
    vars_done = set()
    for a in atoms:
        v = mgr.atom_var[mgr.atom_index(a)]
        if have >> v & 1 or v in vars_done:
            continue
        vars_done.add(v)
        if mgr.var_group[v] is None:
            factors.append(b.op_node("prob", "+", [weight_of(b, a, True), weight_of(b, a, False)]))
        else:
            factors.append(b.op_node("prob", "+", [weight_of(b, mgr.atoms[j], True) for j in mgr.var_atoms[v]]))
    for c in consts:
        factors.append(b.const(c, "prob"))
    return factors[0] if len(factors) == 1 else b.op_node("prob", "*", factors)


def _label_leaf(b: CircuitBuilder, atom: Atom, truth: bool) -> int:
    return b.leaf(LeafRef(atom.predicate, atom.args, truth, "prob"))


def compile_roots(
    mgr: NnfManager,
    roots: Sequence[int],
    atoms: Sequence[Atom],
    model: Model | None = None,
    method: str = "auto",
    optimize: bool = True,
    names: Sequence[str] = (),
    order: Sequence[Atom] | None = None,
    stats: CompilationStats | None = None,
    rename: Mapping | None = None,
) -> Circuit:
    """One circuit with a root per NNF node, each weighted by the labels of ``atoms``.

    ``method="direct"`` trusts the input to be deterministic and decomposable
    modulo exactly-one groups (as proof DAGs of mutually exclusive choices
    are) and only smooths it; ``"shannon"`` always compiles; ``"auto"``
    checks first.  ``rename`` maps constants to variables in leaf references.
    """
    t0 = time.perf_counter()
    stats = stats if stats is not None else CompilationStats()
    for a in atoms:
        mgr.atom_index(a)
    if method == "auto":
        method = "direct" if is_ddnnf_modulo_groups(mgr, roots) else "shannon"
    if method == "direct":
        compiled = [smooth_nnf(mgr, r) for r in roots]
        stats.fast_path = True
    elif method == "shannon":
        compiled = compile_many(mgr, roots, order=order, stats=stats)
    else:
        raise CompileError(f"unknown compilation method {method!r}")
    if rename:
        def weight_of(b, atom, truth):
            args = tuple(rename.get(x, x) for x in atom.args)
            return b.leaf(LeafRef(atom.predicate, args, truth, "prob"))
    else:
        weight_of = _label_leaf
    b = CircuitBuilder()
    memo: dict = {}
    out = []
    for r in compiled:
        top = ddnnf_to_circuit(b, mgr, [r], weight_of, memo)[0]
        out.append(_assemble(b, mgr, r, top, atoms, weight_of))
    c = b.build(out, tuple(names), {"source": "proofs", "method": method})
    if optimize:
        c = simplify(c, model=model)
    stats.circuit_nodes = len(c)
    stats.wall_time += time.perf_counter() - t0
    return c


def nnf_fuzzy_circuit(mgr: NnfManager, roots: Sequence[int], structure: str, names: Sequence[str] = (),
                      rename: Mapping | None = None) -> Circuit:
    """Read an NNF DAG under a t-norm: ∧ and ∨ become the fuzzy connectives, ¬ the standard negation.

    No compilation happens; fuzzy semantics is truth-functional, so the DAG
    is evaluated as written.
    """
    if not structure.startswith("fuzzy:"):
        raise CompileError(f"expected a fuzzy structure, got {structure}")
    get_structure(structure)
    rename = rename or {}
    b = CircuitBuilder()
    memo: dict[int, int] = {}
    out = []
    for r in roots:
        for x in mgr.reachable(r):
            if x in memo:
                continue
            k = mgr.kind[x]
            if k == K_TRUE:
                memo[x] = b.const(1.0, structure)
            elif k == K_FALSE:
                memo[x] = b.const(0.0, structure)
            elif k == K_LIT:
                code = mgr.data[x]
                a = mgr.atoms[abs(code) - 1]
                leaf = b.leaf(LeafRef(a.predicate, tuple(rename.get(v, v) for v in a.args), None, structure))
                memo[x] = leaf if code > 0 else b.op_node(structure, "not", [leaf])
            else:
                memo[x] = b.op_node(structure, "and" if k == K_AND else "or", [memo[c] for c in mgr.data[x]])
        out.append(memo[r])
    return b.build(out, tuple(names), {"source": "nnf", "structure": structure})


def _weight_fn(weights: Mapping[Atom, list[Formula]]) -> Callable:
    def weight_of(b: CircuitBuilder, atom: Atom, truth: bool) -> int:
        facs = weights.get(atom)
        if not facs:
            return b.const(1.0, "prob")
        leaves = [b.leaf(LeafRef(atom.predicate, atom.args, truth, "prob")) for _ in facs]
        return leaves[0] if len(leaves) == 1 else b.op_node("prob", "*", leaves)

    return weight_of


# ---------------------------------------------------------------------------
# direct structural compilation


def _unroll(f: Formula, model: Model) -> Formula:
    """Replace every variable aggregation by an explicit fold over its domain."""
    if isinstance(f, AggVar):
        parts = [_unroll(substitute(f.child, {f.var: c}, partial=True), model) for c in model.domains[f.domain]]
        st = get_structure(f.structure)
        return fold_binary(st.aggregators[f.aggregator], parts, f.structure)
    if isinstance(f, Unary):
        return Unary(f.op, _unroll(f.child, model), f.structure)
    if isinstance(f, Binary):
        return Binary(f.op, _unroll(f.left, model), _unroll(f.right, model), f.structure)
    if isinstance(f, Transform):
        return Transform(f.target, f.transformation, _unroll(f.child, model))
    if isinstance(f, AggAtom):
        return AggAtom(f.atom, f.aggregator, _unroll(f.child, model), f.structure)
    return f


def structural_circuit(formulas: Sequence[Formula], model: Model, names: Sequence[str] = (),
                       builder: CircuitBuilder | None = None) -> Circuit:
    b = builder or CircuitBuilder()
    memo: dict[int, int] = {}

    def go(g: Formula) -> int:
        k = id(g)
        if k in memo:
            return memo[k]
        if isinstance(g, AlgAtom):
            truth = True if g.structure in ("bool", "prob") else None
            r = b.leaf(LeafRef(g.atom.predicate, g.atom.args, truth, g.structure))
        elif isinstance(g, Const):
            r = b.const(g.value, g.structure)
        elif isinstance(g, Unary):
            r = b.op_node(g.structure, g.op, [go(g.child)])
        elif isinstance(g, Binary):
            # a left-nested chain ((a op b) op c) becomes one n-ary node with the same fold order
            rights, x = [], g
            while isinstance(x, Binary) and x.op == g.op and x.structure == g.structure:
                rights.append(x.right)
                x = x.left
            r = b.op_node(g.structure, g.op, [go(x)] + [go(y) for y in reversed(rights)])
        elif isinstance(g, Transform):
            r = b.transform(g.transformation, go(g.child))
        elif isinstance(g, AggAtom):
            raise CompileError(
                "aggregation over atoms cannot be mapped structurally; use the sampled "
                "(probabilistic-fuzzy) mode instead"
            )
        else:
            raise CompileError(f"unsupported node {type(g).__name__}")
        memo[k] = r
        return r

    roots = [go(_unroll(f, model)) for f in formulas]
    return b.build(roots, tuple(names), {"source": "structural"})


def compile_fuzzy(f: Formula | Sequence[Formula], model: Model, names: Sequence[str] = ()) -> Circuit:
    """Direct mapping of a fuzzy formula onto a circuit (no knowledge compilation)."""
    formulas = [f] if isinstance(f, Formula) else list(f)
    for g in formulas:
        if not g.structure.startswith("fuzzy"):
            raise CompileError(f"compile_fuzzy needs a fuzzy formula, got one over {g.structure}")
    return structural_circuit(formulas, model, names)


def compile_formula(f: Formula, model: Model, optimize: bool = True, name: str = "") -> Circuit:
    """Pick the compilation route from the shape of the formula."""
    if isinstance(f, AggAtom):
        return resolve_aggregations(f, model, optimize=optimize, name=name)
    c = structural_circuit([f], model, [name] if name else ())
    return simplify(c, model=model) if optimize else c


# ---------------------------------------------------------------------------
# simplification


def _is_const(c: Circuit, n: int) -> bool:
    return c.kind[n] == CONST


def simplify(c: Circuit, laws: Mapping[str, Any] | None = None, labels: LabellingSpec | None = None,
             model: Model | None = None) -> Circuit:
    """Law-driven rewriting to a fixed point.

    Applies constant folding, neutral and annihilator elimination, idempotent
    deduplication (where declared), common-subexpression sharing, and, for
    probabilistic labels known to be normalized, replaces the marginal
    ``label(a:=t) + label(a:=f)`` (or the sum over a whole class) by one.
    Class sums are only recognised when ``model`` supplies the class domains.
    ``laws`` overrides, per operator name, whether idempotent dedup applies.
    """
    if model is not None and labels is None:
        labels = model.labels
    ctx = (labels, model, dict(laws or {}))
    cur = c
    while True:
        nxt = _simplify_once(cur, ctx)
        if len(nxt) == len(cur) and nxt.same_structure(cur):
            return nxt
        cur = nxt


def _simplify_once(c: Circuit, ctx) -> Circuit:
    b = CircuitBuilder()
    m: dict[int, int] = {}
    for n in range(len(c)):
        k = c.kind[n]
        if k == LEAF:
            m[n] = b.leaf(c.leaves[n])
        elif k == CONST:
            m[n] = b.const(c.consts[n], c.structure_of(n))
        elif k == TRANSFORM:
            ch = m[int(c.children(n)[0])]
            if b.kind[ch] == CONST:
                t = get_transformation(c.op_of(n))
                m[n] = b.const(t(b.consts[ch]), t.target)
            else:
                m[n] = b.transform(c.op_of(n), ch)
        else:
            m[n] = _simplify_op(b, c.structure_of(n), c.op_of(n), [m[int(x)] for x in c.children(n)], ctx)
    roots = [m[r] for r in c.roots]
    # drop unreachable nodes by re-importing from the roots
    return _prune(b.build(roots, c.root_names, c.metadata))


def _simplify_op(b: CircuitBuilder, s: str, op: str, ch: list[int], ctx) -> int:
    labels, model, laws = ctx
    st = get_structure(s)
    op = st.resolve_op(op)
    if op in st.unary_ops:
        if b.kind[ch[0]] == CONST:
            return b.const(st.unary_ops[op](b.consts[ch[0]]), s)
        return b.op_node(s, op, ch)
    neutral = st.neutral(op)
    annihilator = st.annihilator(op)
    if annihilator is not None and any(b.kind[x] == CONST and b.consts[x] == annihilator for x in ch):
        return b.const(annihilator, s)
    if neutral is not None:
        ch = [x for x in ch if not (b.kind[x] == CONST and b.consts[x] == neutral)]
        if not ch:
            return b.const(neutral, s)
    if all(b.kind[x] == CONST for x in ch):
        return b.const(st.fold(_agg_for(st, op), [b.consts[x] for x in ch]), s)
    if laws.get(op, st.declares("idempotent", op)):
        ch = list(dict.fromkeys(ch))
    if len(ch) == 1:
        return ch[0]
    if s == "prob" and op == "+" and labels is not None and _is_normalized_marginal(b, ch, labels, model):
        return b.const(1.0, s)
    return b.op_node(s, op, ch)


def _agg_for(st, op: str) -> str:
    for name, o in st.aggregators.items():
        if o == op:
            return name
    raise KeyError(op)


def _is_normalized_marginal(b: CircuitBuilder, ch: list[int], labels: LabellingSpec, model: Model | None) -> bool:
    if not all(b.kind[x] == LEAF for x in ch):
        return False
    refs = [b.leaves[x] for x in ch]
    pred = refs[0].predicate
    if any(r.predicate != pred or r.structure != "prob" for r in refs):
        return False
    e = labels.get(pred, "prob")
    if e is None or not e.normalized:
        return False
    if e.group is None:
        return len(refs) == 2 and refs[0].args == refs[1].args and {r.truth for r in refs} == {True, False}
    if model is None or any(r.truth is not True for r in refs):
        return False
    g = e.group
    prefixes = {r.args[:g] + r.args[g + 1 :] for r in refs}
    classes = [r.args[g] for r in refs]
    dom = model.domains[model.predicates[pred].domains[g]]
    return len(prefixes) == 1 and len(set(classes)) == len(classes) == len(dom)


def _prune(c: Circuit) -> Circuit:
    keep = np.zeros(len(c), dtype=bool)
    stack = list(c.roots)
    while stack:
        n = stack.pop()
        if keep[n]:
            continue
        keep[n] = True
        stack.extend(int(x) for x in c.children(n))
    if keep.all():
        return c
    b = CircuitBuilder()
    m: dict[int, int] = {}
    for n in np.flatnonzero(keep):
        n = int(n)
        k = c.kind[n]
        if k == LEAF:
            m[n] = b.leaf(c.leaves[n])
        elif k == CONST:
            m[n] = b.const(c.consts[n], c.structure_of(n))
        elif k == TRANSFORM:
            m[n] = b.transform(c.op_of(n), m[int(c.children(n)[0])])
        else:
            m[n] = b.op_node(c.structure_of(n), c.op_of(n), [m[int(x)] for x in c.children(n)])
    return b.build([m[r] for r in c.roots], c.root_names, c.metadata)
