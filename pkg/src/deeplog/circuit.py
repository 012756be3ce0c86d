"""Algebraic circuits: flat DAG storage, layered batched evaluation, gradients.

Nodes live in one append-only array in topological order, so every child
index is smaller than its parent's.  A :class:`Layerization` groups nodes by
longest-path depth and, within a layer, by (structure, operator, arity).
Every group is evaluated as a left-to-right fold over its child columns, which
fixes the reduction order and makes results independent of the batch size.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np

from .algebra import Dual, get_structure, get_transformation, transformation_accepts
from .language import Atom, Model, Variable
from .params import LabelBinding, ParameterStore, bind_labels, sigmoid

__all__ = [
    "LEAF",
    "CONST",
    "OP",
    "TRANSFORM",
    "LeafRef",
    "Circuit",
    "CircuitBuilder",
    "CircuitError",
    "Layerization",
    "Batch",
    "Labeller",
    "ForwardState",
    "compose",
    "layerize",
    "eval_forward",
    "eval_gradient",
    "eval_layers",
    "eval_naive",
    "eval_dual_jacobian",
    "eval_expected_fuzzy",
    "leaf_gradients",
    "serialize",
    "deserialize",
    "FORMAT_VERSION",
]

LEAF, CONST, OP, TRANSFORM = 0, 1, 2, 3
FORMAT_VERSION = "DLC1"


class CircuitError(ValueError):
    pass


@dataclass(frozen=True)
class LeafRef:
    """Reference to a labelling: atom arguments may be constants or variable slots.

    ``truth`` is the truth value the label is read at (``None`` for fuzzy
    scores, which do not depend on an interpretation).
    """

    predicate: str
    args: tuple
    truth: bool | None
    structure: str

    @property
    def atom(self) -> Atom:
        return Atom(self.predicate, self.args)

    def is_ground(self) -> bool:
        return not any(isinstance(a, Variable) for a in self.args)

    def __str__(self) -> str:
        tag = {True: ":=t", False: ":=f", None: ""}[self.truth]
        return f"{self.atom}{tag}@{self.structure}"


@dataclass(frozen=True, eq=False)
class Circuit:
    kind: np.ndarray
    struct: np.ndarray
    op: np.ndarray
    child_ptr: np.ndarray
    child_idx: np.ndarray
    structures: tuple[str, ...]
    op_names: tuple[str, ...]
    leaves: Mapping[int, LeafRef]
    consts: Mapping[int, Any]
    roots: tuple[int, ...]
    root_names: tuple[str, ...] = ()
    metadata: Mapping[str, Any] = field(default_factory=dict)

    def __len__(self) -> int:
        return int(self.kind.shape[0])

    @property
    def n_nodes(self) -> int:
        return len(self)

    def children(self, n: int) -> np.ndarray:
        return self.child_idx[self.child_ptr[n] : self.child_ptr[n + 1]]

    def structure_of(self, n: int) -> str:
        return self.structures[int(self.struct[n])]

    def op_of(self, n: int) -> str:
        return self.op_names[int(self.op[n])]

    @property
    def leaf_nodes(self) -> np.ndarray:
        return np.array(sorted(self.leaves), dtype=np.int64)

    def with_roots(self, roots: Sequence[int], names: Sequence[str] = ()) -> "Circuit":
        return Circuit(
            self.kind, self.struct, self.op, self.child_ptr, self.child_idx, self.structures,
            self.op_names, self.leaves, self.consts, tuple(int(r) for r in roots), tuple(names), self.metadata,
        )

    def describe(self, n: int) -> str:
        k = self.kind[n]
        if k == LEAF:
            return str(self.leaves[n])
        if k == CONST:
            return repr(self.consts[n])
        if k == TRANSFORM:
            return f"{self.op_of(n)}({int(self.children(n)[0])})"
        return f"{self.op_of(n)}<{self.structure_of(n)}>({', '.join(str(int(c)) for c in self.children(n))})"

    def to_text(self) -> str:
        lines = [f"{n}: {self.describe(n)}" for n in range(len(self))]
        for r, name in zip(self.roots, self.root_names or [""] * len(self.roots)):
            lines.append(f"root {r}{' ' + name if name else ''}")
        return "\n".join(lines)

    def same_structure(self, other: "Circuit") -> bool:
        return (
            np.array_equal(self.kind, other.kind)
            and np.array_equal(self.struct, other.struct)
            and np.array_equal(self.op, other.op)
            and np.array_equal(self.child_ptr, other.child_ptr)
            and np.array_equal(self.child_idx, other.child_idx)
            and self.structures == other.structures
            and self.op_names == other.op_names
            and dict(self.leaves) == dict(other.leaves)
            and {k: _plain(v) for k, v in self.consts.items()} == {k: _plain(v) for k, v in other.consts.items()}
            and self.roots == other.roots
            and self.root_names == other.root_names
            and dict(self.metadata) == dict(other.metadata)
        )


def _plain(v):
    if isinstance(v, (bool, np.bool_)):
        return bool(v)
    return float(v)


class CircuitBuilder:
    """Append-only node store with hash-consing (common-subexpression sharing)."""

    def __init__(self, max_nodes: int = 10_000_000):
        self.kind: list[int] = []
        self.struct: list[int] = []
        self.op: list[int] = []
        self.children: list[tuple[int, ...]] = []
        self.structures: list[str] = []
        self.op_names: list[str] = []
        self.leaves: dict[int, LeafRef] = {}
        self.consts: dict[int, Any] = {}
        self._table: dict[tuple, int] = {}
        self._sidx: dict[str, int] = {}
        self._oidx: dict[str, int] = {}
        self.max_nodes = max_nodes

    def __len__(self) -> int:
        return len(self.kind)

    def _s(self, name: str) -> int:
        i = self._sidx.get(name)
        if i is None:
            get_structure(name)
            i = self._sidx[name] = len(self.structures)
            self.structures.append(name)
        return i

    def _o(self, name: str) -> int:
        i = self._oidx.get(name)
        if i is None:
            i = self._oidx[name] = len(self.op_names)
            self.op_names.append(name)
        return i

    def _add(self, key, kind, s, o, ch) -> int:
        n = self._table.get(key)
        if n is not None:
            return n
        n = len(self.kind)
        if n >= self.max_nodes:
            raise CircuitError(f"circuit exceeds {self.max_nodes} nodes")
        self.kind.append(kind)
        self.struct.append(s)
        self.op.append(o)
        self.children.append(ch)
        self._table[key] = n
        return n

    def structure_of(self, n: int) -> str:
        return self.structures[self.struct[n]]

    def leaf(self, ref: LeafRef) -> int:
        n = self._add(("L", ref), LEAF, self._s(ref.structure), -1, ())
        self.leaves[n] = ref
        return n

    def const(self, value, structure: str) -> int:
        if isinstance(value, (bool, np.bool_)):
            v: Any = bool(value)
        else:
            v = float(value)
        n = self._add(("C", structure, type(v).__name__, v), CONST, self._s(structure), -1, ())
        self.consts[n] = v
        return n

    def op_node(self, structure: str, op: str, children: Sequence[int]) -> int:
        st = get_structure(structure)
        op = st.resolve_op(op)
        ch = tuple(int(c) for c in children)
        if not ch:
            raise CircuitError("operator nodes need at least one child")
        for c in ch:
            if self.structure_of(c) != structure:
                raise CircuitError(
                    f"structure mismatch: child over {self.structure_of(c)} under {op}<{structure}>"
                )
        if op in st.unary_ops and len(ch) != 1:
            raise CircuitError(f"{op} is unary")
        return self._add(("O", structure, op, ch), OP, self._s(structure), self._o(op), ch)

    def transform(self, name: str, child: int) -> int:
        t = get_transformation(name)
        if not transformation_accepts(t, self.structure_of(child)):
            raise CircuitError(f"transformation {name} cannot take a {self.structure_of(child)} child")
        return self._add(("T", name, child), TRANSFORM, self._s(t.target), self._o(name), (int(child),))

    def import_circuit(self, c: Circuit) -> dict[int, int]:
        """Copy all nodes of ``c``; returns the old-to-new index map."""
        m: dict[int, int] = {}
        for n in range(len(c)):
            k = c.kind[n]
            if k == LEAF:
                m[n] = self.leaf(c.leaves[n])
            elif k == CONST:
                m[n] = self.const(c.consts[n], c.structure_of(n))
            elif k == OP:
                m[n] = self.op_node(c.structure_of(n), c.op_of(n), [m[int(x)] for x in c.children(n)])
            else:
                m[n] = self.transform(c.op_of(n), m[int(c.children(n)[0])])
        return m

    def build(self, roots: Sequence[int], names: Sequence[str] = (), metadata: Mapping | None = None) -> Circuit:
        ptr = np.zeros(len(self.kind) + 1, dtype=np.int64)
        if self.children:
            ptr[1:] = np.cumsum([len(c) for c in self.children])
        idx = np.fromiter((x for ch in self.children for x in ch), dtype=np.int64, count=int(ptr[-1]))
        return Circuit(
            kind=np.asarray(self.kind, dtype=np.int8),
            struct=np.asarray(self.struct, dtype=np.int16),
            op=np.asarray(self.op, dtype=np.int16),
            child_ptr=ptr,
            child_idx=idx,
            structures=tuple(self.structures),
            op_names=tuple(self.op_names),
            leaves=dict(self.leaves),
            consts=dict(self.consts),
            roots=tuple(int(r) for r in roots),
            root_names=tuple(names),
            metadata=dict(metadata or {}),
        )


def compose(c1: Circuit, c2: Circuit, op: str, structure: str) -> Circuit:
    """Circuit whose single root is ``op(root(c1), root(c2))``.

    Node arrays are concatenated without re-sharing, so the result has at
    most ``len(c1) + len(c2) + 1`` nodes.
    """
    if len(c1.roots) != 1 or len(c2.roots) != 1:
        raise CircuitError("compose needs single-root circuits")
    st = get_structure(structure)
    op = st.resolve_op(op)
    r1, r2 = c1.roots[0], c2.roots[0]
    if c1.structure_of(r1) != structure or c2.structure_of(r2) != structure:
        raise CircuitError(
            f"structure mismatch: roots over {c1.structure_of(r1)} and {c2.structure_of(r2)}, "
            f"operator over {structure}; insert an explicit transform"
        )
    structures = list(c1.structures)
    for s in c2.structures:
        if s not in structures:
            structures.append(s)
    if structure not in structures:
        structures.append(structure)
    op_names = list(c1.op_names)
    for o in c2.op_names + (op,):
        if o not in op_names:
            op_names.append(o)
    smap = np.array([structures.index(s) for s in c2.structures], dtype=np.int16)
    omap = np.array([op_names.index(o) for o in c2.op_names] or [0], dtype=np.int16)
    n1 = len(c1)
    op2 = np.where(c2.op >= 0, omap[np.maximum(c2.op, 0)], -1).astype(np.int16)
    kind = np.concatenate([c1.kind, c2.kind, np.array([OP], dtype=np.int8)])
    struct = np.concatenate([c1.struct, smap[c2.struct] if len(c2) else c2.struct,
                             np.array([structures.index(structure)], dtype=np.int16)])
    ops = np.concatenate([c1.op, op2, np.array([op_names.index(op)], dtype=np.int16)])
    idx = np.concatenate([c1.child_idx, c2.child_idx + n1, np.array([r1, r2 + n1], dtype=np.int64)])
    ptr = np.concatenate([c1.child_ptr[:-1], c2.child_ptr[:-1] + len(c1.child_idx),
                          np.array([len(c1.child_idx) + len(c2.child_idx), len(idx)], dtype=np.int64)])
    leaves = dict(c1.leaves)
    leaves.update({k + n1: v for k, v in c2.leaves.items()})
    consts = dict(c1.consts)
    consts.update({k + n1: v for k, v in c2.consts.items()})
    return Circuit(kind, struct, ops, ptr, idx, tuple(structures), tuple(op_names), leaves, consts,
                   (len(kind) - 1,), (), {"composed": True})


def validate(c: Circuit) -> None:
    for n in range(len(c)):
        ch = c.children(n)
        if len(ch) and int(ch.max()) >= n:
            raise CircuitError(f"node {n} has a child with a larger index")


# ---------------------------------------------------------------------------
# layerization


@dataclass(frozen=True)
class Bucket:
    kind: int
    structure: str
    op: str
    nodes: np.ndarray
    children: np.ndarray  # (len(nodes), arity)


@dataclass(frozen=True)
class Layerization:
    layers: tuple[np.ndarray, ...]
    plans: tuple[tuple[Bucket, ...], ...]
    depth: np.ndarray

    def __len__(self) -> int:
        return len(self.layers)


def _depths(c: Circuit) -> np.ndarray:
    depth = np.zeros(len(c), dtype=np.int64)
    counts = np.diff(c.child_ptr)
    internal = np.flatnonzero(counts > 0)
    if not len(internal):
        return depth
    starts = c.child_ptr[internal]
    # relax until fixed point; the number of sweeps is the circuit depth
    while True:
        new = np.maximum.reduceat(depth[c.child_idx], starts) + 1
        if np.array_equal(new, depth[internal]):
            return depth
        depth[internal] = new


def layerize(c: Circuit) -> Layerization:
    """Group nodes by longest-path depth; leaves and constants form layer 0."""
    depth = _depths(c)
    n_layers = int(depth.max()) + 1 if len(c) else 0
    order = np.argsort(depth, kind="stable")
    bounds = np.searchsorted(depth[order], np.arange(n_layers + 1))
    layers, plans = [], []
    counts = np.diff(c.child_ptr)
    for d in range(n_layers):
        nodes = order[bounds[d] : bounds[d + 1]]
        layers.append(nodes)
        if d == 0:
            plans.append(())
            continue
        key_struct = c.struct[nodes].astype(np.int64)
        key_op = c.op[nodes].astype(np.int64)
        key_kind = c.kind[nodes].astype(np.int64)
        ar = counts[nodes]
        keys = np.stack([key_kind, key_struct, key_op, ar], axis=1)
        uniq, inv = np.unique(keys, axis=0, return_inverse=True)
        inv = inv.ravel()
        buckets = []
        for u in range(len(uniq)):
            kind, s, o, arity = (int(x) for x in uniq[u])
            members = nodes[inv == u]
            starts = c.child_ptr[members]
            ch = c.child_idx[starts[:, None] + np.arange(arity)[None, :]]
            buckets.append(Bucket(kind, c.structures[s], c.op_names[o], members, ch))
        plans.append(tuple(buckets))
    return Layerization(tuple(layers), tuple(plans), depth)


# ---------------------------------------------------------------------------
# batches and leaf labels


@dataclass
class Batch:
    """Rows of variable assignments plus optional payloads and interpretations."""

    assignments: list[dict]
    payloads: Mapping[Any, np.ndarray] | None = None
    interpretation: list[Mapping[Atom, Any]] | None = None

    def __post_init__(self):
        self.assignments = [
            {(Variable(k) if isinstance(k, str) else k): v for k, v in row.items()} for row in self.assignments
        ]

    def __len__(self) -> int:
        return len(self.assignments)

    @classmethod
    def single(cls, interpretation: Mapping | None = None) -> "Batch":
        return cls([{}], None, [interpretation] if interpretation is not None else None)


class Labeller:
    """Label bindings of a model together with the parameter store they read."""

    def __init__(self, model: Model, store: ParameterStore | None = None, seed: int = 0, init_scale: float = 0.1):
        self.model = model
        self.store = store if store is not None else ParameterStore()
        self.bindings = bind_labels(model, self.store, seed=seed, init_scale=init_scale)
        self._plans: dict[int, tuple[Circuit, "LeafPlan"]] = {}

    def plan(self, c: Circuit) -> "LeafPlan":
        hit = self._plans.get(id(c))
        if hit is not None and hit[0] is c:
            return hit[1]
        p = LeafPlan(c, self)
        self._plans[id(c)] = (c, p)
        return p


@dataclass
class _Group:
    binding: LabelBinding
    pattern: tuple
    nodes: np.ndarray
    cols: np.ndarray
    truth: np.ndarray  # 1 true, 0 false, 2 score


class LeafPlan:
    def __init__(self, c: Circuit, lab: Labeller):
        self.nodes = c.leaf_nodes
        groups: dict[tuple, list] = {}
        self.tables: list[tuple[int, LeafRef, Any]] = []
        self.identity: list[tuple[int, LeafRef]] = []
        for n in self.nodes:
            ref = c.leaves[int(n)]
            b = lab.bindings.get((ref.predicate, ref.structure))
            if b is None:
                raise CircuitError(f"leaf {ref} has no labelling entry")
            if b.entry.kind == "table":
                self.tables.append((int(n), ref, b.entry))
            elif b.entry.kind == "identity":
                self.identity.append((int(n), ref))
            else:
                pattern = tuple(ref.args[i] for i in b.prefix_positions)
                k = b.class_index(ref.atom) if b.grouped else 0
                if b.grouped and isinstance(ref.args[b.entry.group], Variable):
                    raise CircuitError(f"class argument of {ref} must be a constant")
                t = 2 if ref.truth is None else int(bool(ref.truth))
                groups.setdefault((b.entry.key, pattern), [b, pattern, []])[2].append((int(n), k, t))
        self.groups = [
            _Group(b, pat, np.array([x[0] for x in items]), np.array([x[1] for x in items]),
                   np.array([x[2] for x in items]))
            for b, pat, items in groups.values()
        ]
        self.by_binding: dict[tuple, list[_Group]] = {}
        for g in self.groups:
            self.by_binding.setdefault(g.binding.entry.key, []).append(g)

    def _rows(self, pattern: tuple, batch: Batch) -> list[tuple]:
        if not any(isinstance(a, Variable) for a in pattern):
            return [pattern] * len(batch)
        out = []
        for row in batch.assignments:
            try:
                out.append(tuple(row[a] if isinstance(a, Variable) else a for a in pattern))
            except KeyError as exc:
                raise CircuitError(f"batch row does not bind variable {exc.args[0]}") from None
        return out

    def values(self, lab: Labeller, batch: Batch):
        B = len(batch)
        vals = {}
        caches = []

        def payloads(c):
            if batch.payloads is not None and c in batch.payloads:
                return batch.payloads[c]
            try:
                return lab.model.tensors[c]
            except KeyError:
                raise CircuitError(f"missing payload for perceptual leaf argument {c!r}") from None

        for key, groups in self.by_binding.items():
            rows = [self._rows(g.pattern, batch) for g in groups]
            if len(groups) > 1 and any(any(isinstance(a, Variable) for a in g.pattern) for g in groups):
                for r in range(B):
                    seen = [rw[r] for rw in rows]
                    if len(set(seen)) != len(seen):
                        raise CircuitError(
                            f"distinct leaf atoms of {key[0]} collapse to the same ground atom in row {r}"
                        )
            for g, rw in zip(groups, rows):
                p, cache = g.binding.forward(lab.store, rw, payloads)
                caches.append((g, cache))
                for n, k, t in zip(g.nodes, g.cols, g.truth):
                    q = p[:, k]
                    if t == 2 or t == 1:
                        vals[int(n)] = q
                    elif g.binding.grouped:
                        vals[int(n)] = np.ones(B)
                    else:
                        vals[int(n)] = 1.0 - q
        for n, ref, entry in self.tables:
            out = np.empty(B)
            for r, row in enumerate(batch.assignments):
                atom = Atom(ref.predicate, tuple(row.get(a, a) if isinstance(a, Variable) else a for a in ref.args))
                t, f = entry.lookup(atom)
                out[r] = (t if ref.truth in (True, None) else f) if entry.structure == "prob" else t
            vals[n] = out
        for n, ref in self.identity:
            if batch.interpretation is None:
                raise CircuitError(f"identity leaf {ref} needs an interpretation in the batch")
            out = np.empty(B)
            for r, row in enumerate(batch.assignments):
                atom = Atom(ref.predicate, tuple(row.get(a, a) if isinstance(a, Variable) else a for a in ref.args))
                try:
                    out[r] = float(batch.interpretation[r][atom])
                except KeyError:
                    raise CircuitError(f"interpretation of row {r} does not assign {atom}") from None
            vals[n] = out
        mat = np.stack([vals[int(n)] for n in self.nodes]) if len(self.nodes) else np.zeros((0, B))
        return mat, caches

    def backward(self, lab: Labeller, caches, dleaf: Mapping[int, np.ndarray]) -> None:
        for g, cache in caches:
            p = cache["p"]
            dp = np.zeros_like(p)
            for n, k, t in zip(g.nodes, g.cols, g.truth):
                d = dleaf[int(n)]
                if t == 2 or t == 1:
                    dp[:, k] += d
                elif not g.binding.grouped:
                    dp[:, k] -= d
            g.binding.backward(lab.store, cache, dp)


# ---------------------------------------------------------------------------
# forward evaluation


def _apply_bucket(b: Bucket, vals: np.ndarray) -> np.ndarray:
    st = get_structure(b.structure)
    if b.kind == TRANSFORM:
        return np.asarray(get_transformation(b.op)(vals[b.children[:, 0]]), dtype=float)
    if b.op in st.unary_ops:
        return np.asarray(st.unary_ops[b.op](vals[b.children[:, 0]]), dtype=float)
    f = st.binary_ops[b.op]
    acc = vals[b.children[:, 0]]
    if st.value_kind == "bool":
        acc = acc.astype(bool)
    for j in range(1, b.children.shape[1]):
        nxt = vals[b.children[:, j]]
        acc = f(acc, nxt.astype(bool) if st.value_kind == "bool" else nxt)
    return np.asarray(acc, dtype=float)


def eval_layers(c: Circuit, lay: Layerization, leaf_matrix: np.ndarray) -> np.ndarray:
    """All node values, shape ``(nodes, batch)``, given leaf values in leaf-node order."""
    B = leaf_matrix.shape[1] if leaf_matrix.ndim == 2 else 1
    vals = np.empty((len(c), B))
    ln = c.leaf_nodes
    if len(ln):
        vals[ln] = leaf_matrix
    for n, v in c.consts.items():
        vals[n] = float(v)
    for plan in lay.plans[1:]:
        for b in plan:
            vals[b.nodes] = _apply_bucket(b, vals)
    return vals


@dataclass
class ForwardState:
    values: np.ndarray
    leaf_matrix: np.ndarray
    caches: list
    batch_size: int

    def roots(self, c: Circuit) -> np.ndarray:
        return self.values[list(c.roots)].T if c.roots else np.zeros((self.batch_size, 0))


def forward(c: Circuit, lay: Layerization | None, params: Labeller, batch: Batch) -> ForwardState:
    lay = lay or layerize(c)
    if len(batch) == 0:
        raise CircuitError("empty batch")
    leaf_matrix, caches = params.plan(c).values(params, batch)
    vals = eval_layers(c, lay, leaf_matrix)
    return ForwardState(vals, leaf_matrix, caches, len(batch))


def eval_forward(c: Circuit, lay: Layerization | None = None, params: Labeller | None = None,
                 batch: Batch | None = None) -> np.ndarray:
    """Root values, shape ``(batch, roots)``."""
    batch = batch or Batch.single()
    if not c.roots:
        return np.zeros((len(batch), 0))
    if params is None:
        if c.leaves:
            raise CircuitError("circuit has leaves but no labeller was given")
        lay = lay or layerize(c)
        vals = eval_layers(c, lay, np.zeros((0, len(batch))))
        return vals[list(c.roots)].T
    return forward(c, lay, params, batch).roots(c)


# ---------------------------------------------------------------------------
# reverse mode


def _node_grads(c: Circuit, lay: Layerization, vals: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    B = vals.shape[1]
    G = np.zeros((len(c), B))
    np.add.at(G, np.asarray(c.roots, dtype=np.int64), upstream.T)
    for plan in reversed(lay.plans[1:]):
        for b in plan:
            g = G[b.nodes]
            st = get_structure(b.structure)
            ch = b.children
            if b.kind == TRANSFORM:
                if b.op != "iverson":
                    np.add.at(G, ch[:, 0], g)
                continue
            if not st.differentiable:
                continue
            if b.op in st.unary_ops:
                np.add.at(G, ch[:, 0], g * st.unary_partials[b.op](vals[ch[:, 0]]))
                continue
            f = st.binary_ops[b.op]
            dfn = st.binary_partials[b.op]
            accs = [vals[ch[:, 0]]]
            for j in range(1, ch.shape[1] - 1):
                accs.append(f(accs[-1], vals[ch[:, j]]))
            for j in range(ch.shape[1] - 1, 0, -1):
                da, db = dfn(accs[j - 1], vals[ch[:, j]])
                np.add.at(G, ch[:, j], g * db)
                g = g * da
            np.add.at(G, ch[:, 0], g)
    return G


def _check_differentiable(c: Circuit):
    for r in c.roots:
        if not get_structure(c.structure_of(r)).differentiable:
            raise CircuitError(f"gradient requested over non-differentiable structure {c.structure_of(r)}")


def leaf_gradients(c: Circuit, lay: Layerization, leaf_matrix: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """d(sum upstream * roots) / d(leaf values), shape ``(leaves, batch)``."""
    _check_differentiable(c)
    vals = eval_layers(c, lay, leaf_matrix)
    G = _node_grads(c, lay, vals, np.asarray(upstream, dtype=float))
    return G[c.leaf_nodes]


def eval_gradient(c: Circuit, lay: Layerization | None, params: Labeller, batch: Batch,
                  upstream: np.ndarray, state: ForwardState | None = None) -> dict[str, np.ndarray]:
    """Accumulate parameter gradients of ``sum(upstream * roots)`` into ``params.store``.

    Returns a copy of the accumulated gradients.
    """
    _check_differentiable(c)
    lay = lay or layerize(c)
    state = state or forward(c, lay, params, batch)
    upstream = np.asarray(upstream, dtype=float).reshape(state.batch_size, len(c.roots))
    G = _node_grads(c, lay, state.values, upstream)
    ln = c.leaf_nodes
    dleaf = {int(n): G[n] for n in ln}
    params.plan(c).backward(params, state.caches, dleaf)
    return {k: v.copy() for k, v in params.store.grads.items()}


# ---------------------------------------------------------------------------
# baselines and oracles


def eval_naive(c: Circuit, leaf_matrix: np.ndarray) -> np.ndarray:
    """Row-by-row recursive evaluation with Python floats (the benchmark baseline)."""
    leaf_pos = {int(n): i for i, n in enumerate(c.leaf_nodes)}
    B = leaf_matrix.shape[1]
    out = np.empty((B, len(c.roots)))
    ops = {}
    for n in range(len(c)):
        if c.kind[n] in (OP, TRANSFORM):
            ops[n] = (c.kind[n], get_structure(c.structure_of(n)), c.op_of(n), [int(x) for x in c.children(n)])
    for r in range(B):
        memo: dict[int, Any] = {}

        def val(n: int):
            if n in memo:
                return memo[n]
            k = c.kind[n]
            if k == LEAF:
                v = float(leaf_matrix[leaf_pos[n], r])
            elif k == CONST:
                v = c.consts[n]
            else:
                kind, st, op, ch = ops[n]
                if kind == TRANSFORM:
                    v = get_transformation(op)(val(ch[0]))
                elif op in st.unary_ops:
                    v = st.unary_ops[op](val(ch[0]))
                else:
                    f = st.binary_ops[op]
                    v = val(ch[0])
                    for x in ch[1:]:
                        v = f(v, val(x))
            memo[n] = v
            return v

        for j, root in enumerate(c.roots):
            out[r, j] = float(val(root))
    return out


def eval_dual_jacobian(c: Circuit, leaf_values: np.ndarray) -> np.ndarray:
    """Forward-mode Jacobian ``d roots / d leaves`` for one row, via dual numbers.

    Every leaf is seeded along its own tangent direction, so one sweep in
    node order gives all partials.  Uses each structure's dual operators, an
    implementation independent of the reverse-mode partials.
    """
    ln = c.leaf_nodes
    L = len(ln)
    leaf_pos = {int(n): i for i, n in enumerate(ln)}
    vals: list[Dual | None] = [None] * len(c)
    for n in range(len(c)):
        k = c.kind[n]
        if k == LEAF:
            t = np.zeros(L)
            t[leaf_pos[n]] = 1.0
            vals[n] = Dual(np.full(L, float(leaf_values[leaf_pos[n]])), t)
        elif k == CONST:
            vals[n] = Dual(np.full(L, float(c.consts[n])), np.zeros(L))
        elif k == TRANSFORM:
            child = vals[int(c.children(n)[0])]
            t = get_transformation(c.op_of(n))
            if t.name == "iverson":
                vals[n] = Dual(np.where(child.primal != 0, 1.0, 0.0), np.zeros(L))
            else:
                vals[n] = child
        else:
            st = get_structure(c.structure_of(n))
            op = c.op_of(n)
            ch = [vals[int(x)] for x in c.children(n)]
            if st.value_kind == "bool":
                fn = st.binary_ops.get(op)
                if op in st.unary_ops:
                    p = st.unary_ops[op](ch[0].primal != 0)
                else:
                    p = ch[0].primal != 0
                    for x in ch[1:]:
                        p = fn(p, x.primal != 0)
                vals[n] = Dual(np.asarray(p, dtype=float), np.zeros(L))
            elif op in st.unary_ops:
                vals[n] = st.dual_unary[op](ch[0])
            else:
                f = st.dual_binary[op]
                acc = ch[0]
                for x in ch[1:]:
                    acc = f(acc, x)
                vals[n] = acc
    if not c.roots:
        return np.zeros((0, L))
    return np.stack([np.broadcast_to(np.asarray(vals[r].tangent, dtype=float), (L,)) for r in c.roots])


# ---------------------------------------------------------------------------
# probabilistic-fuzzy expectation

DISTRIBUTIONS = ("dirac", "uniform", "beta", "logit-normal")


def _sample_leaves(q: np.ndarray, dist: str, samples: int, rng, scale: float):
    """Samples ``(samples, leaves, batch)`` and pathwise derivatives d sample / d q."""
    S = samples
    if dist == "dirac":
        x = np.broadcast_to(q, (S,) + q.shape).copy()
        return x, np.ones_like(x)
    if dist == "uniform":
        x = rng.random((S,) + q.shape)
        return x, np.zeros_like(x)
    if dist == "beta":
        qc = np.clip(q, 1e-6, 1 - 1e-6)
        x = rng.beta(scale * qc, scale * (1 - qc), size=(S,) + q.shape)
        return x, None
    if dist == "logit-normal":
        qc = np.clip(q, 1e-9, 1 - 1e-9)
        eps = rng.standard_normal((S,) + q.shape)
        x = sigmoid(np.log(qc) - np.log1p(-qc) + scale * eps)
        dxdq = x * (1 - x) / (qc * (1 - qc))
        return x, dxdq
    raise CircuitError(f"unknown leaf distribution {dist!r}; expected one of {DISTRIBUTIONS}")


def eval_expected_fuzzy(
    c: Circuit,
    params: Labeller | None = None,
    dist: str = "dirac",
    samples: int = 1,
    seed: int = 0,
    batch: Batch | None = None,
    lay: Layerization | None = None,
    scale: float = 1.0,
    leaf_matrix: np.ndarray | None = None,
    upstream: np.ndarray | None = None,
) -> np.ndarray:
    """Monte-Carlo mean of root values with every leaf score drawn from ``dist``.

    ``scale`` is the concentration of the Beta distribution or the standard
    deviation of the logit-normal noise.  With ``upstream`` given, pathwise
    gradients of ``sum(upstream * mean)`` are accumulated into the store.
    """
    if samples < 1:
        raise CircuitError("samples must be >= 1")
    batch = batch or Batch.single()
    lay = lay or layerize(c)
    rng = np.random.default_rng(seed)
    caches = None
    if leaf_matrix is None:
        leaf_matrix, caches = params.plan(c).values(params, batch)
    L, B = leaf_matrix.shape
    xs, dxdq = _sample_leaves(leaf_matrix, dist, samples, rng, scale)
    flat = xs.transpose(1, 0, 2).reshape(L, samples * B)
    vals = eval_layers(c, lay, flat)
    roots = vals[list(c.roots)].reshape(len(c.roots), samples, B)
    mean = roots.mean(axis=1).T
    if upstream is not None:
        if dxdq is None:
            raise CircuitError(f"no pathwise gradient for {dist!r} leaves")
        up = np.asarray(upstream, dtype=float).reshape(B, len(c.roots))
        up_flat = np.tile(up, (samples, 1)) / samples
        G = _node_grads(c, lay, vals, up_flat)
        gl = G[c.leaf_nodes].reshape(L, samples, B) * dxdq.transpose(1, 0, 2)
        gq = gl.sum(axis=1)
        if caches is not None:
            params.plan(c).backward(params, caches, {int(n): gq[i] for i, n in enumerate(c.leaf_nodes)})
    return mean


# ---------------------------------------------------------------------------
# serialization


def _ref_json(r: LeafRef):
    def term(a):
        if isinstance(a, Variable):
            return {"v": a.name}
        return a

    return [r.predicate, [term(a) for a in r.args], r.truth, r.structure]


def _ref_from(j) -> LeafRef:
    pred, args, truth, s = j
    return LeafRef(pred, tuple(Variable(a["v"]) if isinstance(a, dict) else a for a in args), truth, s)


_ARRAYS = (("kind", np.int8), ("struct", np.int16), ("op", np.int16), ("child_ptr", np.int64), ("child_idx", np.int64))


def serialize(c: Circuit) -> bytes:
    meta = {
        "structures": list(c.structures),
        "op_names": list(c.op_names),
        "leaves": [[int(n), _ref_json(r)] for n, r in sorted(c.leaves.items())],
        "consts": [[int(n), v] for n, v in sorted(c.consts.items())],
        "roots": list(c.roots),
        "root_names": list(c.root_names),
        "metadata": dict(c.metadata),
        "arrays": [[name, int(getattr(c, name).shape[0])] for name, _ in _ARRAYS],
    }
    js = json.dumps(meta, sort_keys=True).encode()
    header = f"{FORMAT_VERSION} {len(c)} {len(js)}\n".encode()
    body = b"".join(np.ascontiguousarray(getattr(c, name), dtype=dt).tobytes() for name, dt in _ARRAYS)
    return header + js + body


def deserialize(data: bytes) -> Circuit:
    nl = data.find(b"\n")
    if nl < 0:
        raise CircuitError("corrupt index: missing header")
    parts = data[:nl].decode(errors="replace").split()
    if not parts:
        raise CircuitError("corrupt index: empty header")
    if parts[0] != FORMAT_VERSION:
        raise CircuitError(f"version mismatch: expected {FORMAT_VERSION}, found {parts[0]!r}")
    if len(parts) != 3:
        raise CircuitError("corrupt index: malformed header")
    n_nodes, jlen = int(parts[1]), int(parts[2])
    start = nl + 1
    if len(data) < start + jlen:
        raise CircuitError("corrupt index: truncated metadata")
    try:
        meta = json.loads(data[start : start + jlen])
    except ValueError:
        raise CircuitError("corrupt index: unreadable metadata") from None
    pos = start + jlen
    arrays = {}
    for (name, dt), (mname, length) in zip(_ARRAYS, meta["arrays"]):
        nbytes = np.dtype(dt).itemsize * length
        if len(data) < pos + nbytes:
            raise CircuitError("corrupt index: truncated node arrays")
        arrays[name] = np.frombuffer(data[pos : pos + nbytes], dtype=dt).copy()
        pos += nbytes
    if pos != len(data) or arrays["kind"].shape[0] != n_nodes or arrays["child_ptr"].shape[0] != n_nodes + 1:
        raise CircuitError("corrupt index: size mismatch")
    if n_nodes and (arrays["child_ptr"][-1] != arrays["child_idx"].shape[0]):
        raise CircuitError("corrupt index: child pointers out of range")
    c = Circuit(
        kind=arrays["kind"],
        struct=arrays["struct"],
        op=arrays["op"],
        child_ptr=arrays["child_ptr"],
        child_idx=arrays["child_idx"],
        structures=tuple(meta["structures"]),
        op_names=tuple(meta["op_names"]),
        leaves={int(n): _ref_from(r) for n, r in meta["leaves"]},
        consts={int(n): v for n, v in meta["consts"]},
        roots=tuple(meta["roots"]),
        root_names=tuple(meta["root_names"]),
        metadata=meta["metadata"],
    )
    try:
        validate(c)
    except (CircuitError, IndexError):
        raise CircuitError("corrupt index: child order violated") from None
    return c
