"""Learnable leaf labellings.

A label binding turns ground atoms into label values for one
``(predicate, structure)`` entry of a labelling spec.  Categorical entries
own a logit table, perceptual entries own a small network applied to the
payload vectors of the atom's non-class arguments.  Gradients are written
into a :class:`ParameterStore` by hand-rolled numpy backprop.
"""
from __future__ import annotations

import io
from dataclasses import dataclass
from itertools import product
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from .language import Atom, LabelEntry, Model

__all__ = ["ParameterStore", "LabelBinding", "bind_labels", "label_value", "softmax", "sigmoid"]


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=float)))


class ParameterStore:
    """Named float arrays plus gradient accumulators of the same shapes."""

    def __init__(self):
        self.blocks: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def add(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self.blocks:
            raise KeyError(f"duplicate parameter block {name!r}")
        self.blocks[name] = np.array(value, dtype=float)
        self.grads[name] = np.zeros_like(self.blocks[name])
        return self.blocks[name]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.blocks[name]

    def __contains__(self, name: str) -> bool:
        return name in self.blocks

    def __len__(self) -> int:
        return len(self.blocks)

    def names(self) -> list[str]:
        return list(self.blocks)

    @property
    def size(self) -> int:
        return int(sum(b.size for b in self.blocks.values()))

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def copy(self) -> "ParameterStore":
        out = ParameterStore()
        for k, v in self.blocks.items():
            out.add(k, v.copy())
        return out

    def load_from(self, other: "ParameterStore") -> None:
        for k, v in other.blocks.items():
            self.blocks[k][...] = v

    def flat(self) -> np.ndarray:
        if not self.blocks:
            return np.zeros(0)
        return np.concatenate([b.ravel() for b in self.blocks.values()])

    def flat_grad(self) -> np.ndarray:
        if not self.grads:
            return np.zeros(0)
        return np.concatenate([g.ravel() for g in self.grads.values()])

    def set_flat(self, x: np.ndarray) -> None:
        i = 0
        for b in self.blocks.values():
            b[...] = x[i : i + b.size].reshape(b.shape)
            i += b.size

    def save(self, path) -> None:
        np.savez(path, **self.blocks)

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        np.savez(buf, **self.blocks)
        return buf.getvalue()

    @classmethod
    def load(cls, path) -> "ParameterStore":
        out = cls()
        with np.load(path) as data:
            for k in data.files:
                out.add(k, data[k])
        return out

    def equal(self, other: "ParameterStore") -> bool:
        return self.blocks.keys() == other.blocks.keys() and all(
            np.array_equal(self.blocks[k], other.blocks[k]) for k in self.blocks
        )


PayloadLookup = Callable[[Any], np.ndarray]


@dataclass
class LabelBinding:
    """Runtime view of one labelling entry.

    ``classes`` is the class domain of a grouped entry.  ``prefix_positions``
    are the argument positions that select a distribution (all positions
    except the class position).
    """

    entry: LabelEntry
    classes: tuple | None
    prefix_positions: tuple[int, ...]
    prefix_index: dict[tuple, int] | None = None
    block: str = ""

    @property
    def grouped(self) -> bool:
        return self.classes is not None

    @property
    def learnable(self) -> bool:
        return self.entry.kind in ("categorical", "perceptual")

    @property
    def n_out(self) -> int:
        return len(self.classes) if self.classes is not None else 1

    def class_index(self, atom: Atom) -> int | None:
        if self.classes is None:
            return None
        return self.classes.index(atom.args[self.entry.group])

    def prefix(self, atom: Atom) -> tuple:
        return tuple(atom.args[i] for i in self.prefix_positions)

    # -- distribution over classes (or of truth, when ungrouped)
    def forward(self, store: ParameterStore, prefixes: Sequence[tuple], payloads: PayloadLookup):
        """Probabilities ``(rows, n_out)`` plus a cache for :meth:`backward`."""
        e = self.entry
        if e.kind == "categorical":
            try:
                idx = np.fromiter((self.prefix_index[p] for p in prefixes), dtype=np.int64, count=len(prefixes))
            except KeyError as exc:
                raise KeyError(f"{e.predicate}: no categorical parameters for arguments {exc.args[0]!r}") from None
            z = store[self.block + ":logits"][idx]
            cache = {"idx": idx}
        elif e.kind == "perceptual":
            x = self.features(prefixes, payloads)
            cache = {"x": x}
            if e.hidden:
                h = np.tanh(x @ store[self.block + ":W1"] + store[self.block + ":b1"])
                cache["h"] = h
                z = h @ store[self.block + ":W2"] + store[self.block + ":b2"]
            else:
                z = x @ store[self.block + ":W1"] + store[self.block + ":b1"]
        else:
            raise TypeError(f"label kind {e.kind!r} has no learnable distribution")
        if self.grouped:
            p = softmax(z)
        else:
            p = sigmoid(z).reshape(len(prefixes), 1)
        cache["p"] = p
        return p, cache

    def features(self, prefixes: Sequence[tuple], payloads: PayloadLookup) -> np.ndarray:
        rows = []
        for pre in prefixes:
            parts = [np.asarray(payloads(c), dtype=float).ravel() for c in pre]
            rows.append(np.concatenate(parts) if len(parts) != 1 else parts[0])
        x = np.stack(rows) if rows else np.zeros((0, self.entry.dim or 0))
        if self.entry.dim is not None and x.shape[1] != self.entry.dim:
            raise ValueError(f"{self.entry.predicate}: payload dimension {x.shape[1]} != declared dim {self.entry.dim}")
        return x

    def backward(self, store: ParameterStore, cache: dict, dp: np.ndarray) -> None:
        """Accumulate parameter gradients given ``dL/dp`` of shape ``(rows, n_out)``."""
        p = cache["p"]
        if self.grouped:
            dz = p * (dp - np.sum(dp * p, axis=1, keepdims=True))
        else:
            dz = dp * p * (1.0 - p)
        e = self.entry
        g = store.grads
        if e.kind == "categorical":
            blk = g[self.block + ":logits"]
            np.add.at(blk, cache["idx"], dz if self.grouped else dz[:, 0])
            return
        x = cache["x"]
        if e.hidden:
            h = cache["h"]
            g[self.block + ":W2"] += h.T @ dz
            g[self.block + ":b2"] += dz.sum(axis=0)
            dh = (dz @ store[self.block + ":W2"].T) * (1.0 - h * h)
            g[self.block + ":W1"] += x.T @ dh
            g[self.block + ":b1"] += dh.sum(axis=0)
        else:
            g[self.block + ":W1"] += x.T @ dz
            g[self.block + ":b1"] += dz.sum(axis=0)

    # -- scalar access, used by the oracle
    def value(self, store: ParameterStore | None, atom: Atom, truth, payloads: PayloadLookup):
        e = self.entry
        if e.kind == "identity":
            if truth is None:
                raise KeyError(f"identity label of {atom} needs a truth value")
            return truth
        if e.kind == "table":
            t, f = e.lookup(atom)
            if e.structure != "prob":
                return t  # a score, independent of the interpretation
            if truth is None:
                raise KeyError(f"probabilistic label of {atom} needs a truth value")
            return t if truth else f
        if store is None:
            raise ValueError(f"label of {atom} needs a parameter store")
        p, _ = self.forward(store, [self.prefix(atom)], payloads)
        k = self.class_index(atom)
        q = float(p[0, k if k is not None else 0])
        return output_label(e.structure, self.grouped, q, truth)


def output_label(structure: str, grouped: bool, q, truth):
    """Label value from the entry's probability (or score) ``q``."""
    if structure == "prob":
        if truth is None:
            raise KeyError("probabilistic labels need a truth value")
        if truth:
            return q
        return 1.0 if grouped else 1.0 - q
    return q


def _init_block(rng, shape, scale):
    return rng.normal(0.0, scale, size=shape)


def bind_labels(
    model: Model, store: ParameterStore | None = None, seed: int = 0, init_scale: float = 0.1
) -> dict[tuple[str, str], LabelBinding]:
    """Bindings for every label entry; learnable blocks are created in ``store``."""
    rng = np.random.default_rng(seed)
    out = {}
    for e in model.labels:
        sig = model.predicates[e.predicate]
        classes = None
        if e.group is not None:
            classes = tuple(model.domains[sig.domains[e.group]])
        prefix_pos = tuple(i for i in range(sig.arity) if i != e.group)
        block = f"{e.predicate}@{e.structure}"
        b = LabelBinding(e, classes, prefix_pos, block=block)
        n_out = b.n_out
        if e.kind == "categorical":
            doms = [model.domains[sig.domains[i]] for i in prefix_pos]
            prefixes = list(product(*doms))
            b.prefix_index = {p: i for i, p in enumerate(prefixes)}
            if store is not None and block + ":logits" not in store:
                shape = (len(prefixes), n_out) if classes is not None else (len(prefixes),)
                store.add(block + ":logits", _init_block(rng, shape, init_scale))
        elif e.kind == "perceptual":
            dim = e.dim
            if dim is None:
                dim = _infer_dim(model, sig, prefix_pos)
                b.entry = LabelEntry(
                    e.predicate, e.structure, e.kind, e.group, e.table, dim, e.hidden, e.line
                )
            if store is not None and block + ":W1" not in store:
                if e.hidden:
                    store.add(block + ":W1", _init_block(rng, (dim, e.hidden), 1.0 / np.sqrt(dim)))
                    store.add(block + ":b1", np.zeros(e.hidden))
                    store.add(block + ":W2", _init_block(rng, (e.hidden, n_out), 1.0 / np.sqrt(e.hidden)))
                    store.add(block + ":b2", np.zeros(n_out))
                else:
                    store.add(block + ":W1", _init_block(rng, (dim, n_out), init_scale))
                    store.add(block + ":b1", np.zeros(n_out))
        out[e.key] = b
    return out


def _infer_dim(model: Model, sig, prefix_pos) -> int:
    dim = 0
    for i in prefix_pos:
        dom = model.domains[sig.domains[i]]
        c = next((c for c in dom if c in model.tensors), None)
        if c is None:
            raise ValueError(f"perceptual label for {sig.name} needs payloads for domain {sig.domains[i]!r}")
        dim += int(np.asarray(model.tensors[c]).size)
    return dim


def label_value(
    bindings: Mapping[tuple[str, str], LabelBinding],
    store: ParameterStore | None,
    atom: Atom,
    structure: str,
    truth,
    payloads: PayloadLookup,
):
    b = bindings.get((atom.predicate, structure))
    if b is None:
        raise KeyError(f"labelling lookup miss for {atom} @ {structure}")
    return b.value(store, atom, truth, payloads)
