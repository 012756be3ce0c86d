"""Bundled tasks: alarm, multi-digit addition (two encodings) and 4x4 Sudoku.

Images are replaced by synthetic payloads: every class gets a one-hot
prototype and each sample adds Gaussian noise, which keeps the weak
supervision structure intact without an image stack.
"""
from __future__ import annotations

import itertools
import time
from dataclasses import dataclass, field
from functools import lru_cache
from importlib.resources import files
from typing import Any, Callable

import numpy as np

from .circuit import Circuit, CircuitBuilder, Labeller, LeafRef
from .compiler import NnfManager, compile_roots, nnf_fuzzy_circuit
from .frontend import Program, Prover, build_model, complete_groups, parse_program, parse_term
from .language import Atom, LabelEntry, LabellingSpec, Model, PredicateSignature, Variable
from .language import AlgAtom, Binary, Unary
from .learning import (
    ArchitectureObjective,
    Dataset,
    Example,
    LossObjective,
    TrainConfig,
    evaluate_metrics,
    train,
)

__all__ = [
    "TASKS",
    "SEMANTICS",
    "TaskError",
    "TaskCircuit",
    "program_text",
    "load_program",
    "prototypes",
    "make_addition_data",
    "addition_circuit",
    "sum_distribution",
    "digit_accuracy",
    "sudoku_valid",
    "valid_sudoku4",
    "make_sudoku_data",
    "sudoku_circuit",
    "make_alarm_data",
    "alarm_circuit",
    "run_task",
]

TASKS = ("alarm", "mnist-add", "sudoku4")
SEMANTICS = ("prob", "fuzzy:product", "fuzzy:godel", "fuzzy:lukasiewicz",
             "probfuzzy:product", "probfuzzy:godel", "probfuzzy:lukasiewicz")
DIGITS = tuple(range(10))


class TaskError(ValueError):
    pass


def program_text(name: str) -> str:
    return files("deeplog").joinpath("data", name).read_text()


def load_program(encoding: str) -> Program:
    if encoding not in ("original", "carry"):
        raise TaskError(f"unknown addition encoding {encoding!r}; expected original or carry")
    return parse_program(program_text(f"mnist_{encoding}.pl"), categories={"classify": list(DIGITS)})


def prototypes(n_classes: int, dim: int = 10) -> np.ndarray:
    if n_classes > dim:
        raise TaskError("payload dimension must cover every class")
    return np.eye(dim)[:n_classes]


def _sample(rng, proto: np.ndarray, k: int, noise: float) -> np.ndarray:
    return proto[k] + rng.normal(0.0, noise, size=proto.shape[1])


def _split_of(i: int, count: int, fractions=(0.8, 0.1)) -> str:
    if i < int(fractions[0] * count):
        return "train"
    if i < int((fractions[0] + fractions[1]) * count):
        return "validation"
    return "test"


def _structure_of(semantics: str) -> str:
    if semantics not in SEMANTICS:
        raise TaskError(f"unknown semantics {semantics!r}; expected one of {SEMANTICS}")
    return semantics.replace("probfuzzy:", "fuzzy:")


@dataclass
class TaskCircuit:
    """A circuit together with the model whose labels feed its leaves."""

    model: Model
    circuit: Circuit
    variables: dict[str, Variable] = field(default_factory=dict)
    info: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# addition


def _place(n: int) -> tuple[list[str], list[str]]:
    return [f"a{i}" for i in range(n)], [f"b{i}" for i in range(n)]


def make_addition_data(n: int, count: int, seed: int = 0, encoding: str = "original",
                       noise: float = 0.1, dim: int = 10, digits: list | None = None) -> Dataset:
    """Pairs of ``n``-digit numbers as payload sequences, labelled with their sum.

    Digit values stay in ``info`` for diagnostics; training only sees sums.
    ``digits`` fixes the numbers as ``[(a_digits, b_digits), ...]``, most
    significant digit first.
    """
    if n < 1:
        raise TaskError("numbers need at least one digit")
    rng = np.random.default_rng(seed)
    proto = prototypes(10, dim)
    A, B = _place(n)
    ds = Dataset([], {})
    rows = digits if digits is not None else [
        (list(rng.integers(0, 10, n)), list(rng.integers(0, 10, n))) for _ in range(count)
    ]
    for i, (da, db) in enumerate(rows):
        assign = {}
        for pos, (name, d) in enumerate(list(zip(A, da)) + list(zip(B, db))):
            c = f"x{i}_{name}"
            ds.payloads[c] = _sample(rng, proto, int(d), noise)
            assign[name.upper()] = c
        na = int("".join(map(str, da)))
        nb = int("".join(map(str, db)))
        ds.examples.append(Example(assign, na + nb, split=_split_of(i, len(rows)),
                                   info={"a": [int(x) for x in da], "b": [int(x) for x in db], "encoding": encoding}))
    return ds


def _addition_roots(n: int, encoding: str):
    """NNF roots indexed by sum, the manager, the program and the number of ground answers proved."""
    prog = load_program(encoding)
    pv = Prover(prog)
    A, B = _place(n)
    la, lb = ",".join(A), ",".join(B)
    mgr = pv.manager
    size = 2 * 10**n
    roots = [1] * size  # FALSE
    if encoding == "original":
        answers = pv.answers(parse_term(f"addition([{la}],[{lb}],Z)"))
        for ans, r in answers:
            roots[int(ans.args[2])] = r
        return prog, mgr, roots, len(answers)
    carry = pv.answers(parse_term(f"carry([{la}],[{lb}],C)"))
    digs = [pv.answers(parse_term(f"addition([{','.join(A[k:])}],[{','.join(B[k:])}],D)")) for k in range(n)]
    for combo in itertools.product(carry, *digs):
        s = int(combo[0][0].args[2]) * 10**n
        s += sum(int(x[0].args[2]) * 10 ** (n - 1 - k) for k, x in enumerate(combo[1:]))
        roots[s] = mgr.and_([x[1] for x in combo])
    return prog, mgr, roots, len(carry) + sum(len(d) for d in digs)


def addition_circuit(n: int = 1, encoding: str = "original", semantics: str = "prob", hidden: int = 0,
                     dim: int = 10, method: str | None = None, lift: bool = True) -> TaskCircuit:
    """Circuit with one root per sum ``0 .. 2*10**n - 1``; impossible sums are constant 0.

    Leaves read ``classify(X, d)`` for lifted image variables ``A0..``, ``B0..``
    so one circuit serves a whole batch.
    """
    structure = _structure_of(semantics)
    t0 = time.perf_counter()
    prog, mgr, roots, n_answers = _addition_roots(n, encoding)
    A, B = _place(n)
    atoms = [mgr.atoms[i] for i in sorted(set().union(*(mgr.atoms_in(r) for r in roots)))]
    full = complete_groups(mgr.model, atoms)
    placeholders = {c: np.zeros(dim) for c in A + B}
    model = build_model(prog, full, "perceptual", placeholders, hidden, structure=structure)
    full.sort(key=model.herbrand_key)
    rename = {c: Variable(c.upper()) for c in A + B} if lift else {}
    names = [f"sum_{s}" for s in range(len(roots))]
    if structure == "prob":
        if method is None:
            method = "direct" if encoding == "original" else "shannon"
        order = None
        if method == "shannon":
            # least significant position first follows the carry chain
            order = [a for k in reversed(range(n)) for a in full if a.args[0] in (A[k], B[k])]
        c = compile_roots(mgr, roots, full, model, method=method, names=names, order=order, rename=rename or None)
    else:
        c = nnf_fuzzy_circuit(mgr, roots, structure, names, rename)
    info = {"ground_atoms": n_answers, "neural_atoms": len(full), "compile_seconds": time.perf_counter() - t0, "encoding": encoding, "n": n}
    return TaskCircuit(model, c, {v.name: v for v in rename.values()}, info)


def sum_distribution(tc: TaskCircuit, labeller: Labeller, dataset: Dataset | None = None) -> np.ndarray:
    """Distribution over sums, one row per example (or one row for an unlifted circuit)."""
    from .circuit import eval_forward

    batch = dataset.batch() if dataset is not None else None
    return eval_forward(tc.circuit, None, labeller, batch)


def digit_accuracy(labeller: Labeller, dataset: Dataset, predicate: str = "classify") -> float:
    """Share of individual digit payloads whose argmax class is the true digit."""
    b = next(b for (p, _), b in labeller.bindings.items() if p == predicate and b.learnable)
    consts, truth = [], []
    for e in dataset.examples:
        n = len(e.info["a"])
        A, B = _place(n)
        for name, d in zip(A + B, e.info["a"] + e.info["b"]):
            consts.append(e.assignment[name.upper()])
            truth.append(d)
    p, _ = b.forward(labeller.store, [(c,) for c in consts], lambda c: dataset.payloads[c])
    pred = np.array([b.classes[k] for k in np.argmax(p, axis=1)])
    return float(np.mean(pred == np.array(truth)))


# ---------------------------------------------------------------------------
# sudoku


def _units(n: int = 4) -> list[list[int]]:
    r = int(round(n**0.5))
    rows = [[i * n + j for j in range(n)] for i in range(n)]
    cols = [[i * n + j for i in range(n)] for j in range(n)]
    boxes = [[(bi * r + i) * n + bj * r + j for i in range(r) for j in range(r)] for bi in range(r) for bj in range(r)]
    return rows + cols + boxes


def _pairs(n: int = 4) -> list[tuple[int, int]]:
    out = set()
    for u in _units(n):
        out.update(itertools.combinations(sorted(u), 2))
    return sorted(out)


def sudoku_valid(grid) -> bool:
    """Direct checker: every row, column and box holds distinct digits."""
    g = list(np.asarray(grid).ravel())
    n = int(round(len(g) ** 0.5))
    return all(len({g[i] for i in u}) == n for u in _units(n))


@lru_cache(maxsize=None)
def valid_sudoku4() -> tuple[tuple[int, ...], ...]:
    """All valid 4x4 grids with digits 1..4, by backtracking."""
    pairs = _pairs(4)
    nbr = {i: [j for a, b in pairs for i2, j in ((a, b), (b, a)) if i2 == i] for i in range(16)}
    out = []
    g = [0] * 16

    def go(i):
        if i == 16:
            out.append(tuple(g))
            return
        for d in range(1, 5):
            if all(g[j] != d for j in nbr[i] if j < i):
                g[i] = d
                go(i + 1)
        g[i] = 0

    go(0)
    return tuple(out)


def make_sudoku_data(n: int = 4, count: int = 400, seed: int = 0, noise: float = 0.1, dim: int = 10) -> Dataset:
    """Balanced valid/invalid boards; invalid ones differ from a valid board in one cell."""
    if n != 4:
        raise TaskError("only 4x4 boards are bundled")
    rng = np.random.default_rng(seed)
    grids = valid_sudoku4()
    proto = prototypes(5, dim)
    ds = Dataset([], {})
    for i in range(count):
        g = list(grids[rng.integers(len(grids))])
        if i % 2 == 1:
            cell = int(rng.integers(16))
            g[cell] = int(rng.choice([d for d in range(1, 5) if d != g[cell]]))
        y = int(sudoku_valid(g))
        assign = {}
        for k, d in enumerate(g):
            c = f"s{i}_c{k}"
            ds.payloads[c] = _sample(rng, proto, d, noise)
            assign[f"C{k}"] = c
        ds.examples.append(Example(assign, y, split=_split_of(i, count), info={"grid": g}))
    return ds


def _sudoku_model(structure: str, head: bool, dim: int = 10, hidden: int = 0) -> Model:
    cells = tuple(f"c{k}" for k in range(16))
    labels = LabellingSpec()
    labels.add(LabelEntry("digit", structure, "perceptual", 1, {}, dim, hidden))
    preds = {"digit": PredicateSignature("digit", ("cell", "value"))}
    if head:
        labels.add(LabelEntry("valid", "prob", "perceptual", None, {}, 16 * dim, hidden))
        preds["valid"] = PredicateSignature("valid", ("cell",) * 16)
    st = (structure, "bool") if structure == "prob" else (structure, "prob", "bool")
    return Model(st, {"cell": cells, "value": (1, 2, 3, 4)}, {}, preds, "bool", labels, {})


def _rules(mgr: NnfManager) -> int:
    parts = []
    for i, j in _pairs(4):
        for d in range(1, 5):
            parts.append(mgr.or_([mgr.lit(Atom("digit", (f"c{i}", d)), False),
                                  mgr.lit(Atom("digit", (f"c{j}", d)), False)]))
    return mgr.and_(parts)


def sudoku_circuit(semantics: str = "prob", mode: str = "architecture", dim: int = 10, hidden: int = 0) -> TaskCircuit:
    """Validity circuit over lifted cells ``C0..C15``.

    In loss mode the circuit is the constraint ``valid <-> rules`` and the
    model carries a direct ``valid`` head over all sixteen payloads.
    """
    structure = _structure_of(semantics)
    model = _sudoku_model(structure, mode == "loss", dim, hidden)
    rename = {f"c{k}": Variable(f"C{k}") for k in range(16)}
    cells = [f"c{k}" for k in range(16)]
    digits = [Atom("digit", (c, d)) for c in cells for d in range(1, 5)]
    t0 = time.perf_counter()
    mgr = NnfManager(model)
    info: dict[str, Any] = {}
    if mode == "architecture":
        root = _rules(mgr)
        if structure == "prob":
            order = digits
            c = compile_roots(mgr, [root], digits, model, method="shannon", names=["valid"], order=order,
                              rename=rename)
        else:
            c = nnf_fuzzy_circuit(mgr, [root], structure, ["valid"], rename)
    elif mode == "loss":
        if structure != "prob":
            raise TaskError("loss mode is bundled for probabilistic semantics only")
        rules = mgr.to_formula(_rules(mgr))
        v = AlgAtom(Atom("valid", tuple(cells)), "bool")
        iff = Binary("or", Binary("and", v, rules, "bool"),
                     Binary("and", Unary("not", v, "bool"), Unary("not", rules, "bool"), "bool"), "bool")
        root = mgr.from_formula(iff)
        atoms = digits + [v.atom]
        c = compile_roots(mgr, [root], atoms, model, method="shannon", names=["constraint"], order=digits + [v.atom],
                          rename=rename)
        b = CircuitBuilder()
        head = b.leaf(LeafRef("valid", tuple(Variable(f"C{k}") for k in range(16)), True, "prob"))
        info["head"] = b.build([head], ["valid"])
    else:
        raise TaskError(f"unknown mode {mode!r}")
    info["compile_seconds"] = time.perf_counter() - t0
    return TaskCircuit(model, c, {v.name: v for v in rename.values()}, info)


# ---------------------------------------------------------------------------
# alarm


def make_alarm_data(count: int = 200, seed: int = 0, noise: float = 0.1, dim: int = 4,
                    p_burglary: float = 0.5, p_earthquake: float = 0.3) -> Dataset:
    rng = np.random.default_rng(seed)
    proto = prototypes(2, dim)
    ds = Dataset([], {})
    for i in range(count):
        b = bool(rng.random() < p_burglary)
        e = bool(rng.random() < p_earthquake)
        v, s = f"v{i}", f"q{i}"
        ds.payloads[v] = _sample(rng, proto, int(b), noise)
        ds.payloads[s] = _sample(rng, proto, int(e), noise)
        ds.examples.append(Example({"V": v, "S": s}, float(b or e), split=_split_of(i, count),
                                   info={"burglary": b, "earthquake": e}))
    return ds


def alarm_circuit(dim: int = 4, hidden: int = 0) -> TaskCircuit:
    """``alarm(V, S)`` compiled from the bundled program with perceptual classifiers."""
    prog = parse_program(program_text("alarm.pl"))
    pv = Prover(prog)
    ans = pv.answers(parse_term("alarm(v, s)"))
    mgr, root = pv.manager, ans[0][1]
    atoms = [mgr.atoms[i] for i in sorted(mgr.atoms_in(root))]
    model = build_model(prog, atoms, "perceptual", {"v": np.zeros(dim), "s": np.zeros(dim)}, hidden)
    rename = {"v": Variable("V"), "s": Variable("S")}
    c = compile_roots(mgr, [root], atoms, model, method="shannon", names=["alarm"], rename=rename)
    return TaskCircuit(model, c, {"V": Variable("V"), "S": Variable("S")}, {})


# ---------------------------------------------------------------------------
# end to end


DEFAULTS: dict[str, dict] = {
    "alarm": {"count": 200, "lr": 0.05, "epochs": 200, "patience": 20, "batch": 16},
    "mnist-add": {"count": 1000, "lr": 0.05, "epochs": 30, "patience": 5, "batch": 16},
    "sudoku4": {"count": 600, "lr": 0.05, "epochs": 40, "patience": 5, "batch": 16},
}


def _loss_for(semantics: str, task: str) -> str:
    if semantics.startswith(("fuzzy", "probfuzzy")):
        return "mse"
    return "nll" if task == "mnist-add" else "bce"


def run_task(name: str, semantics: str = "prob", mode: str = "architecture", seed: int = 0, n: int = 1,
             encoding: str = "original", count: int | None = None, lr: float | None = None,
             epochs: int | None = None, time_budget: float | None = None, optimizer: str = "adamw",
             hidden: int = 0, samples: int = 8, log: Callable[[dict], None] | None = None) -> dict:
    """Generate data, compile, train, evaluate; returns one results-table row plus artifacts."""
    if name not in TASKS:
        raise TaskError(f"unknown task {name!r}; expected one of {TASKS}")
    structure = _structure_of(semantics)
    if mode not in ("architecture", "loss"):
        raise TaskError(f"unknown mode {mode!r}")
    d = DEFAULTS[name]
    count = count or d["count"]
    t0 = time.perf_counter()
    if name == "mnist-add":
        if mode == "loss":
            raise TaskError("loss mode is bundled for sudoku4 only")
        tc = addition_circuit(n, encoding, semantics, hidden)
        data = make_addition_data(n, count, seed, encoding)
    elif name == "sudoku4":
        tc = sudoku_circuit(semantics, mode, hidden=hidden)
        data = make_sudoku_data(4, count, seed)
    else:
        if structure != "prob" or mode != "architecture":
            raise TaskError("the alarm task is bundled for probabilistic architecture mode only")
        tc = alarm_circuit(hidden=hidden)
        data = make_alarm_data(count, seed)
    compile_s = time.perf_counter() - t0
    lab = Labeller(tc.model, seed=seed)
    loss = _loss_for(semantics, name)
    if mode == "loss":
        obj = LossObjective(tc.info["head"], tc.circuit, lab, data, "bce")
    else:
        obj = ArchitectureObjective(tc.circuit, lab, data, loss,
                                    semantics="probfuzzy" if semantics.startswith("probfuzzy") else "exact",
                                    samples=samples, seed=seed)
    cfg = TrainConfig(mode, loss, optimizer, lr if lr is not None else d["lr"], d["batch"],
                      epochs or d["epochs"], d["patience"], seed, time_budget=time_budget)
    t1 = time.perf_counter()
    res = train(obj, cfg, callback=log)
    train_s = time.perf_counter() - t1
    test = data.split("test")
    row: dict[str, Any] = {"task": name, "semantics": semantics, "mode": mode, "seed": seed,
                           "compile_s": round(compile_s, 4), "train_s": round(train_s, 4),
                           "epochs": len(res.history), "val_loss": res.history[res.best_epoch - 1]["val_loss"]
                           if res.best_epoch else float("nan")}
    if name == "mnist-add":
        row["n"] = n
        row["encoding"] = encoding
        row["ground_atoms"] = tc.info["ground_atoms"]
        row["sum_accuracy"] = evaluate_metrics(obj, test, "accuracy")
        row["digit_accuracy"] = digit_accuracy(lab, test)
    elif name == "sudoku4":
        row["ap"] = evaluate_metrics(obj, test, "ap")
        row["accuracy"] = evaluate_metrics(obj, test, "accuracy")
    else:
        row["accuracy"] = evaluate_metrics(obj, test, "accuracy")
    out = obj.predict(test)
    if out.size and out.shape[1] > 1:
        q = np.clip(out / np.maximum(out.sum(axis=1, keepdims=True), 1e-300), 1e-300, None)
        row["prediction_entropy"] = float(np.mean(-(q * np.log(q)).sum(axis=1)))
    return {"row": row, "result": res, "labeller": lab, "circuit": tc, "objective": obj, "data": data}
