"""Command line entry point: ``deeplog {compile|eval|train|bench|oracle-check|task}``.

Exit codes: 0 on success, 2 on validation or diagnostic failure, 1 on
internal error.
"""
from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import sys
import traceback
from pathlib import Path
from typing import Sequence

import numpy as np

log = logging.getLogger("deeplog")

EXIT_OK, EXIT_INTERNAL, EXIT_INVALID = 0, 1, 2


class UsageError(ValueError):
    """Bad input: reported with exit code 2."""


# ---------------------------------------------------------------------------
# output


def _emit(rows: list[dict], fmt: str, out=None) -> None:
    out = out or sys.stdout
    if fmt == "json":
        out.write(json.dumps(rows if len(rows) != 1 else rows[0], indent=2, default=_jsonable, ensure_ascii=False) + "\n")
        return
    if not rows:
        return
    keys: list[str] = []
    for r in rows:
        for k in r:
            if k not in keys:
                keys.append(k)
    w = csv.DictWriter(out, fieldnames=keys, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: _jsonable(v) if isinstance(v, (np.generic, np.ndarray)) else v for k, v in r.items()})


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, np.generic):
        return x.item()
    return str(x)


def _out_dir(args) -> Path:
    p = Path(args.out_dir)
    p.mkdir(parents=True, exist_ok=True)
    return p


# ---------------------------------------------------------------------------
# loading


def _categories(items: Sequence[str]) -> dict[str, list]:
    """``pred=0..9`` or ``pred=a,b,c`` into a class list per predicate."""
    out = {}
    for it in items or ():
        if "=" not in it:
            raise UsageError(f"--categories expects pred=classes, got {it!r}")
        pred, spec = it.split("=", 1)
        if ".." in spec:
            lo, hi = spec.split("..", 1)
            out[pred] = list(range(int(lo), int(hi) + 1))
        else:
            out[pred] = [int(x) if x.lstrip("-").isdigit() else x for x in spec.split(",")]
    return out


def _load_model(path: str):
    from .parser import parse_model

    return parse_model(Path(path).read_text())


def _compile_file(args):
    """Circuit, model and a stats row for a ``.dlm`` model or a ``.pl`` program."""
    from .compiler import CompilationStats, compile_formula

    path = Path(_source(args))
    stats = CompilationStats()
    if path.suffix == ".pl":
        if not args.query:
            raise UsageError("compiling a program needs --query")
        from .frontend import compile_answers, parse_program, to_deeplog

        prog = parse_program(path.read_text(), categories=_categories(args.categories))
        for d in prog.diagnostics:
            log.warning("%s", d)
        tr = to_deeplog(prog, args.query, build_formulas=False)
        if args.emit != "circuit":
            return None, tr, _emit_nnf(tr.proofs.manager, tr.proofs.roots, tr.names, args.emit)
        c = compile_answers(tr, method=args.method, optimize=not args.no_optimize, stats=stats)
        row = {"source": str(path), "query": args.query, "answers": len(tr.answers),
               "ground_atoms": len(tr.atoms), **stats.as_dict()}
        return c, tr.model, row
    m = _load_model(str(path))
    names = [args.formula] if args.formula else list(m.formulas)
    if not names:
        raise UsageError(f"{path} declares no formulas")
    from .circuit import CircuitBuilder

    for n in names:
        if n not in m.formulas:
            raise UsageError(f"unknown formula {n!r}; the model declares {sorted(m.formulas)}")
    if args.emit != "circuit":
        from .compiler import NnfManager, split_wmc

        mgr = NnfManager(m)
        roots = [mgr.from_formula(split_wmc(m.formula(n)).logic) for n in names]
        return None, m, _emit_nnf(mgr, roots, names, args.emit)
    b = CircuitBuilder()
    roots = []
    for n in names:
        sub = compile_formula(m.formula(n), m, optimize=not args.no_optimize, name=n)
        mp = b.import_circuit(sub)
        roots.append(mp[sub.roots[0]])
    c = b.build(roots, names, {"source": str(path)})
    row = {"source": str(path), "formulas": len(names), "circuit_nodes": len(c)}
    return c, m, row


def _source(args) -> str:
    src = args.program or args.source
    if not src:
        raise UsageError("compile needs a model or program file")
    if args.program and args.source:
        raise UsageError("give the source either positionally or with --program, not both")
    return src


def _emit_nnf(mgr, roots, names, emit: str) -> list[dict]:
    """Text rows of the logic part, as plain NNF or compiled to smooth d-DNNF."""
    if emit == "ddnnf":
        from .compiler import compile_many

        roots = compile_many(mgr, roots)
    return [{"name": n, emit: mgr.to_str(r)} for n, r in zip(names, roots)]


# ---------------------------------------------------------------------------
# subcommands


def cmd_compile(args) -> int:
    from .circuit import serialize

    c, _, row = _compile_file(args)
    if c is None:
        _emit(row, args.format)
        return EXIT_OK
    out = Path(args.out) if args.out else _out_dir(args) / (Path(_source(args)).stem + ".dlc")
    out.write_bytes(serialize(c))
    row["output"] = str(out)
    if not args.stats:
        row = {k: v for k, v in row.items() if k in ("source", "query", "answers", "formulas", "output")}
        row["circuit_nodes"] = len(c)
    _emit([row], args.format)
    return EXIT_OK


def _read_rows(path: str) -> list[dict]:
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError:
        data = [json.loads(line) for line in text.splitlines() if line.strip()]
    if isinstance(data, dict):
        data = [data]
    return data


def cmd_eval(args) -> int:
    from .circuit import Batch, Labeller, deserialize, eval_forward, eval_layers, layerize

    c = deserialize(Path(args.circuit).read_bytes())
    lay = layerize(c)
    if args.model:
        m = _load_model(args.model)
        store = None
        if args.params:
            from .params import ParameterStore

            store = ParameterStore.load(args.params)
        lab = Labeller(m, store, seed=args.seed)
        rows = _read_rows(args.data) if args.data else [{}]
        outs = []
        for s in range(0, len(rows), args.batch):
            chunk = rows[s : s + args.batch]
            interp = None
            if any("interpretation" in r for r in chunk):
                raise UsageError("interpretations are not supported from the command line")
            batch = Batch([r.get("assignment", r) for r in chunk], None, interp)
            outs.append(eval_forward(c, lay, lab, batch))
        vals = np.concatenate(outs) if outs else np.zeros((0, len(c.roots)))
    else:
        if not args.data:
            raise UsageError("eval without --model needs --data with one column per leaf")
        mat = np.atleast_2d(np.loadtxt(args.data, delimiter=",", ndmin=2))
        if mat.shape[1] != len(c.leaf_nodes):
            raise UsageError(f"data has {mat.shape[1]} columns but the circuit has {len(c.leaf_nodes)} leaves")
        outs = []
        for s in range(0, mat.shape[0], args.batch):
            v = eval_layers(c, lay, mat[s : s + args.batch].T)
            outs.append(v[list(c.roots)].T)
        vals = np.concatenate(outs) if outs else np.zeros((0, len(c.roots)))
    names = list(c.root_names) if c.root_names else [f"root{i}" for i in range(len(c.roots))]
    if args.format == "json":
        _emit([{n: float(v) for n, v in zip(names, row)} for row in vals], "json")
    else:
        for row in vals:
            print(",".join(repr(float(v)) for v in row))
    return EXIT_OK


def cmd_train(args) -> int:
    from .tasks import run_task

    if not args.task:
        raise UsageError("train needs --task (one of the bundled tasks)")
    res = run_task(args.task, args.semantics, _mode(args.mode), args.seed, n=args.n, encoding=args.encoding,
                   count=args.count, lr=args.lr, epochs=args.epochs, time_budget=args.time_budget)
    odir = _out_dir(args)
    out = Path(args.out) if args.out else odir / f"{args.task}-{args.seed}.dlp"
    with open(out, "wb") as fh:
        fh.write(res["labeller"].store.to_bytes())
    (odir / f"{args.task}-{args.seed}-history.csv").write_text(res["result"].history_csv())
    row = dict(res["row"], params=str(out))
    _emit([row], args.format)
    return EXIT_OK


def _mode(m: str) -> str:
    return {"arch": "architecture", "architecture": "architecture", "loss": "loss"}[m]


def cmd_task(args) -> int:
    from .tasks import run_task

    res = run_task(args.name, args.semantics, _mode(args.mode), args.seed, n=args.n, encoding=args.encoding,
                   count=args.count, lr=args.lr, epochs=args.epochs, time_budget=args.time_budget)
    row = res["row"]
    odir = _out_dir(args)
    (odir / f"{args.name}-{args.seed}-history.csv").write_text(res["result"].history_csv())
    _emit([row], args.format)
    return EXIT_OK


def cmd_bench(args) -> int:
    from .bench import bench
    from .circuit import deserialize

    if args.circuit:
        c = deserialize(Path(args.circuit).read_bytes())
    else:
        from .tasks import addition_circuit

        c = addition_circuit(args.n, args.encoding).circuit
    sizes = [int(x) for x in str(args.batch).split(",") if x.strip()]
    rep = bench(c, sizes, args.repetitions, seed=args.seed)
    rows = rep.as_dicts()
    for b in sizes:
        rows.append({"evaluator": "speedup", "batch": b, "per_query_s": rep.speedup(b)})
    _emit(rows, args.format)
    return EXIT_OK


def _assignments(items: Sequence[str]) -> dict[str, str]:
    out = {}
    for it in items or ():
        if "=" not in it:
            raise UsageError(f"--assign expects V=c, got {it!r}")
        k, v = it.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def cmd_oracle_check(args) -> int:
    """Oracle value of one formula, or compiled circuits against the oracle.

    With ``--assign`` the reference value and its enumeration counts are
    printed; otherwise every assignment of each formula's parameters is
    checked against the compiled circuit.
    """
    from .circuit import Batch, Labeller, eval_forward
    from .compiler import compile_formula
    from .oracle import evaluate, evaluate_counted
    from .parser import parse_formula

    m = _load_model(args.model)
    name = args.formula_arg or args.formula
    if args.formula_arg and args.formula:
        raise UsageError("give the formula either positionally or with --formula, not both")
    lab = Labeller(m, seed=args.seed)
    if args.assign is not None:
        if not name:
            raise UsageError("--assign needs a formula")
        body = m.formulas[name].body if name in m.formulas else parse_formula(name, m)
        res = evaluate_counted(m, body, _assignments(args.assign), store=lab.store)
        _emit([{"formula": name, "value": float(res.value),
                "enumerated_interpretations": res.enumerated_interpretations,
                "enumerated_assignments": res.enumerated_assignments}], args.format)
        return EXIT_OK
    names = [name] if name else list(m.formulas)
    rows, bad = [], 0
    for n in names:
        if n not in m.formulas:
            raise UsageError(f"unknown formula {n!r}; the model declares {sorted(m.formulas)}")
        fd = m.formulas[n]
        c = compile_formula(fd.body, m, name=n)
        doms = [m.domains[d] for _, d in fd.parameters]
        worst = 0.0
        for combo in itertools.product(*doms):
            sigma = {v: x for (v, _), x in zip(fd.parameters, combo)}
            ref = float(evaluate(m, fd.body, sigma, store=lab.store))
            got = float(eval_forward(c, None, lab, Batch([sigma]))[0, 0])
            worst = max(worst, abs(ref - got))
        ok = worst <= args.tol
        bad += not ok
        rows.append({"formula": n, "max_abs_error": worst, "ok": ok})
    _emit(rows, args.format)
    return EXIT_OK if bad == 0 else EXIT_INVALID


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    from .tasks import SEMANTICS, TASKS

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out-dir", default=".")
    common.add_argument("--format", choices=("csv", "json"), default="csv")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="deeplog", description="Compile, evaluate and train algebraic circuits.")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("compile", parents=[common], help="compile a model (.dlm) or program (.pl) to a circuit")
    c.add_argument("source", nargs="?")
    c.add_argument("--program", help="logic program file (same as the positional source)")
    c.add_argument("--formula")
    c.add_argument("--emit", choices=("circuit", "nnf", "ddnnf"), default="circuit")
    c.add_argument("--stats", action="store_true", help="include compilation statistics")
    c.add_argument("--query")
    c.add_argument("--categories", nargs="*", default=[], help="pred=0..9 makes pred categorical")
    c.add_argument("--method", choices=("auto", "direct", "shannon"), default="auto")
    c.add_argument("--no-optimize", action="store_true")
    c.add_argument("--out")
    c.set_defaults(func=cmd_compile)

    e = sub.add_parser("eval", parents=[common], help="evaluate a circuit file, one output line per row")
    e.add_argument("circuit")
    e.add_argument("--data")
    e.add_argument("--model")
    e.add_argument("--params")
    e.add_argument("--batch", type=int, default=128)
    e.set_defaults(func=cmd_eval)

    def task_opts(sp):
        sp.add_argument("--mode", choices=("arch", "architecture", "loss"), default="arch")
        sp.add_argument("--semantics", choices=SEMANTICS, default="prob")
        sp.add_argument("--n", type=int, default=1)
        sp.add_argument("--encoding", choices=("original", "carry"), default="original")
        sp.add_argument("--count", type=int)
        sp.add_argument("--lr", type=float)
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--time-budget", type=float)

    t = sub.add_parser("train", parents=[common], help="train a bundled task and save its parameters")
    t.add_argument("model", nargs="?", help="unused placeholder for a model file; tasks bring their own")
    t.add_argument("--task", choices=TASKS)
    t.add_argument("--out")
    task_opts(t)
    t.set_defaults(func=cmd_train)

    k = sub.add_parser("task", parents=[common], help="run a bundled task end to end and print its results row")
    k.add_argument("name", choices=TASKS)
    task_opts(k)
    k.set_defaults(func=cmd_task)

    b = sub.add_parser("bench", parents=[common], help="layered vs naive evaluation timings")
    b.add_argument("circuit", nargs="?", help="circuit file; default: the n-digit addition circuit")
    b.add_argument("--batch", default="128", help="comma separated batch sizes")
    b.add_argument("--repetitions", type=int, default=10)
    b.add_argument("--n", type=int, default=3)
    b.add_argument("--encoding", choices=("original", "carry"), default="carry")
    b.set_defaults(func=cmd_bench)

    o = sub.add_parser("oracle-check", parents=[common], help="compare compiled formulas against the oracle")
    o.add_argument("model")
    o.add_argument("formula_arg", nargs="?", metavar="formula", help="formula name or formula text")
    o.add_argument("--formula")
    o.add_argument("--assign", nargs="*", metavar="V=c", help="evaluate under this assignment")
    o.add_argument("--tol", type=float, default=1e-9)
    o.set_defaults(func=cmd_oracle_check)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INVALID if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    from .bench import BenchError
    from .circuit import CircuitError
    from .compiler import CompileError
    from .frontend import ProgramError, ProofError
    from .language import ModelError
    from .learning import TrainingDiverged
    from .tasks import TaskError

    invalid = (UsageError, CircuitError, CompileError, ProgramError, ProofError, ModelError, TaskError,
               BenchError, TrainingDiverged, FileNotFoundError, json.JSONDecodeError)
    try:
        return args.func(args)
    except invalid as exc:
        print(f"deeplog: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception:  # pragma: no cover - last resort
        traceback.print_exc()
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
