"""Acceptance suite: one test per criterion, each reporting a pass/fail line.

Run alone with ``pytest tests/test_acceptance.py -s`` or ``python3 tests/test_acceptance.py``.
"""
from __future__ import annotations

import sys
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE
from deeplog.bench import bench
from deeplog.circuit import Batch, Labeller, eval_dual_jacobian, eval_forward, layerize, leaf_gradients
from deeplog.compiler import check_d_dnnf, model_count, resolve_aggregations, shannon_compile
from deeplog.frontend import count_proofs, ground_program, parse_program, prove_dag
from deeplog.oracle import brute_force_wmc, enumerate_models, evaluate, wmc_formula
from deeplog.tasks import addition_circuit, make_addition_data, run_task, sum_distribution

from test_circuit import STRUCTS, _random_circuit
from test_compiler import SUDOKU_ROW, _random_logic, _random_model
from test_frontend import SINGLE


def report(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE.append(line)
    print(line, file=sys.__stdout__, flush=True)
    assert ok, line


def test_criterion_1_alarm_golden_value(alarm_model):
    t0 = time.perf_counter()
    f = alarm_model.formulas["alarm_query"].body
    sigma = {"V": "t1", "S": "t2"}
    lab = Labeller(alarm_model)
    oracle = float(evaluate(alarm_model, f, sigma))
    raw = resolve_aggregations(f, alarm_model, optimize=False)
    opt = resolve_aggregations(f, alarm_model)
    v_raw = float(eval_forward(raw, params=lab, batch=Batch([sigma]))[0, 0])
    v_opt = float(eval_forward(opt, params=lab, batch=Batch([sigma]))[0, 0])
    # optimized shape: b:=t + (b:=f * e:=t)
    leaves = sorted(str(opt.leaves[n]) for n in opt.leaf_nodes)
    shape = len(opt) == 5 and opt.op_of(opt.roots[0]) == "+" and leaves == [
        "burglary(V):=f@prob", "burglary(V):=t@prob", "earthquake(S):=t@prob"]
    vals = [oracle, v_raw, v_opt]
    dt = time.perf_counter() - t0
    ok = max(vals) - min(vals) <= 1e-12 and abs(oracle - 0.703) <= 1e-12 and shape and dt < 1.0
    report(1, ok, f"oracle={oracle!r} compiled={v_raw!r} optimized={v_opt!r} shape_ok={shape} ({dt:.3f}s)")


def test_criterion_2_oracle_equivalence():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst, trials = 0.0, 500
    for _ in range(trials):
        n = int(rng.integers(1, 13))
        m, atoms = _random_model(n, rng)
        logic = _random_logic(atoms, rng, int(rng.integers(1, 2 * n + 2)))
        c = resolve_aggregations(wmc_formula(logic, atoms, m), m)
        got = float(eval_forward(c, params=Labeller(m))[0, 0])
        worst = max(worst, abs(got - brute_force_wmc(m, logic, atoms=atoms)))
    dt = time.perf_counter() - t0
    report(2, worst <= 1e-9 and dt < 60, f"{trials} formulas, max |circuit - brute force| = {worst:.2e} ({dt:.1f}s)")


def test_criterion_3_ddnnf_structure():
    from deeplog.parser import parse_model
    from deeplog.language import AlgAtom, Atom, Binary, Unary, fold_binary

    rng = np.random.default_rng(33)
    checked, bad = 0, 0
    for _ in range(150):
        n = int(rng.integers(1, 17))
        m, atoms = _random_model(n, rng)
        logic = _random_logic(atoms, rng, int(rng.integers(1, 2 * n + 2)))
        d = shannon_compile(logic, model=m)
        rep = check_d_dnnf(d)
        exact = model_count(d, atoms) == len(enumerate_models(logic, atoms))
        checked += 1
        bad += not (rep.ok and exact)
    # a categorical instance: one sudoku row
    m = parse_model(SUDOKU_ROW)
    cells = ["c1", "c2", "c3", "c4"]
    parts = [Unary("not", Binary("and", AlgAtom(Atom("digit", (cells[i], v)), "bool"),
                                 AlgAtom(Atom("digit", (cells[j], v)), "bool"), "bool"), "bool")
             for i in range(4) for j in range(i + 1, 4) for v in range(1, 5)]
    d = shannon_compile(fold_binary("and", parts, "bool"), model=m)
    checked += 1
    bad += not (check_d_dnnf(d).ok and model_count(d) == 24)
    report(3, bad == 0, f"{checked} compiled instances, {bad} structural or count failures")


def _fd_ok(c, x, lay, h=1e-6):
    J = None
    worst = 0.0
    for r in range(len(c.roots)):
        up = np.zeros((1, len(c.roots)))
        up[0, r] = 1.0
        g = leaf_gradients(c, lay, x[:, None], up)[:, 0]
        J = eval_dual_jacobian(c, x) if J is None else J
        dual = float(np.max(np.abs(g - J[r]) / np.maximum(1.0, np.abs(J[r]))))
        for i in range(len(x)):
            e = np.zeros_like(x)
            e[i] = h
            fp = leaf_values(c, lay, x + e)[r]
            fm = leaf_values(c, lay, x - e)[r]
            fd = (fp - fm) / (2 * h)
            worst = max(worst, abs(fd - g[i]) / max(abs(fd), abs(g[i]), 1e-4))
        yield dual, worst


def leaf_values(c, lay, x):
    from deeplog.circuit import eval_layers

    return eval_layers(c, lay, x[:, None])[list(c.roots), 0]


def test_criterion_4_gradients():
    t0 = time.perf_counter()
    details, ok = [], True
    for s in sorted(STRUCTS):
        rng = np.random.default_rng(len(s))
        dual_w, fd_w = 0.0, 0.0
        for _ in range(100):
            c = _random_circuit(rng, s)
            x = rng.uniform(0.05, 0.95, len(c.leaf_nodes))
            for d, f in _fd_ok(c, x, layerize(c)):
                dual_w, fd_w = max(dual_w, d), max(fd_w, f)
        ok &= dual_w <= 1e-10 and fd_w <= 1e-4
        details.append(f"{s}: dual {dual_w:.1e} fd {fd_w:.1e}")
    dt = time.perf_counter() - t0
    report(4, ok and dt < 120, "; ".join(details) + f" ({dt:.1f}s)")


def test_criterion_5_encoding_counts():
    from deeplog.tasks import _addition_roots

    D = list(range(10))
    p = parse_program(SINGLE, categories={"digit": D})
    g = ground_program(p, {"digit": [["i1", "i2"], D], "sums": [D, D, list(range(19))],
                           "addition": [["i1"], ["i2"], list(range(19))]})
    r = prove_dag(p, "addition(i1,i2,4)")
    proofs = count_proofs(r.manager, r.roots[0])
    original = _addition_roots(2, "original")[3]
    carry = _addition_roots(2, "carry")[3]
    got = (g.per_clause[-1], proofs, carry, original)
    report(5, got == (1900, 5, 22, 199), f"instantiations={got[0]} proofs={got[1]} carry={got[2]} original={got[3]}")


def _shared_distributions(n, seed=0, rows=8):
    a = addition_circuit(n, "original")
    b = addition_circuit(n, "carry")
    lab = Labeller(a.model, seed=seed, init_scale=1.0)
    lab_b = Labeller(b.model, store=lab.store)
    data = make_addition_data(n, rows, seed=seed)
    return sum_distribution(a, lab, data), sum_distribution(b, lab_b, data)


def test_criterion_6_encodings_agree():
    diffs = []
    for n in (1, 2, 3):
        p, q = _shared_distributions(n, seed=n, rows=4 if n == 3 else 8)
        diffs.append(float(np.max(np.abs(p - q))))
    report(6, max(diffs) <= 1e-9, "max |original - carry| for n=1,2,3: " + ", ".join(f"{d:.1e}" for d in diffs))


@pytest.mark.slow
def test_criterion_7_desk_scale_learning():
    lines, ok = [], True
    for task, sems, metric, bound in [("mnist-add", ("prob", "fuzzy:product"), "digit_accuracy", 0.95),
                                      ("sudoku4", ("prob", "fuzzy:product"), "ap", 0.95)]:
        for sem in sems:
            for seed in range(3):
                t0 = time.perf_counter()
                row = run_task(task, sem, seed=seed, time_budget=280)["row"]
                dt = time.perf_counter() - t0
                good = row[metric] >= bound and dt < 300
                ok &= good
                lines.append(f"{task}/{sem}/s{seed} {metric}={row[metric]:.3f} {dt:.0f}s")
    for seed in range(3):
        row = run_task("mnist-add", "fuzzy:lukasiewicz", seed=seed, time_budget=280)["row"]
        ok &= row["digit_accuracy"] <= 0.30
        lines.append(f"mnist-add/fuzzy:lukasiewicz/s{seed} digit_accuracy={row['digit_accuracy']:.3f}")
    report(7, ok, "; ".join(lines))


@pytest.mark.slow
def test_criterion_8_layered_speedup():
    c = addition_circuit(3, "carry").circuit
    rep = bench(c, [128], repetitions=10)
    s = rep.speedup(128)
    naive, lay = rep.row("naive", 128), rep.row("layered", 128)
    report(8, s >= 5.0, f"{len(c)}-node circuit, batch 128, 10 reps: naive {naive.per_query:.2e}s/query, "
                        f"layered {lay.per_query:.2e}s/query, speedup {s:.0f}x")


def test_criterion_9_impossible_sums():
    worst, norm = 0.0, 0.0
    draws = 0
    for enc in ("original", "carry"):
        tc = addition_circuit(1, enc)
        lab = Labeller(tc.model, seed=0)
        data = make_addition_data(1, 4, seed=9)
        rng = np.random.default_rng(99)
        for _ in range(500):
            lab.store.set_flat(rng.normal(0, 5, lab.store.size))
            p = sum_distribution(tc, lab, data)
            worst = max(worst, float(np.max(np.abs(p[:, 19]))))
            norm = max(norm, float(np.max(np.abs(p.sum(axis=1) - 1))))
            draws += 1
    report(9, worst <= 1e-9 and norm <= 1e-9, f"{draws} parameter draws: max p(sum=19)={worst:.1e}, max |sum p - 1|={norm:.1e}")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
