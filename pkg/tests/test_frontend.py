from __future__ import annotations

import itertools
import math

import pytest

from deeplog.frontend import (
    ProgramError,
    ProofError,
    count_proofs,
    ground_program,
    grounded_formula,
    parse_program,
    prove,
    prove_dag,
    to_deeplog,
)
from deeplog.language import Atom, Const, atoms_of, exactly_one, fold_binary
from deeplog.params import ParameterStore, bind_labels
from deeplog.oracle import brute_force_wmc, enumerate_models, evaluate
from deeplog.tasks import _addition_roots, load_program, program_text

D = list(range(10))
SINGLE = """classifier(I,N) :: digit(I,N).
sums(D1,D2,S) :- between(0,9,D1), between(0,9,D2), is(S, D1+D2).
addition(i1,i2,S) :- digit(i1,D1), digit(i2,D2), sums(D1,D2,S).
"""
ALARM = """0.7::burglary(t1).
0.01::earthquake(t2).
alarm(V, S) :- burglary(V), earthquake(S).
alarm(V, S) :- burglary(V).
alarm(V, S) :- earthquake(S).
"""


def indicators(p):
    return {(c.head.name, len(c.head.args)) for c in p.clauses} | {a.head.indicator for a in p.annotations}


def test_listing_programs_parse():
    p1 = load_program("original")
    assert indicators(p1) >= {("classify", 2), ("digit", 2), ("number", 2), ("addition", 3)}
    p2 = load_program("carry")
    assert indicators(p2) >= {("addMod10", 4), ("carry", 3), ("addDiv10", 4)}


def test_annotated_fact():
    p = parse_program("0.7::burglary.\n")
    (a,) = p.annotations
    assert a.kind == "prob" and a.prob == 0.7 and a.head.indicator == ("burglary", 0)


def test_syntax_error_has_position():
    with pytest.raises(ProgramError) as ei:
        parse_program("p(X) :- q(X.\n")
    assert "1:" in str(ei.value)


def test_static_errors():
    with pytest.raises(ProgramError, match="duplicate annotation"):
        parse_program("0.5::q.\n0.4::q.\n")
    with pytest.raises(ProgramError, match="only annotated facts"):
        parse_program("r :- \\+ p.\np :- s.\n0.5::s.\n")


def test_range_restriction_warning():
    p = parse_program("0.5::q.\np(X) :- q.\n")
    assert any("range-restricted" in d.message for d in p.diagnostics)


def test_full_grounding_counts():
    p = parse_program(SINGLE, categories={"digit": D})
    g = ground_program(p, {"digit": [["i1", "i2"], D], "sums": [D, D, list(range(19))],
                           "addition": [["i1"], ["i2"], list(range(19))]})
    assert g.per_clause[-1] == 1900
    assert ground_program(parse_program("p :- q.\n0.5::q.\n"), {}).size == 1
    assert ground_program(parse_program("r(N) :- between(5,3,N).\n"), {"r": [D]}).size == 0


def test_prove_examples():
    p = parse_program(SINGLE, categories={"digit": D})
    r = prove_dag(p, "addition(i1,i2,0)")
    assert count_proofs(r.manager, r.roots[0]) == 1
    assert set(atoms_of(prove(p, "addition(i1,i2,0)"))) == {Atom("digit", ("i1", 0)), Atom("digit", ("i2", 0))}
    r = prove_dag(p, "addition(i1,i2,4)")
    assert count_proofs(r.manager, r.roots[0]) == 5
    assert prove(p, "addition(i1,i2,40)") == Const(False, "bool")
    with pytest.raises(ProofError):
        prove(p, "addition(i1,i2,S)")


def test_depth_limit():
    p = load_program("original")
    with pytest.raises(ProofError):
        prove(p, "addition([a,b],[c,d],5)", depth_limit=3)


def test_alarm_program_translation():
    tr = to_deeplog(parse_program(ALARM), "alarm(t1,t2)")
    (f,) = tr.formulas
    assert math.isclose(evaluate(tr.model, f), 0.703, rel_tol=1e-12)
    assert math.isclose(brute_force_wmc(tr.model, tr.logic[0], atoms=tr.atoms), 0.703, rel_tol=1e-12)


def test_answer_counts_for_two_digit_numbers():
    assert _addition_roots(2, "original")[3] == 199
    assert _addition_roots(2, "carry")[3] == 22


def _fixpoint_holds(true_facts: set, s: int) -> bool:
    # naive bottom-up: addition(i1,i2,S) iff some digit pair proves it
    d1 = {n for (img, n) in true_facts if img == "i1"}
    d2 = {n for (img, n) in true_facts if img == "i2"}
    return any(a + b == s for a in d1 for b in d2)


@pytest.mark.parametrize("s", [0, 2, 3, 6, 7])
def test_proofs_match_bottom_up_models(s):
    # four classes, independent binary facts: 8 atoms
    text = SINGLE.replace("between(0,9,D1), between(0,9,D2)", "between(0,3,D1), between(0,3,D2)")
    p = parse_program(text, categories={"digit": [0, 1, 2, 3]})
    atoms = [Atom("digit", (img, n)) for img in ("i1", "i2") for n in range(4)]
    logic = prove(p, f"addition(i1,i2,{s})")
    models = {frozenset(a.args for a in atoms if m[a]) for m in enumerate_models(logic, atoms)} if atoms_of(logic) else set()
    expected = set()
    for bits in itertools.product([False, True], repeat=len(atoms)):
        facts = frozenset(a.args for a, b in zip(atoms, bits) if b)
        if _fixpoint_holds(facts, s):
            expected.add(facts)
    assert models == expected


@pytest.mark.parametrize("s", [0, 4, 9, 13, 18])
def test_grounding_and_proving_agree(s):
    p = parse_program(SINGLE, categories={"digit": D})
    tr = to_deeplog(p, f"addition(i1,i2,{s})")
    g = ground_program(p, {"digit": [["i1", "i2"], D], "sums": [D, D, list(range(19))],
                           "addition": [["i1"], ["i2"], list(range(19))]})
    phi = grounded_formula(g, f"addition(i1,i2,{s})", p)
    eo = [exactly_one([Atom("digit", (img, n)) for n in D], "bool") for img in ("i1", "i2")]
    phi = fold_binary("and", [phi] + eo, "bool")
    assert len(tr.atoms) == 20
    store = ParameterStore()
    bind_labels(tr.model, store, seed=s, init_scale=1.0)
    a = brute_force_wmc(tr.model, phi, atoms=tr.atoms, store=store)
    b = brute_force_wmc(tr.model, tr.logic[0], atoms=tr.atoms, store=store)
    assert math.isclose(a, b, rel_tol=1e-12, abs_tol=1e-15)
    # exactly-one: every model has one class per image
    for m in enumerate_models(tr.logic[0], tr.atoms)[:50]:
        for img in ("i1", "i2"):
            assert sum(m[Atom("digit", (img, n))] for n in D) == 1


def test_program_files_ship_with_the_package():
    assert "addMod10" in program_text("mnist_carry.pl")
    assert "nn(" in program_text("alarm.pl")
