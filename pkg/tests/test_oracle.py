from __future__ import annotations

import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deeplog.language import AggAtom, AlgAtom, Atom, Binary, Const, Interpretation, Transform, Unary
from deeplog.oracle import (
    OracleError,
    brute_force_wmc,
    enumerate_models,
    evaluate,
    evaluate_counted,
    wmc_formula,
)
from deeplog.parser import parse_formula

B1, B2 = Atom("burglary", ("t1",)), Atom("burglary", ("t2",))
E1, E2 = Atom("earthquake", ("t1",)), Atom("earthquake", ("t2",))
ATOMS = [B1, B2, E1, E2]


def bvar(a):
    return AlgAtom(a, "bool")


def test_alarm_query_value(alarm_model):
    f = alarm_model.formulas["alarm_query"].body
    r = evaluate_counted(alarm_model, f, {"V": "t1", "S": "t2"})
    assert math.isclose(r.value, 0.703, rel_tol=1e-12)
    # two nested binders over two truth values
    assert r.enumerated_interpretations == 2**2


def test_aggregation_sums_to_one(alarm_model):
    f = parse_formula("sum<burglary(t1)> sum<earthquake(t2)> (burglary(t1)@prob * earthquake(t2)@prob)", alarm_model)
    assert math.isclose(evaluate(alarm_model, f), 1.0, rel_tol=1e-12)


def test_ground_product_under_interpretation(alarm_model):
    f = parse_formula("burglary(t1)@prob * earthquake(t2)@prob", alarm_model)
    i = Interpretation({B1: True, E2: False}, "bool")
    assert math.isclose(evaluate(alarm_model, f, {}, i), 0.7 * 0.99, rel_tol=1e-12)


def test_unassigned_atom_is_an_error(alarm_model):
    f = parse_formula("burglary(t1)@prob", alarm_model)
    with pytest.raises(OracleError):
        evaluate(alarm_model, f)


def test_brute_force_wmc_examples(alarm_model):
    assert math.isclose(brute_force_wmc(alarm_model, Binary("or", bvar(B1), bvar(E2), "bool")), 0.703, rel_tol=1e-12)
    contra = Binary("and", bvar(B1), Unary("not", bvar(B1), "bool"), "bool")
    assert brute_force_wmc(alarm_model, contra) == 0.0
    taut = Binary("or", bvar(B1), Unary("not", bvar(B1), "bool"), "bool")
    assert math.isclose(brute_force_wmc(alarm_model, taut), 1.0, rel_tol=1e-12)


def test_enumeration_guard(alarm_model):
    many = [Atom("burglary", (f"c{k}",)) for k in range(25)]
    f = bvar(many[0])
    for a in many[1:]:
        f = Binary("or", f, bvar(a), "bool")
    with pytest.raises(OracleError, match="enumeration limit"):
        brute_force_wmc(alarm_model, f, atoms=many)


def test_enumerate_models_order():
    ms = enumerate_models(Binary("or", bvar(B1), bvar(E2), "bool"), [B1, E2])
    assert [(m[B1], m[E2]) for m in ms] == [(True, True), (True, False), (False, True)]
    assert len(enumerate_models(Binary("and", bvar(B1), bvar(E2), "bool"), [B1, E2])) == 1
    assert enumerate_models(Const(False, "bool"), [B1]) == []


def test_irrelevant_atom_marginalizes(alarm_model):
    body = Binary("*", Transform("prob", "iverson", bvar(B1)), AlgAtom(B1, "prob"), "prob")
    f = AggAtom(B1, "sum", body, "prob")
    g = AggAtom(E1, "sum", Binary("*", f, AlgAtom(E1, "prob"), "prob"), "prob")
    assert math.isclose(evaluate(alarm_model, g), evaluate(alarm_model, f), rel_tol=1e-15)


_logic = st.recursive(
    st.sampled_from([bvar(a) for a in ATOMS] + [Const(True, "bool")]),
    lambda ch: st.one_of(
        st.builds(lambda a: Unary("not", a, "bool"), ch),
        st.builds(lambda a, b: Binary("and", a, b, "bool"), ch, ch),
        st.builds(lambda a, b: Binary("or", a, b, "bool"), ch, ch),
    ),
    max_leaves=10,
)


@settings(max_examples=100, deadline=None)
@given(_logic)
def test_wmc_formula_matches_brute_force_exactly(alarm_model, logic):
    f = wmc_formula(logic, ATOMS, alarm_model)
    a = evaluate(alarm_model, f)
    b = brute_force_wmc(alarm_model, logic, atoms=ATOMS)
    assert a == b
    assert evaluate(alarm_model, f) == a
