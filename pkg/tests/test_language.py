from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deeplog.language import (
    AggAtom,
    AggVar,
    AlgAtom,
    Atom,
    Binary,
    Const,
    Interpretation,
    ModelError,
    SubstitutionError,
    Transform,
    Unary,
    Variable,
    check_well_formed,
    free_variables,
    herbrand_base,
    substitute,
)
from deeplog.parser import parse_formula, parse_model, print_formula, print_model

V, S = Variable("V"), Variable("S")

COLORS = """
structure prob, bool.
domain color = {red, green}.
domain img = {img1, img2}.
domain cls = {0,1,2,3,4,5,6,7,8,9}.
pred color(color).
pred stoplight(color).
pred hascolor(img, color).
pred digit(img, cls).
pred burglary().
truth bool.
label color @ prob : table(* = 0.5).
label stoplight @ prob : table(stoplight(red) = 0.9, stoplight(green) = 0.2).
label hascolor @ prob : table(* = 0.3).
label digit @ prob : categorical(group=last).
label burglary @ prob : table(burglary() = 0.7).
label color @ bool : identity.
"""


def test_alarm_model_parses(alarm_model):
    assert set(alarm_model.predicates) == {"burglary", "earthquake"}
    assert list(alarm_model.formulas) == ["alarm_query"]
    assert check_well_formed(alarm_model) == []


def test_constant_outside_domain():
    text = "structure prob.\ndomain video = {t1}.\npred burglary(video).\nlabel burglary @ prob : table(burglary(5) = 0.7).\n"
    with pytest.raises(ModelError, match="constant outside domain"):
        parse_model(text)


def test_diagnostics_carry_positions():
    text = "structure prob.\nstructure tropical.\n"
    with pytest.raises(ModelError) as ei:
        parse_model(text)
    d = ei.value.diagnostics[0]
    assert d.line == 2 and "unknown structure" in d.message


def test_arity_and_duplicate_label_errors():
    base = "structure prob.\ndomain d = {a}.\npred p(d).\n"
    with pytest.raises(ModelError, match="arity mismatch"):
        parse_model(base + "label p @ prob : table(p(a, a) = 0.1).\n")
    with pytest.raises(ModelError, match="duplicate labelling entry"):
        parse_model(base + "label p @ prob : table(* = 0.1).\nlabel p @ prob : table(* = 0.2).\n")


def test_empty_formula_section_is_valid():
    m = parse_model(COLORS)
    assert m.formulas == {}
    assert check_well_formed(m) == []


def test_substitute_grounds_alarm_disjunction(alarm_model):
    f = parse_formula("or<bool>(burglary(V)@bool, earthquake(S)@bool)", alarm_model)
    g = substitute(f, {"V": "t1", "S": "t2"}, alarm_model)
    assert print_formula(g) == "or<bool>(burglary(t1)@bool, earthquake(t2)@bool)"
    assert free_variables(g) == []
    assert substitute(g, {}) == g


def test_substitute_respects_binders():
    m = parse_model(COLORS)
    Img, Color = Variable("Img"), Variable("Color")
    body = Binary("*", AlgAtom(Atom("stoplight", (Color,)), "prob"), AlgAtom(Atom("hascolor", (Img, Color)), "prob"), "prob")
    f = AggVar(Color, "color", "sum", body, "prob")
    assert free_variables(f) == [Img]
    g = substitute(f, {"Img": "img1"}, m)
    assert free_variables(g) == []
    assert isinstance(g, AggVar) and g.var == Color
    with pytest.raises(SubstitutionError):
        substitute(f, {})


def test_substitute_checks_domains(alarm_model):
    f = parse_formula("burglary(V)@prob", alarm_model)
    with pytest.raises(SubstitutionError):
        substitute(f, {"V": "nowhere"}, alarm_model)


def test_substitution_composes():
    f = Binary("or", AlgAtom(Atom("burglary", (V,)), "bool"), AlgAtom(Atom("earthquake", (S,)), "bool"), "bool")
    a = substitute(substitute(f, {"V": "t1"}, partial=True), {"S": "t2"})
    b = substitute(f, {"V": "t1", "S": "t2"})
    assert a == b


def test_well_formedness_diagnostics(alarm_model):
    m = parse_model(COLORS)
    wrong = Transform("bool", "iverson", AlgAtom(Atom("color", ("red",)), "prob"))
    m.formulas["bad"] = type(next(iter(alarm_model.formulas.values())))("bad", (), wrong)
    msgs = [d.message for d in check_well_formed(m)]
    assert any("transformation direction mismatch" in s for s in msgs)
    m.formulas.clear()
    vac = AggAtom(Atom("color", ("red",)), "sum", AlgAtom(Atom("color", ("green",)), "prob"), "prob")
    m.formulas["vac"] = type(next(iter(alarm_model.formulas.values())))("vac", (), vac)
    diags = check_well_formed(m)
    assert any("vacuous aggregation" in d.message and d.severity == "warning" for d in diags)


def test_herbrand_base():
    m = parse_model(COLORS)
    hb = herbrand_base(m)
    assert [a for a in hb if a.predicate == "color"] == [Atom("color", ("red",)), Atom("color", ("green",))]
    assert [a for a in hb if a.predicate == "burglary"] == [Atom("burglary", ())]
    assert len([a for a in hb if a.predicate == "digit"]) == 20
    with pytest.raises(ValueError):
        herbrand_base(m, limit=10)


def test_interpretation_rejects_wrong_truth_values():
    with pytest.raises(ValueError):
        Interpretation({Atom("b", ()): 0.5}, "bool")
    i = Interpretation({Atom("b", ()): 0.5}, "fuzzy")
    assert i.extend(Atom("c", ()), 1.0)[Atom("c", ())] == 1.0


def test_model_round_trip(alarm_model):
    for m in (alarm_model, parse_model(COLORS)):
        assert parse_model(print_model(m)) == m


# random formulas over the alarm vocabulary
_bool_leaf = st.sampled_from([
    AlgAtom(Atom("burglary", (V,)), "bool"),
    AlgAtom(Atom("earthquake", (S,)), "bool"),
    AlgAtom(Atom("burglary", ("t1",)), "bool"),
])
_bool = st.recursive(
    _bool_leaf,
    lambda ch: st.one_of(
        st.builds(lambda a: Unary("not", a, "bool"), ch),
        st.builds(lambda a, b: Binary("and", a, b, "bool"), ch, ch),
        st.builds(lambda a, b: Binary("or", a, b, "bool"), ch, ch),
    ),
    max_leaves=8,
)
_prob_leaf = st.one_of(
    st.sampled_from([AlgAtom(Atom("burglary", (V,)), "prob"), AlgAtom(Atom("earthquake", (S,)), "prob")]),
    st.builds(lambda f: Transform("prob", "iverson", f), _bool),
    st.sampled_from([Const(0.25, "prob"), Const(1.0, "prob")]),
)
_prob = st.recursive(
    _prob_leaf,
    lambda ch: st.one_of(
        st.builds(lambda a, b: Binary("*", a, b, "prob"), ch, ch),
        st.builds(lambda a, b: Binary("+", a, b, "prob"), ch, ch),
        st.builds(lambda a: AggAtom(Atom("burglary", (V,)), "sum", a, "prob"), ch),
        st.builds(lambda a: AggVar(V, "video", "sum", a, "prob"), ch),
    ),
    max_leaves=8,
)


@settings(max_examples=150, deadline=None)
@given(_prob)
def test_formula_print_parse_round_trip(alarm_model, f):
    assert parse_formula(print_formula(f), alarm_model) == f
