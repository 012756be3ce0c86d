from __future__ import annotations

import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deeplog.algebra import (
    STRUCTURE_NAMES,
    ClampMonitor,
    Dual,
    Law,
    check_laws,
    get_structure,
    get_transformation,
    iverson,
    make_boolean,
    make_dual,
    make_fuzzy,
    make_probability,
    with_laws,
)

unit = st.floats(0.0, 1.0, allow_nan=False)


def test_boolean_ops():
    b = make_boolean()
    assert not b.apply("and", True, False)
    assert not b.apply("or", False, False)
    assert not b.apply("not", True)
    assert b.fold("any", [False, True]) and not b.fold("all", [False, True])


def test_probability_ops():
    p = make_probability()
    assert p.apply("*", 0.7, 0.99) == pytest.approx(0.693, abs=1e-12)
    assert p.apply("+", 0.5, 0.0) == 0.5
    assert p.fold("sum", [0.007, 0.693, 0.003, 0.297]) == pytest.approx(1.0, abs=1e-12)
    # aliases resolve to the same operators
    assert p.apply("times", 2.0, 3.0) == 6.0 and p.apply("plus", 2.0, 3.0) == 5.0


@pytest.mark.parametrize("kind,op,expected", [
    ("product", "or", 0.86),
    ("godel", "and", 0.3),
    ("lukasiewicz", "and", 0.1),
    ("product", "and", 0.24),
    ("godel", "or", 0.8),
    ("lukasiewicz", "or", 1.0),
])
def test_fuzzy_connectives(kind, op, expected):
    assert make_fuzzy(kind).apply(op, 0.3, 0.8) == pytest.approx(expected, abs=1e-12)


@pytest.mark.parametrize("kind", ["product", "godel", "lukasiewicz"])
def test_fuzzy_negation_is_complement(kind):
    assert make_fuzzy(kind).apply("not", 0.25) == pytest.approx(0.75)


def test_unknown_tnorm():
    with pytest.raises(ValueError):
        make_fuzzy("hamacher")


def test_dual_rules():
    d = make_dual()
    r = d.apply("*", Dual(2.0, 1.0), Dual(3.0, 0.0))
    assert (r.primal, r.tangent) == (6.0, 3.0)
    r = d.apply("+", Dual(2.0, 1.0), Dual(3.0, 0.0))
    assert (r.primal, r.tangent) == (5.0, 1.0)
    x = Dual(3.0, 1.0)
    r = d.apply("*", x, x)
    assert (r.primal, r.tangent) == (9.0, 6.0)


def test_iverson():
    t = iverson()
    assert t(True) == 1.0 and t(False) == 0.0
    assert t(make_boolean().apply("not", True)) == 0.0
    assert get_transformation("iverson").target == "prob"


@pytest.mark.parametrize("name", STRUCTURE_NAMES)
def test_declared_laws_hold(name):
    rep = check_laws(get_structure(name), 100_000)
    assert rep.passed, rep.failed()


def test_godel_distributivity_declared_again_passes():
    g = with_laws(make_fuzzy("godel"), [Law("distributes", "and", "or")])
    assert check_laws(g, 1000).passed
    # grid cross-check
    vals = [0.0, 0.5, 1.0]
    for a, b, c in itertools.product(vals, repeat=3):
        assert min(a, max(b, c)) == max(min(a, b), min(a, c))


def test_lukasiewicz_distributivity_fails_with_counterexample():
    s = with_laws(make_fuzzy("lukasiewicz"), [Law("distributes", "and", "or")])
    rep = check_laws(s, 1000)
    v = rep.verdict("distributes(and over or)")
    assert not v.passed and v.counterexample is not None
    a, b, c = v.counterexample
    f = s.binary_ops
    assert abs(f["and"](a, f["or"](b, c)) - f["or"](f["and"](a, b), f["and"](a, c))) > 1e-9
    grid = [0.0, 0.4, 0.7, 1.0]
    assert any(
        abs(f["and"](a, f["or"](b, c)) - f["or"](f["and"](a, b), f["and"](a, c))) > 1e-9
        for a, b, c in itertools.product(grid, repeat=3)
    )


def test_check_laws_rejects_zero_samples():
    with pytest.raises(ValueError):
        check_laws(make_probability(), 0)


def test_clamp_monitor_counts_large_violations():
    m = ClampMonitor(1e-9)
    assert m.clip(1.0 + 1e-12) == 1.0 and m.events == 0
    assert m.clip(1.5) == 1.0 and m.events == 1 and m.max_violation == pytest.approx(0.5)


@settings(max_examples=200, deadline=None)
@given(unit, unit, unit)
def test_fuzzy_results_stay_in_unit_interval(a, b, c):
    for kind in ("product", "godel", "lukasiewicz"):
        s = make_fuzzy(kind)
        for op in ("and", "or"):
            v = s.apply(op, s.apply(op, a, b), c)
            assert -1e-12 <= v <= 1 + 1e-12


@settings(max_examples=100, deadline=None)
@given(st.floats(0.05, 0.95), st.floats(0.05, 0.95))
def test_dual_matches_finite_differences(x, y):
    h = 1e-6
    for kind in ("product", "godel", "lukasiewicz"):
        s = make_fuzzy(kind)
        for op in ("and", "or"):
            if kind != "product" and (abs(x - y) < 1e-4 or abs(x + y - 1) < 1e-4):
                continue  # kinks
            d = s.dual_binary[op](Dual(x, 1.0), Dual(y, 0.0))
            fd = (s.binary_ops[op](x + h, y) - s.binary_ops[op](x - h, y)) / (2 * h)
            assert abs(float(d.tangent) - fd) <= 1e-5 * max(1.0, abs(fd))
    p = make_dual()
    z = p.apply("*", p.apply("+", Dual(x, 1.0), Dual(y, 0.0)), Dual(x, 1.0))
    fd = (((x + h) + y) * (x + h) - ((x - h) + y) * (x - h)) / (2 * h)
    assert abs(float(z.tangent) - fd) <= 1e-5 * max(1.0, abs(fd))


def test_structures_are_shared_instances():
    assert get_structure("prob") is get_structure("prob")
    with pytest.raises(KeyError):
        get_structure("tropical")


def test_vectorized_ops():
    p = make_probability()
    np.testing.assert_allclose(p.apply("*", np.array([0.5, 2.0]), np.array([2.0, 0.25])), [1.0, 0.5])
