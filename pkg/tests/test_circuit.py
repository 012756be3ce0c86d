from __future__ import annotations

import math

import numpy as np
import pytest

from deeplog.circuit import (
    Batch,
    CircuitBuilder,
    CircuitError,
    LeafRef,
    Labeller,
    compose,
    deserialize,
    eval_dual_jacobian,
    eval_expected_fuzzy,
    eval_forward,
    eval_gradient,
    eval_layers,
    eval_naive,
    layerize,
    leaf_gradients,
    serialize,
)
from deeplog.compiler import resolve_aggregations
from deeplog.language import AlgAtom, Atom, Const, Variable, exactly_one
from deeplog.oracle import evaluate, wmc_formula
from deeplog.params import softmax
from deeplog.parser import parse_model

ROW = {"V": "t1", "S": "t2"}


def leaf(b, name, s="prob", truth=True, args=()):
    return b.leaf(LeafRef(name, args, truth, s))


def single(name, s="prob"):
    b = CircuitBuilder()
    return b.build([leaf(b, name, s)])


@pytest.fixture(scope="module")
def alarm_circuit(alarm_model):
    return resolve_aggregations(alarm_model.formulas["alarm_query"].body, alarm_model)


def test_compose():
    c = compose(single("a"), single("b"), "*", "prob")
    assert len(c) == 3 and c.op_of(c.roots[0]) == "*"
    with pytest.raises(CircuitError, match="structure mismatch"):
        compose(single("a", "bool"), single("b"), "*", "prob")


def test_layer_counts(alarm_circuit):
    b = CircuitBuilder()
    r = b.op_node("prob", "*", [leaf(b, "a"), leaf(b, "b")])
    assert len(layerize(b.build([r]))) == 2
    assert len(layerize(alarm_circuit)) == 3
    b = CircuitBuilder()
    x = leaf(b, "a")
    for _ in range(7):
        x = b.op_node("prob", "+", [x, leaf(b, "a")])
    assert len(layerize(b.build([x]))) == 8


def test_children_precede_parents(alarm_circuit):
    for n in range(len(alarm_circuit)):
        assert all(ch < n for ch in alarm_circuit.children(n))


def test_eval_forward_alarm(alarm_model, alarm_circuit):
    lab = Labeller(alarm_model)
    v = eval_forward(alarm_circuit, params=lab, batch=Batch([ROW, ROW]))
    assert math.isclose(v[0, 0], 0.703, rel_tol=1e-12) and v[0, 0] == v[1, 0]


def test_eval_matches_oracle_per_row(alarm_model, alarm_circuit):
    lab = Labeller(alarm_model)
    rows = [{"V": v, "S": s} for v in ("t1", "t2") for s in ("t1", "t2")]
    got = eval_forward(alarm_circuit, params=lab, batch=Batch(rows))[:, 0]
    f = alarm_model.formulas["alarm_query"].body
    want = [evaluate(alarm_model, f, r) for r in rows]
    assert np.allclose(got, want, rtol=0, atol=1e-12)


def test_alarm_gradient(alarm_model, alarm_circuit):
    lab = Labeller(alarm_model)
    plan = lab.plan(alarm_circuit)
    m, _ = plan.values(lab, Batch([ROW]))
    g = leaf_gradients(alarm_circuit, layerize(alarm_circuit), m, np.ones((1, 1)))[:, 0]
    refs = [str(alarm_circuit.leaves[n]) for n in alarm_circuit.leaf_nodes]
    d = g[refs.index("burglary(V):=t@prob")] - g[refs.index("burglary(V):=f@prob")]
    assert math.isclose(d, 0.99, rel_tol=1e-12)


def test_all_constant_circuit_has_zero_gradient():
    b = CircuitBuilder()
    r = b.op_node("prob", "+", [b.const(0.25, "prob"), b.const(0.5, "prob")])
    c = b.build([r])
    assert eval_forward(c)[0, 0] == 0.75
    assert leaf_gradients(c, layerize(c), np.zeros((0, 1)), np.ones((1, 1))).shape == (0, 1)


def test_gradient_over_bool_is_rejected():
    c = single("a", "bool")
    with pytest.raises(CircuitError):
        leaf_gradients(c, layerize(c), np.ones((1, 1)), np.ones((1, 1)))


DIGITS = """
structure prob, bool.
domain img = {i1, i2}.
domain cls = {0, 1, 2}.
pred digit(img, cls).
truth bool.
label digit @ prob : categorical(group=last).
label digit @ bool : identity.
"""


def _digits():
    m = parse_model(DIGITS)
    atoms = [Atom("digit", (i, k)) for i in ("i1", "i2") for k in range(3)]
    eo = [exactly_one([Atom("digit", (i, k)) for k in range(3)], "bool") for i in ("i1", "i2")]
    return m, atoms, eo


def test_normalization_over_categorical_groups():
    from deeplog.language import fold_binary

    m, atoms, eo = _digits()
    c = resolve_aggregations(wmc_formula(fold_binary("and", [Const(True, "bool")] + eo, "bool"), atoms, m), m)
    for seed in range(5):
        lab = Labeller(m, seed=seed, init_scale=3.0)
        assert abs(eval_forward(c, params=lab)[0, 0] - 1.0) <= 1e-9


def test_softmax_blocks_sum_to_one():
    m, _, _ = _digits()
    lab = Labeller(m, seed=1, init_scale=5.0)
    p = softmax(lab.store["digit@prob:logits"])
    assert (p > 0).all() and np.allclose(p.sum(axis=-1), 1.0, atol=1e-9)


def test_parameter_gradients_match_finite_differences():
    from deeplog.language import Binary, fold_binary

    m, atoms, eo = _digits()
    bv = lambda a: AlgAtom(a, "bool")
    logic = Binary("or", Binary("and", bv(atoms[0]), bv(atoms[4]), "bool"), Binary("and", bv(atoms[2]), bv(atoms[3]), "bool"), "bool")
    c = resolve_aggregations(wmc_formula(fold_binary("and", [logic] + eo, "bool"), atoms, m), m)
    lab = Labeller(m, seed=4, init_scale=1.0)
    lab.store.zero_grad()
    eval_gradient(c, None, lab, Batch.single(), np.ones((1, 1)))
    g = lab.store.flat_grad()
    x0 = lab.store.flat()
    h = 1e-6
    for j in range(len(x0)):
        e = np.zeros_like(x0)
        e[j] = h
        lab.store.set_flat(x0 + e)
        up = eval_forward(c, params=lab)[0, 0]
        lab.store.set_flat(x0 - e)
        dn = eval_forward(c, params=lab)[0, 0]
        fd = (up - dn) / (2 * h)
        assert abs(fd - g[j]) <= 1e-4 * max(abs(fd), 1e-4)
    lab.store.set_flat(x0)


STRUCTS = {
    "prob": ("+", "*"),
    "fuzzy:product": ("and", "or"),
    "fuzzy:godel": ("and", "or"),
    "fuzzy:lukasiewicz": ("and", "or"),
}


def _random_circuit(rng, s, n_leaves=6, n_ops=40):
    b = CircuitBuilder()
    nodes = [leaf(b, f"x{k}", s) for k in range(n_leaves)]
    for _ in range(n_ops):
        if s != "prob" and rng.random() < 0.15:
            nodes.append(b.op_node(s, "not", [nodes[int(rng.integers(len(nodes)))]]))
            continue
        k = int(rng.integers(2, 4))
        ch = [nodes[int(i)] for i in rng.choice(len(nodes), size=k, replace=False)]
        nodes.append(b.op_node(s, STRUCTS[s][int(rng.integers(2))], ch))
    return b.build(nodes[-2:])


@pytest.mark.parametrize("s", sorted(STRUCTS))
def test_reverse_mode_matches_dual_numbers(s):
    rng = np.random.default_rng(hash(s) % 2**32)
    for _ in range(30):
        c = _random_circuit(rng, s)
        assert len(c) <= 200
        x = rng.uniform(0.05, 0.95, len(c.leaf_nodes))
        J = eval_dual_jacobian(c, x)
        lay = layerize(c)
        for r in range(len(c.roots)):
            up = np.zeros((1, len(c.roots)))
            up[0, r] = 1.0
            g = leaf_gradients(c, lay, x[:, None], up)[:, 0]
            assert np.allclose(g, J[r], rtol=1e-10, atol=1e-10)


def test_batched_equals_single_rows_and_naive():
    rng = np.random.default_rng(0)
    c = _random_circuit(rng, "prob")
    lay = layerize(c)
    X = rng.random((len(c.leaf_nodes), 16))
    full = eval_layers(c, lay, X)[list(c.roots)]
    for j in range(16):
        one = eval_layers(c, lay, X[:, j : j + 1])[list(c.roots), 0]
        assert np.array_equal(one, full[:, j])
    assert np.allclose(eval_naive(c, X).T, full, rtol=1e-12)


def test_expected_fuzzy_modes():
    rng = np.random.default_rng(1)
    c = _random_circuit(rng, "fuzzy:product")
    X = rng.random((len(c.leaf_nodes), 3))
    exact = eval_layers(c, layerize(c), X)[list(c.roots)].T
    assert np.array_equal(eval_expected_fuzzy(c, leaf_matrix=X, dist="dirac", samples=1), exact)
    b = CircuitBuilder()
    r = b.op_node("fuzzy:product", "and", [leaf(b, "a", "fuzzy:product"), leaf(b, "b", "fuzzy:product")])
    c2 = b.build([r])
    assert eval_expected_fuzzy(c2, leaf_matrix=np.ones((2, 1)), dist="logit-normal", samples=20)[0, 0] == pytest.approx(1.0)
    u = eval_expected_fuzzy(single("a", "fuzzy:product"), leaf_matrix=np.full((1, 1), 0.3), dist="uniform", samples=100_000)
    assert abs(u[0, 0] - 0.5) < 0.01
    with pytest.raises(CircuitError):
        eval_expected_fuzzy(c2, leaf_matrix=np.ones((2, 1)), samples=0)


def test_perceptual_leaf_needs_payload():
    m = parse_model("structure prob, bool.\ndomain img = {x}.\ndomain c = {0, 1}.\npred d(img, c).\n"
                    "label d @ prob : perceptual(group=last, dim=3).\n")
    b = CircuitBuilder()
    c = b.build([b.leaf(LeafRef("d", (Variable("X"), 0), True, "prob"))])
    lab = Labeller(m)
    with pytest.raises((CircuitError, KeyError)):
        eval_forward(c, params=lab, batch=Batch([{"X": "x"}]))
    v = eval_forward(c, params=lab, batch=Batch([{"X": "x"}], payloads={"x": np.ones(3)}))
    assert 0 < v[0, 0] < 1


def test_serialization_round_trip(alarm_circuit):
    data = serialize(alarm_circuit)
    assert data.startswith(b"DLC1 ")
    back = deserialize(data)
    assert back.same_structure(alarm_circuit) and back.to_text() == alarm_circuit.to_text()
    with pytest.raises(CircuitError, match="corrupt index"):
        deserialize(data[: len(data) - 7])
    with pytest.raises(CircuitError, match="version mismatch"):
        deserialize(b"DLC0" + data[4:])
    empty = deserialize(serialize(CircuitBuilder().build([])))
    assert eval_forward(empty).shape == (1, 0)
