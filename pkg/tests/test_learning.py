from __future__ import annotations

import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deeplog.circuit import Labeller
from deeplog.compiler import resolve_aggregations
from deeplog.language import AlgAtom, Atom, Binary, Unary
from deeplog.learning import (
    Dataset,
    Example,
    TrainConfig,
    TrainingDiverged,
    average_precision,
    build_architecture_objective,
    build_loss_objective,
    evaluate_metrics,
    finite_difference_check,
    train,
)
from deeplog.oracle import wmc_formula
from deeplog.parser import parse_model
from deeplog.tasks import alarm_circuit, make_alarm_data


def alarm_objective(alarm_model, examples, loss="bce"):
    c = resolve_aggregations(alarm_model.formulas["alarm_query"].body, alarm_model)
    return build_architecture_objective(alarm_model, c, Dataset(examples), loss)


def test_alarm_bce_golden(alarm_model):
    obj = alarm_objective(alarm_model, [Example({"V": "t1", "S": "t2"}, 1.0)])
    assert math.isclose(obj.loss(), -math.log(0.703), rel_tol=1e-12)


def test_bce_at_own_output_is_entropy(alarm_model):
    p = 0.703
    obj = alarm_objective(alarm_model, [Example({"V": "t1", "S": "t2"}, p)])
    h = -(p * math.log(p) + (1 - p) * math.log(1 - p))
    assert math.isclose(obj.loss(), h, rel_tol=1e-9)
    for y in (0.6, 0.8):
        other = alarm_objective(alarm_model, [Example({"V": "t1", "S": "t2"}, y)])
        assert other.loss() >= -(y * math.log(p) + (1 - y) * math.log(1 - p)) - 1e-12


def test_empty_dataset_objective_is_zero(alarm_model):
    assert alarm_objective(alarm_model, []).loss() == 0.0


SMALL = """
structure prob, bool.
domain d = {{x}}.
pred a(d).
pred b(d).
pred c(d).
truth bool.
label a @ prob : table(a(x) = {a}).
label b @ prob : table(b(x) = {b}).
label c @ prob : table(c(x) = {c}).
label a @ bool : identity.
label b @ bool : identity.
label c @ bool : identity.
"""

A, B, C = (Atom(p, ("x",)) for p in "abc")


def bv(a):
    return AlgAtom(a, "bool")


def _iff(x, y):
    return Binary("or", Binary("and", x, y, "bool"), Binary("and", Unary("not", x, "bool"), Unary("not", y, "bool"), "bool"), "bool")


def _loss_obj(a, b, c, taut=False):
    m = parse_model(SMALL.format(a=a, b=b, c=c))
    logic = Binary("or", bv(A), Unary("not", bv(A), "bool"), "bool") if taut else _iff(bv(A), Binary("or", bv(B), bv(C), "bool"))
    constraint = wmc_formula(logic, [A, B, C], m)
    head = wmc_formula(bv(A), [A], m)
    return build_loss_objective(m, constraint, head, Dataset([Example({}, 1.0)]))


def test_loss_mode_penalty_vanishes_when_consistent():
    obj = _loss_obj(1.0, 1.0, 0.0)
    assert abs(obj.penalty()[0]) <= 1e-12
    assert obj.loss() == pytest.approx(0.0, abs=1e-9)
    incon = _loss_obj(1.0, 0.0, 0.0)
    assert incon.penalty()[0] == pytest.approx(1.0)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.01, 0.99), st.floats(0.01, 0.99), st.floats(0.01, 0.99))
def test_tautology_penalty_is_zero(a, b, c):
    assert abs(_loss_obj(a, b, c, taut=True).penalty()[0]) <= 1e-9
    # a strictly probabilistic constraint is never fully satisfied
    assert _loss_obj(a, b, c).penalty()[0] > 1e-9


@pytest.fixture(scope="module")
def alarm_task():
    tc = alarm_circuit()
    return tc, make_alarm_data(200, seed=0)


def _alarm_obj(tc, data, seed=0):
    return build_architecture_objective(tc.model, tc.circuit, data, "bce", labeller=Labeller(tc.model, seed=seed))


def test_alarm_training_reaches_low_validation_loss(alarm_task):
    tc, data = alarm_task
    obj = _alarm_obj(tc, data)
    res = train(obj, TrainConfig(lr=0.05, max_epochs=200, patience=20, seed=0))
    val = data.split("validation")
    assert obj.loss(val) / len(val) < 0.1
    assert res.best_epoch >= 1 and res.history_csv().startswith("epoch,train_loss,val_loss\n")


def test_training_is_deterministic(alarm_task):
    tc, data = alarm_task
    runs = []
    for _ in range(2):
        obj = _alarm_obj(tc, data)
        train(obj, TrainConfig(lr=0.05, max_epochs=3, seed=5))
        runs.append(obj.store.flat())
    assert np.array_equal(runs[0], runs[1])


def test_zero_learning_rate_leaves_parameters(alarm_task):
    tc, data = alarm_task
    obj = _alarm_obj(tc, data)
    before = obj.store.flat()
    train(obj, TrainConfig(lr=0.0, max_epochs=3, weight_decay=0.01))
    assert np.array_equal(before, obj.store.flat())


def test_patience_one_with_constant_loss_stops_after_two_epochs(alarm_task):
    tc, data = alarm_task
    obj = _alarm_obj(tc, data)
    res = train(obj, TrainConfig(lr=0.0, max_epochs=50, patience=1))
    assert len(res.history) == 2 and res.stopped == "patience"


def test_divergence_guard(alarm_task):
    tc, data = alarm_task
    obj = _alarm_obj(tc, data)
    obj.store.set_flat(np.full(obj.store.size, np.nan))
    with pytest.raises(TrainingDiverged):
        train(obj, TrainConfig(max_epochs=2))


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(patience=0)
    with pytest.raises(ValueError):
        TrainConfig(lr=-1)
    with pytest.raises(ValueError):
        TrainConfig(loss="hinge")


def _brute_ap(scores, labels):
    """Mean of precision at each positive, averaged over all orderings of tied scores."""
    n = len(scores)
    total, count = 0.0, 0
    for perm in itertools.permutations(range(n)):
        s = [scores[i] for i in perm]
        if any(s[k] < s[k + 1] for k in range(n - 1)):
            continue
        y = [labels[i] for i in perm]
        hits, ap = 0, 0.0
        for k, v in enumerate(y):
            if v:
                hits += 1
                ap += hits / (k + 1)
        total += ap / sum(labels)
        count += 1
    return total / count


@pytest.mark.parametrize("scores,labels", [
    ([0.9, 0.4, 0.7], [1, 0, 1]),
    ([0.2, 0.8, 0.5], [1, 0, 1]),
    ([0.3, 0.6, 0.1], [0, 1, 0]),
])
def test_average_precision_against_brute_force(scores, labels):
    assert math.isclose(average_precision(scores, labels), _brute_ap(scores, labels), rel_tol=1e-12)


def test_average_precision_conventions():
    assert average_precision([0.5] * 10, [1, 0] * 5) == 0.5
    assert average_precision([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0]) == 1.0
    with pytest.raises(ValueError):
        average_precision([0.1], [0])


def test_perfect_predictor_accuracy(alarm_model):
    exs = [Example({"V": "t1", "S": "t2"}, 1.0) for _ in range(4)]
    obj = alarm_objective(alarm_model, exs)
    assert evaluate_metrics(obj, Dataset(exs), "accuracy") == 1.0
    with pytest.raises(ValueError):
        evaluate_metrics(obj, Dataset([]), "accuracy")


def test_finite_difference_check(alarm_task):
    tc, data = alarm_task
    obj = _alarm_obj(tc, Dataset(data.examples[:20], data.payloads), seed=3)
    assert finite_difference_check(obj, probes=10) < 1e-4
    flipped = finite_difference_check(obj, probes=10, grad_fn=lambda x: -obj.gradient(x))
    assert abs(flipped - 2.0) < 1e-3


def test_finite_difference_check_without_parameters(alarm_model):
    obj = alarm_objective(alarm_model, [Example({"V": "t1", "S": "t2"}, 1.0)])
    assert obj.store.size == 0
    assert finite_difference_check(obj) == 0.0
