from __future__ import annotations

import numpy as np
import pytest

from deeplog.circuit import Labeller, eval_layers, layerize
from deeplog.language import Variable
from deeplog.tasks import (
    TaskError,
    addition_circuit,
    make_addition_data,
    make_sudoku_data,
    run_task,
    sudoku_circuit,
    sudoku_valid,
    sum_distribution,
    valid_sudoku4,
)


def onehot_leaves(c, rows):
    """Leaf matrix with every classifier reading its ground-truth class with certainty."""
    L = np.zeros((len(c.leaf_nodes), len(rows)))
    for i, n in enumerate(c.leaf_nodes):
        ref = c.leaves[n]
        var = next(a for a in ref.args if isinstance(a, Variable))
        cls = next(a for a in ref.args if not isinstance(a, Variable))
        for j, row in enumerate(rows):
            hit = float(row[var.name] == cls)
            L[i, j] = hit if ref.truth is not False else 1.0 - hit
    return L


def test_addition_data_targets():
    d = make_addition_data(1, 0, digits=[([5], [8])])
    assert d.examples[0].target == 13
    d = make_addition_data(2, 0, digits=[([5, 2], [8, 3])])
    assert d.examples[0].target == 135
    assert set(d.examples[0].assignment) == {"A0", "A1", "B0", "B1"}
    with pytest.raises(TaskError):
        make_addition_data(0, 3)


def test_single_digit_answer_domain():
    tc = addition_circuit(1, "original")
    assert len(tc.circuit.roots) == 20
    assert tc.info["ground_atoms"] == 19
    assert tc.circuit.kind[tc.circuit.roots[19]] == 1  # constant zero


@pytest.mark.parametrize("encoding,count", [("original", 199), ("carry", 22)])
def test_two_digit_ground_atoms(encoding, count):
    assert addition_circuit(2, encoding).info["ground_atoms"] == count


@pytest.mark.parametrize("n,encoding", [(1, "original"), (1, "carry"), (2, "original"), (2, "carry")])
def test_onehot_digits_put_all_mass_on_true_sum(n, encoding):
    tc = addition_circuit(n, encoding)
    data = make_addition_data(n, 40, seed=n)
    rows = []
    for e in data.examples:
        r = {f"A{k}": d for k, d in enumerate(e.info["a"])}
        r.update({f"B{k}": d for k, d in enumerate(e.info["b"])})
        rows.append(r)
    c = tc.circuit
    out = eval_layers(c, layerize(c), onehot_leaves(c, rows))[list(c.roots)].T
    for e, p in zip(data.examples, out):
        assert abs(p[e.target] - 1.0) <= 1e-9
        assert abs(p.sum() - 1.0) <= 1e-9


def test_sum_distribution_is_normalized_for_random_parameters():
    tc = addition_circuit(1, "original")
    data = make_addition_data(1, 8, seed=0)
    for seed in range(3):
        p = sum_distribution(tc, Labeller(tc.model, seed=seed, init_scale=2.0), data)
        assert np.allclose(p.sum(axis=1), 1.0, atol=1e-9)
        assert np.all(np.abs(p[:, 19]) <= 1e-9)


def test_sudoku_checker():
    grids = valid_sudoku4()
    assert len(grids) == 288
    g = np.array([[1, 2, 3, 4], [3, 4, 1, 2], [2, 1, 4, 3], [4, 3, 2, 1]])
    assert sudoku_valid(g)
    g[0, 1] = 1
    assert not sudoku_valid(g)


def test_sudoku_data_balanced_and_deterministic():
    a = make_sudoku_data(4, 1000, seed=3)
    b = make_sudoku_data(4, 1000, seed=3)
    assert [e.info["grid"] for e in a.examples] == [e.info["grid"] for e in b.examples]
    assert all(np.array_equal(a.payloads[k], b.payloads[k]) for k in a.payloads)
    assert sum(e.target for e in a.examples) == 500
    assert all(e.target == int(sudoku_valid(e.info["grid"])) for e in a.examples)
    with pytest.raises(TaskError):
        make_sudoku_data(9, 10)


def test_sudoku_circuit_matches_checker():
    tc = sudoku_circuit("prob")
    c = tc.circuit
    rng = np.random.default_rng(0)
    grids = valid_sudoku4()
    boards = []
    for i in range(10_000):
        if i % 3 == 0:
            g = list(grids[rng.integers(len(grids))])
        elif i % 3 == 1:
            g = list(grids[rng.integers(len(grids))])
            g[rng.integers(16)] = int(rng.integers(1, 5))
        else:
            g = list(rng.integers(1, 5, 16))
        boards.append(g)
    rows = [{f"C{k}": int(d) for k, d in enumerate(g)} for g in boards]
    out = eval_layers(c, layerize(c), onehot_leaves(c, rows))[c.roots[0]]
    want = np.array([float(sudoku_valid(g)) for g in boards])
    assert np.array_equal(out, want)
    assert 0 < want.sum() < len(want)


def test_task_errors():
    with pytest.raises(TaskError):
        run_task("nine-by-nine")
    with pytest.raises(TaskError):
        run_task("sudoku4", "fuzzy:product", mode="loss")
    with pytest.raises(TaskError):
        run_task("alarm", "fuzzy:godel")
    with pytest.raises(TaskError):
        run_task("mnist-add", "tropical")


def test_alarm_task_row():
    out = run_task("alarm", epochs=40)
    row = out["row"]
    assert row["task"] == "alarm" and row["accuracy"] >= 0.9


@pytest.mark.slow
def test_sudoku_loss_mode_runs():
    row = run_task("sudoku4", "prob", mode="loss", count=200, epochs=5)["row"]
    assert 0.0 <= row["ap"] <= 1.0
