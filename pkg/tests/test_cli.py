from __future__ import annotations

import json
import math

import pytest

from deeplog.cli import main
from deeplog.tasks import program_text

from conftest import data_text


@pytest.fixture
def files(tmp_path):
    (tmp_path / "alarm.dlm").write_text(data_text("alarm.dlm"))
    (tmp_path / "alarm.pl").write_text(program_text("alarm.pl"))
    (tmp_path / "add.pl").write_text(program_text("mnist_original.pl"))
    return tmp_path


def test_compile_and_eval_model(files, capsys):
    out = files / "alarm.dlc"
    assert main(["compile", str(files / "alarm.dlm"), "--out", str(out), "--format", "json"]) == 0
    row = json.loads(capsys.readouterr().out)
    assert row["circuit_nodes"] == 5
    data = files / "rows.json"
    data.write_text(json.dumps([{"V": "t1", "S": "t2"}, {"V": "t2", "S": "t1"}]))
    assert main(["eval", str(out), "--model", str(files / "alarm.dlm"), "--data", str(data)]) == 0
    vals = [float(x) for x in capsys.readouterr().out.split()]
    assert len(vals) == 2 and all(math.isclose(v, 0.703, rel_tol=1e-12) for v in vals)


def test_eval_from_leaf_matrix(files, capsys):
    out = files / "alarm.dlc"
    main(["compile", str(files / "alarm.dlm"), "--out", str(out)])
    capsys.readouterr()
    # leaves in file order: burglary false, earthquake true, burglary true
    (files / "leaves.csv").write_text("0.3,0.01,0.7\n1,0,0\n")
    assert main(["eval", str(out), "--data", str(files / "leaves.csv")]) == 0
    a, b = (float(x) for x in capsys.readouterr().out.split())
    assert math.isclose(a, 0.703, rel_tol=1e-12) and b == 0.0


def test_compile_program_one_formula_per_answer(files, capsys):
    assert main(["compile", "--program", str(files / "add.pl"), "--query", "addition([i1],[i2],S)",
                 "--categories", "classify=0..9", "--out", str(files / "add.dlc"), "--format", "json"]) == 0
    assert json.loads(capsys.readouterr().out)["answers"] == 19
    assert main(["compile", str(files / "alarm.dlm"), "--emit", "nnf"]) == 0
    assert "burglary(V)" in capsys.readouterr().out


def test_oracle_check(files, capsys):
    model = str(files / "alarm.dlm")
    assert main(["oracle-check", model, "alarm_query", "--assign", "V=t1", "S=t2", "--format", "json"]) == 0
    row = json.loads(capsys.readouterr().out)
    assert math.isclose(row["value"], 0.703, rel_tol=1e-12) and row["enumerated_interpretations"] == 4
    assert main(["oracle-check", model]) == 0
    assert "True" in capsys.readouterr().out


def test_exit_codes(files, capsys):
    assert main(["compile", str(files / "missing.dlm")]) == 2
    assert main(["compile", str(files / "alarm.pl")]) == 2  # no --query
    assert main(["frobnicate"]) == 2
    (files / "bad.dlm").write_text("structure tropical.\n")
    assert main(["compile", str(files / "bad.dlm")]) == 2
    assert "unknown structure" in capsys.readouterr().err


def test_task_and_train(files, capsys):
    assert main(["task", "alarm", "--epochs", "5", "--out-dir", str(files), "--format", "json"]) == 0
    assert json.loads(capsys.readouterr().out)["task"] == "alarm"
    assert (files / "alarm-0-history.csv").read_text().startswith("epoch,train_loss,val_loss")
    out = files / "p.dlp"
    assert main(["train", "--task", "alarm", "--epochs", "3", "--out", str(out), "--out-dir", str(files)]) == 0
    assert out.stat().st_size > 0


def test_bench_command(files, capsys):
    assert main(["bench", "--n", "1", "--encoding", "original", "--batch", "4", "--repetitions", "2"]) == 0
    assert "speedup" in capsys.readouterr().out
    assert main(["bench", "--n", "1", "--batch", "0"]) == 2
