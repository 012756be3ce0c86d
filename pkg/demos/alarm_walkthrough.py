"""Alarm model from text to a trained perceptual circuit.

    python3 demos/alarm_walkthrough.py
"""
from __future__ import annotations

from importlib.resources import files

from deeplog.circuit import Batch, Labeller, eval_forward
from deeplog.compiler import compile_formula
from deeplog.oracle import evaluate_counted
from deeplog.parser import parse_model
from deeplog.tasks import run_task

m = parse_model(files("deeplog").joinpath("data", "alarm.dlm").read_text())
f = m.formulas["alarm_query"].body
sigma = {"V": "t1", "S": "t2"}

ref = evaluate_counted(m, f, sigma)
print(f"oracle   : {float(ref.value):.6f} over {ref.enumerated_interpretations} interpretations")
c = compile_formula(f, m, name="alarm_query")
print(c.to_text())
lab = Labeller(m)
print(f"circuit  : {float(eval_forward(c, None, lab, Batch([sigma]))[0, 0]):.6f}")

# same structure with perceptual classifiers over synthetic payloads
out = run_task("alarm", seed=0)
print("trained  :", out["row"])
