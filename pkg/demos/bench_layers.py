"""Layered vs naive circuit evaluation across batch sizes.

    python3 demos/bench_layers.py
"""
from __future__ import annotations

from deeplog.bench import bench
from deeplog.tasks import addition_circuit

c = addition_circuit(2, "carry").circuit
rep = bench(c, [1, 16, 128], repetitions=3)
for r in rep.rows:
    print(f"{r.evaluator:8s} batch {r.batch:4d}  {r.per_query:.2e} s/query  (q1 {r.q1:.2e}, q3 {r.q3:.2e})")
for b in (1, 16, 128):
    print(f"speedup at batch {b}: {rep.speedup(b):.1f}x")
