"""Two encodings of multi-digit addition: size, agreement and training.

    python3 demos/addition_encodings.py [n]
"""
from __future__ import annotations

import sys

import numpy as np

from deeplog.circuit import Labeller
from deeplog.tasks import addition_circuit, make_addition_data, run_task, sum_distribution

n = int(sys.argv[1]) if len(sys.argv) > 1 else 1

circuits = {enc: addition_circuit(n, enc) for enc in ("original", "carry")}
for enc, tc in circuits.items():
    print(f"{enc:8s} answers proved={tc.info['ground_atoms']:4d} circuit nodes={len(tc.circuit):8d} "
          f"compile={tc.info['compile_seconds']:.2f}s")

a, b = circuits["original"], circuits["carry"]
lab = Labeller(a.model, seed=0, init_scale=1.0)
data = make_addition_data(n, 5, seed=1)
p = sum_distribution(a, lab, data)
q = sum_distribution(b, Labeller(b.model, store=lab.store), data)
print("max |original - carry| =", float(np.max(np.abs(p - q))))

for sem in ("prob", "fuzzy:product", "fuzzy:lukasiewicz"):
    row = run_task("mnist-add", sem, seed=0)["row"]
    print(f"{sem:18s} digit accuracy {row['digit_accuracy']:.3f}  sum accuracy {row['sum_accuracy']:.3f}")
