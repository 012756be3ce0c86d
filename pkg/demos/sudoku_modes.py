"""4x4 Sudoku validity with the rules in the architecture and in the loss.

    python3 demos/sudoku_modes.py
"""
from __future__ import annotations

from deeplog.tasks import run_task

for sem, mode in [("prob", "architecture"), ("fuzzy:product", "architecture"), ("prob", "loss")]:
    row = run_task("sudoku4", sem, mode=mode, seed=0)["row"]
    print(f"{sem:14s} {mode:12s} AP {row['ap']:.3f}  accuracy {row['accuracy']:.3f}  train {row['train_s']:.1f}s")
