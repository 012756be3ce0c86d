"""Inference timing: layered batched evaluation against the naive recursive baseline.

Both evaluators receive the same precomputed leaf matrix, so the timings
cover circuit evaluation only (no compilation, no neural leaves).
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .circuit import Batch, Circuit, Labeller, eval_layers, eval_naive, layerize

__all__ = ["BenchError", "BenchRow", "BenchReport", "bench", "leaf_matrix_for"]

EVALUATORS = ("naive", "layered")


class BenchError(ValueError):
    pass


@dataclass
class BenchRow:
    evaluator: str
    batch: int
    repetitions: int
    median: float
    q1: float
    q3: float

    @property
    def per_query(self) -> float:
        return self.median / self.batch

    def as_dict(self) -> dict:
        return {"evaluator": self.evaluator, "batch": self.batch, "repetitions": self.repetitions,
                "median_s": self.median, "q1_s": self.q1, "q3_s": self.q3, "per_query_s": self.per_query}


@dataclass
class BenchReport:
    circuit_nodes: int
    rows: list[BenchRow] = field(default_factory=list)

    def row(self, evaluator: str, batch: int) -> BenchRow:
        for r in self.rows:
            if r.evaluator == evaluator and r.batch == batch:
                return r
        raise KeyError((evaluator, batch))

    def speedup(self, batch: int) -> float:
        return self.row("naive", batch).per_query / self.row("layered", batch).per_query

    def as_dicts(self) -> list[dict]:
        return [dict(r.as_dict(), circuit_nodes=self.circuit_nodes) for r in self.rows]


def leaf_matrix_for(c: Circuit, batch: int, seed: int = 0, labeller: Labeller | None = None,
                    data: Batch | None = None) -> np.ndarray:
    """Leaf values ``(leaves, batch)``: from a labeller and batch, or uniform draws."""
    if labeller is not None and data is not None:
        m, _ = labeller.plan(c).values(labeller, data)
        return m
    rng = np.random.default_rng(seed)
    return rng.random((len(c.leaf_nodes), batch))


def _quartiles(ts: Sequence[float]) -> tuple[float, float, float]:
    q1, med, q3 = np.percentile(np.asarray(ts), [25, 50, 75])
    return float(med), float(q1), float(q3)


def bench(c: Circuit, batch_sizes: Sequence[int] = (128,), repetitions: int = 10, seed: int = 0,
          evaluators: Sequence[str] = EVALUATORS, warmup: int = 1) -> BenchReport:
    """Median and quartile wall time per evaluator and batch size over ``repetitions`` runs."""
    if repetitions < 1:
        raise BenchError("repetitions must be >= 1")
    if not batch_sizes or any(b < 1 for b in batch_sizes):
        raise BenchError("repetitions require nonempty batch")
    for e in evaluators:
        if e not in EVALUATORS:
            raise BenchError(f"unknown evaluator {e!r}; expected one of {EVALUATORS}")
    lay = layerize(c)
    report = BenchReport(len(c))
    for B in batch_sizes:
        leaves = leaf_matrix_for(c, B, seed)
        for e in evaluators:
            if e == "layered":
                def run():
                    eval_layers(c, lay, leaves)
            else:
                def run():
                    eval_naive(c, leaves)
            for _ in range(warmup if e == "layered" else 0):
                run()
            ts = []
            for _ in range(repetitions):
                t = time.perf_counter()
                run()
                ts.append(time.perf_counter() - t)
            med, q1, q3 = _quartiles(ts)
            report.rows.append(BenchRow(e, B, repetitions, med, q1, q3))
    return report
