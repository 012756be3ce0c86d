from __future__ import annotations

import pytest

from deeplog.bench import BenchError, bench
from deeplog.tasks import addition_circuit


@pytest.fixture(scope="module")
def two_digit():
    return addition_circuit(2, "carry").circuit


def test_bench_rejects_bad_arguments(two_digit):
    with pytest.raises(BenchError, match="repetitions require nonempty batch"):
        bench(two_digit, [0])
    with pytest.raises(BenchError, match="repetitions require nonempty batch"):
        bench(two_digit, [])
    with pytest.raises(BenchError):
        bench(two_digit, [4], repetitions=0)
    with pytest.raises(BenchError):
        bench(two_digit, [4], evaluators=("gpu",))


def test_report_fields(two_digit):
    rep = bench(two_digit, [8], repetitions=3)
    row = rep.row("layered", 8)
    assert row.q1 <= row.median <= row.q3 and row.per_query == row.median / 8
    assert rep.speedup(8) > 1.0
    assert {d["evaluator"] for d in rep.as_dicts()} == {"naive", "layered"}


def test_layered_per_query_time_decreases_with_batch(two_digit):
    rep = bench(two_digit, [1, 16, 256], repetitions=10, evaluators=("layered",))
    t = [rep.row("layered", b).per_query for b in (1, 16, 256)]
    inversions = sum(t[i + 1] >= t[i] for i in range(len(t) - 1))
    assert inversions <= 1 and t[-1] < t[0]
