"""Acceptance criteria 1-9, each at its stated tolerance and time limit.

Run ``pytest tests/test_acceptance.py -v``; the terminal summary prints one
PASS/FAIL line per criterion.  The directional checks (5-8) run the
desk-scale experiment defaults on the bundled 37-kernel synthetic sample.
"""

import math
import time
from fractions import Fraction
from itertools import combinations_with_replacement

import numpy as np
import pytest

from aiwcpred import experiments as ex
from aiwcpred.characterizer import HistogramSummary, characterize, check_invariants, coverage_90, shannon_entropy
from aiwcpred.cli import main
from aiwcpred.forest import ForestParams, fit, oob_predictions
from aiwcpred.microkernel import Event, Kind, NDRange, Trace, execute, parse_kernel
from aiwcpred.seeding import derive
from aiwcpred.tuner import Schedule, SearchSpace, tune

from .helpers import (KERNEL_DIR, coverage_oracle, entropy_oracle, random_event_trace, random_kernel_source,
                      step_dataset)

criterion = pytest.mark.criterion
_loko = {}


class Timer:
    def __init__(self, limit):
        self.limit = limit

    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.start
        if exc[0] is None:
            assert self.elapsed < self.limit, f"took {self.elapsed:.1f}s, limit {self.limit}s"


@criterion(1, "entropy oracles: 1000 histograms to 1e-12; GMAE of n distinct addresses = log2 n")
def test_criterion_1_entropy_oracles():
    rng = np.random.default_rng(1)
    with Timer(5):
        for _ in range(1000):
            counts = rng.integers(1, 10_000, int(rng.integers(1, 60))).tolist()
            hist = HistogramSummary(dict(enumerate(counts)))
            assert abs(shannon_entropy(hist) - entropy_oracle(counts)) <= 1e-12, counts
        for k in range(11):
            n = 2 ** k
            events = [Event((0, 0, 0), Kind.MEM, "LOAD", 1, address=4096 + 4 * a) for a in range(n)]
            fv = characterize(Trace.from_events(events + [Event((0, 0, 0), Kind.OP, "HALT", 1)]))
            assert fv.global_memory_address_entropy == math.log2(n) == k


def _coverage_reference(counts):
    if len(counts) <= 8:
        return coverage_oracle(counts)
    # past eight items, the exact prefix rule: smallest k whose top-k share reaches 9/10
    top, total = sorted(counts, reverse=True), sum(counts)
    return next(k for k in range(1, len(top) + 1) if Fraction(sum(top[:k]), total) >= Fraction(9, 10))


@criterion(2, "characterizer invariants on 500 fuzzed traces; coverage_90 minimal on all histograms <= 8 items")
def test_criterion_2_invariants_on_fuzzed_traces():
    rng = np.random.default_rng(2)
    with Timer(30):
        for counts in (c for n in range(1, 9) for c in combinations_with_replacement(range(1, 6), n)):
            assert coverage_90(HistogramSummary(dict(enumerate(counts)))) == coverage_oracle(counts)
        for i in range(500):
            if i % 2:
                trace = random_event_trace(rng)
            else:
                kernel = parse_kernel(random_kernel_source(rng))
                trace = execute(kernel, NDRange((int(rng.integers(1, 5)), int(rng.integers(1, 3)), 1)))
            fv = characterize(trace)
            assert check_invariants(fv) == [], (i, check_invariants(fv))
            lmae = fv.local_entropies
            assert all(b <= a + 1e-12 for a, b in zip(lmae, lmae[1:]))
            assert fv.min_itb <= fv.median_itb <= fv.max_itb
            opcodes = HistogramSummary.of(e.opcode for e in trace.events)
            assert fv.opcode_diversity_90 == _coverage_reference(list(opcodes.counts.values()))


@criterion(3, "forest oracle: step OOB MAE < 0.01; single-leaf OOB error 100 +/- 15%; byte-identical models")
def test_criterion_3_forest_oracle(bundled, tmp_path):
    with Timer(20):
        ds, step = step_dataset()
        f = fit(ds, ForestParams(50, ds.features.shape[1] + 1, 1, seed=0))
        oob = oob_predictions(f, ds.predictors())
        used = ~np.isnan(oob)
        assert np.mean(np.abs(oob[used] - step[used])) < 0.01

        rows = np.sort(np.random.default_rng(5).choice(len(bundled), 500, replace=False))
        five_hundred = bundled.take(rows)
        leaf = fit(five_hundred, ForestParams(100, 1, min_node_size=500, seed=4))
        assert 85.0 <= leaf.oob_error_pct <= 115.0

        params = ForestParams(50, 30, 9, seed=7)
        fit(five_hundred, params).save(tmp_path / "a.aiwcf")
        fit(five_hundred, params).save(tmp_path / "b.aiwcf")
        assert (tmp_path / "a.aiwcf").read_bytes() == (tmp_path / "b.aiwcf").read_bytes()


@criterion(4, "tuner: convex objective optimum within L-inf 2 in >= 95/100 seeds, 500 evaluations")
def test_criterion_4_tuner_convex():
    optimum = (500, 30, 9)

    def objective(p):
        return sum((a - b) ** 2 for a, b in zip(p, optimum))

    space = SearchSpace()
    schedule = Schedule(initial_temperature=1000.0, cooling_factor=0.8, stop_temperature=1e-6,
                        max_evaluations=500)
    hits = 0
    with Timer(60):
        for seed in range(100):
            rng = np.random.default_rng(10_000 + seed)
            start = tuple(int(rng.integers(lo, hi + 1)) for lo, hi in space.bounds)
            best, trace = tune(objective, space, start, schedule, seed)
            assert len(trace) <= 500
            hits += max(abs(a - b) for a, b in zip(best, optimum)) <= 2
    assert hits >= 95, f"{hits}/100 seeds"


@criterion(5, "heatmap: (1, 1) cell has the maximum error; mean error mtry >= 25 below mtry < 5")
def test_criterion_5_heatmap(bundled):
    with Timer(300):
        hm = ex.heatmap_scan(bundled, seed=0)
    cells = {(nt, m): err for nt, m, err, _ in hm.cells()}
    assert cells[(1, 1)] == max(cells.values())
    high = [e for (_, m), e in cells.items() if m >= 25]
    low = [e for (_, m), e in cells.items() if m < 5]
    assert high and low
    assert np.mean(high) < np.mean(low)


@criterion(6, "learning curve (s = 50): MAE at i = 30 below i = 5; maximum at i = 1")
def test_criterion_6_learning_curve(bundled):
    with Timer(300):
        lc = ex.learning_curve(bundled, s=50, seed=0)
    maes = {p.kernel_count: p.mean_absolute_error for p in lc.points if p.mean_absolute_error is not None}
    assert len(bundled.kernels) == 37 and 37 not in maes
    assert maes[30] < maes[5]
    assert max(maes, key=maes.get) == 1


def _loko_result(bundled):
    if "result" not in _loko:
        _loko["result"] = ex.loko(bundled, seed=0)
    return _loko["result"]


@criterion(7, "LOKO: interquartile range of per-omission OOB errors <= 2 percentage points")
def test_criterion_7_loko_stability(bundled):
    with Timer(300):
        res = _loko_result(bundled)
    assert len(res.rows) == 37
    assert res.error_iqr <= 2.0, res.error_iqr


@criterion(8, "ranking: hold-one-kernel-out pairwise device-order accuracy >= 0.95 with tuned params")
def test_criterion_8_ranking(bundled):
    params = _loko_result(bundled).selected(seed=derive(0, "forest"))
    with Timer(120):
        report = ex.evaluate(bundled, params).rank_report()
    assert report.accuracy >= 0.95, report.accuracy


def _pipeline(root):
    data = root / "data"
    assert main(["--seed", "42", "experiment", "synth", "--out-dir", str(data)]) == 0
    features = root / "kernels.csv"
    for name in ("vector_add", "reduce_sum", "stencil2d", "branchy", "matmul"):
        assert main(["characterize", str(KERNEL_DIR / f"{name}.mk"), "--global", "16,4,1", "--local", "4,2,1",
                     "--output", str(features)]) == 0
    files = ["--features", str(data / "features.csv"), "--runtimes", str(data / "runtimes.csv")]
    assert main(["--seed", "42", "train", *files, "--model", str(root / "model.aiwcf")]) == 0
    assert main(["--seed", "42", "experiment", "evaluate", *files, "--out-dir", str(root / "eval")]) == 0
    for row in range(5):
        with open(root / "ranks.txt", "a") as out:
            assert main(["rank", "--model", str(root / "model.aiwcf"), "--features", str(features),
                         "--row", str(row)], out=out) == 0
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@criterion(9, "pipeline synth -> characterize -> train -> evaluate twice gives byte-identical artifacts")
def test_criterion_9_reproducible_pipeline(tmp_path):
    with Timer(120):
        first = _pipeline(tmp_path / "first")
        second = _pipeline(tmp_path / "second")
    assert len(first) == 10
    assert first == second
