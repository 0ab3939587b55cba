"""Parameter scans, leave-one-kernel-out tuning, learning curves and evaluation.

Every function is a pure function of its dataset, configuration and seed.
Work that fans out over ``jobs`` threads is reassembled in canonical order.
"""

from __future__ import annotations

import csv
import io
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .dataset import Dataset
from .forest import ForestParams, OobCache, fit
from .seeding import derive
from .tuner import Schedule, SearchSpace, TuneTrace, tune, tune_forest

log = logging.getLogger(__name__)

# desk-scale defaults; see README for the full-scale settings
HEATMAP_NUM_TREES = (1, 500)
HEATMAP_SCHEDULE = Schedule(max_evaluations=200)
LOKO_START = (50, 32, 9)
LOKO_NUM_TREES = (10, 100)
LOKO_SCHEDULE = Schedule(max_evaluations=12)
LEARNING_CURVE_PARAMS = (30, 30, 9)
LEARNING_CURVE_SAMPLES = 50
EVALUATE_PARAMS = (100, 30, 9)

FULL_SCALE = {
    "heatmap_num_trees": (1, 10000),
    "heatmap_schedule": Schedule(max_evaluations=1000),
    "loko_start": (500, 32, 9),
    "loko_num_trees": (10, 10000),
    "loko_schedule": Schedule(),
    "learning_curve_params": (505, 30, 9),
    "learning_curve_samples": 500,
    "evaluate_params": (505, 30, 9),
}


def _map(fn, items, jobs: int):
    items = list(items)
    if jobs <= 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _csv(header, rows, preamble: Sequence[str] = ()) -> str:
    buf = io.StringIO()
    for line in preamble:
        buf.write(f"# {line}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_cell(v) for v in r])
    return buf.getvalue()


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.9g}"
    return v


# ---------------------------------------------------------------------------
# min.node.size scan

@dataclass
class MinNodeScan:
    points: list[tuple[int, float]]
    num_trees: int
    mtry: int

    def to_csv(self) -> str:
        return _csv(("min_node_size", "error_pct"), self.points,
                    [f"num_trees={self.num_trees} mtry={self.mtry}"])


def min_node_scan(data: Dataset, num_trees: int = 300, mtry: int = 30, values=range(1, 51),
                  seed: int = 0, jobs: int = 1) -> MinNodeScan:
    cache = OobCache(data, seed=derive(seed, "forest"))
    values = list(values)
    if mtry > cache.width:
        raise ValueError(f"mtry {mtry} exceeds the {cache.width} predictor columns")

    # curves for distinct min_node_size values are independent objects
    def one(m):
        return m, cache(num_trees, mtry, m)

    return MinNodeScan(_map(one, values, jobs), num_trees, mtry)


# ---------------------------------------------------------------------------
# multi-start heatmap

@dataclass
class Heatmap:
    traces: list[TuneTrace]
    starts: list[tuple[int, int, int]]
    min_node_size: int

    def cells(self) -> list[tuple[int, int, float, int]]:
        """(num_trees, mtry, mean error, visits) with duplicate cells averaged."""
        acc: dict[tuple[int, int], list[float]] = {}
        for tr in self.traces:
            for e in tr:
                acc.setdefault(e.params[:2], []).append(e.error_pct)
        return [(nt, m, float(np.mean(v)), len(v)) for (nt, m), v in sorted(acc.items())]

    def points(self) -> list[tuple[int, int, float]]:
        return [(e.params[0], e.params[1], e.error_pct) for tr in self.traces for e in tr]

    def to_csv(self) -> str:
        return _csv(("num_trees", "mtry", "error_pct", "visits"), self.cells(),
                    [f"min_node_size={self.min_node_size}"])

    def traces_csv(self) -> str:
        rows = [(c, i, *e.params, e.error_pct, int(e.accepted), e.temperature)
                for c, tr in enumerate(self.traces) for i, e in enumerate(tr)]
        return _csv(("chain", "eval", "num_trees", "mtry", "min_node_size", "error_pct", "accepted",
                     "temperature"), rows)


def heatmap_starts(space: SearchSpace, seed: int, interior: int = 8) -> list[tuple[int, int, int]]:
    """The four (num_trees, mtry) corners followed by ``interior`` random points."""
    (nlo, nhi), (mlo, mhi), (c, _) = space.bounds
    starts = [(nlo, mlo, c), (nlo, mhi, c), (nhi, mlo, c), (nhi, mhi, c)]
    rng = np.random.default_rng(derive(seed, "heatmap-starts"))
    for _ in range(interior):
        starts.append((int(rng.integers(nlo, nhi + 1)), int(rng.integers(mlo, mhi + 1)), c))
    return starts


def heatmap_scan(data: Dataset, schedule: Schedule = HEATMAP_SCHEDULE, seed: int = 0,
                 num_trees: tuple[int, int] = HEATMAP_NUM_TREES, min_node_size: int = 9,
                 starts=None) -> Heatmap:
    cache = OobCache(data, seed=derive(seed, "forest"))
    space = SearchSpace.for_width(cache.width, num_trees=num_trees).fix(min_node_size=min_node_size)
    starts = list(starts) if starts is not None else heatmap_starts(space, seed)
    traces = []
    # chains share one cache, so they run in sequence
    for c, start in enumerate(starts):
        _, tr = tune(lambda p: cache(*p), space, start, schedule, derive(seed, "sa", c))
        traces.append(tr)
    return Heatmap(traces, starts, min_node_size)


# ---------------------------------------------------------------------------
# leave-one-kernel-out

@dataclass(frozen=True)
class LokoRow:
    kernel_omitted: str
    num_trees: int
    mtry: int
    min_node_size: int
    error_pct: float


@dataclass
class LokoResult:
    rows: list[LokoRow]

    @property
    def medians(self) -> dict[str, float]:
        cols = ("num_trees", "mtry", "min_node_size", "error_pct")
        return {c: float(np.median([getattr(r, c) for r in self.rows])) for c in cols}

    def selected(self, seed: int = 0) -> ForestParams:
        """Median parameters, rounded half up."""
        m = self.medians
        return ForestParams(*(int(np.floor(m[c] + 0.5)) for c in ("num_trees", "mtry", "min_node_size")),
                            seed=seed)

    @property
    def error_iqr(self) -> float:
        q1, q3 = np.percentile([r.error_pct for r in self.rows], [25, 75])
        return float(q3 - q1)

    def to_csv(self) -> str:
        rows = [(r.kernel_omitted, r.num_trees, r.mtry, r.min_node_size, r.error_pct) for r in self.rows]
        m = self.medians
        rows.append(("median", m["num_trees"], m["mtry"], m["min_node_size"], m["error_pct"]))
        return _csv(("kernel_omitted", "num_trees", "mtry", "min_node_size", "error_pct"), rows)


def loko(data: Dataset, start=LOKO_START, schedule: Schedule = LOKO_SCHEDULE, seed: int = 0,
         num_trees: tuple[int, int] = LOKO_NUM_TREES, min_node_size: int = 9, jobs: int = 1,
         kernels=None) -> LokoResult:
    kernels = list(kernels) if kernels is not None else list(data.kernels)
    if len(data.kernels) < 2:
        raise ValueError("leave-one-kernel-out needs at least 2 kernels")
    start = (start[0], start[1], min_node_size)
    forest_seed = derive(seed, "forest")

    def one(k):
        sub = data.without_kernels([k])
        space = SearchSpace.for_width(len(sub.feature_names) + len(sub.devices), num_trees=num_trees)
        best, trace = tune_forest(sub, start, schedule, forest_seed=forest_seed,
                                  sa_seed=derive(seed, "sa", k), space=space,
                                  fix={"min_node_size": min_node_size})
        return LokoRow(k, best.num_trees, best.mtry, best.min_node_size, trace.best.error_pct)

    return LokoResult(_map(one, kernels, jobs))


# ---------------------------------------------------------------------------
# learning curve

@dataclass(frozen=True)
class LearningCurvePoint:
    kernel_count: int
    mean_absolute_error: float | None  # None: no kernels left to test on
    samples_used: int


@dataclass
class LearningCurve:
    points: list[LearningCurvePoint]
    samples: int
    response: str = "log10"

    def mae(self, i: int) -> float | None:
        return self.points[i - 1].mean_absolute_error

    def to_csv(self) -> str:
        rows = [(p.kernel_count, "empty" if p.mean_absolute_error is None else p.mean_absolute_error,
                 p.samples_used) for p in self.points]
        return _csv(("kernel_count", "mean_absolute_error", "samples_used"), rows,
                    [f"response={self.response}(seconds) samples_requested={self.samples}"])


def learning_curve(data: Dataset, s: int = LEARNING_CURVE_SAMPLES,
                   params: ForestParams | tuple = LEARNING_CURVE_PARAMS, seed: int = 0,
                   jobs: int = 1, response: str = "log10") -> LearningCurve:
    """MAE of predicting unseen kernels from the first ``i`` of a shuffle.

    Predicted and measured responses are pooled over the shuffles of each
    ``i``.  Shuffles that pick an already-seen kernel subset are skipped, so
    ``samples_used`` counts distinct subsets.
    """
    if s < 1:
        raise ValueError("s must be >= 1")
    if not isinstance(params, ForestParams):
        params = ForestParams(*params, seed=derive(seed, "forest"))
    kernels = np.array(data.kernels)
    k = len(kernels)
    width = len(data.feature_names) + len(data.devices)
    params = ForestParams(params.num_trees, min(params.mtry, width), params.min_node_size, params.seed)

    tasks = []
    for i in range(1, k + 1):
        rng = np.random.default_rng(derive(seed, "shuffle", i))
        seen = []
        for _ in range(s):
            subset = frozenset(kernels[rng.permutation(k)][:i])
            if subset not in seen:
                seen.append(subset)
        tasks.append((i, seen))

    def run(subset):
        train = data.with_kernels(subset)
        test = data.without_kernels(subset)
        if len(test) == 0:
            return None
        forest = fit(train, params, response=response)
        pred = forest.predict_response(test.predictors(forest.devices))
        return np.abs(pred - test.response(response))

    flat = [sub for _, subs in tasks for sub in subs]
    errors = _map(run, flat, jobs)
    points = []
    pos = 0
    for i, subs in tasks:
        errs = [e for e in errors[pos:pos + len(subs)] if e is not None]
        pos += len(subs)
        if not errs:
            points.append(LearningCurvePoint(i, None, 0))
        else:
            points.append(LearningCurvePoint(i, float(np.mean(np.concatenate(errs))), len(errs)))
        log.info("learning curve i=%d samples_used=%d", i, points[-1].samples_used)
    return LearningCurve(points, s, response)


# ---------------------------------------------------------------------------
# hold-one-kernel-out evaluation

Predictor = Callable[[Dataset, Dataset], np.ndarray]


@dataclass
class RankReport:
    # (kernel, size) -> [(device, mean measured s, mean predicted s)]
    cells: dict[tuple[str, str], list[tuple[str, float, float]]] = field(default_factory=dict)

    @property
    def pair_counts(self) -> tuple[int, int]:
        agree = total = 0
        for entries in self.cells.values():
            for (_, m1, p1), (_, m2, p2) in combinations(entries, 2):
                total += 1
                agree += np.sign(m1 - m2) == np.sign(p1 - p2)
        return int(agree), total

    @property
    def accuracy(self) -> float:
        agree, total = self.pair_counts
        return agree / total if total else 1.0

    def fastest_correct(self) -> float:
        """Fraction of (kernel, size) cells whose predicted fastest device is the measured one."""
        hits = [min(e, key=lambda r: r[2])[0] == min(e, key=lambda r: r[1])[0] for e in self.cells.values()]
        return float(np.mean(hits)) if hits else 1.0

    def to_csv(self) -> str:
        rows = []
        for (kernel, size), entries in self.cells.items():
            order = sorted(entries, key=lambda r: (r[2], r[0]))
            for rank, (d, m, p) in enumerate(order, start=1):
                rows.append((kernel, size, d, m, p, rank))
        agree, total = self.pair_counts
        return _csv(("kernel", "size", "device", "mean_measured_s", "mean_predicted_s", "predicted_rank"),
                    rows, [f"pairwise_accuracy={self.accuracy:.9g} pairs={total} agreeing={agree}"])


@dataclass
class Evaluation:
    data: Dataset
    predicted: np.ndarray  # seconds, aligned with data rows

    def predictions_csv(self) -> str:
        rows = [(k.kernel, k.application, k.size, k.device, t, p)
                for k, t, p in zip(self.data.keys, self.data.times, self.predicted)]
        return _csv(("kernel", "application", "size", "device", "measured_s", "predicted_s"), rows)

    def cell_errors(self) -> list[tuple[str, str, str, float]]:
        """100 * |mean predicted - mean measured| / mean measured per (kernel, size, device)."""
        acc: dict = {}
        for k, t, p in zip(self.data.keys, self.data.times, self.predicted):
            acc.setdefault((k.kernel, k.size, k.device), []).append((t, p))
        out = []
        for key, v in acc.items():
            m = float(np.mean([a for a, _ in v]))
            p = float(np.mean([b for _, b in v]))
            out.append((*key, 100.0 * abs(p - m) / m))
        return out

    @property
    def mean_cell_error(self) -> float:
        return float(np.mean([c[3] for c in self.cell_errors()]))

    def heatmap_csv(self) -> str:
        return _csv(("kernel", "size", "device", "error_pct"), self.cell_errors(),
                    [f"mean_error_pct={self.mean_cell_error:.9g}"])

    def rank_report(self) -> RankReport:
        cells: dict = {}
        for k, t, p in zip(self.data.keys, self.data.times, self.predicted):
            cells.setdefault((k.kernel, k.size), []).append((k.device, float(t), float(p)))
        return RankReport(cells)


def forest_predictor(params: ForestParams, response: str = "log10") -> Predictor:
    def predict(train: Dataset, test: Dataset) -> np.ndarray:
        return fit(train, params, response=response).predict(test)
    return predict


def evaluate(data: Dataset, params: ForestParams | tuple = EVALUATE_PARAMS, seed: int = 0,
             predictor: Predictor | None = None, jobs: int = 1) -> Evaluation:
    """Predict every kernel's rows from a model trained on the other kernels."""
    if len(data.devices) < 2:
        raise ValueError("evaluation needs at least 2 devices")
    if predictor is None:
        if not isinstance(params, ForestParams):
            params = ForestParams(*params, seed=derive(seed, "forest"))
        predictor = forest_predictor(params)

    def one(kernel):
        test = data.with_kernels([kernel])
        return kernel, np.asarray(predictor(data.without_kernels([kernel]), test), dtype=float)

    predicted = np.empty(len(data))
    kcol = data.kernel_column
    for kernel, pred in _map(one, data.kernels, jobs):
        predicted[kcol == kernel] = pred
    return Evaluation(data, predicted)


# ---------------------------------------------------------------------------
# SVG output

def svg_plot(series: dict[str, list[tuple[float, float]]], title: str, xlabel: str, ylabel: str,
             kind: str = "line", logscale: bool = False, width: int = 480, height: int = 320) -> str:
    """A minimal line or scatter plot; enough to eyeball a curve."""
    pts = [(x, y) for s in series.values() for x, y in s if y is not None]
    if logscale:
        pts = [(np.log10(x), np.log10(y)) for x, y in pts if x > 0 and y > 0]
    margin = 48
    if pts:
        xs, ys = zip(*pts)
        x0, x1, y0, y1 = min(xs), max(xs), min(ys), max(ys)
    else:
        x0, x1, y0, y1 = 0.0, 1.0, 0.0, 1.0
    x1 = x1 if x1 > x0 else x0 + 1
    y1 = y1 if y1 > y0 else y0 + 1

    def sx(x):
        return margin + (x - x0) / (x1 - x0) * (width - 2 * margin)

    def sy(y):
        return height - margin - (y - y0) / (y1 - y0) * (height - 2 * margin)

    colours = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e")
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" font-size="14">{_esc(title)}</text>',
           f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" y2="{height - margin}" stroke="black"/>',
           f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{height - margin}" stroke="black"/>',
           f'<text x="{width / 2:.1f}" y="{height - 10}" text-anchor="middle" font-size="12">{_esc(xlabel)}</text>',
           f'<text x="14" y="{height / 2:.1f}" text-anchor="middle" font-size="12" '
           f'transform="rotate(-90 14 {height / 2:.1f})">{_esc(ylabel)}</text>',
           f'<text x="{margin}" y="{height - margin + 14}" font-size="10">{x0:.3g}</text>',
           f'<text x="{width - margin}" y="{height - margin + 14}" font-size="10" text-anchor="end">{x1:.3g}</text>',
           f'<text x="{margin - 4}" y="{height - margin}" font-size="10" text-anchor="end">{y0:.3g}</text>',
           f'<text x="{margin - 4}" y="{margin + 4}" font-size="10" text-anchor="end">{y1:.3g}</text>']
    for c, (name, s) in enumerate(series.items()):
        colour = colours[c % len(colours)]
        s = [(x, y) for x, y in s if y is not None]
        if logscale:
            s = [(np.log10(x), np.log10(y)) for x, y in s if x > 0 and y > 0]
        if kind == "line" and len(s) > 1:
            path = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in s)
            out.append(f'<polyline fill="none" stroke="{colour}" points="{path}"/>')
        else:
            out.extend(f'<circle cx="{sx(x):.2f}" cy="{sy(y):.2f}" r="2" fill="{colour}"/>' for x, y in s)
        out.append(f'<text x="{width - margin}" y="{margin + 14 * c}" font-size="10" text-anchor="end" '
                   f'fill="{colour}">{_esc(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _esc(text: str) -> str:
    return text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def write_text(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path
