"""Simulated annealing over integer (num_trees, mtry, min_node_size) triples."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .forest import DegenerateResponseError, ForestParams, OobCache

DIMENSIONS = ("num_trees", "mtry", "min_node_size")
TRACE_HEADER = ("eval", "num_trees", "mtry", "min_node_size", "error_pct", "accepted", "temperature")
MAX_REDRAWS = 5

Triple = tuple[int, int, int]


class ObjectiveError(RuntimeError):
    """The objective failed; ``params`` holds the triple being evaluated."""

    def __init__(self, params: Triple, cause: BaseException):
        super().__init__(f"objective failed at {params}: {cause}")
        self.params = params


@dataclass(frozen=True)
class SearchSpace:
    num_trees: tuple[int, int] = (10, 10000)
    mtry: tuple[int, int] = (1, 34)
    min_node_size: tuple[int, int] = (1, 50)

    def __post_init__(self):
        for name in DIMENSIONS:
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name}: lower bound {lo} > upper bound {hi}")
            if lo < 1:
                raise ValueError(f"{name}: bounds must be positive")

    @classmethod
    def for_width(cls, width: int, **bounds) -> "SearchSpace":
        return cls(**{"mtry": (1, width), **bounds})

    @property
    def bounds(self) -> tuple[tuple[int, int], ...]:
        return tuple(getattr(self, n) for n in DIMENSIONS)

    def fix(self, **values: int) -> "SearchSpace":
        for k in values:
            if k not in DIMENSIONS:
                raise ValueError(f"unknown dimension {k!r}")
        return replace(self, **{k: (int(v), int(v)) for k, v in values.items()})

    def contains(self, point) -> bool:
        return all(lo <= v <= hi for v, (lo, hi) in zip(point, self.bounds))

    def clamp(self, point) -> Triple:
        return tuple(min(max(int(v), lo), hi) for v, (lo, hi) in zip(point, self.bounds))

    @property
    def is_point(self) -> bool:
        return all(lo == hi for lo, hi in self.bounds)


@dataclass(frozen=True)
class Schedule:
    # None means 10% of the objective at the start point, at least 1.0
    initial_temperature: float | None = None
    cooling_factor: float = 0.85
    steps_per_temperature: int = 10
    # None means 1% of the initial temperature
    stop_temperature: float | None = None
    max_evaluations: int = 1000

    def __post_init__(self):
        if self.initial_temperature is not None and self.initial_temperature <= 0:
            raise ValueError("initial_temperature must be positive")
        if not 0 < self.cooling_factor < 1:
            raise ValueError("cooling_factor must be in (0, 1)")
        if self.steps_per_temperature < 1 or self.max_evaluations < 1:
            raise ValueError("steps_per_temperature and max_evaluations must be >= 1")
        if self.stop_temperature is not None:
            if self.stop_temperature <= 0:
                raise ValueError("stop_temperature must be positive")
            if self.initial_temperature is not None and self.stop_temperature >= self.initial_temperature:
                raise ValueError("stop_temperature must be below initial_temperature")

    def resolve(self, start_error: float) -> tuple[float, float]:
        t0 = self.initial_temperature
        if t0 is None:
            t0 = max(1.0, 0.1 * abs(start_error))
        stop = self.stop_temperature if self.stop_temperature is not None else 0.01 * t0
        if stop >= t0:
            raise ValueError("stop_temperature must be below the initial temperature")
        return t0, stop


@dataclass(frozen=True)
class TraceEntry:
    params: Triple
    error_pct: float
    accepted: bool
    temperature: float


@dataclass
class TuneTrace:
    entries: list[TraceEntry] = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def best(self) -> TraceEntry:
        # first minimum, so the earliest visit wins ties
        return min(self.entries, key=lambda e: e.error_pct)

    def prefix_minima(self) -> list[float]:
        out, m = [], math.inf
        for e in self.entries:
            m = min(m, e.error_pct)
            out.append(m)
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRACE_HEADER)
        for i, e in enumerate(self.entries):
            w.writerow([i, *e.params, repr(float(e.error_pct)), int(e.accepted), repr(float(e.temperature))])
        return buf.getvalue()

    def write(self, path) -> None:
        Path(path).write_text(self.to_csv())

    @classmethod
    def from_csv(cls, text: str) -> "TuneTrace":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or tuple(rows[0]) != TRACE_HEADER:
            raise ValueError("not a tune trace CSV")
        return cls([TraceEntry((int(r[1]), int(r[2]), int(r[3])), float(r[4]), r[5] == "1", float(r[6]))
                    for r in rows[1:]])


def _round_half_away(x: float) -> int:
    return int(math.copysign(math.floor(abs(x) + 0.5), x))


def propose(rng: np.random.Generator, current: Triple, space: SearchSpace, scale: float) -> Triple:
    """Perturb each free dimension by a uniform step in +-max(1, scale*range).

    The bound never drops below one unit, so narrow integer dimensions keep
    moving late in the schedule.  Proposals equal to ``current`` are redrawn
    up to ``MAX_REDRAWS`` times; the last draw is returned either way.
    """
    cand = current
    for _ in range(MAX_REDRAWS + 1):
        step = []
        for lo, hi in space.bounds:
            if lo == hi:
                step.append(0)
                continue
            bound = max(1.0, scale * (hi - lo))
            step.append(_round_half_away(rng.uniform(-bound, bound)))
        cand = space.clamp(c + s for c, s in zip(current, step))
        if cand != current:
            break
    return cand


def tune(objective: Callable[[Triple], float], space: SearchSpace, start, schedule: Schedule | None = None,
         seed: int = 0) -> tuple[Triple, TuneTrace]:
    """Minimize ``objective`` by simulated annealing; return the best triple and the trace."""
    schedule = schedule or Schedule()
    start = tuple(int(v) for v in start)
    if len(start) != 3 or not space.contains(start):
        raise ValueError(f"start {start} lies outside the search space")
    rng = np.random.default_rng(seed)
    memo: dict[Triple, float] = {}

    def evaluate(p: Triple) -> float:
        if p not in memo:
            try:
                memo[p] = float(objective(p))
            except Exception as exc:
                raise ObjectiveError(p, exc) from exc
        return memo[p]

    trace = TuneTrace()
    current, cur_err = start, evaluate(start)
    t0, stop = schedule.resolve(cur_err)
    temp = t0
    trace.entries.append(TraceEntry(current, cur_err, True, temp))
    if space.is_point:
        return current, trace

    while len(trace) < schedule.max_evaluations and temp >= stop:
        cand = propose(rng, current, space, temp / t0)
        err = evaluate(cand)
        delta = err - cur_err
        accepted = delta <= 0 or rng.random() < math.exp(-delta / temp)
        trace.entries.append(TraceEntry(cand, err, accepted, temp))
        if accepted:
            current, cur_err = cand, err
        if (len(trace) - 1) % schedule.steps_per_temperature == 0:
            temp *= schedule.cooling_factor
    return trace.best.params, trace


def tune_forest(data, start, schedule: Schedule | None = None, forest_seed: int = 0, sa_seed: int = 0,
                space: SearchSpace | None = None, fix: dict | None = None, trace_path=None,
                cache: OobCache | None = None, response: str = "log10") -> tuple[ForestParams, TuneTrace]:
    """Tune forest parameters against the OOB error on ``data``.

    ``cache`` lets several runs on the same data share grown trees.
    """
    cache = cache or OobCache(data, response=response, seed=forest_seed)
    if cache.degenerate:
        raise DegenerateResponseError("response has zero variance; OOB error is undefined")
    space = space or SearchSpace.for_width(cache.width)
    if fix:
        space = space.fix(**fix)
    best, trace = tune(lambda p: cache(*p), space, start, schedule, sa_seed)
    if trace_path is not None:
        trace.write(trace_path)
    return ForestParams(*best, seed=forest_seed), trace
