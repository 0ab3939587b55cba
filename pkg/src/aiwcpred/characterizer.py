"""Architecture-independent workload features computed from a kernel trace."""

from __future__ import annotations

import math
import statistics
from collections import Counter
from dataclasses import astuple, dataclass, fields
from typing import Hashable, Iterable

from .microkernel.trace import Kind, Trace

DEFAULT_HISTORY = 8
MAX_HISTORY = 24
LOCAL_ENTROPY_LEVELS = tuple(range(1, 11))


class CharacterizationError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureVector:
    opcode_diversity_90: int
    total_instruction_count: int
    work_items: int
    total_barriers_hit: int
    min_itb: int
    max_itb: int
    median_itb: float
    max_simd_width: int
    mean_simd_width: float
    sd_simd_width: float
    total_memory_footprint: int
    ninety_memory_footprint: int
    global_memory_address_entropy: float
    local_memory_address_entropy_1: float
    local_memory_address_entropy_2: float
    local_memory_address_entropy_3: float
    local_memory_address_entropy_4: float
    local_memory_address_entropy_5: float
    local_memory_address_entropy_6: float
    local_memory_address_entropy_7: float
    local_memory_address_entropy_8: float
    local_memory_address_entropy_9: float
    local_memory_address_entropy_10: float
    total_unique_branch_instructions: int
    ninety_branch_instructions: int
    yokota_branch_entropy: float
    average_linear_branch_entropy: float

    def as_list(self) -> list[float]:
        return list(astuple(self))

    def as_dict(self) -> dict[str, float]:
        return dict(zip(FEATURE_NAMES, astuple(self)))

    @classmethod
    def from_values(cls, values: Iterable[float]) -> "FeatureVector":
        values = list(values)
        if len(values) != FEATURE_COUNT:
            raise ValueError(f"expected {FEATURE_COUNT} feature values, got {len(values)}")
        return cls(*values)

    @property
    def local_entropies(self) -> list[float]:
        return [getattr(self, f"local_memory_address_entropy_{n}") for n in LOCAL_ENTROPY_LEVELS]


FEATURE_NAMES: tuple[str, ...] = tuple(f.name for f in fields(FeatureVector))
FEATURE_COUNT = len(FEATURE_NAMES)


@dataclass(frozen=True)
class HistogramSummary:
    counts: dict

    @classmethod
    def of(cls, items: Iterable[Hashable]) -> "HistogramSummary":
        return cls(dict(Counter(items)))

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def __len__(self):
        return len(self.counts)


def coverage_90(hist: HistogramSummary) -> int:
    """Fewest most-frequent items accounting for at least 90% of the total."""
    if not hist.counts:
        return 0
    total = hist.total
    ranked = sorted(hist.counts.items(), key=lambda kv: (-kv[1], kv[0]))
    covered = 0
    for n, (_, c) in enumerate(ranked, start=1):
        covered += c
        # integer form of covered >= 0.9 * total
        if 10 * covered >= 9 * total:
            return n
    return len(ranked)


def shannon_entropy(hist: HistogramSummary) -> float:
    total = hist.total
    if total == 0:
        return 0.0
    h = 0.0
    # sorted so the sum does not depend on insertion order
    for c in sorted(hist.counts.values()):
        p = c / total
        h -= p * math.log2(p)
    return h if h > 0.0 else 0.0


def local_entropy(addresses: Iterable[int], skip_bits: int) -> float:
    if not 1 <= skip_bits <= 10:
        raise ValueError("skip_bits must be in 1..10")
    return shannon_entropy(HistogramSummary.of(a >> skip_bits for a in addresses))


def itb_stats(trace: Trace) -> tuple[int, int, float, int]:
    """Instructions-to-barrier statistics: (min, max, median, total barriers).

    Segments are split at barriers per work-item; the trailing segment up to
    HALT counts, and neither the barrier nor HALT is counted as an
    instruction of a segment.
    """
    segments: list[int] = []
    barriers = 0
    for _, block in trace.by_work_item():
        run = 0
        for e in block:
            if e.kind is Kind.BARRIER:
                segments.append(run)
                barriers += 1
                run = 0
            elif e.opcode != "HALT":
                run += 1
        segments.append(run)
    if not segments:
        return 0, 0, 0.0, 0
    return min(segments), max(segments), float(statistics.median(segments)), barriers


def branch_entropies(trace: Trace, history_length: int = DEFAULT_HISTORY) -> tuple[float, float, int, int]:
    """(yokota entropy, average linear branch entropy, unique sites, 90% sites).

    Each work-item keeps a global history register of its last
    ``history_length`` outcomes, starting all-zero.  Pattern outcome counts
    are pooled across work-items, and the per-pattern binary entropies are
    weighted by how often each pattern occurred.
    """
    if not 1 <= history_length <= MAX_HISTORY:
        raise ValueError(f"history_length must be in 1..{MAX_HISTORY}")
    mask = (1 << history_length) - 1
    seen: Counter = Counter()
    taken: Counter = Counter()
    sites: Counter = Counter()
    for _, block in trace.by_work_item():
        hist = 0
        for e in block:
            if e.kind is not Kind.BRANCH:
                continue
            sites[e.branch_site] += 1
            seen[hist] += 1
            if e.taken:
                taken[hist] += 1
            hist = ((hist << 1) | int(bool(e.taken))) & mask
    total = sum(seen.values())
    if total == 0:
        return 0.0, 0.0, 0, 0
    yokota = 0.0
    linear = 0.0
    for pattern, n in sorted(seen.items()):
        p = taken[pattern] / n
        w = n / total
        yokota += w * _binary_entropy(p)
        linear += w * 2.0 * min(p, 1.0 - p)
    return yokota, linear, len(sites), coverage_90(HistogramSummary(dict(sites)))


def _binary_entropy(p: float) -> float:
    if p <= 0.0 or p >= 1.0:
        return 0.0
    return -p * math.log2(p) - (1.0 - p) * math.log2(1.0 - p)


def characterize(trace: Trace, history_length: int = DEFAULT_HISTORY) -> FeatureVector:
    if not trace.events:
        raise CharacterizationError("empty trace: nothing to characterize")
    opcodes = HistogramSummary.of(e.opcode for e in trace.events)
    widths = [e.width for e in trace.events if e.kind is Kind.OP and e.opcode != "HALT"]
    addresses = [e.address for e in trace.events if e.kind is Kind.MEM]
    addr_hist = HistogramSummary.of(addresses)
    min_itb, max_itb, median_itb, barriers = itb_stats(trace)
    yokota, linear, unique_sites, sites_90 = branch_entropies(trace, history_length)

    if widths:
        max_w = max(widths)
        mean_w = statistics.fmean(widths)
        sd_w = statistics.pstdev(widths, mu=mean_w) if len(widths) > 1 else 0.0
    else:
        max_w, mean_w, sd_w = 0, 0.0, 0.0

    return FeatureVector(
        coverage_90(opcodes),
        len(trace.events),
        trace.work_item_count,
        barriers,
        min_itb,
        max_itb,
        median_itb,
        max_w,
        mean_w,
        sd_w,
        len(addr_hist),
        coverage_90(addr_hist),
        shannon_entropy(addr_hist),
        *(local_entropy(addresses, n) for n in LOCAL_ENTROPY_LEVELS),
        unique_sites,
        sites_90,
        yokota,
        linear,
    )


def check_invariants(fv: FeatureVector, tol: float = 1e-9) -> list[str]:
    """Return the violated feature-vector invariants (empty when consistent)."""
    bad = []
    if not fv.min_itb <= fv.median_itb <= fv.max_itb:
        bad.append("min_itb <= median_itb <= max_itb")
    if fv.ninety_memory_footprint > fv.total_memory_footprint:
        bad.append("ninety_memory_footprint <= total_memory_footprint")
    if fv.ninety_branch_instructions > fv.total_unique_branch_instructions:
        bad.append("ninety_branch_instructions <= total_unique_branch_instructions")
    lmae = fv.local_entropies
    if any(b > a + tol for a, b in zip(lmae, lmae[1:])):
        bad.append("local_memory_address_entropy non-increasing")
    if fv.global_memory_address_entropy < -tol:
        bad.append("global_memory_address_entropy >= 0")
    if fv.total_memory_footprint > 0 and fv.global_memory_address_entropy > math.log2(fv.total_memory_footprint) + tol:
        bad.append("global_memory_address_entropy <= log2(total_memory_footprint)")
    if fv.mean_simd_width > fv.max_simd_width + tol:
        bad.append("mean_simd_width <= max_simd_width")
    if fv.sd_simd_width < 0:
        bad.append("sd_simd_width >= 0")
    if not -tol <= fv.average_linear_branch_entropy <= 1 + tol:
        bad.append("0 <= average_linear_branch_entropy <= 1")
    if fv.yokota_branch_entropy < -tol:
        bad.append("yokota_branch_entropy >= 0")
    return bad


def format_value(v) -> str:
    """Integers verbatim, reals with 9 significant digits."""
    if isinstance(v, int) and not isinstance(v, bool):
        return str(v)
    v = float(v)
    if v.is_integer() and abs(v) < 1e15:
        return str(int(v))
    return f"{v:.9g}"


FEATURE_CSV_KEYS = ("application", "kernel", "size")


def feature_csv_header() -> str:
    return ",".join(FEATURE_CSV_KEYS + FEATURE_NAMES)


def feature_csv_row(application: str, kernel: str, size: str, fv: FeatureVector) -> str:
    return ",".join([application, kernel, size] + [format_value(v) for v in fv.as_list()])
