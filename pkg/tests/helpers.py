"""Independent oracles and fuzzers shared by the test modules."""

from fractions import Fraction
from itertools import combinations
from pathlib import Path

import mpmath
import numpy as np

from aiwcpred.characterizer import FEATURE_NAMES
from aiwcpred.dataset import Dataset, RowKey
from aiwcpred.microkernel import Event, Kind, Trace

KERNEL_DIR = Path(__file__).resolve().parents[1] / "src" / "aiwcpred" / "data" / "kernels"


def kernel_source(name: str) -> str:
    return (KERNEL_DIR / f"{name}.mk").read_text()


def entropy_oracle(counts) -> float:
    """-sum p log2 p at 50 digits."""
    with mpmath.workdps(50):
        total = mpmath.mpf(sum(counts))
        h = mpmath.mpf(0)
        for c in counts:
            if c:
                p = mpmath.mpf(c) / total
                h -= p * mpmath.log(p, 2)
        return float(h)


def coverage_oracle(counts) -> int:
    """Smallest subset size (any subset, not just the top items) covering 90%."""
    total = sum(counts)
    if total == 0:
        return 0
    for n in range(1, len(counts) + 1):
        if any(Fraction(sum(s), total) >= Fraction(9, 10) for s in combinations(counts, n)):
            return n
    return len(counts)


def random_kernel_source(rng: np.random.Generator) -> str:
    """A random kernel with a bounded loop, data-dependent branches and barriers."""
    lines = [".params base=4096, pitch=64", ".regs 8"]

    def reg():
        return f"r{rng.integers(0, 6)}"

    def body(n):
        for _ in range(n):
            kind = rng.choice(["alu", "alu", "load", "store", "barrier", "skip"])
            w = int(rng.choice([1, 1, 2, 4, 8]))
            if kind == "alu":
                op = rng.choice(["add", "sub", "mul", "xor", "and", "or", "shl", "mov"])
                if op == "mov":
                    lines.append(f"mov/{w} {reg()}, gid{rng.integers(0, 2)}")
                else:
                    lines.append(f"{op}/{w} {reg()}, {reg()}, {rng.integers(-5, 6)}")
            elif kind == "load":
                lines.append(f"load/{w} {reg()}, [base + {rng.integers(1, 9)}*gid0 + pitch*gid1 + r7]")
            elif kind == "store":
                lines.append(f"store/{w} [base + {rng.integers(0, 200)} + lid0 - r7], {reg()}")
            elif kind == "barrier":
                lines.append("barrier")
            else:
                label = f"s{len(lines)}"
                lines.append(f"and r6, {reg()}, {rng.integers(1, 8)}")
                lines.append(f"br {label}, r6")
                lines.append(f"add {reg()}, {reg()}, 1")
                lines.append(f"{label}: mov r6, 0")

    body(int(rng.integers(0, 5)))
    trips = int(rng.integers(1, 6))
    lines.append("mov r7, 0")
    lines.append("loop: add r7, r7, 1")
    body(int(rng.integers(1, 6)))
    lines.append(f"cmp.lt r6, r7, {trips}")
    lines.append("br loop, r6")
    body(int(rng.integers(0, 4)))
    lines.append("halt")
    return "\n".join(lines) + "\n"


def random_event_trace(rng: np.random.Generator) -> Trace:
    """A synthetic trace built from events directly, without the interpreter."""
    events = []
    wis = int(rng.integers(1, 6))
    for w in range(wis):
        wi = (w, 0, 0)
        for _ in range(int(rng.integers(0, 40))):
            k = rng.choice(["op", "mem", "br", "bar"], p=[0.5, 0.25, 0.15, 0.1])
            if k == "op":
                events.append(Event(wi, Kind.OP, str(rng.choice(["ADD", "MUL", "MOV"])),
                                    int(rng.choice([1, 2, 4]))))
            elif k == "mem":
                events.append(Event(wi, Kind.MEM, "LOAD", 1, address=int(rng.integers(0, 2**12))))
            elif k == "br":
                events.append(Event(wi, Kind.BRANCH, "BRANCH", 1, branch_site=int(rng.integers(0, 5)),
                                    taken=bool(rng.integers(0, 2))))
            else:
                events.append(Event(wi, Kind.BARRIER, "BARRIER", 1))
        events.append(Event(wi, Kind.OP, "HALT", 1))
    return Trace.from_events(events)


def make_dataset(features, times, devices=None):
    n = len(times)
    devices = devices or ["dev0"] * n
    keys = [RowKey(kernel=f"k{i:04d}", size="tiny", device=d, application="app") for i, d in enumerate(devices)]
    return Dataset(keys, features, times)


def step_dataset(n=100, seed=0):
    """Noiseless step in feature 3; the other columns are noise.

    Feature 3 takes ten discrete levels (0.05, 0.15, ..., 0.95), ten rows
    each, as count-like features do, so the step falls between two observed
    values rather than between two arbitrarily close reals.
    """
    rng = np.random.default_rng(seed)
    X = rng.uniform(0, 1, (n, len(FEATURE_NAMES)))
    X[:, 3] = rng.permutation(np.repeat(np.arange(10) / 10 + 0.05, n // 10))
    step = (X[:, 3] > 0.5).astype(float)
    # response log10(t) equals the step
    return make_dataset(X, 10.0 ** step), step
