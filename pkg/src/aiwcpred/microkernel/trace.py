"""Dynamic event traces and the ``aiwctrace v1`` JSON-lines format."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from typing import IO, Iterable, NamedTuple

TRACE_HEADER = "aiwctrace v1"


class TraceFormatError(ValueError):
    pass


class Kind(str, enum.Enum):
    OP = "OP"
    MEM = "MEM"
    BRANCH = "BRANCH"
    BARRIER = "BARRIER"


class Event(NamedTuple):
    work_item: tuple[int, int, int]
    kind: Kind
    opcode: str
    width: int = 1
    address: int | None = None
    branch_site: int | None = None
    taken: bool | None = None


@dataclass(frozen=True)
class Trace:
    events: tuple[Event, ...]
    work_item_count: int

    @classmethod
    def from_events(cls, events: Iterable[Event]) -> "Trace":
        events = tuple(events)
        return cls(events, len({e.work_item for e in events}))

    def by_work_item(self):
        """Yield ``(work_item, events)`` blocks in trace order."""
        block: list[Event] = []
        current = None
        for e in self.events:
            if e.work_item != current and block:
                yield current, block
                block = []
            current = e.work_item
            block.append(e)
        if block:
            yield current, block

    def __len__(self):
        return len(self.events)


def _check(e: Event) -> None:
    mem = e.kind is Kind.MEM
    br = e.kind is Kind.BRANCH
    if (e.address is not None) != mem:
        raise TraceFormatError(f"address present iff kind is MEM: {e}")
    if (e.branch_site is not None) != br or (e.taken is not None) != br:
        raise TraceFormatError(f"site/taken present iff kind is BRANCH: {e}")
    if e.width < 1:
        raise TraceFormatError(f"width must be >= 1: {e}")
    if mem and not 0 <= e.address < 2**64:
        raise TraceFormatError(f"address out of 64-bit range: {e}")


def write_trace(trace: Trace, sink: IO[str]) -> None:
    sink.write(TRACE_HEADER + "\n")
    for e in trace.events:
        rec = {
            "wi": list(e.work_item),
            "kind": e.kind.value,
            "op": e.opcode,
            "width": e.width,
            "addr": None if e.address is None else str(e.address),
            "site": e.branch_site,
            "taken": e.taken,
        }
        sink.write(json.dumps(rec, separators=(",", ":")) + "\n")


def read_trace(source: IO[str]) -> Trace:
    header = source.readline().rstrip("\n")
    if header != TRACE_HEADER:
        if header.startswith("aiwctrace "):
            raise TraceFormatError(f"unsupported trace version {header[10:]!r}")
        raise TraceFormatError("missing aiwctrace header")
    events = []
    seen: set = set()
    prev = None
    for lineno, line in enumerate(source, start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            wi = rec["wi"]
            if not (isinstance(wi, list) and len(wi) == 3 and all(isinstance(v, int) for v in wi)):
                raise TraceFormatError("wi must be 3 integers")
            addr = rec["addr"]
            e = Event(
                work_item=tuple(wi),
                kind=Kind(rec["kind"]),
                opcode=str(rec["op"]),
                width=int(rec["width"]),
                address=None if addr is None else int(addr),
                branch_site=rec["site"],
                taken=rec["taken"],
            )
            _check(e)
        except (KeyError, ValueError, TypeError) as exc:
            raise TraceFormatError(f"line {lineno}: malformed record: {exc}") from None
        if e.work_item != prev:
            if e.work_item in seen:
                raise TraceFormatError(f"line {lineno}: work-item {e.work_item} is not contiguous")
            seen.add(e.work_item)
            prev = e.work_item
        events.append(e)
    return Trace(tuple(events), len(seen))
