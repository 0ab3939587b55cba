import io
import json
from collections import Counter

import pytest
from hypothesis import given, settings, strategies as st

from aiwcpred.microkernel import (Event, ExecutionError, FuelExhausted, Kernel, KernelSyntaxError,
                                  Kind, NDRange, Opcode, Trace, TraceFormatError, execute,
                                  parse_kernel, read_trace, write_trace)
from aiwcpred.microkernel.ir import Affine, Imm, Instruction, Reg, Sym

from .helpers import kernel_source


def roundtrip(trace):
    buf = io.StringIO()
    write_trace(trace, buf)
    buf.seek(0)
    return read_trace(buf), buf.getvalue()


# -- parsing -----------------------------------------------------------------

def test_minimal_program():
    k = parse_kernel("mov r0, gid0\nhalt")
    assert len(k.instructions) == 2
    assert k.instructions[0].opcode is Opcode.MOV


def test_vector_add_instruction_sequence():
    k = parse_kernel(kernel_source("vector_add"))
    assert [i.opcode for i in k.instructions] == [Opcode.LOAD, Opcode.LOAD, Opcode.ADD, Opcode.STORE, Opcode.HALT]
    assert k.instructions[2].width == 1


def test_undefined_label():
    with pytest.raises(KernelSyntaxError, match="undefined label"):
        parse_kernel("br missing_label, r0\nhalt")


@pytest.mark.parametrize("src, fragment", [
    ("add/0 r0, r0, r0\nhalt", "width"),
    ("mov r20, 1\nhalt", "out of range"),
    (".regs 2\nmov r2, 1\nhalt", "out of range"),
    ("frobnicate r0\nhalt", "unknown instruction"),
    ("mov r0, 1", "end with halt"),
    ("add r0, r1\nhalt", "expects 3"),
    ("load r0, [gid0*gid1]\nhalt", "non-affine"),
    ("mov r0, nosuch\nhalt", "unknown symbol"),
    ("br/2 end\nend: halt", "width 1"),
    ("x: mov r0, 1\nx: halt", "duplicate label"),
    ("cmp.zz r0, r1, r2\nhalt", "condition"),
    (".bogus 3\nhalt", "directive"),
])
def test_parse_errors_carry_position(src, fragment):
    with pytest.raises(KernelSyntaxError) as info:
        parse_kernel(src)
    err = info.value
    assert fragment in str(err)
    assert err.line >= 1 and err.column >= 1
    assert str(err).startswith(f"{err.line}:{err.column}:")


def test_error_column_points_at_token():
    with pytest.raises(KernelSyntaxError) as info:
        parse_kernel("mov r0, 1\n  add r0, r0, bogus\nhalt")
    assert info.value.line == 2
    assert info.value.column == len("  add r0, r0, ") + 1


def test_affine_forms():
    k = parse_kernel(".params pitch, base=16\nload r0, [base + 4*gid0 - r1 + pitch*gid1 + gid1*2 + 3]\nhalt")
    addr = k.instructions[0].addr
    assert addr.const == 3
    terms = {(f.name if f else None, str(a)): c for c, f, a in addr.terms}
    assert terms == {(None, "base"): 1, (None, "gid0"): 4, (None, "r1"): -1,
                     ("pitch", "gid1"): 1, (None, "gid1"): 2}


def test_ir_invariants():
    with pytest.raises(ValueError):
        Instruction(Opcode.ADD, width=0, operands=(Reg(0), Reg(0), Reg(0)))
    with pytest.raises(ValueError):
        Instruction(Opcode.BARRIER, width=2)
    with pytest.raises(ValueError):
        Instruction(Opcode.LOAD, operands=(Reg(0),))
    with pytest.raises(ValueError):
        Instruction(Opcode.ADD, operands=(Reg(0), Reg(0), Imm(1)), addr=Affine())
    with pytest.raises(ValueError):
        Kernel("k", (), (Instruction(Opcode.ADD, operands=(Reg(0), Reg(0), Imm(1))),))
    with pytest.raises(ValueError):
        NDRange((6, 1, 1), (4, 1, 1))
    assert NDRange((6, 2, 3), (3, 1, 1)).work_items == 36


# -- execution ---------------------------------------------------------------

def test_halt_only_kernel():
    t = execute(parse_kernel("halt"), NDRange((4, 1, 1)))
    assert t.work_item_count == 4
    assert len(t.events) == 4
    assert all(e.opcode == "HALT" for e in t.events)


def test_vector_add_trace():
    t = execute(parse_kernel(kernel_source("vector_add")), NDRange((8, 1, 1), (4, 1, 1)))
    assert len(t.events) == 40
    assert t.work_item_count == 8
    loads = [e.address for e in t.events if e.opcode == "LOAD"]
    stores = [e.address for e in t.events if e.opcode == "STORE"]
    assert len(loads) == 16 and len(set(loads)) == 16
    assert len(stores) == 8 and len(set(stores)) == 8
    assert not set(loads) & set(stores)


def test_fuel_exhausted():
    k = parse_kernel("top: add r0, r0, 1\nbr top\nhalt")
    with pytest.raises(FuelExhausted):
        execute(k, NDRange((1, 1, 1)), fuel=1000)


def test_division_by_zero():
    with pytest.raises(ExecutionError, match="division by zero"):
        execute(parse_kernel("div r0, r1, 0\nhalt"), NDRange((1, 1, 1)))


def test_signed_division_truncates():
    k = parse_kernel("mov r0, -7\ndiv r1, r0, 2\ncmp.eq r2, r1, -3\nbr end, r2\nbarrier\nend: halt")
    t = execute(k, NDRange((1, 1, 1)))
    assert not any(e.kind is Kind.BARRIER for e in t.events)


def test_args_override_defaults_and_validate():
    k = parse_kernel(".params a=0x100, b\nstore [a + b + gid0], r0\nhalt")
    with pytest.raises(ExecutionError, match="missing"):
        execute(k, NDRange((1, 1, 1)))
    with pytest.raises(ExecutionError, match="unknown"):
        execute(k, NDRange((1, 1, 1)), {"b": 1, "c": 2})
    t = execute(k, NDRange((2, 1, 1)), {"b": 1})
    assert [e.address for e in t.events if e.kind is Kind.MEM] == [0x101, 0x102]
    t = execute(k, NDRange((1, 1, 1)), {"a": 0, "b": 5})
    assert t.events[0].address == 5


def test_row_major_work_item_order():
    t = execute(parse_kernel("halt"), NDRange((2, 2, 1)))
    assert [e.work_item for e in t.events] == [(0, 0, 0), (1, 0, 0), (0, 1, 0), (1, 1, 0)]


def test_builtin_ids():
    k = parse_kernel("store [1000*lid0 + 100*grp0 + 10*lsz0 + gsz0], r0\nhalt")
    t = execute(k, NDRange((4, 1, 1), (2, 1, 1)))
    assert [e.address for e in t.events if e.kind is Kind.MEM] == [24, 1024, 124, 1124]


@pytest.mark.parametrize("name", ["vector_add", "reduce_sum", "stencil2d", "branchy", "matmul"])
def test_execute_is_deterministic(name):
    k = parse_kernel(kernel_source(name))
    nd = NDRange((4, 4, 1), (2, 2, 1))
    a, b = execute(k, nd), execute(k, nd)
    assert a == b
    assert roundtrip(a)[1] == roundtrip(b)[1]


def _min_fuel(kernel, nd):
    """Smallest fuel that lets every work-item reach HALT, by bisection."""
    lo, hi = 1, 1
    while True:
        try:
            execute(kernel, nd, fuel=hi)
            break
        except FuelExhausted:
            lo, hi = hi + 1, hi * 2
    while lo < hi:
        mid = (lo + hi) // 2
        try:
            execute(kernel, nd, fuel=mid)
            hi = mid
        except FuelExhausted:
            lo = mid + 1
    return lo


@pytest.mark.parametrize("name", ["reduce_sum", "branchy", "matmul"])
def test_event_counts_match_fuel_bound(name):
    k = parse_kernel(kernel_source(name))
    nd = NDRange((8, 2, 1), (4, 1, 1))
    t = execute(k, nd)
    per_wi = Counter(e.work_item for e in t.events)
    assert sum(per_wi.values()) == len(t.events)
    assert len(per_wi) == t.work_item_count == nd.work_items
    # the longest work-item needs exactly as much fuel as it emitted events
    assert max(per_wi.values()) == _min_fuel(k, nd)
    for _, block in t.by_work_item():
        assert block[-1].opcode == "HALT"
        assert sum(e.opcode == "HALT" for e in block) == 1


# straight-line program generator: arithmetic, memory and barriers, no branches
_ALU = ["add", "sub", "mul", "and", "or", "xor", "shl", "mov", "mad", "cmp.ge"]


@st.composite
def straight_line(draw):
    lines = []
    for _ in range(draw(st.integers(0, 12))):
        kind = draw(st.sampled_from(["alu", "load", "store", "barrier"]))
        width = draw(st.sampled_from([1, 2, 4, 8]))
        r = lambda: f"r{draw(st.integers(0, 7))}"
        if kind == "alu":
            op = draw(st.sampled_from(_ALU))
            if op == "mov":
                lines.append(f"mov/{width} {r()}, gid0")
            elif op == "mad":
                lines.append(f"mad/{width} {r()}, {r()}, {r()}, 3")
            else:
                lines.append(f"{op}/{width} {r()}, {r()}, {draw(st.integers(-9, 9))}")
        elif kind == "load":
            lines.append(f"load/{width} {r()}, [{draw(st.integers(0, 64))}*gid0 + {r()}]")
        elif kind == "store":
            lines.append(f"store/{width} [gid1*{draw(st.integers(1, 9))} + lid0], {r()}")
        else:
            lines.append("barrier")
    return "\n".join(lines + ["halt"])


@settings(max_examples=60, deadline=None)
@given(straight_line(), st.integers(1, 4), st.integers(1, 3))
def test_straight_line_same_opcode_sequence(src, gx, gy):
    k = parse_kernel(src)
    t = execute(k, NDRange((gx, gy, 1)))
    seqs = {tuple(e.opcode for e in block) for _, block in t.by_work_item()}
    assert len(seqs) == 1
    assert len(t.events) == gx * gy * len(k.instructions)


# -- trace files -------------------------------------------------------------

def test_empty_trace_roundtrip():
    back, text = roundtrip(Trace((), 0))
    assert text == "aiwctrace v1\n"
    assert back == Trace((), 0)


def test_vector_add_trace_roundtrip():
    t = execute(parse_kernel(kernel_source("vector_add")), NDRange((8, 1, 1)))
    back, text = roundtrip(t)
    assert back == t
    assert len(text.splitlines()) == 41
    first_mem = json.loads(text.splitlines()[1])
    assert isinstance(first_mem["addr"], str)


def test_branch_trace_roundtrip():
    t = execute(parse_kernel(kernel_source("branchy")), NDRange((4, 1, 1)))
    assert roundtrip(t)[0] == t


def test_large_addresses_roundtrip():
    ev = (Event((0, 0, 0), Kind.MEM, "LOAD", 1, address=2**64 - 1), Event((0, 0, 0), Kind.OP, "HALT"))
    t = Trace(ev, 1)
    assert roundtrip(t)[0] == t


@pytest.mark.parametrize("text, fragment", [
    ("aiwctrace v2\n", "version"),
    ("nonsense\n", "header"),
    ('aiwctrace v1\n{"wi":[0,0,0],"kind":"JUMP","op":"X","width":1,"addr":null,"site":null,"taken":null}\n',
     "Kind"),
    ("aiwctrace v1\n{not json\n", "malformed"),
    ('aiwctrace v1\n{"wi":[0,0,0],"kind":"MEM","op":"LOAD","width":1,"addr":null,"site":null,"taken":null}\n',
     "addr"),
])
def test_malformed_trace_files(text, fragment):
    with pytest.raises(TraceFormatError, match=fragment):
        read_trace(io.StringIO(text))
