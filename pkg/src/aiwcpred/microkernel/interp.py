"""NDRange interpreter producing canonical event traces.

Work-items run one after another in row-major global-id order (dimension 0
fastest), each to completion.  Barriers are recorded, never waited on.
Integer arithmetic wraps at 64 bits; loads return a hash of the address so
data-dependent control flow is reproducible without modelling memory.
"""

from __future__ import annotations

from itertools import product

from .ir import Affine, Imm, Kernel, NDRange, Opcode, Reg
from .trace import Event, Kind, Trace

DEFAULT_FUEL = 1_000_000

_MASK = (1 << 64) - 1


class ExecutionError(RuntimeError):
    pass


class FuelExhausted(ExecutionError):
    pass


def _signed(v: int) -> int:
    v &= _MASK
    return v - (1 << 64) if v >> 63 else v


def load_value(address: int) -> int:
    """Deterministic stand-in for memory contents: splitmix64 of the address, 31 bits."""
    z = (address + 0x9E3779B97F4A7C15) & _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    z ^= z >> 31
    return z >> 33


_COMPARE = {
    "lt": lambda a, b: a < b,
    "le": lambda a, b: a <= b,
    "eq": lambda a, b: a == b,
    "ne": lambda a, b: a != b,
    "gt": lambda a, b: a > b,
    "ge": lambda a, b: a >= b,
}


def _div(a: int, b: int) -> int:
    if b == 0:
        raise ExecutionError("division by zero")
    q = abs(a) // abs(b)
    return q if (a >= 0) == (b >= 0) else -q


_ARITH = {
    Opcode.ADD: lambda a, b: a + b,
    Opcode.SUB: lambda a, b: a - b,
    Opcode.MUL: lambda a, b: a * b,
    Opcode.DIV: _div,
    Opcode.AND: lambda a, b: a & b,
    Opcode.OR: lambda a, b: a | b,
    Opcode.XOR: lambda a, b: a ^ b,
    Opcode.SHL: lambda a, b: a << (b & 63),
}


def execute(kernel: Kernel, ndrange: NDRange, args: dict[str, int] | None = None,
            fuel: int = DEFAULT_FUEL) -> Trace:
    if fuel < 1:
        raise ValueError("fuel must be positive")
    args = dict(args or {})
    unknown = set(args) - set(kernel.params)
    if unknown:
        raise ExecutionError(f"unknown kernel argument(s): {sorted(unknown)}")
    params = {}
    for p in kernel.params:
        if p in args:
            params[p] = int(args[p])
        elif p in kernel.defaults:
            params[p] = kernel.defaults[p]
        else:
            raise ExecutionError(f"missing kernel argument {p!r}")

    gx, gy, gz = ndrange.global_size
    lx, ly, lz = ndrange.local_size
    env = dict(params)
    env.update(gsz0=gx, gsz1=gy, gsz2=gz, lsz0=lx, lsz1=ly, lsz2=lz)

    events: list[Event] = []
    count = 0
    for z, y, x in product(range(gz), range(gy), range(gx)):
        gid = (x, y, z)
        env.update(gid0=x, gid1=y, gid2=z, lid0=x % lx, lid1=y % ly, lid2=z % lz,
                   grp0=x // lx, grp1=y // ly, grp2=z // lz)
        _run_work_item(kernel, gid, env, fuel, events)
        count += 1
    return Trace(tuple(events), count)


def _run_work_item(kernel: Kernel, gid, env, fuel, events) -> None:
    regs = [0] * kernel.num_registers
    code = kernel.instructions
    labels = kernel.labels

    def val(op):
        if isinstance(op, Reg):
            return regs[op.index]
        if isinstance(op, Imm):
            return op.value
        return env[op.name]

    def addr(expr: Affine) -> int:
        total = expr.const
        for coef, factor, term in expr.terms:
            if factor is not None:
                coef *= env[factor.name]
            total += coef * val(term)
        return total & _MASK

    pc = 0
    steps = 0
    while True:
        if steps >= fuel:
            raise FuelExhausted(f"work-item {gid}: fuel of {fuel} instructions exhausted")
        steps += 1
        ins = code[pc]
        op = ins.opcode
        pc_next = pc + 1
        if op is Opcode.HALT:
            events.append(Event(gid, Kind.OP, "HALT", 1))
            return
        if op is Opcode.BARRIER:
            events.append(Event(gid, Kind.BARRIER, "BARRIER", 1))
        elif op is Opcode.BRANCH:
            taken = True if not ins.operands else val(ins.operands[0]) != 0
            events.append(Event(gid, Kind.BRANCH, "BRANCH", 1, branch_site=pc, taken=taken))
            if taken:
                pc_next = labels[ins.target]
        elif op is Opcode.LOAD:
            a = addr(ins.addr)
            regs[ins.operands[0].index] = load_value(a)
            events.append(Event(gid, Kind.MEM, "LOAD", ins.width, address=a))
        elif op is Opcode.STORE:
            a = addr(ins.addr)
            val(ins.operands[0])
            events.append(Event(gid, Kind.MEM, "STORE", ins.width, address=a))
        else:
            d = ins.operands[0].index
            if op is Opcode.MOV:
                result = val(ins.operands[1])
            elif op is Opcode.MAD:
                result = val(ins.operands[1]) * val(ins.operands[2]) + val(ins.operands[3])
            elif op is Opcode.CMP:
                result = int(_COMPARE[ins.condition](val(ins.operands[1]), val(ins.operands[2])))
            else:
                result = _ARITH[op](val(ins.operands[1]), val(ins.operands[2]))
            regs[d] = _signed(result)
            events.append(Event(gid, Kind.OP, op.name, ins.width))
        pc = pc_next
