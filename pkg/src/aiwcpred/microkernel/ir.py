"""Kernel IR: opcodes, operands, affine address expressions."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field


class Opcode(enum.Enum):
    ADD = "add"
    SUB = "sub"
    MUL = "mul"
    DIV = "div"
    MAD = "mad"
    AND = "and"
    OR = "or"
    XOR = "xor"
    SHL = "shl"
    CMP = "cmp"
    MOV = "mov"
    LOAD = "load"
    STORE = "store"
    BRANCH = "br"
    BARRIER = "barrier"
    HALT = "halt"


ARITH = frozenset({Opcode.ADD, Opcode.SUB, Opcode.MUL, Opcode.DIV, Opcode.AND,
                   Opcode.OR, Opcode.XOR, Opcode.SHL})
MEMORY = frozenset({Opcode.LOAD, Opcode.STORE})
SCALAR_ONLY = frozenset({Opcode.BRANCH, Opcode.BARRIER, Opcode.HALT})

CONDITIONS = ("lt", "le", "eq", "ne", "gt", "ge")

# builtin index symbols: global id, local id, group id, global size, local size
BUILTINS = frozenset(f"{base}{d}" for base in ("gid", "lid", "grp", "gsz", "lsz") for d in range(3))

DEFAULT_REGISTERS = 16


@dataclass(frozen=True)
class Reg:
    index: int

    def __str__(self):
        return f"r{self.index}"


@dataclass(frozen=True)
class Imm:
    value: int

    def __str__(self):
        return str(self.value)


@dataclass(frozen=True)
class Sym:
    """A builtin index (``gid0`` ...) or a kernel parameter name."""

    name: str

    def __str__(self):
        return self.name


Operand = Reg | Imm | Sym


@dataclass(frozen=True)
class Affine:
    """``const + sum(coef * [factor *] atom)``; ``factor`` is a parameter or None."""

    const: int = 0
    terms: tuple[tuple[int, Sym | None, Reg | Sym], ...] = ()

    def __str__(self):
        parts = []
        for coef, factor, atom in self.terms:
            mult = [str(coef)] if coef != 1 else []
            if factor is not None:
                mult.append(str(factor))
            parts.append("*".join(mult + [str(atom)]))
        if self.const or not parts:
            parts.append(str(self.const))
        return " + ".join(parts)


@dataclass(frozen=True)
class Instruction:
    opcode: Opcode
    width: int = 1
    operands: tuple[Operand, ...] = ()
    addr: Affine | None = None
    target: str | None = None
    condition: str | None = None
    line: int = 0

    def __post_init__(self):
        if self.width < 1:
            raise ValueError("width must be >= 1")
        if self.opcode in SCALAR_ONLY and self.width != 1:
            raise ValueError(f"{self.opcode.value} must have width 1")
        if (self.addr is not None) != (self.opcode in MEMORY):
            raise ValueError("address expression required exactly for load/store")


@dataclass(frozen=True)
class Kernel:
    name: str
    params: tuple[str, ...]
    instructions: tuple[Instruction, ...]
    labels: dict[str, int] = field(default_factory=dict)
    num_registers: int = DEFAULT_REGISTERS
    defaults: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.instructions:
            raise ValueError("kernel has no instructions")
        if self.instructions[-1].opcode is not Opcode.HALT:
            raise ValueError("kernel must end with halt")
        for ins in self.instructions:
            if ins.target is not None and ins.target not in self.labels:
                raise ValueError(f"undefined label {ins.target!r}")
            for r in _registers(ins):
                if r.index >= self.num_registers:
                    raise ValueError(f"register r{r.index} out of range")


def _registers(ins: Instruction):
    for op in ins.operands:
        if isinstance(op, Reg):
            yield op
    if ins.addr is not None:
        for _, _, t in ins.addr.terms:
            if isinstance(t, Reg):
                yield t


@dataclass(frozen=True)
class NDRange:
    global_size: tuple[int, int, int]
    local_size: tuple[int, int, int] = (1, 1, 1)

    def __post_init__(self):
        if len(self.global_size) != 3 or len(self.local_size) != 3:
            raise ValueError("NDRange sizes must have 3 components")
        for g, l in zip(self.global_size, self.local_size):
            if g < 1 or l < 1:
                raise ValueError("NDRange sizes must be positive")
            if g % l:
                raise ValueError(f"local size {l} does not divide global size {g}")

    @property
    def work_items(self) -> int:
        x, y, z = self.global_size
        return x * y * z
