from .asm import KernelSyntaxError, parse_kernel
from .interp import DEFAULT_FUEL, ExecutionError, FuelExhausted, execute, load_value
from .ir import Affine, Imm, Instruction, Kernel, NDRange, Opcode, Reg, Sym
from .trace import (TRACE_HEADER, Event, Kind, Trace, TraceFormatError, read_trace,
                    write_trace)

__all__ = [
    "Affine", "DEFAULT_FUEL", "Event", "ExecutionError", "FuelExhausted", "Imm",
    "Instruction", "Kernel", "KernelSyntaxError", "Kind", "NDRange", "Opcode", "Reg",
    "Sym", "TRACE_HEADER", "Trace", "TraceFormatError", "execute", "load_value",
    "parse_kernel", "read_trace", "write_trace",
]
