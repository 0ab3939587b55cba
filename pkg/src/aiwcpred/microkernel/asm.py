"""Line-oriented kernel assembly parser.

Grammar (see ``docs/kernel_format.md``)::

    program   = { line } ;
    line      = [ label ":" ] [ directive | instr ] [ "#" comment ] ;
    directive = ".kernel" ident
              | ".params" param { "," param }
              | ".regs" integer ;
    param     = ident [ "=" integer ] ;
    instr     = mnemonic [ "." cond ] [ "/" width ] [ operand { "," operand } ] ;
    operand   = register | integer | ident | "[" affine "]" ;
    affine    = term { ("+" | "-") term } ;
    term      = integer | [ mult "*" ] atom | atom "*" mult ;
    mult      = integer | param-name ;
    atom      = register | ident ;
"""

from __future__ import annotations

import re

from .ir import (ARITH, BUILTINS, CONDITIONS, DEFAULT_REGISTERS, Affine, Imm,
                 Instruction, Kernel, Opcode, Reg, Sym)


class KernelSyntaxError(ValueError):
    """Parse or validation failure with a source position."""

    def __init__(self, message: str, line: int, column: int = 1):
        super().__init__(f"{line}:{column}: {message}")
        self.message = message
        self.line = line
        self.column = column


_IDENT = re.compile(r"[A-Za-z_][A-Za-z0-9_]*$")
_REG = re.compile(r"r(\d+)$")
_INT = re.compile(r"[+-]?(0[xX][0-9a-fA-F]+|\d+)$")
_MNEMONIC = re.compile(r"([a-z]+)(?:\.([a-z]+))?(?:/(\d+))?$")

_BY_MNEMONIC = {op.value: op for op in Opcode}

# operand count for each opcode (excluding the address of load/store)
_ARITY = {**{op: 3 for op in ARITH}, Opcode.MAD: 4, Opcode.CMP: 3, Opcode.MOV: 2}


def _int(text: str) -> int:
    return int(text, 0)


class _Line:
    def __init__(self, lineno: int, raw: str):
        self.lineno = lineno
        self.raw = raw

    def col(self, fragment: str) -> int:
        i = self.raw.find(fragment)
        return i + 1 if i >= 0 else 1

    def error(self, message: str, fragment: str = "") -> KernelSyntaxError:
        return KernelSyntaxError(message, self.lineno, self.col(fragment) if fragment else 1)


def _split_operands(text: str) -> list[str]:
    out, depth, cur = [], 0, []
    for ch in text:
        if ch == "[":
            depth += 1
        elif ch == "]":
            depth -= 1
        if ch == "," and depth == 0:
            out.append("".join(cur).strip())
            cur = []
        else:
            cur.append(ch)
    tail = "".join(cur).strip()
    if tail or out:
        out.append(tail)
    return out


def _atom(text: str, ln: _Line, params: set[str]):
    m = _REG.match(text)
    if m:
        return Reg(int(m.group(1)))
    if _INT.match(text):
        return Imm(_int(text))
    if _IDENT.match(text):
        if text in BUILTINS or text in params:
            return Sym(text)
        raise ln.error(f"unknown symbol {text!r}", text)
    raise ln.error(f"bad operand {text!r}", text)


def _affine(text: str, ln: _Line, params: set[str]) -> Affine:
    body = text.replace(" ", "")
    if not body:
        raise ln.error("empty address expression", "[")
    # split on +/- keeping signs; a leading sign belongs to the first term
    pieces = re.findall(r"[+-]?[^+-]+", body)
    if "".join(pieces) != body:
        raise ln.error(f"bad address expression {text!r}", text)
    const = 0
    terms: dict = {}
    for piece in pieces:
        sign = -1 if piece.startswith("-") else 1
        piece = piece.lstrip("+-")
        factor = None
        if "*" in piece:
            a, _, b = piece.partition("*")
            if "*" in b:
                raise ln.error(f"non-affine term {piece!r}", piece)
            # the multiplier is an integer or a (constant) kernel parameter
            if _INT.match(a):
                coef, atom = _int(a), b
            elif _INT.match(b):
                coef, atom = _int(b), a
            elif a in params:
                coef, factor, atom = 1, Sym(a), b
            elif b in params:
                coef, factor, atom = 1, Sym(b), a
            else:
                raise ln.error(f"non-affine term {piece!r}", piece)
        else:
            coef, atom = 1, piece
        sym = _atom(atom, ln, params)
        if isinstance(sym, Imm):
            if factor is None:
                const += sign * coef * sym.value
                continue
            coef, sym, factor = sym.value, factor, None
        key = (factor, sym)
        terms[key] = terms.get(key, 0) + sign * coef
    ordered = tuple((c, f, s) for (f, s), c in terms.items() if c != 0)
    return Affine(const, ordered)


def parse_kernel(text: str, name: str = "kernel") -> Kernel:
    """Parse kernel assembly into a validated :class:`Kernel`."""
    params: list[str] = []
    defaults: dict[str, int] = {}
    num_regs = DEFAULT_REGISTERS
    labels: dict[str, int] = {}
    pending: list[tuple[_Line, str]] = []
    label_lines: dict[str, _Line] = {}

    for lineno, raw in enumerate(text.splitlines(), start=1):
        ln = _Line(lineno, raw)
        body = raw.split("#", 1)[0].strip()
        if not body:
            continue
        m = re.match(r"([A-Za-z_][A-Za-z0-9_]*)\s*:(.*)$", body)
        if m and not body.startswith("."):
            label = m.group(1)
            if label in labels:
                raise ln.error(f"duplicate label {label!r}", label)
            labels[label] = len(pending)
            label_lines[label] = ln
            body = m.group(2).strip()
            if not body:
                continue
        if body.startswith("."):
            directive, _, rest = body.partition(" ")
            rest = rest.strip()
            if directive == ".kernel":
                if not _IDENT.match(rest):
                    raise ln.error("bad kernel name", rest or directive)
                name = rest
            elif directive == ".params":
                for item in _split_operands(rest):
                    pname, eq, value = (s.strip() for s in item.partition("="))
                    if not _IDENT.match(pname) or pname in BUILTINS or _REG.match(pname):
                        raise ln.error(f"bad parameter name {pname!r}", pname or directive)
                    if pname in params:
                        raise ln.error(f"duplicate parameter {pname!r}", pname)
                    params.append(pname)
                    if eq:
                        if not _INT.match(value):
                            raise ln.error(f"bad default {value!r}", value)
                        defaults[pname] = _int(value)
            elif directive == ".regs":
                if not _INT.match(rest) or _int(rest) < 1:
                    raise ln.error("bad register count", rest or directive)
                num_regs = _int(rest)
            else:
                raise ln.error(f"unknown directive {directive!r}", directive)
            continue
        pending.append((ln, body))

    pset = set(params)
    instructions = []
    for ln, body in pending:
        mnem, _, rest = body.partition(" ")
        m = _MNEMONIC.match(mnem.lower())
        if not m or m.group(1) not in _BY_MNEMONIC:
            raise ln.error(f"unknown instruction {mnem!r}", mnem)
        op = _BY_MNEMONIC[m.group(1)]
        cond = m.group(2)
        width = int(m.group(3)) if m.group(3) is not None else 1
        if width == 0:
            raise ln.error("width must be >= 1", mnem)
        if op is Opcode.CMP:
            cond = cond or "lt"
            if cond not in CONDITIONS:
                raise ln.error(f"unknown condition {cond!r}", mnem)
        elif cond is not None:
            raise ln.error(f"{op.value} takes no condition", mnem)
        if op in (Opcode.BRANCH, Opcode.BARRIER, Opcode.HALT) and width != 1:
            raise ln.error(f"{op.value} must have width 1", mnem)
        args = _split_operands(rest.strip())
        try:
            ins = _instruction(op, width, cond, args, ln, pset, labels)
        except ValueError as exc:
            if isinstance(exc, KernelSyntaxError):
                raise
            raise ln.error(str(exc), mnem) from None
        instructions.append(ins)

    if not instructions:
        raise KernelSyntaxError("kernel has no instructions", max(1, len(text.splitlines())))
    if instructions[-1].opcode is not Opcode.HALT:
        raise KernelSyntaxError("kernel must end with halt", instructions[-1].line)
    for label, idx in labels.items():
        if idx >= len(instructions):
            ln = label_lines[label]
            raise ln.error(f"label {label!r} points past the last instruction", label)
    for ins in instructions:
        regs = [o for o in ins.operands if isinstance(o, Reg)]
        if ins.addr is not None:
            regs += [t for _, _, t in ins.addr.terms if isinstance(t, Reg)]
        for r in regs:
            if r.index >= num_regs:
                raise KernelSyntaxError(f"register r{r.index} out of range (.regs {num_regs})", ins.line)
    return Kernel(name=name, params=tuple(params), instructions=tuple(instructions),
                  labels=labels, num_registers=num_regs, defaults=defaults)


def _instruction(op, width, cond, args, ln, params, labels) -> Instruction:
    def need(k):
        if len(args) != k:
            raise ln.error(f"{op.value} expects {k} operand(s), got {len(args)}", op.value)

    def dest(text):
        reg = _atom(text, ln, params)
        if not isinstance(reg, Reg):
            raise ln.error(f"destination must be a register, got {text!r}", text)
        return reg

    def address(text):
        if not (text.startswith("[") and text.endswith("]")):
            raise ln.error(f"expected [address], got {text!r}", text)
        return _affine(text[1:-1], ln, params)

    if op in (Opcode.HALT, Opcode.BARRIER):
        if args:
            raise ln.error(f"{op.value} takes no operands", args[0])
        return Instruction(op, line=ln.lineno)
    if op is Opcode.BRANCH:
        if len(args) not in (1, 2):
            raise ln.error("br expects a label and an optional condition register", "br")
        target = args[0]
        if not _IDENT.match(target):
            raise ln.error(f"bad label {target!r}", target)
        if target not in labels:
            raise ln.error(f"undefined label {target!r}", target)
        operands = (_atom(args[1], ln, params),) if len(args) == 2 else ()
        return Instruction(op, operands=operands, target=target, line=ln.lineno)
    if op is Opcode.LOAD:
        need(2)
        return Instruction(op, width, (dest(args[0]),), addr=address(args[1]), line=ln.lineno)
    if op is Opcode.STORE:
        need(2)
        return Instruction(op, width, (_atom(args[1], ln, params),), addr=address(args[0]), line=ln.lineno)
    need(_ARITY[op])
    operands = (dest(args[0]),) + tuple(_atom(a, ln, params) for a in args[1:])
    return Instruction(op, width, operands, condition=cond, line=ln.lineno)
