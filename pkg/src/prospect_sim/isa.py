"""Assembly language: values, security levels, expressions, programs.

Text format (one instruction per line, ``//`` comments)::

    .regs idx, size_A          // optional: restrict the register set
    .const B 17                // named constant usable in expressions
    Lname:                     // label, resolves to the next location
    x <- expr                  // assignment
    x <- load expr             // memory read
    store expr, expr           // memory write (address, value)
    jmp expr                   // indirect jump
    beqz expr, Lname           // branch to Lname if expr == 0
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Mapping, NamedTuple, Optional, Union

WORD_BITS = 64
MASK = (1 << WORD_BITS) - 1
PC = "pc"


class Level(IntEnum):
    L = 0
    H = 1

    def join(self, other: "Level") -> "Level":
        return self if self >= other else other


L = Level.L
H = Level.H


class LabeledValue(NamedTuple):
    value: int
    level: Level = L

    def __repr__(self) -> str:
        return f"{self.value}^{self.level.name}"


# Undefined is represented by ``None`` wherever a MaybeValue is expected.
UNDEFINED = None
MaybeValue = Optional[LabeledValue]


class BinOp(NamedTuple):
    op: str
    left: "Expr"
    right: "Expr"


Expr = Union[LabeledValue, str, BinOp]

OPS = {
    "add": lambda a, b: (a + b) & MASK,
    "sub": lambda a, b: (a - b) & MASK,
    "mul": lambda a, b: (a * b) & MASK,
    "and": lambda a, b: a & b,
    "or": lambda a, b: a | b,
    "xor": lambda a, b: a ^ b,
    "shl": lambda a, b: (a << (b & (WORD_BITS - 1))) & MASK,
    "shr": lambda a, b: a >> (b & (WORD_BITS - 1)),
    "eq": lambda a, b: int(a == b),
    "ult": lambda a, b: int(a < b),
}
OP_NAMES = tuple(OPS)

# infix spelling and binding strength (C-like)
_SYMBOLS = {
    "*": "mul", "+": "add", "-": "sub", "<<": "shl", ">>": "shr",
    "<": "ult", "==": "eq", "&": "and", "^": "xor", "|": "or",
}
_KEYWORD_OPS = {name: name for name in OPS}
_PRECEDENCE = {
    "mul": 7, "add": 6, "sub": 6, "shl": 5, "shr": 5,
    "ult": 4, "eq": 3, "and": 2, "xor": 1, "or": 0,
}
_OP_SYMBOL = {"mul": "*", "add": "+", "sub": "-", "shl": "<<", "shr": ">>",
              "ult": "<", "eq": "==", "and": "&", "xor": "^", "or": "|"}


def join(a: Level, b: Level) -> Level:
    return a if a >= b else b


def apply_op(op: str, a: int, b: int) -> int:
    return OPS[op](a & MASK, b & MASK)


def eval_expr(e: Expr, reg: Mapping[str, MaybeValue]) -> MaybeValue:
    """Evaluate ``e`` under ``reg``; ``None`` if any operand register is undefined."""
    t = type(e)
    if t is LabeledValue:
        return e
    if t is str:
        return reg[e]
    left = eval_expr(e.left, reg)
    if left is None:
        return None
    right = eval_expr(e.right, reg)
    if right is None:
        return None
    ll, rl = left[1], right[1]
    return LabeledValue(OPS[e.op](left[0], right[0]), ll if ll >= rl else rl)


def expr_registers(e: Expr) -> set[str]:
    t = type(e)
    if t is LabeledValue:
        return set()
    if t is str:
        return {e}
    return expr_registers(e.left) | expr_registers(e.right)


def expr_ops(e: Expr) -> set[str]:
    if type(e) is BinOp:
        return {e.op} | expr_ops(e.left) | expr_ops(e.right)
    return set()


def is_resolved(e: Expr) -> bool:
    return type(e) is LabeledValue


# --- instructions --------------------------------------------------------


class Mov(NamedTuple):
    target: str
    expr: Expr


class Jmp(NamedTuple):
    expr: Expr


class Beqz(NamedTuple):
    cond: Expr
    target: int


class Load(NamedTuple):
    target: str
    addr: Expr


class Store(NamedTuple):
    addr: Expr
    value: Expr


Instruction = Union[Mov, Jmp, Beqz, Load, Store]


def instruction_registers(ins: Instruction) -> set[str]:
    if isinstance(ins, Mov):
        return {ins.target} | expr_registers(ins.expr)
    if isinstance(ins, Load):
        return {ins.target} | expr_registers(ins.addr)
    if isinstance(ins, Store):
        return expr_registers(ins.addr) | expr_registers(ins.value)
    if isinstance(ins, Jmp):
        return expr_registers(ins.expr)
    return expr_registers(ins.cond)


@dataclass(frozen=True)
class Program:
    """Static code: locations ``0..len-1`` mapped to instructions."""

    instrs: tuple
    entry: int = 0
    registers: tuple = (PC,)
    labels: Mapping[str, int] = field(default_factory=dict, compare=False, hash=False)

    def __post_init__(self):
        regs = set(self.registers) | {PC}
        for ins in self.instrs:
            regs |= instruction_registers(ins)
        object.__setattr__(self, "registers", tuple(sorted(regs)))
        object.__setattr__(self, "instrs", tuple(self.instrs))

    def __len__(self) -> int:
        return len(self.instrs)

    def get(self, loc: int) -> Optional[Instruction]:
        if 0 <= loc < len(self.instrs):
            return self.instrs[loc]
        return None

    def __getitem__(self, loc: int) -> Instruction:
        ins = self.get(loc)
        if ins is None:
            raise KeyError(loc)
        return ins

    @property
    def register_index(self) -> dict:
        return {name: i for i, name in enumerate(self.registers)}


@dataclass(frozen=True)
class SecretPartition:
    """Closed address intervals holding secret (H) data; everything else is L."""

    ranges: tuple = ()

    def __post_init__(self):
        ranges = tuple(sorted((int(lo), int(hi)) for lo, hi in self.ranges))
        for lo, hi in ranges:
            if lo > hi:
                raise ValueError(f"empty secret range [{lo}, {hi}]")
        for (_, hi), (lo, _) in zip(ranges, ranges[1:]):
            if lo <= hi:
                raise ValueError("secret ranges overlap")
        object.__setattr__(self, "ranges", ranges)

    def level(self, addr: int) -> Level:
        for lo, hi in self.ranges:
            if lo <= addr <= hi:
                return H
        return L

    def to_json(self) -> list:
        return [[lo, hi] for lo, hi in self.ranges]


def memsec(part: SecretPartition, addr: int) -> Level:
    return part.level(addr)


# --- parsing -------------------------------------------------------------


class ParseError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line
        self.message = message


_TOKEN = re.compile(
    r"\s*(?:(?P<num>0[xX][0-9a-fA-F]+|\d+)|(?P<id>[A-Za-z_][A-Za-z0-9_]*)"
    r"|(?P<sym><<|>>|==|<-|[-+*&|^<(),:]))"
)


def _tokenize(text: str, lineno: int) -> list:
    tokens, pos = [], 0
    text = text.rstrip()
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m or m.end() == pos:
            raise ParseError(lineno, f"unexpected character {text[pos:].strip()[:1]!r}")
        pos = m.end()
        kind = m.lastgroup
        tokens.append((kind, m.group(kind)))
    return tokens


class _ExprParser:
    def __init__(self, tokens, lineno, resolve):
        self.tokens = tokens
        self.pos = 0
        self.lineno = lineno
        self.resolve = resolve

    def peek(self):
        return self.tokens[self.pos] if self.pos < len(self.tokens) else (None, None)

    def take(self):
        tok = self.peek()
        if tok[0] is None:
            raise ParseError(self.lineno, "unexpected end of line")
        self.pos += 1
        return tok

    def binop_at(self):
        kind, text = self.peek()
        if kind == "sym" and text in _SYMBOLS:
            return _SYMBOLS[text]
        if kind == "id" and text in _KEYWORD_OPS:
            return text
        return None

    def expr(self, min_prec: int = 0) -> Expr:
        left = self.primary()
        while True:
            op = self.binop_at()
            if op is None or _PRECEDENCE[op] < min_prec:
                return left
            self.pos += 1
            right = self.expr(_PRECEDENCE[op] + 1)
            left = BinOp(op, left, right)

    def primary(self) -> Expr:
        kind, text = self.take()
        if kind == "num":
            return LabeledValue(int(text, 0) & MASK, L)
        if kind == "sym" and text == "(":
            e = self.expr()
            if self.take() != ("sym", ")"):
                raise ParseError(self.lineno, "expected ')'")
            return e
        if kind == "id" and text not in _KEYWORD_OPS:
            return self.resolve(text, self.lineno)
        raise ParseError(self.lineno, f"unexpected token {text!r}")


def _strip_comment(line: str) -> str:
    i = line.find("//")
    return line if i < 0 else line[:i]


def parse_program(text: str) -> Program:
    """Parse assembly text into a :class:`Program`."""
    lines = text.splitlines()
    labels: dict[str, int] = {}
    consts: dict[str, int] = {}
    declared: Optional[set] = None
    entry_label = None
    body = []  # (lineno, tokens)

    # first pass: directives, labels, locations
    for lineno, raw in enumerate(lines, start=1):
        stripped = _strip_comment(raw).strip()
        if not stripped:
            continue
        if stripped.startswith("."):
            parts = stripped.replace(",", " ").split()
            name, args = parts[0], parts[1:]
            if name == ".regs":
                declared = (declared or set()) | set(args)
            elif name == ".const":
                if len(args) != 2:
                    raise ParseError(lineno, ".const expects a name and a value")
                try:
                    consts[args[0]] = int(args[1], 0) & MASK
                except ValueError:
                    raise ParseError(lineno, f"bad constant value {args[1]!r}") from None
            elif name == ".entry":
                if len(args) != 1:
                    raise ParseError(lineno, ".entry expects one label")
                entry_label = (args[0], lineno)
            else:
                raise ParseError(lineno, f"unknown directive {name}")
            continue
        tokens = _tokenize(stripped, lineno)
        while len(tokens) >= 2 and tokens[0][0] == "id" and tokens[1] == ("sym", ":"):
            name = tokens[0][1]
            if name in labels:
                raise ParseError(lineno, f"duplicate label {name}")
            labels[name] = len(body)
            tokens = tokens[2:]
        if tokens:
            body.append((lineno, tokens))

    if declared is not None:
        declared.add(PC)

    def resolve(name: str, lineno: int) -> Expr:
        if name in labels:
            return LabeledValue(labels[name], L)
        if name in consts:
            return LabeledValue(consts[name], L)
        if declared is not None and name not in declared:
            raise ParseError(lineno, f"unknown register {name}")
        return name

    def target_register(name: str, lineno: int) -> str:
        if name == PC:
            raise ParseError(lineno, "pc cannot be assigned directly")
        if name in labels or name in consts:
            raise ParseError(lineno, f"{name} is not a register")
        if declared is not None and name not in declared:
            raise ParseError(lineno, f"unknown register {name}")
        return name

    instrs = []
    for lineno, tokens in body:
        p = _ExprParser(tokens, lineno, resolve)
        kind, head = p.take()
        if kind != "id":
            raise ParseError(lineno, f"unexpected token {head!r}")
        if head == "store":
            addr = p.expr()
            if p.take() != ("sym", ","):
                raise ParseError(lineno, "store expects 'address, value'")
            ins = Store(addr, p.expr())
        elif head == "jmp":
            ins = Jmp(p.expr())
        elif head == "beqz":
            cond = p.expr()
            if p.take() != ("sym", ","):
                raise ParseError(lineno, "beqz expects 'condition, target'")
            tkind, ttext = p.take()
            if tkind == "num":
                target = int(ttext, 0)
            elif tkind == "id" and ttext in labels:
                target = labels[ttext]
            elif tkind == "id":
                raise ParseError(lineno, f"undefined label {ttext}")
            else:
                raise ParseError(lineno, f"bad branch target {ttext!r}")
            ins = Beqz(cond, target)
        elif p.peek() == ("sym", "<-"):
            p.take()
            target = target_register(head, lineno)
            if p.peek() == ("id", "load"):
                p.take()
                ins = Load(target, p.expr())
            else:
                ins = Mov(target, p.expr())
        else:
            raise ParseError(lineno, f"unknown instruction {head!r}")
        if p.pos != len(tokens):
            raise ParseError(lineno, f"trailing input {tokens[p.pos][1]!r}")
        instrs.append(ins)

    entry = 0
    if entry_label is not None:
        name, lineno = entry_label
        if name not in labels:
            raise ParseError(lineno, f"undefined label {name}")
        entry = labels[name]
    regs = tuple(declared) if declared is not None else ()
    return Program(tuple(instrs), entry, regs, labels)


# --- printing ------------------------------------------------------------


def format_expr(e: Expr, parent_prec: int = -1) -> str:
    t = type(e)
    if t is LabeledValue:
        return str(e.value) if e.level is L else f"{e.value}^H"
    if t is str:
        return e
    prec = _PRECEDENCE[e.op]
    text = (f"{format_expr(e.left, prec)} {_OP_SYMBOL[e.op]} "
            f"{format_expr(e.right, prec + 1)}")
    return f"({text})" if prec < parent_prec else text


def format_instruction(ins: Instruction, labels_at: Optional[Mapping[int, str]] = None) -> str:
    if isinstance(ins, Mov):
        return f"{ins.target} <- {format_expr(ins.expr)}"
    if isinstance(ins, Load):
        return f"{ins.target} <- load {format_expr(ins.addr)}"
    if isinstance(ins, Store):
        return f"store {format_expr(ins.addr)}, {format_expr(ins.value)}"
    if isinstance(ins, Jmp):
        return f"jmp {format_expr(ins.expr)}"
    target = (labels_at or {}).get(ins.target, str(ins.target))
    return f"beqz {format_expr(ins.cond)}, {target}"


def format_program(program: Program) -> str:
    """Render a program as text that :func:`parse_program` reads back."""
    labels_at: dict[int, str] = {}
    for name, loc in sorted(program.labels.items(), key=lambda kv: (kv[1], kv[0])):
        labels_at.setdefault(loc, name)
    out = [".regs " + ", ".join(r for r in program.registers if r != PC)]
    if program.entry != 0:
        labels_at.setdefault(program.entry, f"L{program.entry}")
        out.append(f".entry {labels_at[program.entry]}")
    for loc in range(len(program.instrs) + 1):
        if loc in labels_at:
            out.append(f"{labels_at[loc]}:")
        if loc < len(program.instrs):
            out.append("    " + format_instruction(program.instrs[loc], labels_at))
    return "\n".join(out) + "\n"
