"""Speculative out-of-order semantics with hardware secrecy tracking.

A :class:`HardwareConfig` holds committed memory and registers, the reorder
buffer and the attacker's :class:`~prospect_sim.microctx.MicroContext`.
:func:`hw_step` applies one step: the low projection of the whole state is
recorded in the context, the context picks a directive, and the matching
fetch/execute/retire rule fires (or the step stalls).

ROB indices are 0-based.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, NamedTuple, Optional, Sequence

from .arch import ArchConfig, DeclassUnderflow, initial_arch_config
from .isa import (
    MASK, PC, Beqz, BinOp, Expr, H, Jmp, L, LabeledValue, Load, MaybeValue, Mov, OP_NAMES,
    Program, SecretPartition, Store, eval_expr, expr_ops,
)
from .microctx import (
    LEAK_ADDR, LEAK_PRED_TAG, LEAK_PRED_VALUE, UNDEF_CODE, Directive, MicroContext,
    StrategySpec, event_to_json,
)


class Mode(str, Enum):
    PROSPECT = "prospect"
    # aplsan replaced by apl, secret loads may commit, loads may bypass older stores
    INSECURE = "insecure"


STALLED = "stalled"
RULES = (
    "fetch-predict-branch-jmp", "fetch-others",
    "branch-commit", "branch-rollback", "jmp-commit", "jmp-rollback",
    "execute-assign", "execute-load-predict", "execute-load-commit", "execute-load-rollback",
    "execute-store", "retire-assign", "retire-store-low", "retire-store-high",
)
PATCHED_RULE = "retire-store-low-patched"
BYPASS_RULE = "execute-load-bypass"


# --- reorder buffer entries ---------------------------------------------


class MovR(NamedTuple):
    target: str
    expr: Expr
    tag: Optional[int] = None
    pc_incr: bool = False


class LoadR(NamedTuple):
    target: str
    expr: Expr
    tag: Optional[int] = None


class StoreR(NamedTuple):
    addr: Expr
    value: Expr
    tag: Optional[int] = None


def format_entry(e) -> str:
    from .isa import format_expr

    tag = "ε" if e.tag is None else str(e.tag)
    if type(e) is MovR:
        arrow = "<-+" if e.pc_incr else "<-"
        return f"{e.target} {arrow} {format_expr(e.expr)} @{tag}"
    if type(e) is LoadR:
        return f"{e.target} <- load {format_expr(e.expr)} @{tag}"
    return f"store {format_expr(e.addr)}, {format_expr(e.value)} @{tag}"


_OP_CODE = {name: i for i, name in enumerate(OP_NAMES)}


def _expr_code(e, ridx) -> tuple:
    t = type(e)
    if t is LabeledValue:
        return (0, e[0]) if e[1] == 0 else (1,)
    if t is str:
        return (2, ridx[e])
    return (3, _OP_CODE[e.op], _expr_code(e.left, ridx), _expr_code(e.right, ridx))


def entry_code(e, ridx: Mapping[str, int]) -> tuple:
    """Canonical integer encoding of the low projection of one ROB entry."""
    tag = -1 if e.tag is None else e.tag
    t = type(e)
    if t is MovR:
        return (0, ridx[e.target], _expr_code(e.expr, ridx), tag, 1 if e.pc_incr else 0)
    if t is LoadR:
        return (1, ridx[e.target], _expr_code(e.expr, ridx), tag)
    return (2, _expr_code(e.addr, ridx), _expr_code(e.value, ridx), tag)


# --- projections ---------------------------------------------------------


def low_proj_value(v: MaybeValue) -> MaybeValue:
    if v is None or v.level is not L:
        return None
    return v


def low_proj_mem(mem: Mapping[int, int], part: SecretPartition) -> dict:
    """Public cells keep their value; secret cells map to ``None``."""
    return {a: (v if part.level(a) is L else None) for a, v in mem.items()}


def low_proj_reg(reg: Mapping[str, MaybeValue]) -> dict:
    return {r: low_proj_value(v) for r, v in reg.items()}


def _low_expr(e):
    t = type(e)
    if t is LabeledValue:
        return e if e.level is L else None
    if t is BinOp:
        return BinOp(e.op, _low_expr(e.left), _low_expr(e.right))
    return e


def low_proj_buf(buf: Sequence) -> list:
    """Replace H-labeled literals by ``None``; everything else is kept."""
    out = []
    for e in buf:
        if type(e) is StoreR:
            out.append(StoreR(_low_expr(e.addr), _low_expr(e.value), e.tag))
        else:
            out.append(e._replace(expr=_low_expr(e.expr)))
    return out


def canonical_mem_low(mem: Mapping[int, int], part: SecretPartition) -> tuple:
    return tuple(sorted((a, v) for a, v in mem.items() if v and part.level(a) is L))


def canonical_reg_low(reg: Mapping[str, LabeledValue], registers: Sequence[str]) -> tuple:
    out = []
    for r in registers:
        v = reg[r]
        out.append(v[0] if v[1] == 0 else UNDEF_CODE)
    return tuple(out)


# --- apply functions -----------------------------------------------------


def _apl_prefix(buf: Sequence, reg: Mapping, upto: int) -> dict:
    view = dict(reg)
    for k in range(upto):
        e = buf[k]
        t = type(e)
        if t is MovR:
            x = e[1]
            view[e[0]] = x if type(x) is LabeledValue else None
        elif t is LoadR:
            view[e[0]] = None
    return view


def _speculating(buf: Sequence, upto: int) -> bool:
    for k in range(upto):
        if buf[k][2] is not None:
            return True
    return False


def _sanitize(view: dict) -> dict:
    return {r: (v if v is not None and v[1] == 0 else None) for r, v in view.items()}


def apl(buf: Sequence, reg: Mapping[str, MaybeValue]) -> dict:
    """Registers as seen through the pending ROB entries."""
    return _apl_prefix(buf, reg, len(buf))


def aplsan(buf: Sequence, reg: Mapping[str, MaybeValue]) -> dict:
    """:func:`apl`, with secrets hidden while any entry is speculative."""
    view = _apl_prefix(buf, reg, len(buf))
    return _sanitize(view) if _speculating(buf, len(buf)) else view


# --- configurations ------------------------------------------------------


@dataclass(eq=False)
class HardwareConfig:
    program: Program
    part: SecretPartition
    mem: dict
    reg: dict
    mu: MicroContext
    mode: Mode = Mode.PROSPECT
    buf: list = field(default_factory=list)
    capacity: Optional[int] = None
    vartime_ops: frozenset = frozenset()

    def __post_init__(self):
        self._ridx = self.program.register_index
        self._buf_low = [entry_code(e, self._ridx) for e in self.buf]
        self._mem_low: Optional[tuple] = None
        self._reg_low: Optional[tuple] = None
        self._fetch_cache: dict = {}

    def clone(self) -> "HardwareConfig":
        other = HardwareConfig.__new__(HardwareConfig)
        other.__dict__.update(self.__dict__)
        other.mem = dict(self.mem)
        other.reg = dict(self.reg)
        other.buf = list(self.buf)
        other._buf_low = list(self._buf_low)
        other.mu = self.mu.clone()
        return other

    def arch(self) -> ArchConfig:
        return ArchConfig(dict(self.mem), dict(self.reg))

    def mem_low(self) -> tuple:
        if self._mem_low is None:
            self._mem_low = canonical_mem_low(self.mem, self.part)
        return self._mem_low

    def reg_low(self) -> tuple:
        if self._reg_low is None:
            self._reg_low = canonical_reg_low(self.reg, self.program.registers)
        return self._reg_low

    def buf_low(self) -> tuple:
        return tuple(self._buf_low)

    def idle(self) -> bool:
        """Empty ROB and nothing left to fetch: every later step stalls."""
        return not self.buf and self.program.get(self.reg[PC].value) is None

    # buffer edits keep the cached encodings in sync
    def _push(self, e) -> None:
        self.buf.append(e)
        self._buf_low.append(entry_code(e, self._ridx))

    def _set(self, i: int, e) -> None:
        self.buf[i] = e
        self._buf_low[i] = entry_code(e, self._ridx)

    def _truncate(self, k: int) -> None:
        del self.buf[k:]
        del self._buf_low[k:]

    def _pop_head(self) -> None:
        del self.buf[0]
        del self._buf_low[0]

    def _fetched(self, loc: int, ins) -> tuple:
        pair = self._fetch_cache.get(loc)
        if pair is None:
            if type(ins) is Mov:
                first = MovR(ins.target, ins.expr)
            elif type(ins) is Load:
                first = LoadR(ins.target, ins.addr)
            else:
                first = StoreR(ins.addr, ins.value)
            second = MovR(PC, LabeledValue(loc + 1, L), None, True)
            pair = ((first, entry_code(first, self._ridx)),
                    (second, entry_code(second, self._ridx)))
            self._fetch_cache[loc] = pair
        return pair


def initial_hw_config(program: Program, part: SecretPartition = SecretPartition(),
                      mem: Optional[Mapping[int, int]] = None,
                      reg: Optional[Mapping[str, LabeledValue]] = None,
                      strategy: StrategySpec = StrategySpec(),
                      mode: Mode = Mode.PROSPECT, capacity: Optional[int] = None,
                      vartime_ops: Iterable[str] = (),
                      log_budget: Optional[int] = None) -> HardwareConfig:
    a = initial_arch_config(program, mem, reg)
    return from_arch(program, part, a, strategy, mode, capacity, vartime_ops, log_budget)


def from_arch(program: Program, part: SecretPartition, a: ArchConfig,
              strategy: StrategySpec = StrategySpec(), mode: Mode = Mode.PROSPECT,
              capacity: Optional[int] = None, vartime_ops: Iterable[str] = (),
              log_budget: Optional[int] = None) -> HardwareConfig:
    """Start the processor from a committed state; ``log_budget`` is passed to the context."""
    if any(v is None for v in a.reg.values()):
        raise ValueError("initial registers must all be defined")
    if a.reg[PC].level is not L:
        raise ValueError("pc must start public")
    mu = MicroContext(strategy, program, log_budget)
    return HardwareConfig(program, part, dict(a.mem), dict(a.reg), mu, Mode(mode), [], capacity,
                          frozenset(vartime_ops))


# --- stepping ------------------------------------------------------------


class StepResult(NamedTuple):
    directive: Directive
    rule: str
    decl: tuple = ()
    leaks: tuple = ()
    violations: tuple = ()
    pc: int = 0
    buf_size: int = 0

    def to_json(self, step: int) -> dict:
        return {"step": step, "directive": str(self.directive), "rule": self.rule,
                "buf_size": self.buf_size, "pc": self.pc,
                "leaks": [event_to_json(ev) for ev in self.leaks],
                "decl": list(self.decl), "violations": list(self.violations)}


def _spec_pc(h: HardwareConfig, upto: int) -> int:
    buf = h.buf
    for k in range(upto - 1, -1, -1):
        e = buf[k]
        if type(e) is MovR and e[0] == PC:
            return e[1][0]
    return h.reg[PC][0]


def _view(h: HardwareConfig, upto: int, sanitize: bool) -> dict:
    view = _apl_prefix(h.buf, h.reg, upto)
    if sanitize and h.mode is Mode.PROSPECT and _speculating(h.buf, upto):
        return _sanitize(view)
    return view


class _Step:
    """Per-step scratch: rule-level leaks and their security levels."""

    __slots__ = ("leaks", "high_leak")

    def __init__(self):
        self.leaks: list = []
        self.high_leak = False

    def leak(self, h: HardwareConfig, kind: int, value: int, level=L) -> None:
        h.mu.leak(kind, value)
        self.leaks.append((kind, value))
        if level is not L:
            self.high_leak = True


def _predict(h: HardwareConfig, st: _Step, loc: int) -> int:
    st.leak(h, LEAK_PRED_TAG, loc)
    v = h.mu.predict() & MASK
    st.leak(h, LEAK_PRED_VALUE, v)
    return v


def _fetch(h: HardwareConfig, st: _Step) -> str:
    buf = h.buf
    loc = _spec_pc(h, len(buf))
    ins = h.program.get(loc)
    if ins is None:
        return STALLED
    t = type(ins)
    if t is Beqz or t is Jmp:
        if h.capacity is not None and len(buf) + 1 > h.capacity:
            return STALLED
        v = _predict(h, st, loc)
        h._push(MovR(PC, LabeledValue(v, L), loc, False))
        return "fetch-predict-branch-jmp"
    if h.capacity is not None and len(buf) + 2 > h.capacity:
        return STALLED
    (first, c1), (second, c2) = h._fetched(loc, ins)
    buf.append(first)
    buf.append(second)
    h._buf_low.append(c1)
    h._buf_low.append(c2)
    return "fetch-others"


def _resolve_control(h: HardwareConfig, i: int, e: MovR) -> str:
    ins = h.program.get(e.tag)
    view = _view(h, i, True)
    if type(ins) is Beqz:
        c = eval_expr(ins.cond, view)
        if c is None:
            return STALLED
        nxt = ins.target if c[0] == 0 else e.tag + 1
        commit, rollback = "branch-commit", "branch-rollback"
    else:
        t = eval_expr(ins.expr, view)
        if t is None:
            return STALLED
        nxt = t[0]
        commit, rollback = "jmp-commit", "jmp-rollback"
    if nxt == e.expr[0]:
        h._set(i, MovR(PC, e.expr, None, False))
        return commit
    h._truncate(i)
    h._push(MovR(PC, LabeledValue(nxt, L), None, False))
    return rollback


def _resolve_load(h: HardwareConfig, st: _Step, i: int, e: MovR) -> str:
    ins = h.program.get(e.tag)
    secure = h.mode is Mode.PROSPECT
    a = eval_expr(ins.addr, _view(h, i, True))
    if a is None:
        return STALLED
    buf = h.buf
    store_before = False
    for k in range(i):
        if type(buf[k]) is StoreR:
            store_before = True
            break
    if store_before and secure:
        return STALLED
    addr = a[0]
    level = h.part.level(addr)
    actual = h.mem.get(addr, 0)
    st.leak(h, LEAK_ADDR, addr, a[1])
    loaded = LabeledValue(actual, level)
    if store_before:
        # stale read past a pending store: stays speculative until revalidated
        h._set(i, MovR(e.target, loaded, e.tag, False))
        if actual != e.expr[0]:
            h._truncate(i + 2)
        return BYPASS_RULE
    h._set(i, MovR(e.target, loaded, None, False))
    if actual == e.expr[0] and (level is L or not secure):
        return "execute-load-commit"
    h._truncate(i + 2)
    return "execute-load-rollback"


def _execute(h: HardwareConfig, st: _Step, i: int) -> str:
    buf = h.buf
    if i >= len(buf):
        return STALLED
    e = buf[i]
    t = type(e)
    if t is MovR:
        if e.pc_incr:
            return STALLED
        if e.target == PC:
            if e.tag is None:
                return STALLED
            return _resolve_control(h, i, e)
        if type(e.expr) is LabeledValue:
            if e.tag is None:
                return STALLED
            return _resolve_load(h, st, i, e)
        sanitize = bool(h.vartime_ops) and bool(expr_ops(e.expr) & h.vartime_ops)
        v = eval_expr(e.expr, _view(h, i, sanitize))
        if v is None:
            return STALLED
        h._set(i, MovR(e.target, v, e.tag, False))
        return "execute-assign"
    if t is LoadR:
        loc = _spec_pc(h, i)
        v = _predict(h, st, loc)
        h._set(i, MovR(e.target, LabeledValue(v, L), loc, False))
        return "execute-load-predict"
    if type(e.addr) is LabeledValue and type(e.value) is LabeledValue:
        return STALLED
    a = eval_expr(e.addr, _view(h, i, True))
    if a is None:
        return STALLED
    v = eval_expr(e.value, _view(h, i, False))
    if v is None:
        return STALLED
    h._set(i, StoreR(LabeledValue(a[0], L), v, e.tag))
    return "execute-store"


def _retire(h: HardwareConfig, st: _Step, patch: Optional[list]) -> tuple:
    if not h.buf:
        return STALLED, ()
    e = h.buf[0]
    if e.tag is not None:
        return STALLED, ()
    t = type(e)
    if t is MovR:
        if type(e.expr) is not LabeledValue:
            return STALLED, ()
        h.reg[e.target] = e.expr
        h._reg_low = None
        h._pop_head()
        return "retire-assign", ()
    if t is not StoreR or type(e.addr) is not LabeledValue or type(e.value) is not LabeledValue:
        return STALLED, ()
    addr, value = e.addr[0], e.value[0]
    if h.part.level(addr) is L:
        if patch is not None:
            if not patch:
                raise DeclassUnderflow(f"patched store to public address {addr} with empty trace")
            value = patch.pop(0)
            rule = PATCHED_RULE
        else:
            rule = "retire-store-low"
        decl = (value,)
    else:
        rule, decl = "retire-store-high", ()
    h.mem[addr] = value
    h._mem_low = None
    h._pop_head()
    st.leak(h, LEAK_ADDR, addr, e.addr[1])
    return rule, decl


def hw_step(h: HardwareConfig, patch: Optional[list] = None, monitor: bool = False) -> StepResult:
    """Apply one step to ``h`` in place.

    ``patch`` is the remaining declassification trace for patched execution;
    values are consumed from its head.  With ``monitor`` the invariant
    monitors run after the step and report into ``violations``.
    """
    h.mu.update(h.mem_low(), h.reg_low(), tuple(h._buf_low))
    d = h.mu.next()
    st = _Step()
    decl: tuple = ()
    kind = d.kind
    if kind == "fetch":
        rule = _fetch(h, st)
    elif kind == "retire":
        rule, decl = _retire(h, st, patch)
    else:
        rule = _execute(h, st, d.index)
    violations = check_invariants(h, st.high_leak) if monitor else ()
    return StepResult(d, rule, decl, tuple(st.leaks), violations, h.reg[PC][0], len(h.buf))


@dataclass
class HwRun:
    config: HardwareConfig
    decl: list
    results: list
    marks: list
    steps: int
    idle_at: Optional[int] = None
    residual: tuple = ()
    decl_steps: list = field(default_factory=list)

    def __iter__(self):
        return iter((self.config, self.decl, self.results))

    @property
    def log(self) -> list:
        return self.config.mu.log

    @property
    def violations(self) -> list:
        return [(i, v) for i, r in enumerate(self.results) for v in r.violations]


def _run(h0: HardwareConfig, n: int, patch: Optional[list], monitor: bool, record: bool,
         stop_when_idle: bool) -> HwRun:
    h = h0.clone()
    decl: list = []
    results: list = []
    marks: list = []
    idle_at = None
    idle_seen = False
    decl_steps: list = []
    for i in range(n):
        r = hw_step(h, patch, monitor)
        if r.decl:
            decl.extend(r.decl)
            decl_steps.append(i)
        if record:
            results.append(r)
        marks.append(len(h.mu.log))
        # stop one step after going idle, once the idle state's projection is logged
        if stop_when_idle and h.idle():
            if idle_seen:
                idle_at = i + 1
                break
            idle_seen = True
    return HwRun(h, decl, results, marks, len(marks), idle_at,
                 tuple(patch) if patch is not None else (), decl_steps)


def hw_run(h0: HardwareConfig, n: int, monitor: bool = True, record: bool = True,
           stop_when_idle: bool = False) -> HwRun:
    """Run ``n`` steps from a copy of ``h0``.

    With ``stop_when_idle`` the run ends one step after the machine goes idle.
    Every later step stalls on the unchanged idle state, whose projection is
    already in the log, so the rest of the μ log is a function of the recorded
    prefix.
    """
    return _run(h0, n, None, monitor, record, stop_when_idle)


def hw_run_patched(h0: HardwareConfig, delta: Sequence[int], n: int, monitor: bool = True,
                   record: bool = True, stop_when_idle: bool = False) -> HwRun:
    """Like :func:`hw_run`, but public stores write values taken from ``delta``."""
    return _run(h0, n, list(delta), monitor, record, stop_when_idle)


def trace_jsonl(results: Sequence[StepResult]) -> str:
    import json

    return "".join(json.dumps(r.to_json(i), separators=(",", ":")) + "\n"
                   for i, r in enumerate(results))


# --- deep update, transient ROBs, well-formedness ------------------------


def _deep_entry(reg: dict, mem: dict, e, program: Program, part: SecretPartition,
                patch: Optional[list]) -> None:
    t = type(e)
    if t is MovR:
        if e.tag is None:
            reg[e.target] = eval_expr(e.expr, reg)
            return
        ins = program.get(e.tag)
        if e.target == PC:
            if type(ins) is Beqz:
                c = eval_expr(ins.cond, reg)[0]
                reg[PC] = LabeledValue(ins.target if c == 0 else e.tag + 1, L)
            else:
                reg[PC] = LabeledValue(eval_expr(ins.expr, reg)[0], L)
            return
        a = eval_expr(ins.addr, reg)[0]
        reg[e.target] = LabeledValue(mem.get(a, 0), part.level(a))
    elif t is LoadR:
        a = eval_expr(e.expr, reg)[0]
        reg[e.target] = LabeledValue(mem.get(a, 0), part.level(a))
    else:
        a = eval_expr(e.addr, reg)[0]
        v = eval_expr(e.value, reg)[0]
        if patch is not None and part.level(a) is L:
            if not patch:
                raise DeclassUnderflow(f"patched store to public address {a} with empty trace")
            v = patch.pop(0)
        mem[a] = v


def deep_update(a: ArchConfig, buf: Sequence, program: Program,
                part: SecretPartition) -> ArchConfig:
    """Architectural effect of every entry, with predictions re-resolved from ``a``."""
    reg, mem = dict(a.reg), dict(a.mem)
    for e in buf:
        _deep_entry(reg, mem, e, program, part, None)
    return ArchConfig(mem, reg)


def deep_update_patched(a: ArchConfig, buf: Sequence, program: Program, part: SecretPartition,
                        delta: Sequence[int]) -> tuple[ArchConfig, tuple]:
    reg, mem, patch = dict(a.reg), dict(a.mem), list(delta)
    for e in buf:
        _deep_entry(reg, mem, e, program, part, patch)
    return ArchConfig(mem, reg), tuple(patch)


def goodpred(e, a: ArchConfig, program: Program, part: SecretPartition) -> bool:
    """Whether the prediction carried by ``e`` agrees with the architectural state ``a``."""
    if e.tag is None:
        return True
    ins = program.get(e.tag)
    if e.target == PC:
        if type(ins) is Beqz:
            c = eval_expr(ins.cond, a.reg)[0]
            return e.expr[0] == (ins.target if c == 0 else e.tag + 1)
        return e.expr[0] == eval_expr(ins.expr, a.reg)[0]
    addr = eval_expr(ins.addr, a.reg)[0]
    return part.level(addr) is L and a.mem.get(addr, 0) == e.expr[0]


def is_transient_buf(a: ArchConfig, buf: Sequence, program: Program,
                     part: SecretPartition) -> bool:
    reg, mem = dict(a.reg), dict(a.mem)
    for e in buf:
        if e.tag is not None and not goodpred(e, ArchConfig(mem, reg), program, part):
            return True
        _deep_entry(reg, mem, e, program, part, None)
    return False


def is_transient(h: HardwareConfig) -> bool:
    return is_transient_buf(h.arch(), h.buf, h.program, h.part)


def check_wellformed(buf: Sequence, a: ArchConfig, program: Program,
                     part: SecretPartition) -> tuple[bool, str]:
    """Structural check of a reorder buffer against the committed state ``a``.

    Instructions are matched against the program along the fetch path recorded
    in the buffer's own pc entries, so a mispredicted suffix is still matched
    against the code it was fetched from.  Value clauses (resolved store
    operands) are checked only while the prefix is not transient.
    """
    pc0 = a.reg[PC]
    if pc0.level is not L:
        return False, "pc level must be L"
    spc = pc0.value
    reg, mem = dict(a.reg), dict(a.mem)
    transient = False
    k, n = 0, len(buf)

    def advance(e):
        nonlocal transient
        if transient:
            return
        if e.tag is not None and not goodpred(e, ArchConfig(mem, reg), program, part):
            transient = True
            return
        _deep_entry(reg, mem, e, program, part, None)

    while k < n:
        e = buf[k]
        t = type(e)
        if t is MovR and e.target == PC:
            if type(e.expr) is not LabeledValue or e.expr.level is not L:
                return False, f"entry {k}: pc level must be L"
            if e.pc_incr:
                if k != 0:
                    return False, f"entry {k}: pc increment without its instruction"
                if e.tag is not None or e.expr.value != spc + 1:
                    return False, f"entry {k}: pc increment does not follow pc {spc}"
            else:
                ins = program.get(spc)
                if type(ins) not in (Beqz, Jmp):
                    return False, f"entry {k}: pc assignment at {spc} which is not a branch"
                if e.tag is not None and e.tag != spc:
                    return False, f"entry {k}: tag {e.tag} does not match pc {spc}"
            advance(e)
            spc = e.expr.value
            k += 1
            continue
        ins = program.get(spc)
        if ins is None:
            return False, f"entry {k}: no instruction at {spc}"
        it = type(ins)
        if t is MovR:
            if e.tag is None:
                if type(e.expr) is LabeledValue:
                    ok = it in (Mov, Load) and ins.target == e.target
                else:
                    ok = it is Mov and ins.target == e.target and ins.expr == e.expr
            else:
                ok = (it is Load and ins.target == e.target and e.tag == spc
                      and type(e.expr) is LabeledValue and e.expr.level is L)
        elif t is LoadR:
            ok = it is Load and e.tag is None and ins.target == e.target and ins.addr == e.expr
        else:
            ok = it is Store and e.tag is None
            if ok and type(e.addr) is LabeledValue and type(e.value) is LabeledValue:
                if e.addr.level is not L:
                    return False, f"entry {k}: resolved store address must be L"
                if not transient and (
                        e.addr.value != eval_expr(ins.addr, reg).value
                        or e.value != eval_expr(ins.value, reg)):
                    return False, f"entry {k}: resolved store disagrees with committed state"
            elif ok:
                ok = e.addr == ins.addr and e.value == ins.value
        if not ok:
            return False, f"entry {k}: does not match instruction at {spc}"
        if k + 1 >= n:
            return False, f"entry {k}: missing pc increment"
        nxt = buf[k + 1]
        if not (type(nxt) is MovR and nxt.pc_incr and nxt.tag is None
                and type(nxt.expr) is LabeledValue and nxt.expr == LabeledValue(spc + 1, L)):
            return False, f"entry {k + 1}: expected pc increment to {spc + 1}"
        advance(e)
        advance(nxt)
        spc += 1
        k += 2
    return True, ""


def check_invariants(h: HardwareConfig, high_leak: bool = False) -> tuple:
    """Runtime monitors; returns a tuple of violation messages.

    Only pc-is-L is guaranteed in the insecure mode; the remaining monitors
    describe the secure rules and are evaluated in that mode only.  The
    ``leak:`` monitor is label based: it also fires for programs whose leaked
    values are secret independent but carry an H label (a secret cell that is
    overwritten with a constant and read back, for instance).
    """
    out = []
    if h.reg[PC].level is not L:
        out.append("pc-is-L: committed pc is H")
    for k, e in enumerate(h.buf):
        if type(e) is MovR and e.target == PC and (
                type(e.expr) is not LabeledValue or e.expr.level is not L):
            out.append(f"pc-is-L: entry {k} assigns a non-L pc")
    if h.mode is not Mode.PROSPECT:
        return tuple(out)
    a = h.arch()
    ok, why = check_wellformed(h.buf, a, h.program, h.part)
    if not ok:
        out.append(f"wf: {why}")
    if _speculating(h.buf, len(h.buf)):
        if any(v is not None and v.level is H for v in aplsan(h.buf, h.reg).values()):
            out.append("aplsan: H value visible under speculation")
    if ok and not is_transient_buf(a, h.buf, h.program, h.part):
        deep = deep_update(a, h.buf, h.program, h.part)
        for r, v in apl(h.buf, h.reg).items():
            if v is not None and deep.reg[r] != v:
                out.append(f"apl-agreement: {r} is {v!r} but deep update gives {deep.reg[r]!r}")
    if high_leak:
        out.append("leak: H-labeled value passed to the microarchitectural context")
    return tuple(out)
