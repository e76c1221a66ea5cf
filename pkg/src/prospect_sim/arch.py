"""Sequential semantics, its patched variant, and constant-time checkers."""

from __future__ import annotations

import itertools
import random
from dataclasses import dataclass, field
from typing import Iterator, Mapping, NamedTuple, Optional, Sequence, Union

from .isa import (
    PC, Beqz, H, Jmp, L, LabeledValue, Load, Mov, Program, SecretPartition, Store, eval_expr,
)


class Halt(Exception):
    """Raised when the program counter leaves the program."""


class DeclassUnderflow(Exception):
    """A patched store to public memory found the declassification trace empty."""


# --- observations --------------------------------------------------------


class BranchOutcome(NamedTuple):
    taken: bool


class JumpTarget(NamedTuple):
    target: int


class LoadAddr(NamedTuple):
    addr: int


class StoreAddr(NamedTuple):
    addr: int


class Epsilon(NamedTuple):
    pass


EPSILON = Epsilon()
Observation = Union[BranchOutcome, JumpTarget, LoadAddr, StoreAddr, Epsilon]


def observation_to_json(obs: Observation) -> dict:
    if isinstance(obs, BranchOutcome):
        return {"kind": "branch", "taken": obs.taken}
    if isinstance(obs, JumpTarget):
        return {"kind": "jump", "target": obs.target}
    if isinstance(obs, LoadAddr):
        return {"kind": "load", "addr": obs.addr}
    if isinstance(obs, StoreAddr):
        return {"kind": "store", "addr": obs.addr}
    return {"kind": "epsilon"}


# --- configurations ------------------------------------------------------


@dataclass
class ArchConfig:
    mem: dict = field(default_factory=dict)
    reg: dict = field(default_factory=dict)

    def copy(self) -> "ArchConfig":
        return ArchConfig(dict(self.mem), dict(self.reg))

    def load(self, addr: int) -> int:
        return self.mem.get(addr, 0)

    def canonical(self) -> tuple:
        mem = tuple(sorted((a, v) for a, v in self.mem.items() if v))
        reg = tuple(sorted((r, v.value, int(v.level)) for r, v in self.reg.items()))
        return mem, reg

    def __eq__(self, other):
        if not isinstance(other, ArchConfig):
            return NotImplemented
        return self.canonical() == other.canonical()


def initial_arch_config(program: Program, mem: Optional[Mapping[int, int]] = None,
                        reg: Optional[Mapping[str, LabeledValue]] = None) -> ArchConfig:
    """Every program register defined; unlisted ones start at ``0^L``; pc at the entry."""
    regs = {name: LabeledValue(0, L) for name in program.registers}
    regs[PC] = LabeledValue(program.entry, L)
    for name, v in (reg or {}).items():
        regs[name] = v if isinstance(v, LabeledValue) else LabeledValue(int(v), L)
    return ArchConfig(dict(mem or {}), regs)


def low_equivalent(a: ArchConfig, b: ArchConfig, part: SecretPartition) -> bool:
    def low(c: ArchConfig):
        mem = tuple(sorted((k, v) for k, v in c.mem.items() if v and part.level(k) is L))
        reg = tuple(sorted((r, v.value if v.level is L else None) for r, v in c.reg.items()))
        return mem, reg
    return low(a) == low(b)


# --- stepping ------------------------------------------------------------


def _step(program: Program, part: SecretPartition, c: ArchConfig,
          patch: Optional[list]) -> tuple[ArchConfig, Observation, tuple]:
    pc = c.reg[PC].value
    ins = program.get(pc)
    if ins is None:
        raise Halt(pc)
    nxt = c.copy()
    reg = nxt.reg
    delta: tuple = ()
    if isinstance(ins, Beqz):
        cond = eval_expr(ins.cond, c.reg)
        taken = cond.value == 0
        reg[PC] = LabeledValue(ins.target if taken else pc + 1, L)
        return nxt, BranchOutcome(taken), delta
    if isinstance(ins, Jmp):
        target = eval_expr(ins.expr, c.reg).value
        reg[PC] = LabeledValue(target, L)
        return nxt, JumpTarget(target), delta
    if isinstance(ins, Mov):
        reg[ins.target] = eval_expr(ins.expr, c.reg)
        obs: Observation = EPSILON
    elif isinstance(ins, Load):
        a = eval_expr(ins.addr, c.reg).value
        reg[ins.target] = LabeledValue(c.load(a), part.level(a))
        obs = LoadAddr(a)
    else:
        a = eval_expr(ins.addr, c.reg).value
        v = eval_expr(ins.value, c.reg).value
        if part.level(a) is L:
            if patch is not None:
                if not patch:
                    raise DeclassUnderflow(f"store to public address {a} with empty trace")
                v = patch.pop(0)
            else:
                delta = (v,)
        nxt.mem[a] = v
        obs = StoreAddr(a)
    reg[PC] = LabeledValue(pc + 1, L)
    return nxt, obs, delta


def arch_step(program: Program, part: SecretPartition, c: ArchConfig):
    """One sequential step: ``(config', observation, declassified values)``."""
    return _step(program, part, c, None)


def arch_step_patched(program: Program, part: SecretPartition, c: ArchConfig,
                      delta: Sequence[int]):
    """Like :func:`arch_step`, but stores to public memory write ``delta[0]``.

    Returns ``(config', observation, remaining delta)``.
    """
    remaining = list(delta)
    nxt, obs, _ = _step(program, part, c, remaining)
    return nxt, obs, tuple(remaining)


@dataclass
class ArchRun:
    final: ArchConfig
    observations: list
    decl: list
    steps: int
    halted: bool
    residual: tuple = ()


def arch_run(program: Program, part: SecretPartition, c0: ArchConfig, n: int) -> ArchRun:
    c, obs, decl = c0, [], []
    for i in range(n):
        try:
            c, o, d = _step(program, part, c, None)
        except Halt:
            return ArchRun(c, obs, decl, i, True)
        obs.append(o)
        decl.extend(d)
    return ArchRun(c, obs, decl, n, program.get(c.reg[PC].value) is None)


def arch_run_patched(program: Program, part: SecretPartition, c0: ArchConfig,
                     delta: Sequence[int], n: int) -> ArchRun:
    c, obs, remaining = c0, [], list(delta)
    for i in range(n):
        try:
            c, o, _ = _step(program, part, c, remaining)
        except Halt:
            return ArchRun(c, obs, [], i, True, tuple(remaining))
        obs.append(o)
    return ArchRun(c, obs, [], n, program.get(c.reg[PC].value) is None, tuple(remaining))


# --- secret domains and pair enumeration ---------------------------------


SecretDomains = Mapping[Union[int, str], Sequence[int]]


def secret_assignments(domains: SecretDomains) -> list[dict]:
    keys = sorted(domains, key=lambda k: (isinstance(k, str), str(k)))
    values = [list(domains[k]) for k in keys]
    return [dict(zip(keys, combo)) for combo in itertools.product(*values)]


def apply_secrets(base: ArchConfig, secrets: Mapping) -> ArchConfig:
    c = base.copy()
    for k, v in secrets.items():
        if isinstance(k, str):
            c.reg[k] = LabeledValue(int(v), H)
        else:
            c.mem[int(k)] = int(v)
    return c


def validate_domains(domains: SecretDomains, part: SecretPartition,
                     reg_levels: Mapping[str, object] = ()) -> None:
    for k, vals in domains.items():
        if not list(vals):
            raise ValueError(f"empty secret domain for {k!r}")
        if isinstance(k, str):
            if k == PC:
                raise ValueError("pc cannot be secret")
        elif part.level(int(k)) is not H:
            raise ValueError(f"address {k} has a secret domain but is public")


EXHAUSTIVE_LIMIT = 4096


def low_equivalent_pairs(domains: SecretDomains, budget: int, seed: int = 0,
                         ordered: bool = False) -> Iterator[tuple[dict, dict]]:
    """Secret assignment pairs: exhaustive when small, else ``budget`` seeded samples."""
    assignments = secret_assignments(domains)
    total = len(assignments) ** 2
    if total <= EXHAUSTIVE_LIMIT:
        for i, a in enumerate(assignments):
            for j, b in enumerate(assignments):
                if i == j or (not ordered and j < i):
                    continue
                yield a, b
        return
    rng = random.Random(seed)
    keys = sorted(domains, key=lambda k: (isinstance(k, str), str(k)))
    for _ in range(budget):
        yield ({k: rng.choice(list(domains[k])) for k in keys},
               {k: rng.choice(list(domains[k])) for k in keys})


# --- verdicts ------------------------------------------------------------


PASS = "pass"
FAIL = "fail"
PRECONDITION = "precondition"


@dataclass
class Verdict:
    status: str
    check: str
    bound: int
    cells: int = 0
    detail: dict = field(default_factory=dict)
    witness: Optional[dict] = None

    @property
    def passed(self) -> bool:
        return self.status == PASS

    def exit_code(self) -> int:
        return {PASS: 0, FAIL: 1, PRECONDITION: 2}[self.status]

    def to_json(self) -> dict:
        out = {"check": self.check, "status": self.status, "bound": self.bound,
               "cells": self.cells, "detail": self.detail}
        if self.witness is not None:
            out["witness"] = self.witness
        return out


def _first_difference(a: Sequence, b: Sequence) -> Optional[int]:
    for i, (x, y) in enumerate(zip(a, b)):
        if x != y:
            return i
    if len(a) != len(b):
        return min(len(a), len(b))
    return None


def _json_secrets(s: Mapping) -> dict:
    return {str(k): v for k, v in s.items()}


def check_constant_time(program: Program, part: SecretPartition, secret_domains: SecretDomains,
                        n: int, sample_budget: int = 1000, base: Optional[ArchConfig] = None,
                        seed: int = 0) -> Verdict:
    """Differential check: equal observation and declassification traces for every pair."""
    base = base or initial_arch_config(program)
    validate_domains(secret_domains, part)
    runs: dict = {}

    def run(secrets):
        key = tuple(sorted(secrets.items(), key=lambda kv: str(kv[0])))
        if key not in runs:
            runs[key] = arch_run(program, part, apply_secrets(base, secrets), n)
        return runs[key]

    cells = 0
    for a, b in low_equivalent_pairs(secret_domains, sample_budget, seed):
        cells += 1
        ra, rb = run(a), run(b)
        step = _first_difference(ra.observations, rb.observations)
        if step is not None:
            def at(obs, i):
                return observation_to_json(obs[i]) if i < len(obs) else None
            return Verdict(FAIL, "constant-time", n, cells, {
                "reason": "observations differ", "step": step,
                "pair": [_json_secrets(a), _json_secrets(b)],
                "observations": [at(ra.observations, step), at(rb.observations, step)]})
        if ra.decl != rb.decl:
            return Verdict(FAIL, "constant-time", n, cells, {
                "reason": "declassification traces differ",
                "pair": [_json_secrets(a), _json_secrets(b)],
                "decl": [ra.decl, rb.decl]})
    return Verdict(PASS, "constant-time", n, cells)


def check_ct_up_to_decl(program: Program, part: SecretPartition, secret_domains: SecretDomains,
                        n: int, sample_budget: int = 1000, base: Optional[ArchConfig] = None,
                        seed: int = 0) -> Verdict:
    """Second run of each pair replays the first run's declassified values."""
    base = base or initial_arch_config(program)
    validate_domains(secret_domains, part)
    cells = 0
    for a, b in low_equivalent_pairs(secret_domains, sample_budget, seed, ordered=True):
        cells += 1
        ra = arch_run(program, part, apply_secrets(base, a), n)
        pair = [_json_secrets(a), _json_secrets(b)]
        try:
            rb = arch_run_patched(program, part, apply_secrets(base, b), ra.decl, n)
        except DeclassUnderflow as exc:
            return Verdict(FAIL, "ct-up-to-declassification", n, cells,
                           {"reason": "declassification underflow", "pair": pair,
                            "message": str(exc)})
        step = _first_difference(ra.observations, rb.observations)
        if step is not None:
            def at(obs, i):
                return observation_to_json(obs[i]) if i < len(obs) else None
            return Verdict(FAIL, "ct-up-to-declassification", n, cells, {
                "reason": "observations differ", "step": step, "pair": pair,
                "observations": [at(ra.observations, step), at(rb.observations, step)]})
        if rb.residual:
            return Verdict(FAIL, "ct-up-to-declassification", n, cells, {
                "reason": "declassification trace not consumed", "pair": pair,
                "residual": list(rb.residual)})
    return Verdict(PASS, "ct-up-to-declassification", n, cells)
