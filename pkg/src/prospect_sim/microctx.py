"""Attacker-controlled microarchitectural context.

The context is an append-only log of attacker-visible events plus a
deterministic strategy that picks the next directive and every prediction.
Strategy state changes only when an event is appended, so two contexts with
equal logs and equal strategy specs always make the same choices.

Events are plain tuples of integers so that they hash identically in every
process (``hash`` of int tuples is not salted):

* ``(PREAMBLE, mem_low, reg_low, buf_low)``: low projections taken at the start of a step
* ``(LEAK_ADDR, address)``
* ``(LEAK_PRED_TAG, location)``: a prediction is about to be made for ``location``
* ``(LEAK_PRED_VALUE, value)``

In the projections an undefined value is encoded as ``-1``.

A context built with a ``log_budget`` keeps full preamble structures only
while their canonical size fits the budget; older preambles are replaced by
:class:`CompactedEvent` objects holding compressed canonical bytes.  Compacted
and full events compare equal exactly when their canonical bytes do.
"""

from __future__ import annotations

import copy
import json
import zlib
from collections import deque
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

from .isa import MASK, Beqz, Jmp, Load, Program

PREAMBLE = 0
LEAK_ADDR = 1
LEAK_PRED_TAG = 2
LEAK_PRED_VALUE = 3
UNDEF_CODE = -1

_EVENT_NAMES = {PREAMBLE: "preamble", LEAK_ADDR: "leak-addr",
                LEAK_PRED_TAG: "pred-tag", LEAK_PRED_VALUE: "pred-value"}


class StrategyMismatch(Exception):
    """Two contexts built from different strategies cannot be compared."""


class Directive(NamedTuple):
    kind: str
    index: int = -1

    def __str__(self) -> str:
        return f"execute:{self.index}" if self.kind == "execute" else self.kind

    @classmethod
    def parse(cls, text: str) -> "Directive":
        text = text.strip().lower()
        if text in ("fetch", "retire"):
            return cls(text)
        if text.startswith("execute:"):
            idx = int(text.split(":", 1)[1])
            if idx < 0:
                raise ValueError(f"negative ROB index in {text!r}")
            return cls("execute", idx)
        raise ValueError(f"unknown directive {text!r}")


FETCH = Directive("fetch")
RETIRE = Directive("retire")


def execute(index: int) -> Directive:
    return Directive("execute", index)


# --- strategy specs ------------------------------------------------------

ROUND_ROBIN = "round-robin"
SEEDED_RANDOM = "seeded-random"
SCRIPTED = "scripted"
ALWAYS_TAKEN = "always-taken"
CONSTANT_VALUE = "constant-value"
STRATEGY_KINDS = (ROUND_ROBIN, SEEDED_RANDOM, SCRIPTED, ALWAYS_TAKEN, CONSTANT_VALUE)


class ScriptStep(NamedTuple):
    directive: Directive
    predict: Optional[int] = None


def _as_step(s) -> ScriptStep:
    if isinstance(s, ScriptStep):
        return s
    if isinstance(s, Directive):
        return ScriptStep(s)
    return ScriptStep(*s)


@dataclass(frozen=True)
class StrategySpec:
    kind: str = ROUND_ROBIN
    seed: int = 0
    value: int = 0
    script: tuple = field(default=())

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise ValueError(f"unknown strategy {self.kind!r}")
        object.__setattr__(self, "script", tuple(_as_step(s) for s in self.script))

    @classmethod
    def round_robin(cls):
        return cls(ROUND_ROBIN)

    @classmethod
    def seeded_random(cls, seed: int):
        return cls(SEEDED_RANDOM, seed=seed)

    @classmethod
    def always_taken(cls):
        return cls(ALWAYS_TAKEN)

    @classmethod
    def constant_value(cls, value: int):
        return cls(CONSTANT_VALUE, value=value)

    @classmethod
    def scripted(cls, steps: Sequence):
        return cls(SCRIPTED, script=tuple(steps))

    def to_json(self) -> dict:
        out: dict = {"kind": self.kind}
        if self.kind == SEEDED_RANDOM:
            out["seed"] = self.seed
        if self.kind == CONSTANT_VALUE:
            out["value"] = self.value
        if self.kind == SCRIPTED:
            out["steps"] = [script_step_to_json(s) for s in self.script]
        return out

    @classmethod
    def from_json(cls, data: dict) -> "StrategySpec":
        kind = data.get("kind", SCRIPTED if "steps" in data else ROUND_ROBIN)
        steps = tuple(script_step_from_json(s) for s in data.get("steps", ()))
        return cls(kind, int(data.get("seed", 0)), int(data.get("value", 0)), steps)


def script_step_to_json(step: ScriptStep) -> dict:
    out: dict = {"next": str(step.directive)}
    if step.predict is not None:
        out["predict"] = step.predict
    return out


def script_step_from_json(data: dict) -> ScriptStep:
    predict = data.get("predict")
    return ScriptStep(Directive.parse(data["next"]), None if predict is None else int(predict))


def load_script(path) -> StrategySpec:
    """Read a scripted strategy: ``{"steps": [{"next": ..., "predict": ...}, ...]}``."""
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    return StrategySpec(SCRIPTED, script=tuple(script_step_from_json(s) for s in data["steps"]))


# --- strategies ----------------------------------------------------------


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK
    return x ^ (x >> 31)


class _RoundRobin:
    """Fetch, then execute every ROB index in order, then retire; repeat."""

    uses_digest = False

    def __init__(self, spec: StrategySpec, program: Program):
        self.program = program
        self.cursor = 0
        self.directive = FETCH
        self.prediction = 0

    def on_preamble(self, ctx: "MicroContext", buf_len: int) -> None:
        if self.cursor == 0:
            self.directive = FETCH
            self.cursor = 1
        elif self.cursor - 1 < buf_len:
            self.directive = execute(self.cursor - 1)
            self.cursor += 1
        else:
            self.directive = RETIRE
            self.cursor = 0

    def default_prediction(self, loc: int) -> int:
        ins = self.program.get(loc)
        if isinstance(ins, Load):
            return 0
        return loc + 1

    def on_pred_tag(self, ctx: "MicroContext", loc: int) -> None:
        self.prediction = self.default_prediction(loc)


class _AlwaysTaken(_RoundRobin):
    def default_prediction(self, loc: int) -> int:
        ins = self.program.get(loc)
        if isinstance(ins, Beqz):
            return ins.target
        return super().default_prediction(loc)


class _ConstantValue(_RoundRobin):
    def __init__(self, spec: StrategySpec, program: Program):
        super().__init__(spec, program)
        self.value = spec.value & MASK

    def default_prediction(self, loc: int) -> int:
        if isinstance(self.program.get(loc), Load):
            return self.value
        return super().default_prediction(loc)


class _Scripted(_RoundRobin):
    def __init__(self, spec: StrategySpec, program: Program):
        super().__init__(spec, program)
        self.script = spec.script
        self.step = -1

    def on_preamble(self, ctx, buf_len):
        self.step += 1
        if self.step < len(self.script):
            self.directive = self.script[self.step].directive
        else:
            super().on_preamble(ctx, buf_len)

    def on_pred_tag(self, ctx, loc):
        if 0 <= self.step < len(self.script) and self.script[self.step].predict is not None:
            self.prediction = self.script[self.step].predict & MASK
        else:
            self.prediction = self.default_prediction(loc)


class _SeededRandom:
    """Every choice is ``splitmix64`` of (seed, log length, rolling log digest).

    The seed also fixes a scheduling profile: fetch and retire weights, and how
    strongly execution favours younger ROB entries (the largest of ``bias``
    uniform draws), which stands in for slow branch resolution.
    """

    uses_digest = True
    FETCH_WEIGHTS = (20, 30, 45)
    RETIRE_WEIGHTS = (10, 20)
    BIASES = (1, 2, 3, 4)

    def __init__(self, spec: StrategySpec, program: Program):
        self.program = program
        self.seed = spec.seed & MASK
        self.directive = FETCH
        self.prediction = 0
        profile = splitmix64(self.seed ^ 0x5EED)
        self.fetch_weight = self.FETCH_WEIGHTS[profile % 3]
        self.retire_weight = self.RETIRE_WEIGHTS[(profile >> 8) % 2]
        self.bias = self.BIASES[(profile >> 16) % 4]

    def _draw(self, ctx: "MicroContext", salt: int) -> int:
        x = self.seed ^ splitmix64(len(ctx.log) * 0x100000001B3 + salt)
        return splitmix64(x ^ (ctx.digest & MASK))

    def on_preamble(self, ctx, buf_len):
        r = self._draw(ctx, 1)
        roll = r % 100
        if roll < self.fetch_weight or buf_len == 0:
            self.directive = FETCH
        elif roll < self.fetch_weight + self.retire_weight:
            self.directive = RETIRE
        else:
            # one draw in four is uniform so that old entries are never starved
            draws = 1 if (r >> 12) % 4 == 0 else self.bias
            index = 0
            for k in range(draws):
                index = max(index, (splitmix64(r + k) >> 16) % buf_len)
            self.directive = execute(index)

    def on_pred_tag(self, ctx, loc):
        r = self._draw(ctx, 2)
        ins = self.program.get(loc)
        if isinstance(ins, Beqz):
            self.prediction = ins.target if r & 1 else loc + 1
        elif isinstance(ins, Jmp):
            self.prediction = (r >> 8) % (len(self.program) + 1)
        else:
            pick = r & 3
            if pick == 0:
                self.prediction = 0
            elif pick == 3:
                self.prediction = r >> 2
            else:
                self.prediction = (r >> 8) % 32


_STRATEGIES = {
    ROUND_ROBIN: _RoundRobin, SEEDED_RANDOM: _SeededRandom, SCRIPTED: _Scripted,
    ALWAYS_TAKEN: _AlwaysTaken, CONSTANT_VALUE: _ConstantValue,
}


# --- context -------------------------------------------------------------


class CompactedEvent:
    """A log event reduced to its compressed canonical serialization."""

    __slots__ = ("data",)

    def __init__(self, event):
        self.data = zlib.compress(_event_bytes(event))

    def canonical(self) -> bytes:
        return zlib.decompress(self.data)

    def expand(self) -> tuple:
        return _from_code(json.loads(self.canonical()))

    def __eq__(self, other):
        if isinstance(other, CompactedEvent):
            return self.data == other.data
        if isinstance(other, tuple):
            return self.canonical() == _event_bytes(other)
        return NotImplemented

    __hash__ = None

    def __repr__(self) -> str:
        return f"CompactedEvent({self.expand()!r})"


class MicroContext:
    """Event log plus the strategy's derived state.

    ``log_budget`` bounds, in canonical bytes, the preamble structures kept in
    full; ``None`` keeps everything.
    """

    def __init__(self, spec: StrategySpec, program: Program, log_budget: Optional[int] = None):
        self.spec = spec
        self.log: list = []
        self.digest = 0
        self.log_budget = log_budget
        self._retained: deque = deque()       # (index, size) of full preambles
        self._retained_size = 0
        self._strategy = _STRATEGIES[spec.kind](spec, program)
        self._hash = self._strategy.uses_digest

    def _append(self, event: tuple) -> None:
        self.log.append(event)
        if self._hash:
            self.digest = hash((self.digest, event))
        if self.log_budget is not None and event[0] == PREAMBLE:
            self._retain(len(self.log) - 1, len(_event_bytes(event)))

    def _retain(self, index: int, size: int) -> None:
        self._retained.append((index, size))
        self._retained_size += size
        while self._retained_size > self.log_budget and self._retained:
            old, old_size = self._retained.popleft()
            self.log[old] = CompactedEvent(self.log[old])
            self._retained_size -= old_size

    def update(self, mem_low: tuple, reg_low: tuple, buf_low: tuple) -> None:
        """Record the low projections of the current state."""
        self._append((PREAMBLE, mem_low, reg_low, buf_low))
        self._strategy.on_preamble(self, len(buf_low))

    def leak(self, kind: int, value: int) -> None:
        self._append((kind, value))
        if kind == LEAK_PRED_TAG:
            self._strategy.on_pred_tag(self, value)

    def next(self) -> Directive:
        return self._strategy.directive

    def predict(self) -> int:
        return self._strategy.prediction

    def clone(self) -> "MicroContext":
        other = copy.copy(self)
        other.log = list(self.log)
        other._retained = deque(self._retained)
        other._strategy = copy.copy(self._strategy)
        return other

    def __len__(self) -> int:
        return len(self.log)

    def to_json(self) -> list:
        return [event_to_json(e) for e in self.log]

    def canonical_bytes(self) -> bytes:
        return canonical_log_bytes(self.log)


def mc_update(mu: MicroContext, mem_low: tuple, reg_low: tuple, buf_low: tuple) -> MicroContext:
    for part in (mem_low, reg_low, buf_low):
        _assert_int_structure(part)
    mu.update(mem_low, reg_low, buf_low)
    return mu


def mc_predict(mu: MicroContext) -> int:
    return mu.predict()


def mc_next(mu: MicroContext) -> Directive:
    return mu.next()


def mc_equal(a: MicroContext, b: MicroContext) -> bool:
    if a.spec != b.spec:
        raise StrategyMismatch(f"{a.spec.to_json()} vs {b.spec.to_json()}")
    return a.log == b.log


def first_divergence(a: Sequence, b: Sequence) -> Optional[int]:
    """Index of the first differing event, or ``None`` if the logs are equal."""
    if a == b:
        return None
    for i, (x, y) in enumerate(zip(a, b)):
        if x != y:
            return i
    return min(len(a), len(b))


def _assert_int_structure(obj) -> None:
    # projections are int-only; a labeled value here means an unprojected input
    if isinstance(obj, tuple) and not hasattr(obj, "_fields"):
        for item in obj:
            _assert_int_structure(item)
    elif type(obj) is not int:
        raise TypeError(f"projection contains non-integer item {obj!r}")


def _undef(x):
    return None if x == UNDEF_CODE else x


def _code_to_json(code):
    if isinstance(code, tuple):
        return [_code_to_json(c) for c in code]
    return code


def _from_code(code):
    if isinstance(code, list):
        return tuple(_from_code(c) for c in code)
    return code


def _event_bytes(event: tuple) -> bytes:
    return json.dumps(_code_to_json(event), separators=(",", ":")).encode()


def event_to_json(event) -> dict:
    if isinstance(event, CompactedEvent):
        event = event.expand()
    kind = event[0]
    if kind == PREAMBLE:
        _, mem, reg, buf = event
        return {"event": "preamble", "mem": [list(p) for p in mem],
                "reg": [_undef(v) for v in reg], "buf": _code_to_json(buf)}
    return {"event": _EVENT_NAMES[kind], "value": event[1]}


def canonical_log_bytes(log: Sequence) -> bytes:
    parts = [e.canonical() if isinstance(e, CompactedEvent) else _event_bytes(e) for e in log]
    return b"[" + b",".join(parts) + b"]"
