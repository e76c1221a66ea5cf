"""Differential security experiments over pairs of low-equivalent configurations.

Every check runs the two members of a pair under clones of the same
strategy and compares their microarchitectural logs event by event.  A
verdict of ``pass`` means no counterexample was found at the stated budget.
"""

from __future__ import annotations

import bisect
import random
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Mapping, Optional, Sequence

from .arch import (
    FAIL, PASS, PRECONDITION, ArchConfig, DeclassUnderflow, Verdict, apply_secrets,
    check_constant_time, check_ct_up_to_decl, low_equivalent, secret_assignments,
    validate_domains,
)
from .corpus import Gadget, get_gadget
from .hardware import HwRun, Mode, from_arch, hw_run, hw_run_patched
from .isa import Program, SecretPartition
from .microctx import SEEDED_RANDOM, StrategySpec, event_to_json, splitmix64

DEFAULT_SEEDS = 100
DEFAULT_PAIRS = 20
DEFAULT_SEARCH_BUDGET = 10_000


def derive_seed(master: int, *parts: int) -> int:
    x = splitmix64(master & ((1 << 64) - 1))
    for p in parts:
        x = splitmix64(x ^ (p & ((1 << 64) - 1)))
    return x >> 1


@dataclass(frozen=True)
class ExperimentSpec:
    program: Program
    part: SecretPartition
    mem: Mapping[int, int]
    reg: Mapping
    secret_domains: Mapping
    strategy: Optional[StrategySpec] = None   # None: a fresh seeded-random strategy per seed
    n: int = 500
    seeds: int = DEFAULT_SEEDS
    pairs: int = DEFAULT_PAIRS
    mode: Mode = Mode.PROSPECT
    seed: int = 0
    capacity: Optional[int] = None
    ct_budget: int = 1000
    name: str = ""

    @classmethod
    def from_gadget(cls, g: Gadget, **overrides) -> "ExperimentSpec":
        base = dict(program=g.program, part=g.part, mem=dict(g.mem), reg=dict(g.reg),
                    secret_domains=dict(g.secret_domains), n=g.n, name=g.name)
        base.update(overrides)
        return cls(**base)

    def base_config(self) -> ArchConfig:
        from .arch import initial_arch_config

        return initial_arch_config(self.program, self.mem, self.reg)

    def strategy_for(self, seed_index: int) -> StrategySpec:
        if self.strategy is None:
            return StrategySpec.seeded_random(derive_seed(self.seed, seed_index, 1))
        if self.strategy.kind == SEEDED_RANDOM:
            return replace(self.strategy, seed=derive_seed(self.strategy.seed, seed_index, 1))
        return self.strategy

    def describe(self) -> dict:
        return {"name": self.name, "mode": self.mode.value, "n": self.n, "seeds": self.seeds,
                "pairs": self.pairs, "seed": self.seed,
                "strategy": None if self.strategy is None else self.strategy.to_json()}


@dataclass
class Witness:
    configs: list              # two {"mem": ..., "reg": ...} initial configurations
    secrets: list              # the secret assignments that distinguish them
    strategy: dict
    mode: str
    step: int                  # first step whose μ events differ
    event_index: int
    events: list               # the differing events, one per run
    patched_with: Optional[list] = None
    n: int = 0
    name: str = ""

    def to_json(self) -> dict:
        out = {"name": self.name, "mode": self.mode, "strategy": self.strategy,
               "secrets": self.secrets, "configs": self.configs, "step": self.step,
               "event_index": self.event_index, "events": self.events, "n": self.n}
        if self.patched_with is not None:
            out["patched_with"] = self.patched_with
        return out


@dataclass
class NotFound:
    samples: int
    mode: str
    name: str = ""

    def to_json(self) -> dict:
        return {"name": self.name, "mode": self.mode, "samples": self.samples, "found": False}


def _config_json(a: ArchConfig) -> dict:
    return {"mem": {str(k): v for k, v in sorted(a.mem.items())},
            "reg": {r: [v.value, v.level.name] for r, v in sorted(a.reg.items())}}


def _secrets_json(s: Mapping) -> dict:
    return {str(k): v for k, v in sorted(s.items(), key=lambda kv: str(kv[0]))}


def _key(secrets: Mapping) -> tuple:
    return tuple(sorted(secrets.items(), key=lambda kv: str(kv[0])))


def _draw(rng: random.Random, domains: Mapping) -> dict:
    keys = sorted(domains, key=lambda k: (isinstance(k, str), str(k)))
    return {k: rng.choice(list(domains[k])) for k in keys}


def gen_low_equiv_pair(spec: ExperimentSpec, seed: int, strategy: Optional[StrategySpec] = None):
    """Two hardware configurations that differ only in secret locations."""
    rng = random.Random(seed)
    a, b = _draw(rng, spec.secret_domains), _draw(rng, spec.secret_domains)
    return _pair_configs(spec, a, b, strategy or spec.strategy_for(0))


def _pair_configs(spec: ExperimentSpec, a: Mapping, b: Mapping, strategy: StrategySpec):
    base = spec.base_config()
    ca, cb = apply_secrets(base, a), apply_secrets(base, b)
    if not low_equivalent(ca, cb, spec.part):
        raise AssertionError("generated pair is not low-equivalent")
    return (from_arch(spec.program, spec.part, ca, strategy, spec.mode, spec.capacity),
            from_arch(spec.program, spec.part, cb, strategy, spec.mode, spec.capacity))


def _pairs_for_seed(spec: ExperimentSpec, seed_index: int) -> list:
    rng = random.Random(derive_seed(spec.seed, seed_index, 2))
    return [(_draw(rng, spec.secret_domains), _draw(rng, spec.secret_domains))
            for _ in range(spec.pairs)]


class _Runner:
    """Runs one configuration per secret assignment, memoised (runs are deterministic)."""

    def __init__(self, spec: ExperimentSpec, strategy: StrategySpec):
        self.spec = spec
        self.strategy = strategy
        self.base = spec.base_config()
        self.cache: dict = {}

    def config(self, secrets: Mapping):
        spec = self.spec
        return from_arch(spec.program, spec.part, apply_secrets(self.base, secrets),
                         self.strategy, spec.mode, spec.capacity)

    def run(self, secrets: Mapping, patch: Optional[Sequence[int]] = None,
            full: bool = False) -> HwRun:
        key = (_key(secrets), None if patch is None else tuple(patch), full)
        if key not in self.cache:
            h = self.config(secrets)
            kw = dict(monitor=False, record=False, stop_when_idle=not full)
            if patch is None:
                self.cache[key] = hw_run(h, self.spec.n, **kw)
            else:
                self.cache[key] = hw_run_patched(h, patch, self.spec.n, **kw)
        return self.cache[key]


def _divergence(runner: _Runner, a: Mapping, b: Mapping, ra: HwRun, rb: HwRun,
                patch: Optional[Sequence[int]] = None) -> Optional[tuple]:
    """``(event_index, step, run_a, run_b)`` of the first μ difference, else ``None``."""
    if ra.log == rb.log and ra.marks == rb.marks and ra.idle_at == rb.idle_at:
        return None
    la, lb = ra.log, rb.log
    d = None
    for i, (x, y) in enumerate(zip(la, lb)):
        if x != y:
            d = i
            break
    if d is None:
        # one run went idle earlier: compare the full-length runs
        ra = runner.run(a, None, full=True)
        rb = runner.run(b, patch, full=True)
        if ra.log == rb.log and ra.marks == rb.marks:
            return None
        la, lb = ra.log, rb.log
        d = next((i for i, (x, y) in enumerate(zip(la, lb)) if x != y), min(len(la), len(lb)))
    step = bisect.bisect_right(ra.marks, d)
    return d, step, ra, rb


def _witness(spec: ExperimentSpec, runner: _Runner, a, b, div, patch=None) -> Witness:
    d, step, ra, rb = div

    def ev(log):
        return event_to_json(log[d]) if d < len(log) else None
    return Witness(
        configs=[_config_json(apply_secrets(runner.base, a)),
                 _config_json(apply_secrets(runner.base, b))],
        secrets=[_secrets_json(a), _secrets_json(b)], strategy=runner.strategy.to_json(),
        mode=spec.mode.value, step=step, event_index=d, events=[ev(ra.log), ev(rb.log)],
        patched_with=None if patch is None else list(patch), n=step + 1, name=spec.name)


# --- per-seed cells ------------------------------------------------------


def _thm1_cell(spec: ExperimentSpec, seed_index: int) -> Optional[dict]:
    runner = _Runner(spec, spec.strategy_for(seed_index))
    for pair_index, (a, b) in enumerate(_pairs_for_seed(spec, seed_index)):
        ra, rb = runner.run(a), runner.run(b)
        div = _divergence(runner, a, b, ra, rb)
        if div is not None:
            w = _witness(spec, runner, a, b, div)
            return {"seed_index": seed_index, "pair_index": pair_index,
                    "reason": "microarchitectural contexts differ", "witness": w.to_json()}
        if ra.decl != rb.decl:
            return {"seed_index": seed_index, "pair_index": pair_index,
                    "reason": "declassification traces differ",
                    "secrets": [_secrets_json(a), _secrets_json(b)],
                    "decl": [ra.decl, rb.decl]}
    return None


def _thm2_cell(spec: ExperimentSpec, seed_index: int) -> Optional[dict]:
    runner = _Runner(spec, spec.strategy_for(seed_index))
    for pair_index, (a, b) in enumerate(_pairs_for_seed(spec, seed_index)):
        ra = runner.run(a)
        delta = tuple(ra.decl)
        try:
            rb = runner.run(b, delta)
        except DeclassUnderflow as exc:
            return {"seed_index": seed_index, "pair_index": pair_index,
                    "reason": "declassification underflow", "message": str(exc),
                    "secrets": [_secrets_json(a), _secrets_json(b)]}
        div = _divergence(runner, a, b, ra, rb, delta)
        if div is not None:
            w = _witness(spec, runner, a, b, div, delta)
            return {"seed_index": seed_index, "pair_index": pair_index,
                    "reason": "microarchitectural contexts differ", "witness": w.to_json()}
        if rb.residual or ra.decl_steps != rb.decl_steps:
            return {"seed_index": seed_index, "pair_index": pair_index,
                    "reason": "declassification trace not consumed in lockstep",
                    "residual": list(rb.residual)}
    return None


def _classical_cell(spec: ExperimentSpec, seed_index: int) -> list:
    runner = _Runner(spec, spec.strategy_for(seed_index))
    out = []
    for pair_index, (a, b) in enumerate(_pairs_for_seed(spec, seed_index)):
        ra, rb = runner.run(a), runner.run(b)
        if ra.decl != rb.decl:
            out.append([seed_index, pair_index, "skipped"])
            continue
        div = _divergence(runner, a, b, ra, rb)
        if div is None:
            out.append([seed_index, pair_index, "equal"])
        else:
            out.append([seed_index, pair_index, "differs",
                        _witness(spec, runner, a, b, div).to_json()])
    return out


def _map_cells(fn, spec: ExperimentSpec, jobs: int) -> list:
    indices = range(spec.seeds)
    if jobs > 1 and spec.seeds > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, [spec] * spec.seeds, indices))
    return [fn(spec, i) for i in indices]


def _precondition(spec: ExperimentSpec, check) -> Optional[Verdict]:
    if not spec.secret_domains:
        raise ValueError("experiment needs at least one secret location with a domain")
    validate_domains(spec.secret_domains, spec.part)
    pre = check(spec.program, spec.part, spec.secret_domains, spec.n, spec.ct_budget,
                base=spec.base_config(), seed=spec.seed)
    return None if pre.passed else pre


def theorem1_check(spec: ExperimentSpec, jobs: int = 1) -> Verdict:
    """Equal μ logs at every step for constant-time programs."""
    cells = spec.seeds * spec.pairs
    pre = _precondition(spec, check_constant_time)
    if pre is not None:
        return Verdict(PRECONDITION, "theorem1", spec.n, 0,
                       {**spec.describe(), "precondition": pre.to_json()})
    results = _map_cells(_thm1_cell, spec, jobs)
    failure = next((r for r in results if r is not None), None)
    if failure is None:
        return Verdict(PASS, "theorem1", spec.n, cells, spec.describe())
    return Verdict(FAIL, "theorem1", spec.n, cells,
                   {**spec.describe(), **{k: v for k, v in failure.items() if k != "witness"}},
                   failure.get("witness"))


def theorem2_check(spec: ExperimentSpec, jobs: int = 1) -> Verdict:
    """Equal μ logs when the second run is patched with the first run's declassified values."""
    cells = spec.seeds * spec.pairs
    pre = _precondition(spec, check_ct_up_to_decl)
    if pre is not None:
        return Verdict(PRECONDITION, "theorem2", spec.n, 0,
                       {**spec.describe(), "precondition": pre.to_json()})
    results = _map_cells(_thm2_cell, spec, jobs)
    failure = next((r for r in results if r is not None), None)
    if failure is None:
        return Verdict(PASS, "theorem2", spec.n, cells, spec.describe())
    return Verdict(FAIL, "theorem2", spec.n, cells,
                   {**spec.describe(), **{k: v for k, v in failure.items() if k != "witness"}},
                   failure.get("witness"))


def classical_decl_check(spec: ExperimentSpec, jobs: int = 1) -> Verdict:
    """Compare μ logs only for pairs whose declassification traces coincide."""
    pre = _precondition(spec, check_ct_up_to_decl)
    if pre is not None:
        return Verdict(PRECONDITION, "classical", spec.n, 0,
                       {**spec.describe(), "precondition": pre.to_json()})
    per_pair = [row for rows in _map_cells(_classical_cell, spec, jobs) for row in rows]
    counts = {s: sum(1 for r in per_pair if r[2] == s) for s in ("equal", "skipped", "differs")}
    detail = {**spec.describe(), "counts": counts, "pairs_report": [r[:3] for r in per_pair]}
    bad = next((r for r in per_pair if r[2] == "differs"), None)
    if bad is None:
        return Verdict(PASS, "classical", spec.n, len(per_pair), detail)
    return Verdict(FAIL, "classical", spec.n, len(per_pair), detail, bad[3])


def leak_search(spec: ExperimentSpec, budget: int = DEFAULT_SEARCH_BUDGET,
                attack_script: Optional[StrategySpec] = None):
    """Search strategy seeds and secret pairs for a μ divergence.

    Sample 0 replays ``attack_script`` when one is given; every other sample
    draws a seeded-random strategy and a pair of distinct secret assignments.
    Returns a :class:`Witness` or :class:`NotFound`.
    """
    if len(secret_assignments(spec.secret_domains)) < 2:
        return NotFound(0, spec.mode.value, spec.name)
    for k in range(budget):
        if k == 0 and attack_script is not None:
            strategy = attack_script
        else:
            strategy = StrategySpec.seeded_random(derive_seed(spec.seed, k, 3))
        rng = random.Random(derive_seed(spec.seed, k, 4))
        a = _draw(rng, spec.secret_domains)
        b = _draw(rng, spec.secret_domains)
        while _key(b) == _key(a):
            b = _draw(rng, spec.secret_domains)
        runner = _Runner(spec, strategy)
        div = _divergence(runner, a, b, runner.run(a), runner.run(b))
        if div is not None:
            return _witness(spec, runner, a, b, div)
    return NotFound(budget, spec.mode.value, spec.name)


def insecure_leak_search(gadget_name: str, budget: int = DEFAULT_SEARCH_BUDGET,
                         mode: Mode = Mode.INSECURE, seed: int = 0, n: int = 200,
                         use_script: bool = True):
    """:func:`leak_search` on a corpus gadget, starting from its attack script."""
    g = get_gadget(gadget_name)
    spec = ExperimentSpec.from_gadget(g, mode=Mode(mode), n=n, seed=seed)
    return leak_search(spec, budget, g.attack_script if use_script else None)


def replay_witness(spec: ExperimentSpec, witness: Mapping) -> Optional[int]:
    """Re-run a witness; returns the step of the first μ divergence (or ``None``)."""
    strategy = StrategySpec.from_json(witness["strategy"])
    spec = replace(spec, mode=Mode(witness["mode"]), n=max(int(witness["n"]), 1))
    from .corpus import parse_domains

    a = parse_domains({k: [v] for k, v in witness["secrets"][0].items()})
    b = parse_domains({k: [v] for k, v in witness["secrets"][1].items()})
    a = {k: v[0] for k, v in a.items()}
    b = {k: v[0] for k, v in b.items()}
    runner = _Runner(spec, strategy)
    patch = witness.get("patched_with")
    ra = runner.run(a, None, full=True)
    rb = runner.run(b, None if patch is None else tuple(patch), full=True)
    div = _divergence(runner, a, b, ra, rb, patch)
    return None if div is None else div[1]
