"""Property-based tests of the invariants of each layer."""

from hypothesis import HealthCheck, given, settings, strategies as st

from gen import PUBLIC, SECRET_RANGE, ct_programs
from prospect_sim.arch import (
    EPSILON, BranchOutcome, JumpTarget, LoadAddr, StoreAddr, apply_secrets, arch_run,
    arch_run_patched, arch_step, initial_arch_config,
)
from prospect_sim.hardware import Mode, from_arch, hw_run, hw_run_patched, is_transient
from prospect_sim.isa import (
    H, L, OP_NAMES, BinOp, Beqz, Jmp, LabeledValue, Load, Mov, SecretPartition, Store,
    eval_expr, format_program, join, parse_program,
)
from prospect_sim.microctx import LEAK_ADDR, PREAMBLE, StrategySpec
from prospect_sim.security import ExperimentSpec, theorem1_check

PART = SecretPartition((SECRET_RANGE,))
words = st.integers(0, 2 ** 64 - 1)
levels = st.sampled_from([L, H])
values = st.builds(LabeledValue, words, levels)
REGS = ("a", "b", "c")


def exprs(depth=3):
    leaf = st.one_of(values, st.sampled_from(REGS))
    return st.recursive(leaf, lambda sub: st.builds(BinOp, st.sampled_from(OP_NAMES), sub, sub),
                        max_leaves=2 ** depth)


def build(src, mem, reg, doms, secrets=None):
    p = parse_program(src)
    a = initial_arch_config(p, mem, reg)
    if secrets is not None:
        a = apply_secrets(a, secrets)
    return p, a


def first_assignment(doms, pick=0):
    return {k: v[pick] for k, v in doms.items()}


# --- isa ------------------------------------------------------------------


@given(st.sampled_from(OP_NAMES), values, values)
def test_taint_join(op, x, y):
    out = eval_expr(BinOp(op, x, y), {})
    assert out.level == join(x.level, y.level)
    assert 0 <= out.value < 2 ** 64


@given(exprs(), st.fixed_dictionaries({r: values for r in REGS}))
def test_eval_total_and_deterministic(e, reg):
    a, b = eval_expr(e, reg), eval_expr(e, dict(reg))
    assert a is not None and a == b


@given(ct_programs())
def test_parse_print_roundtrip(case):
    p = parse_program(case[0])
    text = format_program(p)
    assert parse_program(text) == p
    assert format_program(parse_program(text)) == text


# --- arch -----------------------------------------------------------------


@given(ct_programs(), st.integers(0, 1))
def test_arch_self_patching_identity(case, pick):
    src, mem, reg, doms = case
    p, a = build(src, mem, reg, doms, first_assignment(doms, pick))
    r = arch_run(p, PART, a, 50)
    rp = arch_run_patched(p, PART, a, r.decl, 50)
    assert rp.final == r.final and rp.observations == r.observations and rp.residual == ()


@given(ct_programs())
def test_arch_observation_matches_rule(case):
    src, mem, reg, doms = case
    p, c = build(src, mem, reg, doms)
    expected = {Mov: type(EPSILON), Beqz: BranchOutcome, Jmp: JumpTarget, Load: LoadAddr,
                Store: StoreAddr}
    for _ in range(30):
        ins = p.get(c.reg["pc"].value)
        if ins is None:
            break
        c2, obs, _ = arch_step(p, PART, c)
        assert type(obs) is expected[type(ins)]
        assert arch_step(p, PART, c) == (c2, obs, _)
        c = c2


@given(ct_programs())
def test_generated_programs_are_constant_time(case):
    from prospect_sim.arch import check_constant_time
    src, mem, reg, doms = case
    p, a = build(src, mem, reg, doms)
    assert check_constant_time(p, PART, doms, 60, 50, base=a).passed


# --- hardware ---------------------------------------------------------------


@settings(max_examples=60, suppress_health_check=[HealthCheck.too_slow])
@given(ct_programs(), st.integers(0, 2 ** 32), st.integers(0, 1))
def test_monitors_hold_in_secure_mode(case, seed, pick):
    src, mem, reg, doms = case
    p, a = build(src, mem, reg, doms, first_assignment(doms, pick))
    run = hw_run(from_arch(p, PART, a, StrategySpec.seeded_random(seed)), 150)
    assert run.violations == []


@settings(max_examples=60)
@given(ct_programs(), st.integers(0, 2 ** 32))
def test_hardware_determinism(case, seed):
    src, mem, reg, doms = case
    p, a = build(src, mem, reg, doms)
    runs = [hw_run(from_arch(p, PART, a, StrategySpec.seeded_random(seed)), 120)
            for _ in range(2)]
    assert runs[0].results == runs[1].results
    assert runs[0].log == runs[1].log and runs[0].decl == runs[1].decl


@settings(max_examples=60)
@given(ct_programs(), st.integers(0, 2 ** 32))
def test_hardware_self_patching_identity(case, seed):
    src, mem, reg, doms = case
    p, a = build(src, mem, reg, doms)
    h = from_arch(p, PART, a, StrategySpec.seeded_random(seed))
    r = hw_run(h, 150, monitor=False)
    rp = hw_run_patched(h, r.decl, 150, monitor=False)
    assert rp.log == r.log and rp.config.arch() == r.config.arch() and rp.residual == ()


@settings(max_examples=60)
@given(ct_programs(), st.integers(0, 2 ** 32))
def test_no_secret_load_commits_in_secure_mode(case, seed):
    src, mem, reg, doms = case
    p, a = build(src, mem, reg, doms)
    h = from_arch(p, PART, a, StrategySpec.seeded_random(seed))
    for r in hw_run(h, 150, monitor=False).results:
        if r.rule == "execute-load-commit":
            addrs = [ev[1] for ev in r.leaks if ev[0] == LEAK_ADDR]
            assert all(PART.level(x) is L for x in addrs)


@settings(max_examples=40)
@given(ct_programs(), st.integers(0, 2 ** 32))
def test_retired_state_matches_sequential_run(case, seed):
    src, mem, reg, doms = case
    p, a = build(src, mem, reg, doms)
    run = hw_run(from_arch(p, PART, a, StrategySpec.seeded_random(seed)), 2000, monitor=False,
                 record=False, stop_when_idle=True)
    if run.idle_at is None:
        return                                  # the scheduler did not finish in time
    ref = arch_run(p, PART, a, 200)
    assert run.config.arch() == ref.final
    assert run.decl == ref.decl


# --- microctx ---------------------------------------------------------------


@settings(max_examples=40)
@given(ct_programs(), st.integers(0, 2 ** 32))
def test_log_grows_and_starts_each_step_with_preamble(case, seed):
    src, mem, reg, doms = case
    p, a = build(src, mem, reg, doms)
    run = hw_run(from_arch(p, PART, a, StrategySpec.seeded_random(seed)), 80, monitor=False)
    starts = [0] + run.marks[:-1]
    assert all(x < y for x, y in zip(starts, run.marks))
    assert all(run.log[i][0] == PREAMBLE for i in starts)


def _ints_only(obj):
    if isinstance(obj, tuple):
        return all(_ints_only(x) for x in obj)
    return type(obj) is int


@settings(max_examples=40)
@given(ct_programs(), st.integers(0, 2 ** 32))
def test_context_sees_only_integers(case, seed):
    src, mem, reg, doms = case
    p, a = build(src, mem, reg, doms)
    run = hw_run(from_arch(p, PART, a, StrategySpec.seeded_random(seed)), 80, monitor=False)
    assert all(_ints_only(ev) for ev in run.log)


# --- security ----------------------------------------------------------------


@settings(max_examples=25, suppress_health_check=[HealthCheck.too_slow])
@given(ct_programs())
def test_theorem1_on_generated_ct_programs(case):
    src, mem, reg, doms = case
    p = parse_program(src)
    spec = ExperimentSpec(p, PART, mem, {r: LabeledValue(v, L) for r, v in reg.items()}, doms,
                          n=150, seeds=3, pairs=3, ct_budget=50)
    assert theorem1_check(spec).passed


@settings(max_examples=25)
@given(st.text(alphabet="xyz<-+ 0123\n", max_size=40))
def test_parser_never_crashes_unexpectedly(text):
    from prospect_sim.isa import ParseError
    try:
        parse_program(text)
    except ParseError:
        pass
