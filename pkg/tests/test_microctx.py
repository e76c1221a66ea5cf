import pytest

from prospect_sim.corpus import get_gadget
from prospect_sim.hardware import Mode, canonical_mem_low, hw_run
from prospect_sim.isa import SecretPartition, parse_program
from prospect_sim.microctx import (
    FETCH, LEAK_PRED_TAG, RETIRE, Directive, MicroContext, ScriptStep, StrategyMismatch,
    StrategySpec, execute, first_divergence, mc_equal, mc_next, mc_predict, mc_update,
)

PROG = parse_program("beqz x, L\ny <- load 3\nL:\nz <- 1\n")
SECRET16 = SecretPartition(((16, 16),))


def fresh(spec=StrategySpec()):
    return MicroContext(spec, PROG)


def tick(mu, buf=()):
    return mc_update(mu, (), (), tuple(buf))


class TestUpdate:
    def test_identical_projections(self):
        a, b = fresh(), fresh()
        tick(a), tick(b)
        assert a.log == b.log

    def test_secret_cell_invisible(self):
        lo_a = canonical_mem_low({16: 1, 3: 5}, SECRET16)
        lo_b = canonical_mem_low({16: 99, 3: 5}, SECRET16)
        a, b = fresh(), fresh()
        mc_update(a, lo_a, (), ())
        mc_update(b, lo_b, (), ())
        assert a.log == b.log

    def test_public_cell_visible(self):
        lo_a = canonical_mem_low({3: 5}, SECRET16)
        lo_b = canonical_mem_low({3: 6}, SECRET16)
        a, b = fresh(), fresh()
        mc_update(a, lo_a, (), ())
        mc_update(b, lo_b, (), ())
        assert a.log != b.log
        assert first_divergence(a.log, b.log) == 0

    def test_rejects_unprojected_values(self):
        from prospect_sim.isa import LabeledValue
        with pytest.raises(TypeError):
            mc_update(fresh(), ((3, LabeledValue(5)),), (), ())


class TestPredict:
    def test_always_taken(self):
        mu = fresh(StrategySpec.always_taken())
        tick(mu)
        mu.leak(LEAK_PRED_TAG, 0)
        assert mc_predict(mu) == PROG[0].target

    def test_scripted_prediction(self):
        mu = fresh(StrategySpec.scripted([ScriptStep(FETCH, 16)]))
        tick(mu)
        mu.leak(LEAK_PRED_TAG, 1)
        assert mc_predict(mu) == 16

    def test_seeded_random_replay(self):
        def draw():
            mu = fresh(StrategySpec.seeded_random(1234))
            out = []
            for k in range(20):
                tick(mu, [(0,)] * (k % 3))
                mu.leak(LEAK_PRED_TAG, k % 3)
                out.append((mc_next(mu), mc_predict(mu)))
            return out
        assert draw() == draw()


class TestNext:
    def test_fresh_round_robin(self):
        mu = fresh()
        tick(mu)
        assert mc_next(mu) == FETCH

    def test_round_robin_cycle(self):
        mu = fresh()
        seen = []
        for buf_len in (0, 2, 2, 2, 2):
            tick(mu, [(0,)] * buf_len)
            seen.append(mc_next(mu))
        assert seen == [FETCH, execute(0), execute(1), RETIRE, FETCH]

    def test_scripted_third_step(self):
        mu = fresh(StrategySpec.scripted([FETCH, FETCH, execute(1)]))
        for _ in range(3):
            tick(mu)
        assert mc_next(mu) == execute(1)

    def test_seeded_random_directives_replay(self):
        def seq(seed):
            mu = fresh(StrategySpec.seeded_random(seed))
            out = []
            for k in range(50):
                tick(mu, [(k,)] * (k % 4))
                out.append(mc_next(mu))
            return out
        assert seq(5) == seq(5)
        assert seq(5) != seq(6)

    def test_directive_parse(self):
        assert Directive.parse("execute:3") == execute(3)
        assert str(execute(3)) == "execute:3"
        assert Directive.parse("retire") == RETIRE


class TestEqual:
    def test_same_run_twice(self):
        g = get_gadget("spectre-pht")
        a = hw_run(g.hw_config(StrategySpec.seeded_random(3)), 100)
        b = hw_run(g.hw_config(StrategySpec.seeded_random(3)), 100)
        assert mc_equal(a.config.mu, b.config.mu)

    def test_ct_pair_equal_in_secure_mode(self):
        g = get_gadget("spectre-pht")
        script = g.attack_script
        runs = []
        for s in (0, 1):
            h = g.hw_config(script)
            h.mem[16] = s
            runs.append(hw_run(h, 200))
        assert mc_equal(runs[0].config.mu, runs[1].config.mu)

    def test_insecure_pht_pair_differs_at_leak_load(self):
        g = get_gadget("spectre-pht")
        runs = []
        for s in (0, 1):
            h = g.hw_config(g.attack_script, Mode.INSECURE)
            h.mem[16] = s
            runs.append(hw_run(h, 200))
        a, b = runs[0].config.mu, runs[1].config.mu
        assert not mc_equal(a, b)
        d = first_divergence(a.log, b.log)
        # the first divergence is the address of the probe into B
        assert a.log[d][0] == b.log[d][0] == 1
        assert {a.log[d][1], b.log[d][1]} == {17 + 0 * 64, 17 + 1 * 64}

    def test_mismatched_strategies(self):
        with pytest.raises(StrategyMismatch):
            mc_equal(fresh(), fresh(StrategySpec.always_taken()))


def test_strategy_json_roundtrip():
    for spec in (StrategySpec(), StrategySpec.seeded_random(9), StrategySpec.constant_value(4),
                 StrategySpec.always_taken(),
                 StrategySpec.scripted([ScriptStep(FETCH, 3), ScriptStep(execute(2))])):
        assert StrategySpec.from_json(spec.to_json()) == spec


class TestLogBudget:
    def runs(self, budget, secret=7, mode=Mode.PROSPECT):
        g = get_gadget("spectre-pht")
        from prospect_sim.arch import apply_secrets
        from prospect_sim.hardware import from_arch
        base = apply_secrets(g.arch_config(), {16: secret})
        h = from_arch(g.program, g.part, base, StrategySpec.seeded_random(3), mode,
                      log_budget=budget)
        return hw_run(h, 120, monitor=False)

    def test_compaction_is_invisible_to_equality_and_output(self):
        from prospect_sim.microctx import CompactedEvent
        full, capped = self.runs(None), self.runs(2000)
        assert any(isinstance(e, CompactedEvent) for e in capped.log)
        assert not any(isinstance(e, CompactedEvent) for e in full.log)
        assert capped.log == full.log and full.log == capped.log
        assert capped.config.mu.canonical_bytes() == full.config.mu.canonical_bytes()
        assert capped.config.mu.to_json() == full.config.mu.to_json()
        assert capped.results == full.results

    def test_retained_size_stays_within_budget(self):
        from prospect_sim.microctx import CompactedEvent, PREAMBLE, _event_bytes
        capped = self.runs(2000)
        kept = [e for e in capped.log if not isinstance(e, CompactedEvent) and e[0] == PREAMBLE]
        assert kept and sum(len(_event_bytes(e)) for e in kept) <= 2000

    def test_divergence_found_through_compacted_events(self):
        a = self.runs(500, 7, Mode.INSECURE)
        b = self.runs(500, 9, Mode.INSECURE)
        ref_a = self.runs(None, 7, Mode.INSECURE)
        ref_b = self.runs(None, 9, Mode.INSECURE)
        assert first_divergence(a.log, b.log) == first_divergence(ref_a.log, ref_b.log)
