"""A correctly predicted secret load is rolled back anyway.

The two-instruction program below loads a secret and adds 4 to it.  A
value predictor that guesses the secret exactly right would, on an ordinary
out-of-order core, commit the prediction and carry on; guessing wrong forces a
rollback.  The difference between the two is visible to an attacker, so the
outcome of the comparison leaks the secret.  The secure core never commits a
prediction for a secret load, which closes that channel.
"""

from prospect_sim.arch import apply_secrets
from prospect_sim.corpus import get_gadget
from prospect_sim.hardware import Mode, from_arch, hw_run
from prospect_sim.isa import format_program
from prospect_sim.microctx import StrategySpec, first_divergence


def rules(mode, secret, guess):
    g = get_gadget("example2")
    base = apply_secrets(g.arch_config(), {16: secret})
    run = hw_run(from_arch(g.program, g.part, base, StrategySpec.constant_value(guess), mode), 30)
    return run, [r.rule for r in run.results if r.rule.startswith("execute-load")]


def main():
    print(format_program(get_gadget("example2").program))
    print("The predictor always guesses 0.\n")
    for mode in Mode:
        print(f"{mode.value} core")
        logs = []
        for secret in (0, 1):
            run, seen = rules(mode, secret, 0)
            logs.append(run.log)
            print(f"  secret={secret}: {', '.join(seen)}")
        div = first_divergence(*logs)
        if div is None:
            print("  the attacker-visible logs are identical\n")
        else:
            print(f"  the attacker-visible logs differ from event {div} onwards\n")


if __name__ == "__main__":
    main()
