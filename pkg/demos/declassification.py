"""Releasing a value on purpose, and releasing more than intended.

Storing a secret-derived value to public memory is treated as an intentional
release.  The theorem-2 check replays both runs with the same released values
and demands identical attacker views, so anything the core leaks beyond the
release shows up as a failure.

The classical check only compares pairs that happen to release equal values.
It still catches the first program on the unprotected core, once it samples a
comparable pair.  On the second program the unprotected core leaks the whole secret
transiently after releasing a one-way hash of it.  No two distinct secrets
share that hash, so the classical check never sees a comparable pair that
differs and reports success.
"""

from prospect_sim.corpus import get_gadget
from prospect_sim.hardware import Mode
from prospect_sim.isa import format_program
from prospect_sim.security import ExperimentSpec, classical_decl_check, theorem2_check


def report(name, mode):
    spec = ExperimentSpec.from_gadget(get_gadget(name), seeds=30, pairs=10, mode=mode)
    classical = classical_decl_check(spec)
    patched = theorem2_check(spec)
    counts = classical.detail.get("counts", {})
    print(f"  {mode.value:>9}: classical={classical.status} {counts}  theorem2={patched.status}")


def main():
    for name in ("listing2", "listing3"):
        g = get_gadget(name)
        print(f"== {name}: {g.description}")
        print(format_program(g.program))
        for mode in (Mode.PROSPECT, Mode.INSECURE):
            report(name, mode)
        print()


if __name__ == "__main__":
    main()
