"""Search for leaks in four transient-execution gadgets on both cores.

For each gadget the search runs pairs of executions that differ only in the
secret and looks for the first point where the attacker's view differs.  On
the unprotected core a witness appears almost immediately.  On the secure core
the same search comes back empty.
"""

import sys

from prospect_sim.corpus import get_gadget
from prospect_sim.hardware import Mode
from prospect_sim.isa import format_program
from prospect_sim.security import Witness, insecure_leak_search

GADGETS = ("spectre-pht", "spectre-btb", "spectre-stl", "lvi")


def main(budget=500):
    for name in GADGETS:
        g = get_gadget(name)
        print(f"== {name}: {g.description}")
        print(format_program(g.program))
        for mode in (Mode.INSECURE, Mode.PROSPECT):
            result = insecure_leak_search(name, budget=budget, mode=mode)
            if isinstance(result, Witness):
                left, right = result.events
                print(f"  {mode.value:>9}: step {result.step}, the runs see {left} and {right}")
            else:
                print(f"  {mode.value:>9}: no divergence in {result.samples} samples")
        print()


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 500)
