"""Checking a constant-time program under many schedules.

A schedule here is one seeded-random microarchitectural context: it decides
what to fetch, execute or retire next and what the predictors guess.  For each
schedule the checker runs low-equivalent pairs of initial states and compares
every event the context observes.  On the unprotected core only a few
schedules mispredict the bounds check in a way that reaches the secret, so the
check needs a few dozen of them before it finds one.  The verdict is plain
JSON that can be archived and replayed.
"""

import json

from prospect_sim.corpus import get_gadget
from prospect_sim.hardware import Mode
from prospect_sim.security import ExperimentSpec, replay_witness, theorem1_check


def main():
    g = get_gadget("spectre-pht")
    for mode in (Mode.PROSPECT, Mode.INSECURE):
        spec = ExperimentSpec.from_gadget(g, seeds=100, pairs=5, mode=mode, seed=3)
        verdict = theorem1_check(spec)
        print(f"{mode.value}: {verdict.status} over {verdict.cells} cells")
        if verdict.witness:
            w = verdict.witness
            print(f"  first divergence at step {w['step']} under {json.dumps(w['strategy'])}")
            for side, ev in zip("ab", w["events"]):
                shown = {k: v for k, v in ev.items() if k != "mem"}
                if "buf" in shown:
                    shown["buf"] = f"{len(ev['buf'])} in-flight entries"
                print(f"  run {side} sees {shown}")
            print("  replayed divergence step:", replay_witness(spec, w))


if __name__ == "__main__":
    main()
