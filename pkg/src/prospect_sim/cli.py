"""Command-line entry point: ``prospect-sim run|verify|attack``.

Exit codes: 0 pass or complete, 1 security failure or witness found,
2 configuration error or unmet precondition, 3 invariant violation.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional

from .arch import (
    ArchConfig, DeclassUnderflow, arch_run, initial_arch_config, observation_to_json,
    validate_domains,
)
from .corpus import (
    CATALOG, UnknownGadget, get_gadget, load_gadget_file, parse_domains, parse_registers,
)
from .hardware import Mode, from_arch, hw_run, trace_jsonl
from .isa import ParseError, Program, SecretPartition, parse_program
from .microctx import STRATEGY_KINDS, SCRIPTED, StrategySpec, load_script
from .security import (
    DEFAULT_PAIRS, DEFAULT_SEARCH_BUDGET, DEFAULT_SEEDS, ExperimentSpec, Witness,
    classical_decl_check, leak_search, theorem1_check, theorem2_check,
)

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_INVARIANT = 0, 1, 2, 3
DEFAULT_SEED = 0
SEED_ENV = "PROSPECT_SIM_SEED"
CHECKS = {"thm1": theorem1_check, "thm2": theorem2_check, "classical": classical_decl_check}


class ConfigError(Exception):
    pass


@dataclass
class RunConfig:
    name: str
    program: Program
    part: SecretPartition
    mem: dict
    reg: dict
    secret_domains: dict
    strategy: StrategySpec
    n: int
    mode: Mode
    seed: int
    attack_script: Optional[StrategySpec] = None
    extra: dict = field(default_factory=dict)

    def arch_config(self) -> ArchConfig:
        return initial_arch_config(self.program, self.mem, self.reg)

    def experiment(self, **overrides) -> ExperimentSpec:
        kw = dict(program=self.program, part=self.part, mem=self.mem, reg=self.reg,
                  secret_domains=self.secret_domains, n=self.n, mode=self.mode,
                  seed=self.seed, name=self.name)
        kw.update(overrides)
        return ExperimentSpec(**kw)


def _resolve_seed(flag: Optional[int], config: Mapping) -> int:
    if flag is not None:
        return flag
    if "seed" in config:
        return int(config["seed"])
    env = os.environ.get(SEED_ENV)
    if env:
        try:
            return int(env, 0)
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env!r}") from None
    return DEFAULT_SEED


def _strategy(args, config: Mapping, seed: int, base_dir: Path) -> StrategySpec:
    if getattr(args, "script", None):
        return load_script(args.script)
    kind = args.strategy
    if kind is None and "strategy" in config:
        spec = config["strategy"]
        if isinstance(spec, str):
            kind = spec
        elif isinstance(spec, Mapping):
            if "path" in spec:
                return load_script(base_dir / spec["path"])
            return StrategySpec.from_json(spec)
        else:
            raise ConfigError("strategy must be a name or an object")
    kind = kind or "round-robin"
    if kind == SCRIPTED:
        raise ConfigError("the scripted strategy needs --script")
    if kind not in STRATEGY_KINDS:
        raise ConfigError(f"unknown strategy {kind!r}")
    value = args.value if getattr(args, "value", None) is not None else int(config.get("value", 0))
    return StrategySpec(kind, seed=seed, value=value)


def load_run_config(args) -> RunConfig:
    """Gather and validate everything a subcommand needs before simulating."""
    config: dict = {}
    base_dir = Path.cwd()
    if args.config:
        path = Path(args.config)
        with open(path, encoding="utf-8") as fh:
            config = json.load(fh)
        if not isinstance(config, dict):
            raise ConfigError("config file must hold a JSON object")
        base_dir = path.parent

    gadget_name = args.gadget or config.get("gadget")
    if args.gadget and args.program:
        raise ConfigError("give either a gadget or a program, not both")
    if gadget_name:
        g = get_gadget(gadget_name)
    elif args.program:
        src = Path(args.program)
        g = None
        program = parse_program(src.read_text(encoding="utf-8"))
        name = src.stem
    elif "program" in config:
        g = load_gadget_file(Path(args.config))
    else:
        raise ConfigError("no program: use --gadget, --program or --config")

    if g is not None:
        program, name = g.program, g.name
        part, mem, reg, domains = g.part, dict(g.mem), dict(g.reg), dict(g.secret_domains)
        attack, default_n = g.attack_script, g.n
    else:
        part, mem, reg, domains, attack, default_n = SecretPartition(), {}, {}, {}, None, 500

    # config-file and flag overrides for data layout
    if (g is None and "secret_ranges" in config) or args.secret_range:
        ranges = [tuple(r) for r in config.get("secret_ranges", ())] if g is None else []
        ranges += [_parse_range(r) for r in args.secret_range or ()]
        part = SecretPartition(tuple(ranges))
    if g is None:
        mem.update({int(k, 0): int(v) for k, v in config.get("memory", {}).items()})
        reg.update(parse_registers(config.get("registers", {})))
        domains.update(parse_domains(config.get("secret_domains", {})))
    for item in args.mem or ():
        k, v = _split(item, "--mem")
        mem[int(k, 0)] = int(v, 0)
    for item in args.reg or ():
        k, v = _split(item, "--reg")
        level = "L"
        if ":" in v:
            v, level = v.split(":", 1)
        reg.update(parse_registers({k: {"value": int(v, 0), "level": level}}))
    for item in args.domain or ():
        k, v = _split(item, "--domain")
        domains.update(parse_domains({k: [int(x, 0) for x in v.split(",") if x]}))

    seed = _resolve_seed(args.seed, config)
    strategy = _strategy(args, config, seed, base_dir)
    n = args.n if args.n is not None else int(config.get("n", default_n))
    if n < 0:
        raise ConfigError("step bound must be non-negative")
    mode = Mode(args.mode or config.get("mode", "prospect"))
    unknown_regs = set(reg) - set(program.registers)
    if unknown_regs:
        raise ConfigError(f"registers not used by the program: {sorted(unknown_regs)}")
    validate_domains(domains, part)
    return RunConfig(name, program, part, mem, reg, domains, strategy, n, mode, seed,
                     attack, config)


def _split(item: str, flag: str) -> tuple:
    if "=" not in item:
        raise ConfigError(f"{flag} expects NAME=VALUE, got {item!r}")
    k, v = item.split("=", 1)
    return k.strip(), v.strip()


def _parse_range(text: str) -> tuple:
    lo, _, hi = text.partition(":")
    try:
        return int(lo, 0), int(hi or lo, 0)
    except ValueError:
        raise ConfigError(f"bad secret range {text!r}; use LO:HI") from None


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def _emit(text: str, out: Optional[str]) -> None:
    if out and out != "-":
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


# --- subcommands ---------------------------------------------------------


def cmd_run(args) -> int:
    cfg = load_run_config(args)
    if args.arch:
        res = arch_run(cfg.program, cfg.part, cfg.arch_config(), cfg.n)
        lines = [{"step": i, "observation": observation_to_json(obs)}
                 for i, obs in enumerate(res.observations)]
        lines.append({"halted": res.halted, "steps": res.steps, "decl": list(res.decl)})
        text = "".join(json.dumps(x, separators=(",", ":")) + "\n" for x in lines)
        _emit(text, args.out)
        return EXIT_OK
    h = from_arch(cfg.program, cfg.part, cfg.arch_config(), cfg.strategy, cfg.mode,
                  args.capacity, log_budget=args.log_budget)
    run = hw_run(h, cfg.n, monitor=True, record=True)
    _emit(trace_jsonl(run.results), args.out)
    if run.violations:
        step, msg = run.violations[0]
        print(f"invariant violation at step {step}: {msg}", file=sys.stderr)
        return EXIT_INVARIANT
    return EXIT_OK


def cmd_verify(args) -> int:
    cfg = load_run_config(args)
    kind = args.kind or cfg.extra.get("kind", "thm1")
    if kind not in CHECKS:
        raise ConfigError(f"unknown check kind {kind!r}")
    seeds = args.seeds if args.seeds is not None else int(cfg.extra.get("seeds", DEFAULT_SEEDS))
    pairs = args.pairs if args.pairs is not None else int(cfg.extra.get("pairs", DEFAULT_PAIRS))
    fixed = args.strategy is not None or args.script or "strategy" in cfg.extra
    spec = cfg.experiment(seeds=seeds, pairs=pairs, strategy=cfg.strategy if fixed else None)
    verdict = CHECKS[kind](spec, jobs=args.jobs)
    _emit(_dump(verdict.to_json()), args.out)
    if verdict.witness is not None and args.witness_out:
        Path(args.witness_out).write_text(_dump(verdict.witness), encoding="utf-8")
    print(f"{kind}: {verdict.status} ({verdict.cells} cells, n={verdict.bound})", file=sys.stderr)
    return verdict.exit_code()


def cmd_attack(args) -> int:
    cfg = load_run_config(args)
    script = None if args.no_script else cfg.attack_script
    if args.script:
        script = cfg.strategy
    result = leak_search(cfg.experiment(), args.budget, script)
    _emit(_dump(result.to_json()), args.out)
    found = isinstance(result, Witness)
    print(f"attack on {cfg.name}: " + (f"witness at step {result.step}" if found
                                       else f"nothing found in {result.samples} samples"),
          file=sys.stderr)
    return EXIT_FAIL if found else EXIT_OK


def _add_common(p: argparse.ArgumentParser, mode_default: Optional[str] = None) -> None:
    src = p.add_argument_group("program")
    src.add_argument("--gadget", choices=CATALOG, help="corpus gadget name")
    src.add_argument("--program", help="path to a .uasm listing")
    src.add_argument("--config", help="JSON run or experiment config")
    src.add_argument("--secret-range", action="append", metavar="LO:HI",
                     help="secret memory range (repeatable)")
    src.add_argument("--mem", action="append", metavar="ADDR=VAL", help="initial memory cell")
    src.add_argument("--reg", action="append", metavar="NAME=VAL[:H]",
                     help="initial register value, optionally secret")
    src.add_argument("--domain", action="append", metavar="LOC=V1,V2,...",
                     help="candidate values for a secret location")
    p.add_argument("--strategy", choices=STRATEGY_KINDS)
    p.add_argument("--script", help="scripted strategy JSON file")
    p.add_argument("--value", type=int, help="prediction for the constant-value strategy")
    p.add_argument("--seed", type=lambda s: int(s, 0),
                   help=f"master seed (default: ${SEED_ENV}, else {DEFAULT_SEED})")
    p.add_argument("-n", type=int, dest="n", help="step bound")
    p.add_argument("--mode", choices=[m.value for m in Mode], default=mode_default)
    p.add_argument("--out", help="output file (default: stdout)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="prospect-sim",
                                     description="Speculative out-of-order processor model "
                                                 "with secure-speculation checks.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="simulate and write a JSONL step trace")
    _add_common(run)
    run.add_argument("--arch", action="store_true", help="sequential semantics only")
    run.add_argument("--capacity", type=int, help="reorder buffer capacity")
    run.add_argument("--log-budget", type=int, metavar="BYTES",
                     help="keep at most this many bytes of full preamble structures")
    run.set_defaults(func=cmd_run)

    verify = sub.add_parser("verify", help="differential security check; writes a verdict")
    _add_common(verify)
    verify.add_argument("--kind", choices=sorted(CHECKS))
    verify.add_argument("--seeds", type=int)
    verify.add_argument("--pairs", type=int)
    verify.add_argument("--jobs", type=int, default=1)
    verify.add_argument("--witness-out", help="also write the witness to this file")
    verify.set_defaults(func=cmd_verify)

    attack = sub.add_parser("attack", help="search for a leaking strategy and secret pair")
    _add_common(attack, mode_default="insecure")
    attack.add_argument("--budget", type=int, default=DEFAULT_SEARCH_BUDGET)
    attack.add_argument("--no-script", action="store_true",
                        help="skip the gadget's attack script")
    attack.set_defaults(func=cmd_attack)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ParseError, UnknownGadget, ValueError, OSError,
            json.JSONDecodeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DeclassUnderflow as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
