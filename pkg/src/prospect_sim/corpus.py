"""Named transient-execution gadgets with their memory layouts and secrets.

Each gadget is a pair of files in the ``corpus`` package directory: a
``.uasm`` listing and a ``.json`` description that doubles as a run config.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Mapping, Optional

from .arch import ArchConfig, initial_arch_config
from .hardware import HardwareConfig, Mode, from_arch
from .isa import H, L, LabeledValue, Level, Program, SecretPartition, parse_program
from .microctx import StrategySpec, load_script

CATALOG = ("spectre-pht", "spectre-btb", "spectre-stl", "lvi", "example2",
           "listing2", "listing3", "listing4")
TAGS = frozenset({"leaks_insecure", "ct_plain", "ct_up_to_decl", "rollback_demo",
                  "classical_decl_demo"})


class UnknownGadget(LookupError):
    pass


@dataclass(frozen=True)
class Gadget:
    name: str
    program: Program
    part: SecretPartition
    mem: Mapping[int, int]
    reg: Mapping[str, LabeledValue]
    secret_domains: Mapping
    tags: frozenset = frozenset()
    attack_script: Optional[StrategySpec] = None
    description: str = ""
    n: int = 500
    source: str = field(default="", compare=False)

    def arch_config(self) -> ArchConfig:
        return initial_arch_config(self.program, self.mem, self.reg)

    def hw_config(self, strategy: StrategySpec = StrategySpec(), mode: Mode = Mode.PROSPECT,
                  capacity: Optional[int] = None) -> HardwareConfig:
        return from_arch(self.program, self.part, self.arch_config(), strategy, mode, capacity)


def corpus_dir() -> Path:
    return Path(str(resources.files(__package__) / "corpus"))


def parse_registers(table: Mapping) -> dict:
    """``{"idx": 16, "s": {"value": 7, "level": "H"}}`` -> labeled registers."""
    out = {}
    for name, spec in table.items():
        if isinstance(spec, Mapping):
            level = Level[str(spec.get("level", "L")).upper()]
            out[name] = LabeledValue(int(spec.get("value", 0)), level)
        else:
            out[name] = LabeledValue(int(spec), L)
    return out


def parse_domains(table: Mapping) -> dict:
    """JSON keys that are integers name memory cells; other keys name registers."""
    out: dict = {}
    for key, values in table.items():
        k = str(key)
        try:
            loc: object = int(k, 0)
        except ValueError:
            loc = k
        out[loc] = [int(v) for v in values]
    return out


def gadget_from_json(data: Mapping, base_dir: Path, name: Optional[str] = None) -> Gadget:
    program_path = base_dir / data["program"]
    source = program_path.read_text(encoding="utf-8")
    script = None
    if data.get("attack_script"):
        script = load_script(base_dir / data["attack_script"])
    tags = frozenset(data.get("tags", ()))
    unknown = tags - TAGS
    if unknown:
        raise ValueError(f"unknown behaviour tags {sorted(unknown)}")
    return Gadget(
        name=name or data.get("name", program_path.stem),
        program=parse_program(source),
        part=SecretPartition(tuple(tuple(r) for r in data.get("secret_ranges", ()))),
        mem={int(k, 0): int(v) for k, v in data.get("memory", {}).items()},
        reg=parse_registers(data.get("registers", {})),
        secret_domains=parse_domains(data.get("secret_domains", {})),
        tags=tags,
        attack_script=script,
        description=data.get("description", ""),
        n=int(data.get("n", 500)),
        source=source,
    )


def load_gadget_file(path) -> Gadget:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    return gadget_from_json(data, path.parent)


_cache: dict = {}


def get_gadget(name: str) -> Gadget:
    if name not in CATALOG:
        raise UnknownGadget(name)
    if name not in _cache:
        _cache[name] = load_gadget_file(corpus_dir() / f"{name}.json")
    return _cache[name]


def gadgets_tagged(tag: str) -> list:
    return [g for g in map(get_gadget, CATALOG) if tag in g.tags]


def secret_levels(g: Gadget) -> dict:
    """Which registers start out secret."""
    return {r: v.level for r, v in g.reg.items() if v.level is H}
