"""Run configuration: a YAML file, overridable from the command line.

Defaults marked ``synthetic`` are desk-scale choices, not published values.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml


class ConfigError(ValueError):
    pass


@dataclass
class PathsConfig:
    """Input files; ``None`` means the file written by ``synth`` under the
    output directory."""

    sector_times: str | None = None
    geometry: str | None = None
    reference: str | None = None  # sidecar: same stem, .yaml
    vehicle: str | None = None  # YAML; None: synth output, else built-in synthetic parameters


@dataclass
class SynthConfig:
    preset: str = "bahrain-like"
    n_cars: dict = field(default_factory=lambda: {"LMP1": 2, "LMP2": 3, "LMGTE_Pro": 3, "LMGTE_Am": 4})
    n_laps: int = 30  # synthetic
    noise: float = 0.003  # relative std of free sector times, synthetic
    pit_fraction: float = 0.5  # synthetic


@dataclass
class IngestConfig:
    eps: float = 2.0  # s
    min_pts: int = 5


@dataclass
class StatsConfig:
    dt: float = 0.1  # s
    gap_threshold: float = 100.0  # m
    proximity: float = 10.0  # m


@dataclass
class OptimizeConfig:
    population: int = 200  # synthetic desk scale
    generations: int = 30  # synthetic desk scale
    patience: int | None = 6
    elitism: int = 4
    tournament: int = 4
    crossover_rate: float = 0.9
    mutation_scale: float = 0.1


@dataclass
class SimulateConfig:
    n_sims: int = 1000
    ego_car: int = 1
    start_lap: int = 8
    horizon_laps: int = 2
    influence: float = 100.0
    proximity: float = 10.0
    following_gap: float = 10.0
    swap_gap: float = 10.0  # synthetic
    export_traces: int = 1  # traces written out in full; the rest replay from seeds


@dataclass
class EvaluateConfig:
    min_path_prob: float = 1e-4  # synthetic
    dump_trees: int = 0  # number of traces whose trees are written as text


@dataclass
class StintConfig:
    n_laps: int = 5
    n_sims: int = 20  # synthetic desk scale
    n_runs: int = 10  # synthetic desk scale
    candidates: int = 4
    baseline: int = 1
    ci_level: float = 0.9


@dataclass
class RunConfig:
    seed: int | None = None
    out: str = "run"
    jobs: int = 1
    paths: PathsConfig = field(default_factory=PathsConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    ingest: IngestConfig = field(default_factory=IngestConfig)
    stats: StatsConfig = field(default_factory=StatsConfig)
    optimize: OptimizeConfig = field(default_factory=OptimizeConfig)
    simulate: SimulateConfig = field(default_factory=SimulateConfig)
    evaluate: EvaluateConfig = field(default_factory=EvaluateConfig)
    stint: StintConfig = field(default_factory=StintConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    def require_seed(self, stage: str) -> int:
        if self.seed is None:
            raise ConfigError(f"stage '{stage}' is stochastic and needs a seed (--seed or 'seed:' in the config)")
        return int(self.seed)

    def validate(self) -> None:
        """Explicitly configured input paths must exist."""
        for name in ("sector_times", "geometry", "reference", "vehicle"):
            value = getattr(self.paths, name)
            if value is not None and not Path(value).exists():
                raise ConfigError(f"paths.{name}: {value} does not exist")
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")


def _build(cls, data: dict, where: str):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(sorted(unknown))}")
    return cls(**data)


def from_dict(data: dict | None) -> RunConfig:
    data = dict(data or {})
    sub = {}
    for name, cls in (("paths", PathsConfig), ("synth", SynthConfig), ("ingest", IngestConfig),
                      ("stats", StatsConfig), ("optimize", OptimizeConfig), ("simulate", SimulateConfig),
                      ("evaluate", EvaluateConfig), ("stint", StintConfig)):
        if name in data:
            section = data.pop(name) or {}
            if not isinstance(section, dict):
                raise ConfigError(f"section '{name}' must be a mapping")
            sub[name] = _build(cls, section, name)
    return _build(RunConfig, {**data, **sub}, "top level")


def load(path=None, overrides: dict | None = None) -> RunConfig:
    """Read ``path`` (YAML) and apply dotted-key ``overrides`` such as
    ``{"simulate.n_sims": 100}``."""
    data = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} does not exist")
        data = yaml.safe_load(p.read_text()) or {}
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a mapping")
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        node = data
        *head, last = key.split(".")
        for h in head:
            node = node.setdefault(h, {})
        node[last] = value
    return from_dict(data)
