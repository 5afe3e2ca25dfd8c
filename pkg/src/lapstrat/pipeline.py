"""End-to-end stages: synth -> ingest -> stats -> optimize -> simulate ->
evaluate -> stint.

Every stage writes its artifacts to ``<out>/<stage>/`` together with a
``manifest.json`` (input and output content hashes, seed, tool version and
the configuration sections it used).  ``<out>/manifest.json`` indexes the
stage manifests.  Manifests hold no timestamps or absolute paths, so two runs
with the same inputs, config and seed produce identical manifests.

Monte Carlo traces are not stored in bulk: the simulate stage records the
initial state and per-trace seeds, and later stages replay the traces.
"""

from __future__ import annotations

import contextlib
import csv
import hashlib
import io
import json
import logging
import os
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .config import ConfigError, RunConfig
from .ga_opt import (Evaluator, GAConfig, RegulationLimits, generate_strategy_set, hot_start_genome,
                     read_strategy_set, table2_constraints, write_strategy_set)
from .ingest import CarClass, clean_laps, parse_sector_times, write_sector_times
from .mc_sim import Competitor, MCConfig, RaceState, Simulator, trace_seed, write_trace
from .sdp import SDPConfig, build_tree, dump_tree, evaluate_stint, summarize, values_from_seeds, write_evaluation
from .stats import (FreeSectorDistribution, OvertakingProbabilityTable, ReferenceProfile, build_positions,
                    compute_overtaking_probabilities, extract_free_sector_times, read_free_times,
                    write_free_times)
from .synth import generate_race, make_reference, make_track, reference_lap
from .track import TrackGeometry
from .vehicle import VehicleParams

log = logging.getLogger(__name__)

STAGES = ("synth", "ingest", "stats", "optimize", "simulate", "evaluate", "stint")


class PipelineError(RuntimeError):
    pass


class MissingArtifactError(PipelineError):
    def __init__(self, path: Path, stage: str):
        super().__init__(f"{path} not found: run {stage} first")
        self.path = path
        self.stage = stage


# ----------------------------------------------------------------------------
# plumbing
# ----------------------------------------------------------------------------

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


@contextlib.contextmanager
def output_lock(out: Path):
    """Exclusive lock on an output directory for the duration of one command."""
    out.mkdir(parents=True, exist_ok=True)
    lock = out / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise PipelineError(f"{out} is locked by another invocation (remove {lock} if it is stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        with contextlib.suppress(FileNotFoundError):
            lock.unlink()


def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise MissingArtifactError(path, stage)
    return path


def _rel(path: Path, out: Path) -> str:
    try:
        return path.resolve().relative_to(out.resolve()).as_posix()
    except ValueError:
        return path.as_posix()


def write_manifest(out: Path, stage: str, cfg: RunConfig, sections: tuple, inputs: dict,
                   seed: int | None = None) -> dict:
    stage_dir = out / stage
    outputs = sorted(p for p in stage_dir.rglob("*") if p.is_file() and p.name != "manifest.json")
    conf = cfg.to_dict()
    manifest = {
        "stage": stage,
        "tool_version": __version__,
        "seed": seed,
        "config": {k: conf[k] for k in sections},
        "inputs": {name: {"path": _rel(p, out), "sha256": sha256_file(p)} for name, p in sorted(inputs.items())},
        "outputs": {p.relative_to(stage_dir).as_posix(): sha256_file(p) for p in outputs},
    }
    (stage_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    _write_index(out)
    return manifest


def _write_index(out: Path) -> None:
    stages = {s: sha256_file(out / s / "manifest.json") for s in STAGES if (out / s / "manifest.json").exists()}
    index = {"tool_version": __version__, "stages": stages}
    (out / "manifest.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")


def _stage_dir(out: Path, stage: str) -> Path:
    d = out / stage
    d.mkdir(parents=True, exist_ok=True)
    return d


# ----------------------------------------------------------------------------
# inputs
# ----------------------------------------------------------------------------

class Inputs:
    """Resolves input files: configured paths, else the synth stage outputs."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.out = Path(cfg.out)

    def _path(self, name: str, default: str) -> Path:
        value = getattr(self.cfg.paths, name)
        if value is not None:
            p = Path(value)
            if not p.exists():
                raise ConfigError(f"paths.{name}: {p} does not exist")
            return p
        return _require(self.out / "synth" / default, "synth")

    @property
    def sector_times(self) -> Path:
        return self._path("sector_times", "sector_times.csv")

    @property
    def geometry_path(self) -> Path:
        return self._path("geometry", "track.csv")

    @property
    def reference_path(self) -> Path:
        return self._path("reference", "reference.csv")

    @property
    def reference_sidecar(self) -> Path:
        return _require(self.reference_path.with_suffix(".yaml"), "synth")

    @property
    def vehicle_path(self) -> Path | None:
        if self.cfg.paths.vehicle is not None:
            return self._path("vehicle", "vehicle.yaml")
        p = self.out / "synth" / "vehicle.yaml"
        return p if p.exists() else None

    def records(self):
        return parse_sector_times(self.sector_times)

    def geometry(self) -> TrackGeometry:
        return TrackGeometry.from_csv(self.geometry_path)

    def reference(self) -> ReferenceProfile:
        return ReferenceProfile.from_files(self.reference_path, self.reference_sidecar)

    def params(self) -> VehicleParams:
        p = self.vehicle_path
        return VehicleParams() if p is None else VehicleParams.from_yaml(p)

    def hashed(self, *names: str) -> dict:
        table = {"sector_times": lambda: self.sector_times, "geometry": lambda: self.geometry_path,
                 "reference": lambda: self.reference_path, "reference_meta": lambda: self.reference_sidecar,
                 "vehicle": lambda: self.vehicle_path}
        got = {n: table[n]() for n in names}
        return {n: p for n, p in got.items() if p is not None}


# ----------------------------------------------------------------------------
# synthetic data
# ----------------------------------------------------------------------------

def generate_synthetic(out_dir, preset: str = "bahrain-like", n_cars: dict | None = None, n_laps: int = 12,
                       noise: float = 0.003, seed: int = 0, pit_fraction: float = 0.5,
                       params: VehicleParams = VehicleParams()) -> dict:
    """Write a self-consistent synthetic dataset and return its file paths.

    Files: ``sector_times.csv``, ``track.csv``, ``reference.csv`` (+ ``.yaml``
    sidecar), ``vehicle.yaml``, the planted overtaking table
    ``truth_overtaking.csv`` and ``planted_outliers.csv`` (pit-affected laps).
    Car 1 is the first car of the fastest requested class.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n_cars = n_cars or {"LMP1": 2, "LMP2": 3, "LMGTE_Pro": 3, "LMGTE_Am": 4}
    counts = {CarClass.parse(k): int(v) for k, v in n_cars.items()}
    geometry = make_track(preset)
    reference = make_reference(geometry, params)
    race = generate_race(geometry, reference, counts, n_laps, seed, noise=noise, pit_fraction=pit_fraction)
    paths = {
        "sector_times": out / "sector_times.csv",
        "geometry": out / "track.csv",
        "reference": out / "reference.csv",
        "reference_meta": out / "reference.yaml",
        "vehicle": out / "vehicle.yaml",
        "truth_table": out / "truth_overtaking.csv",
        "outliers": out / "planted_outliers.csv",
    }
    write_sector_times(race.records, paths["sector_times"])
    geometry.to_csv(paths["geometry"])
    reference.to_files(paths["reference"], paths["reference_meta"])
    params.to_yaml(paths["vehicle"])
    race.truth_table.to_csv(paths["truth_table"])
    paths["outliers"].write_text("car,lap\n" + "".join(f"{c},{lap}\n" for c, lap in sorted(race.planted_outliers)))
    return paths


def cmd_synth(cfg: RunConfig) -> int:
    seed = cfg.require_seed("synth")
    out = Path(cfg.out)
    d = _stage_dir(out, "synth")
    s = cfg.synth
    generate_synthetic(d, s.preset, s.n_cars, s.n_laps, s.noise, seed, s.pit_fraction)
    write_manifest(out, "synth", cfg, ("synth",), {}, seed)
    return 0


# ----------------------------------------------------------------------------
# analysis stages
# ----------------------------------------------------------------------------

def cmd_ingest(cfg: RunConfig) -> int:
    out = Path(cfg.out)
    inp = Inputs(cfg)
    records = inp.records()
    cleaned = clean_laps(records, cfg.ingest.eps, cfg.ingest.min_pts)
    d = _stage_dir(out, "ingest")
    write_sector_times(cleaned.all_retained(), d / "clean_laps.csv")
    cleaned.rejection_report(d / "rejections.csv")
    write_manifest(out, "ingest", cfg, ("ingest",), inp.hashed("sector_times"))
    return 0


def _clean_records(out: Path):
    return parse_sector_times(_require(out / "ingest" / "clean_laps.csv", "ingest"))


def cmd_stats(cfg: RunConfig) -> int:
    out = Path(cfg.out)
    inp = Inputs(cfg)
    clean_path = _require(out / "ingest" / "clean_laps.csv", "ingest")
    retained = parse_sector_times(clean_path)
    reference = inp.reference()
    geometry = inp.geometry()
    eligible = {(r.car_number, r.lap) for r in retained}
    positions = build_positions(inp.records(), reference, cfg.stats.dt, eligible)
    dists = extract_free_sector_times(positions, cfg.stats.gap_threshold)
    table = compute_overtaking_probabilities(positions, geometry.section_bounds(), cfg.stats.proximity)
    d = _stage_dir(out, "stats")
    write_free_times(dists, d / "free_times.csv")
    table.to_csv(d / "overtaking.csv")
    inputs = inp.hashed("sector_times", "geometry", "reference", "reference_meta")
    inputs["clean_laps"] = clean_path
    write_manifest(out, "stats", cfg, ("stats",), inputs)
    return 0


def _evaluator(inp: Inputs) -> Evaluator:
    return Evaluator(inp.geometry(), inp.params(), RegulationLimits())


def cmd_optimize(cfg: RunConfig) -> int:
    seed = cfg.require_seed("optimize")
    out = Path(cfg.out)
    inp = Inputs(cfg)
    ev = _evaluator(inp)
    o = cfg.optimize
    ga = GAConfig(population=o.population, generations=o.generations, crossover_rate=o.crossover_rate,
                  mutation_scale=o.mutation_scale, elitism=o.elitism, tournament=o.tournament, seed=seed,
                  patience=o.patience)
    hot = hot_start_genome(reference_lap(ev.geometry, ev.params, ev.limits.fuel_max_g), ev.geometry, ev.limits)
    strategies, errors = generate_strategy_set(ev, table2_constraints(), ga, hot)
    for e in errors:
        log.warning(e)
    if not strategies:
        raise PipelineError("no strategy found a feasible lap")
    d = _stage_dir(out, "optimize")
    for old in d.glob("strategy_*"):
        old.unlink()
    write_strategy_set(strategies, d)
    (d / "errors.txt").write_text("".join(e + "\n" for e in errors))
    write_manifest(out, "optimize", cfg, ("optimize",), inp.hashed("geometry", "vehicle"), seed)
    return 0


def initial_state(records, reference: ReferenceProfile, ego_car: int, start_lap: int,
                  dt: float = 0.1) -> tuple[RaceState, CarClass]:
    """Competitor positions relative to the ego car as it starts ``start_lap``.

    The ego sits at arc 0; a competitor ``x`` metres ahead on the cumulative
    track gets position ``x`` (negative when behind).
    """
    ego = {r.lap: r for r in records if r.car_number == ego_car}
    if start_lap not in ego:
        raise PipelineError(f"ego car {ego_car} has no lap {start_lap} in the sector times")
    t_star = ego[start_lap].elapsed - ego[start_lap].lap_time
    positions = build_positions(records, reference, dt)
    L = reference.length
    ego_pos = (start_lap - 1) * L
    comps = []
    ego_class = None
    for c, car in enumerate(positions.cars):
        if car == ego_car:
            ego_class = positions.classes[c]
            continue
        x = float(np.interp(t_star, positions.t, positions.pos[c], left=np.nan, right=np.nan))
        if np.isnan(x):
            log.warning("car %s has no position at the start time; left out", car)
            continue
        comps.append((round(x - ego_pos, 6), car, positions.classes[c]))
    comps.sort()
    used: set = set()
    state = []
    for x, car, cls in comps:
        while x in used:
            x = float(np.nextafter(x, np.inf))
        used.add(x)
        state.append(Competitor(car, cls, x))
    return RaceState(tuple(state)), ego_class


def _complete_dists(dists: dict, retained, cars) -> dict:
    """Fill cars lacking free traversals in some sector with their cleaned laps."""
    out = dict(dists)
    for car, cls in cars:
        d = out.get(car)
        if d is not None and d.complete:
            continue
        laps = [r for r in retained if r.car_number == car]
        if not laps:
            raise PipelineError(f"car {car} has neither free sector times nor cleaned laps")
        log.warning("car %s: free sector times incomplete, using its cleaned laps", car)
        out[car] = FreeSectorDistribution(car, cls, tuple(np.array([r.sectors[i] for r in laps])
                                                          for i in range(3)))
    return out


def _write_state(state: RaceState, path: Path, ego_class: CarClass) -> None:
    lines = [f"# ego_class {ego_class.value}", "car,class,position"]
    lines += [f"{c.car_number},{c.car_class.value},{c.position!r}" for c in state.competitors]
    path.write_text("\n".join(lines) + "\n")


def _read_state(path: Path) -> tuple[RaceState, CarClass]:
    text = path.read_text().splitlines()
    ego_class = CarClass.parse(text[0].split(maxsplit=2)[2])
    rows = list(csv.DictReader(io.StringIO("\n".join(text[1:]))))
    comps = tuple(Competitor(int(r["car"]), CarClass.parse(r["class"]), float(r["position"])) for r in rows)
    return RaceState(comps), ego_class


def _mc_config(cfg: RunConfig) -> MCConfig:
    s = cfg.simulate
    return MCConfig(dt=cfg.stats.dt, horizon_laps=s.horizon_laps, influence=s.influence, proximity=s.proximity,
                    following_gap=s.following_gap, swap_gap=s.swap_gap)


class _SimContext:
    """Everything downstream stages need to replay the simulate batch."""

    def __init__(self, cfg: RunConfig):
        out = Path(cfg.out)
        inp = Inputs(cfg)
        sim_dir = out / "simulate"
        self.state_path = _require(sim_dir / "initial_state.csv", "simulate")
        self.seeds_path = _require(sim_dir / "seeds.csv", "simulate")
        self.free_path = _require(out / "stats" / "free_times.csv", "stats")
        self.table_path = _require(out / "stats" / "overtaking.csv", "stats")
        self.clean_path = _require(out / "ingest" / "clean_laps.csv", "ingest")
        self.initial, self.ego_class = _read_state(self.state_path)
        self.seeds = [int(r["seed"]) for r in csv.DictReader(io.StringIO(self.seeds_path.read_text()))]
        self.table = OvertakingProbabilityTable.from_csv(self.table_path)
        self.dists = _complete_dists(read_free_times(self.free_path), parse_sector_times(self.clean_path),
                                     [(c.car_number, c.car_class) for c in self.initial.competitors])
        self.reference = inp.reference()
        self.geometry = inp.geometry()
        self.params = inp.params()
        self.mc = _mc_config(cfg)
        self.sdp = SDPConfig(proximity=cfg.simulate.proximity, following_gap=cfg.simulate.following_gap,
                             min_path_prob=cfg.evaluate.min_path_prob, ego_class=self.ego_class)
        self.inputs = {**inp.hashed("geometry", "reference", "reference_meta", "vehicle"),
                       "initial_state": self.state_path, "seeds": self.seeds_path,
                       "free_times": self.free_path, "overtaking": self.table_path, "clean_laps": self.clean_path}

    def simulator(self) -> Simulator:
        return Simulator(self.initial, self.dists, self.table, self.reference,
                         self.geometry.section_starts() * self.geometry.delta_s, self.mc)


def cmd_simulate(cfg: RunConfig) -> int:
    seed = cfg.require_seed("simulate")
    out = Path(cfg.out)
    inp = Inputs(cfg)
    _require(out / "stats" / "free_times.csv", "stats")
    s = cfg.simulate
    if s.n_sims < 1:
        raise ConfigError("simulate.n_sims must be >= 1")
    state, ego_class = initial_state(inp.records(), inp.reference(), s.ego_car, s.start_lap, cfg.stats.dt)
    d = _stage_dir(out, "simulate")
    for old in d.glob("trace_*"):
        old.unlink()
    _write_state(state, d / "initial_state.csv", ego_class)
    (d / "seeds.csv").write_text("trace,seed\n" + "".join(f"{i},{trace_seed(seed, i)}\n" for i in range(s.n_sims)))
    ctx = _SimContext(cfg)
    sim = ctx.simulator()
    for i in range(min(s.export_traces, s.n_sims)):
        tr = sim.simulate(ctx.seeds[i])
        write_trace(tr, d / f"trace_{i:04d}_positions.csv", d / f"trace_{i:04d}_events.csv")
    inputs = {**inp.hashed("sector_times", "reference", "reference_meta", "geometry"),
              "free_times": ctx.free_path, "overtaking": ctx.table_path, "clean_laps": ctx.clean_path}
    write_manifest(out, "simulate", cfg, ("simulate",), inputs, seed)
    return 0


def _strategies(cfg: RunConfig, ctx_params: VehicleParams, geometry: TrackGeometry):
    d = _require(Path(cfg.out) / "optimize" / "index.csv", "optimize").parent
    ev = Evaluator(geometry, ctx_params, RegulationLimits())
    return read_strategy_set(d, ev), d


def cmd_evaluate(cfg: RunConfig) -> int:
    out = Path(cfg.out)
    ctx = _SimContext(cfg)
    strategies, opt_dir = _strategies(cfg, ctx.params, ctx.geometry)
    values = values_from_seeds(strategies, ctx.simulator(), ctx.seeds, ctx.geometry, ctx.table, ctx.params,
                               ctx.sdp, None, cfg.jobs)
    evals, best = summarize(strategies, values)
    d = _stage_dir(out, "evaluate")
    for old in d.glob("tree_*"):
        old.unlink()
    write_evaluation(evals, d / "evaluation.csv")
    lines = ["trace," + ",".join(f"s{e.strategy_id}" for e in evals)]
    for j in range(values.shape[1]):
        lines.append(f"{j}," + ",".join(f"{values[i, j]:.6f}" for i in range(values.shape[0])))
    (d / "per_trace.csv").write_text("\n".join(lines) + "\n")
    if cfg.evaluate.dump_trees:
        sim = ctx.simulator()
        for j in range(min(cfg.evaluate.dump_trees, len(ctx.seeds))):
            trace = sim.simulate(ctx.seeds[j])
            for s in strategies:
                root = build_tree(s.lap, trace, ctx.table, ctx.geometry, ctx.params, ctx.sdp)
                (d / f"tree_{j:04d}_s{s.strategy_id:02d}.txt").write_text(dump_tree(root))
    desc = {s.strategy_id: s.constraint.description for s in strategies}
    winner = next(e for e in evals if e.strategy_id == best)
    (d / "report.txt").write_text(
        f"winning strategy: {best} ({desc[best]})\n"
        f"expected traffic loss f0: {winner.f0:.6f} s (std error {winner.std_error:.6f} s)\n"
        f"traffic-free lap time: {winner.lap_time:.6f} s\n"
        f"traces: {len(ctx.seeds)}\n")
    inputs = {**ctx.inputs, "strategies": opt_dir / "index.csv"}
    write_manifest(out, "evaluate", cfg, ("simulate", "evaluate"), inputs)
    return 0


def _read_evaluation(path: Path) -> list[dict]:
    return list(csv.DictReader(io.StringIO(path.read_text())))


def cmd_stint(cfg: RunConfig) -> int:
    seed = cfg.require_seed("stint")
    out = Path(cfg.out)
    ctx = _SimContext(cfg)
    eval_path = _require(out / "evaluate" / "evaluation.csv", "evaluate")
    strategies, opt_dir = _strategies(cfg, ctx.params, ctx.geometry)
    st = cfg.stint
    ids = {s.strategy_id for s in strategies}
    if st.baseline not in ids:
        raise ConfigError(f"stint.baseline {st.baseline} is not in the strategy set {sorted(ids)}")
    ranked = sorted(_read_evaluation(eval_path), key=lambda r: (float(r["f0"]), float(r["lap_time"])))
    keep = [int(r["strategy_id"]) for r in ranked[: st.candidates]]
    if st.baseline not in keep:
        keep.append(st.baseline)
    chosen = [s for s in strategies if s.strategy_id in keep]
    report = evaluate_stint(chosen, ctx.initial, ctx.dists, ctx.table, ctx.reference, ctx.geometry, st.n_laps,
                            st.n_sims, seed, st.baseline, st.n_runs, st.ci_level, ctx.params, ctx.sdp, ctx.mc)
    d = _stage_dir(out, "stint")
    report.to_csv(d / "stint_laps.csv")
    lo, hi = report.ci
    (d / "stint_runs.csv").write_text("run,cumulative_gain,chosen\n" + "".join(
        f"{r},{run.cumulative_gain:.6f},{' '.join(str(c) for c in run.chosen)}\n"
        for r, run in enumerate(report.runs)))
    (d / "summary.yaml").write_text(yaml.safe_dump({
        "baseline": st.baseline, "candidates": sorted(keep), "n_laps": st.n_laps, "n_runs": st.n_runs,
        "mean_gain_s": round(report.mean_gain, 6), "ci_level": st.ci_level,
        "ci_s": [round(lo, 6), round(hi, 6)]}, sort_keys=True))
    inputs = {**ctx.inputs, "strategies": opt_dir / "index.csv", "evaluation": eval_path}
    write_manifest(out, "stint", cfg, ("simulate", "evaluate", "stint"), inputs, seed)
    return 0


COMMANDS = {"synth": cmd_synth, "ingest": cmd_ingest, "stats": cmd_stats, "optimize": cmd_optimize,
            "simulate": cmd_simulate, "evaluate": cmd_evaluate, "stint": cmd_stint}


def run_stage(stage: str, cfg: RunConfig) -> int:
    cfg.validate()
    out = Path(cfg.out)
    with output_lock(out):
        log.info("stage %s", stage)
        return COMMANDS[stage](cfg)


def run_all(cfg: RunConfig, synth: bool | None = None) -> str:
    """Run every stage in order (synth only when no sector-times file is
    configured) and return the evaluation report."""
    cfg.validate()
    out = Path(cfg.out)
    if synth is None:
        synth = cfg.paths.sector_times is None
    stages = STAGES if synth else STAGES[1:]
    with output_lock(out):
        for stage in stages:
            log.info("stage %s", stage)
            COMMANDS[stage](cfg)
    return (out / "evaluate" / "report.txt").read_text()
