"""Genetic-algorithm search over per-region energy budgets.

A genome holds one electric budget (integer kJ) and one fuel budget (integer
g) per region.  Decoding spends each region's budgets from the start of its
straight onwards; the lap simulation then yields the lap time and the energy
ledger used for the regulation checks.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .track import GeometryError, TrackGeometry
from .vehicle import InfeasibleApexError, LapResult, LapSimulator, RegionBudgets, StallError, VehicleParams

log = logging.getLogger(__name__)

PENALTY_BASE = 1000.0
PENALTY_PER_UNIT = 10.0
MIN_BAN_M = 50.0
RECOMMENDED_BAN_M = 100.0


class NoFeasibleError(RuntimeError):
    def __init__(self, best_genome: np.ndarray, best_fitness: float, violations: dict):
        super().__init__(
            f"no feasible individual found; best fitness {best_fitness:.3f} with violations {violations}"
        )
        self.best_genome = best_genome
        self.best_fitness = best_fitness
        self.violations = violations


@dataclass(frozen=True)
class RegulationLimits:
    """Per-lap limits.  ``e_rec_hers_kj`` is a synthetic default."""

    e_el_max_kj: float = 4924.0
    fuel_max_g: float = 1381.0
    e_rec_hers_kj: float = 800.0
    gene_e_max: int = 2300
    gene_f_max: int = 1381


@dataclass(frozen=True)
class KersBan:
    straight: int
    to_m: float
    from_m: float = 0.0

    def __post_init__(self) -> None:
        length = self.to_m - self.from_m
        if self.straight < 1:
            raise ValueError("straights are numbered from 1")
        if length < MIN_BAN_M:
            raise ValueError(f"ban on straight {self.straight} spans {length} m (< {MIN_BAN_M} m)")
        if length < RECOMMENDED_BAN_M:
            log.warning("ban on straight %d spans only %g m (< %g m)", self.straight, length,
                        RECOMMENDED_BAN_M)


@dataclass(frozen=True)
class StrategyConstraint:
    bans: tuple = ()
    label: str = ""

    @property
    def description(self) -> str:
        if self.label:
            return self.label
        if not self.bans:
            return "No constraints"
        return "; ".join(f"no KERS {b.from_m:g}-{b.to_m:g} m straight {b.straight}" for b in self.bans)

    def ban_mask(self, geometry: TrackGeometry) -> np.ndarray:
        mask = np.zeros(geometry.n_points, dtype=bool)
        for b in self.bans:
            mask |= geometry.straight_mask(b.straight, b.from_m, b.to_m)
        return mask

    def to_dict(self) -> dict:
        return {"label": self.label,
                "bans": [{"straight": b.straight, "from_m": b.from_m, "to_m": b.to_m} for b in self.bans]}

    @classmethod
    def from_dict(cls, d: dict) -> StrategyConstraint:
        bans = []
        for b in d.get("bans", []) or []:
            if "meters" in b:
                bans.append(KersBan(int(b["straight"]), float(b["meters"])))
            else:
                bans.append(KersBan(int(b["straight"]), float(b["to_m"]), float(b.get("from_m", 0.0))))
        return cls(tuple(bans), d.get("label", ""))


def table2_constraints() -> list[StrategyConstraint]:
    """The fifteen ban layouts of the published strategy set, in its order."""
    rows = [(), ((8, 100),), ((2, 100),), ((4, 110),), ((1, 100),), ((8, 200),), ((7, 100),),
            ((8, 300),), ((7, 100), (8, 100)), ((1, 100), (7, 100)), ((7, 200),),
            ((1, 100), (8, 100)), ((1, 200),), ((5, 70),), ((5, 140),)]
    return [StrategyConstraint(tuple(KersBan(s, m) for s, m in r)) for r in rows]


@dataclass
class Genome:
    e_el: np.ndarray  # kJ per region
    fuel: np.ndarray  # g per region

    @property
    def array(self) -> np.ndarray:
        return np.concatenate([self.e_el, self.fuel]).astype(np.int64)

    @classmethod
    def from_array(cls, a) -> Genome:
        a = np.asarray(a, dtype=np.int64)
        m = a.size // 2
        return cls(a[:m].copy(), a[m:].copy())

    def budgets(self, mask: np.ndarray | None = None) -> RegionBudgets:
        return RegionBudgets(self.e_el.astype(float), self.fuel.astype(float) / 1000.0, mask)


class Evaluator:
    """Decodes and scores genomes for one (geometry, params, limits) setting."""

    def __init__(self, geometry: TrackGeometry, params: VehicleParams = VehicleParams(),
                 limits: RegulationLimits = RegulationLimits(), v_start: float | None = None,
                 energy_form: bool = False):
        self.geometry = geometry
        self.params = params
        self.limits = limits
        self.sim = LapSimulator(geometry, params, energy_form=energy_form)
        if v_start is None:
            # line-crossing speed of the unlimited combustion lap
            v_start = self.sim.flying_start_speed(RegionBudgets.unlimited(geometry.n_regions, electric=False))
        self.v_start = float(v_start)
        self.n_regions = geometry.n_regions
        self._masks: dict = {}

    def mask(self, constraint: StrategyConstraint) -> np.ndarray:
        m = self._masks.get(constraint.bans)
        if m is None:
            m = constraint.ban_mask(self.geometry)
            self._masks[constraint.bans] = m
        return m

    def check_ranges(self, genome: np.ndarray) -> None:
        g = np.asarray(genome)
        m = self.n_regions
        if g.shape != (2 * m,):
            raise ValueError(f"genome must hold {2 * m} integers")
        if np.any(g[:m] < 0) or np.any(g[:m] > self.limits.gene_e_max) or np.any(g[m:] < 0) \
                or np.any(g[m:] > self.limits.gene_f_max):
            raise ValueError("genome entries outside their ranges")

    def decode(self, genome, constraint: StrategyConstraint) -> LapResult:
        """Simulated lap for the genome; the result carries the mode trace and
        the remaining region budgets at every point."""
        g = Genome.from_array(genome)
        self.check_ranges(g.array)
        return self.sim.run(self.v_start, g.budgets(self.mask(constraint)))

    def sum_violations(self, genome) -> dict:
        g = Genome.from_array(genome)
        lim = self.limits
        return {
            "e_el": max(float(g.e_el.sum()) - lim.e_el_max_kj, 0.0),
            "fuel": max(float(g.fuel.sum()) - lim.fuel_max_g, 0.0),
        }

    def ledger_violations(self, lap: LapResult) -> dict:
        lim = self.limits
        return {
            "e_el": max(lap.e_el_used - lim.e_el_max_kj, 0.0),
            "fuel": max(lap.fuel_used * 1000.0 - lim.fuel_max_g, 0.0),
            "kers_balance": max(lap.e_el_used - lim.e_rec_hers_kj - lap.e_el_rec_kers, 0.0),
            # flying lap: finishing slower than the start borrows time from the next lap
            "end_speed": max(self.v_start - lap.v_end, 0.0),
        }

    def fitness(self, genome, constraint: StrategyConstraint) -> tuple[float, LapResult | None]:
        viol = self.sum_violations(genome)
        bad = [v for v in viol.values() if v > 0]
        if bad:
            return penalty(bad), None
        try:
            lap = self.decode(genome, constraint)
        except (StallError, InfeasibleApexError):
            return math.inf, None
        bad = [v for v in self.ledger_violations(lap).values() if v > 1e-9]
        return lap.lap_time + (penalty(bad) if bad else 0.0), lap


def penalty(violations) -> float:
    return sum(PENALTY_BASE + PENALTY_PER_UNIT * v for v in violations)


def fitness(genome, constraint: StrategyConstraint, geometry: TrackGeometry,
            params: VehicleParams = VehicleParams(), limits: RegulationLimits = RegulationLimits(),
            v_start: float | None = None) -> float:
    return Evaluator(geometry, params, limits, v_start).fitness(genome, constraint)[0]


def is_feasible(f: float) -> bool:
    return f < PENALTY_BASE


@dataclass(frozen=True)
class GAConfig:
    population: int = 2000
    generations: int = 50
    crossover_rate: float = 0.9
    mutation_rate: float | None = None  # per gene; default 1 / genome length
    mutation_scale: float = 0.1  # std dev as a fraction of the gene range
    elitism: int = 20
    tournament: int = 4
    seed: int = 0
    patience: int | None = None  # stop after this many generations without improvement

    @classmethod
    def from_dict(cls, d: dict) -> GAConfig:
        return cls(**d)


@dataclass
class EnergyStrategy:
    genome: np.ndarray
    constraint: StrategyConstraint
    lap_time: float
    lap: LapResult
    fitness: float
    history: list = field(default_factory=list)
    strategy_id: int = 0

    @property
    def mode_trace(self) -> np.ndarray:
        return self.lap.mode

    def to_dict(self) -> dict:
        m = len(self.genome) // 2
        return {
            "id": self.strategy_id,
            "constraint": self.constraint.to_dict(),
            "description": self.constraint.description,
            "genome": {"e_el_kj": [int(x) for x in self.genome[:m]],
                       "fuel_g": [int(x) for x in self.genome[m:]]},
            "lap_time": float(self.lap_time),
            "fuel_used_kg": self.lap.fuel_used,
            "e_el_used_kj": self.lap.e_el_used,
            "e_el_rec_kers_kj": self.lap.e_el_rec_kers,
        }


def random_population(rng: np.random.Generator, n: int, n_regions: int,
                      limits: RegulationLimits) -> np.ndarray:
    """Uniform genomes, each half rescaled to a random fraction of its cap."""
    e = rng.integers(0, limits.gene_e_max + 1, size=(n, n_regions)).astype(float)
    f = rng.integers(0, limits.gene_f_max + 1, size=(n, n_regions)).astype(float)
    fe = rng.uniform(0.5, 1.0, size=(n, 1)) * limits.e_el_max_kj
    ff = rng.uniform(0.5, 1.0, size=(n, 1)) * limits.fuel_max_g
    e = np.floor(e * np.minimum(1.0, fe / np.maximum(e.sum(axis=1, keepdims=True), 1.0)))
    f = np.floor(f * np.minimum(1.0, ff / np.maximum(f.sum(axis=1, keepdims=True), 1.0)))
    return np.hstack([e, f]).astype(np.int64)


def run_ga(evaluator: Evaluator, constraint: StrategyConstraint = StrategyConstraint(),
           config: GAConfig = GAConfig(), hot_start=None) -> EnergyStrategy:
    """Generational GA (tournament selection, uniform crossover, bounded
    Gaussian mutation, elitism).  Deterministic for a given seed."""
    m = evaluator.n_regions
    n_genes = 2 * m
    lim = evaluator.limits
    if config.population < 23 * m:
        log.warning("population %d is below the recommended %d", config.population, 23 * m)
    if config.population < 2:
        raise ValueError("population must be at least 2")
    rng = np.random.default_rng(config.seed)
    upper = np.array([lim.gene_e_max] * m + [lim.gene_f_max] * m)
    p_mut = config.mutation_rate if config.mutation_rate is not None else 1.0 / n_genes
    sigma = config.mutation_scale * upper
    n_elite = min(config.elitism, config.population)

    cache: dict[bytes, tuple[float, LapResult | None]] = {}

    def evaluate(pop: np.ndarray) -> np.ndarray:
        out = np.empty(len(pop))
        for i, g in enumerate(pop):
            key = g.tobytes()
            got = cache.get(key)
            if got is None:
                got = evaluator.fitness(g, constraint)
                cache[key] = got
            out[i] = got[0]
        return out

    pop = random_population(rng, config.population, m, lim)
    hot = [] if hot_start is None else [np.asarray(h, dtype=np.int64) for h in
                                        (hot_start if isinstance(hot_start, list) else [hot_start])]
    for i, h in enumerate(hot[: config.population]):
        evaluator.check_ranges(h)
        pop[i] = h
    fit = evaluate(pop)
    history = [float(fit.min())]
    stale = 0
    for _ in range(config.generations):
        order = np.argsort(fit, kind="stable")
        elite = pop[order[:n_elite]]
        n_child = config.population - n_elite
        # all randomness for the generation is drawn up front
        contenders = rng.integers(0, config.population, size=(n_child, 2, config.tournament))
        cross = rng.random(n_child) < config.crossover_rate
        masks = rng.random((n_child, n_genes)) < 0.5
        mut = rng.random((n_child, n_genes)) < p_mut
        noise = rng.standard_normal((n_child, n_genes)) * sigma
        winners = np.take_along_axis(contenders, np.argmin(fit[contenders], axis=2)[..., None], axis=2)[..., 0]
        pa, pb = pop[winners[:, 0]], pop[winners[:, 1]]
        child = np.where(cross[:, None] & masks, pb, pa)
        child = np.where(mut, np.rint(child + noise), child)
        child = np.clip(child, 0, upper).astype(np.int64)
        pop = np.vstack([elite, child])
        fit = np.concatenate([fit[order[:n_elite]], evaluate(child)])
        best = float(fit.min())
        stale = stale + 1 if best >= history[-1] - 1e-12 else 0
        history.append(best)
        if config.patience is not None and stale >= config.patience:
            break
    i_best = int(np.argmin(fit))
    best_genome = pop[i_best]
    f_best, lap = cache[best_genome.tobytes()]
    if not is_feasible(f_best) or lap is None:
        viol = evaluator.sum_violations(best_genome)
        raise NoFeasibleError(best_genome, f_best, viol)
    return EnergyStrategy(best_genome.copy(), constraint, lap.lap_time, lap, f_best, history)


def hot_start_genome(lap: LapResult, geometry: TrackGeometry,
                     limits: RegulationLimits = RegulationLimits()) -> np.ndarray:
    """Per-region electric (kJ) and fuel (g) consumption of a lap, rounded up,
    clipped to gene ranges and scaled down to the lap caps when needed."""
    n = len(lap.e_used)
    reg = geometry.region[:n] - 1
    m = geometry.n_regions
    e = np.bincount(reg, weights=lap.e_used, minlength=m)
    f = np.bincount(reg, weights=lap.fuel * 1000.0, minlength=m)
    e = np.minimum(np.ceil(e), limits.gene_e_max)
    f = np.minimum(np.ceil(f), limits.gene_f_max)
    if e.sum() > limits.e_el_max_kj:
        e = np.floor(e * limits.e_el_max_kj / e.sum())
    if f.sum() > limits.fuel_max_g:
        f = np.floor(f * limits.fuel_max_g / f.sum())
    return np.concatenate([e, f]).astype(np.int64)


def generate_strategy_set(evaluator: Evaluator, specs: list[StrategyConstraint],
                          config: GAConfig = GAConfig(), hot_start=None,
                          cross_seed: bool = True) -> tuple[list[EnergyStrategy], list[str]]:
    """One GA run per constraint spec, sorted by lap time.

    Runs after the first are hot-started from the first run's best genome.
    With ``cross_seed`` every run's best genome is also re-decoded under every
    other spec and adopted when it is faster there (any genome is valid under
    any ban layout).  Failed runs, and specs banning straights the track does
    not have, are reported in the returned error list.
    """
    if not specs:
        raise ValueError("at least one constraint spec is required")
    results: list[EnergyStrategy | None] = []
    errors: list[str] = []
    first_best = None
    usable = []
    for i, spec in enumerate(specs):
        try:
            spec.ban_mask(evaluator.geometry)
        except GeometryError as exc:
            errors.append(f"spec {i + 1} ({spec.description}): {exc}")
            usable.append(False)
        else:
            usable.append(True)
    for i, spec in enumerate(specs):
        if not usable[i]:
            results.append(None)
            continue
        hs = [] if hot_start is None else [hot_start]
        if first_best is not None:
            hs.append(first_best)
        cfg = GAConfig(**{**config.__dict__, "seed": config.seed + i})
        try:
            res = run_ga(evaluator, spec, cfg, hs or None)
        except NoFeasibleError as exc:
            errors.append(f"spec {i + 1} ({spec.description}): {exc}")
            results.append(None)
            continue
        res.strategy_id = i + 1
        results.append(res)
        if first_best is None:
            first_best = res.genome
    if cross_seed:
        pool = [r.genome for r in results if r is not None]
        for i, spec in enumerate(specs):
            if not usable[i]:
                continue
            cur = results[i]
            for g in pool:
                f, lap = evaluator.fitness(g, spec)
                if lap is not None and is_feasible(f) and (cur is None or f < cur.fitness - 1e-12):
                    hist = [] if cur is None else cur.history
                    cur = EnergyStrategy(g.copy(), spec, lap.lap_time, lap, f, hist, i + 1)
            results[i] = cur
    done = [r for r in results if r is not None]
    done.sort(key=lambda r: (r.lap_time, r.strategy_id))
    return done, errors


def write_strategy_set(strategies: list[EnergyStrategy], out_dir) -> None:
    """Index table plus one YAML file and one mode-trace CSV per strategy."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["rank,id,lap_time,description,e_el_used_kj,fuel_used_kg,e_el_rec_kers_kj"]
    for rank, s in enumerate(strategies, start=1):
        d = s.to_dict()
        lines.append(f"{rank},{s.strategy_id},{s.lap_time:.6f},\"{d['description']}\","
                     f"{d['e_el_used_kj']:.6f},{d['fuel_used_kg']:.9f},{d['e_el_rec_kers_kj']:.6f}")
        (out / f"strategy_{s.strategy_id:02d}.yaml").write_text(yaml.safe_dump(d, sort_keys=True))
        (out / f"strategy_{s.strategy_id:02d}_modes.csv").write_text(
            "k,mode,v\n" + "".join(f"{k},{int(mo)},{v:.6f}\n"
                                   for k, (mo, v) in enumerate(zip(s.lap.mode, s.lap.speed))))
    (out / "index.csv").write_text("\n".join(lines) + "\n")


def read_strategy_set(out_dir, evaluator: Evaluator) -> list[EnergyStrategy]:
    """Reload strategies and re-decode their laps (deterministic)."""
    out = Path(out_dir)
    res = []
    for path in sorted(out.glob("strategy_*.yaml")):
        d = yaml.safe_load(path.read_text())
        genome = np.array(d["genome"]["e_el_kj"] + d["genome"]["fuel_g"], dtype=np.int64)
        spec = StrategyConstraint.from_dict(d["constraint"])
        f, lap = evaluator.fitness(genome, spec)
        if lap is None:
            raise RuntimeError(f"{path.name} no longer decodes to a feasible lap")
        res.append(EnergyStrategy(genome, spec, lap.lap_time, lap, f, [], int(d["id"])))
    res.sort(key=lambda r: (r.lap_time, r.strategy_id))
    return res
