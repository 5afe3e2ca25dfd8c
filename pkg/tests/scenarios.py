"""Small shared test scenarios."""

from __future__ import annotations

import functools
from dataclasses import dataclass

from lapstrat.ga_opt import Evaluator, RegulationLimits
from lapstrat.synth import make_track

# two regions (one per straight of the 1 km oval) with caps scaled to the lap
TOY_LIMITS = RegulationLimits(e_el_max_kj=600, fuel_max_g=1000, e_rec_hers_kj=600, gene_e_max=600,
                              gene_f_max=1000)


@functools.lru_cache(maxsize=None)
def toy_evaluator() -> Evaluator:
    return Evaluator(make_track("oval-1km", 2.0), limits=TOY_LIMITS)


@functools.lru_cache(maxsize=None)
def oval_geometry(ds: float = 2.0):
    return make_track("oval-1km", ds)


@functools.lru_cache(maxsize=None)
def oval_reference():
    from lapstrat.synth import make_reference
    return make_reference(oval_geometry())


def section_starts_m(geometry=None):
    geo = geometry or oval_geometry()
    return geo.section_starts() * geo.delta_s


def fixed_dist(car, car_class, scale, noise=0.0, n=30, seed=0):
    """Free sector times ``scale`` times the oval reference, optionally with
    relative Gaussian noise."""
    import numpy as np

    from lapstrat.stats import FreeSectorDistribution
    base = np.array(oval_reference().sector_times) * scale
    rng = np.random.default_rng(seed)
    if noise == 0.0:
        samples = tuple(np.array([b]) for b in base)
    else:
        samples = tuple(b * (1 + noise * rng.standard_normal(n)) for b in base)
    return FreeSectorDistribution(car, car_class, samples)


def one_section_table(section, p, n_sections=8, follower=None, leader=None):
    """Probability ``p`` at ``section`` and zero elsewhere for one class pair."""
    from lapstrat.ingest import CarClass
    from lapstrat.stats import OvertakingProbabilityTable
    follower = follower or CarClass.LMP1
    leader = leader or CarClass.LMGTE_Am
    tab = OvertakingProbabilityTable(n_sections)
    for sec in range(1, n_sections + 1):
        tab.add(follower, leader, sec, round(p * 1000) if sec == section else 0, 1000)
    return tab


def two_car_simulator(table, gap=60.0, fast=0.9, slow=1.5, noise=0.0, config=None):
    """An LMP1 (car 1) starting ``gap`` metres behind an LMGTE Am (car 2)."""
    from lapstrat.ingest import CarClass
    from lapstrat.mc_sim import Competitor, MCConfig, RaceState, Simulator
    init = RaceState((Competitor(1, CarClass.LMP1, 10.0), Competitor(2, CarClass.LMGTE_Am, 10.0 + gap)))
    dists = {1: fixed_dist(1, CarClass.LMP1, fast, noise, seed=1),
             2: fixed_dist(2, CarClass.LMGTE_Am, slow, noise, seed=2)}
    return Simulator(init, dists, table, oval_reference(), section_starts_m(), config or MCConfig())


@dataclass
class Candidate:
    strategy_id: int
    lap: object


@functools.lru_cache(maxsize=None)
def oval_lap():
    """Unlimited-combustion ego lap on the 2 m oval."""
    from lapstrat.vehicle import LapSimulator, VehicleParams
    sim = LapSimulator(oval_geometry(), VehicleParams())
    return sim.run(sim.flying_start_speed())


def constant_speed_trace(starts, speed, horizon=60.0, dt=0.1, car_class=None):
    """A trace of competitors at fixed speed, car ``i + 1`` starting at ``starts[i]``."""
    import numpy as np

    from lapstrat.ingest import CarClass
    from lapstrat.mc_sim import SimTrace
    t = np.arange(0.0, horizon + dt / 2, dt)
    pos = np.array([s0 + speed * t for s0 in starts])
    n = len(starts)
    return SimTrace(t, pos, list(range(1, n + 1)), [car_class or CarClass.LMGTE_Am] * n, np.zeros((n, 1, 3)),
                    np.zeros(n, dtype=int), {}, 0, oval_geometry().length)
