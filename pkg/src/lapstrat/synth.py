"""Synthetic circuits, reference laps and race datasets for desk-scale runs.

Everything here is synthetic: circuit layouts, pace factors and overtaking
probabilities are invented values chosen to exercise the toolkit, not
measurements.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .ingest import CarClass, SectorTimeRecord
from .mc_sim import Competitor, MCConfig, RaceState, Simulator
from .stats import FreeSectorDistribution, OvertakingProbabilityTable, RacePositions, ReferenceProfile
from .track import Segment, TrackGeometry, from_segments
from .vehicle import LapSimulator, RegionBudgets, VehicleParams, apex_speed

LOW_SPEED_APEX = 25.0
HIGH_SPEED_APEX = 50.0

# lap-time range relative to the reference lap, per class; a fuel-capped
# hybrid ego car runs about 1.11 x reference, so it meets a few slower cars
# per lap
CLASS_PACE = {
    CarClass.LMP1: (1.10, 1.13),
    CarClass.LMP2: (1.17, 1.21),
    CarClass.LMGTE_Pro: (1.23, 1.27),
    CarClass.LMGTE_Am: (1.28, 1.33),
}


def _oval_segments() -> list[Segment]:
    r = 250.0 / math.pi
    return [
        Segment(250, straight=True, n_sections=2),
        Segment(250, radius=r, n_sections=2, sector_break=True),
        Segment(250, straight=True, n_sections=2, sector_break=True),
        Segment(250, radius=r, n_sections=2),
    ]


def _bahrain_like_segments() -> list[Segment]:
    S = Segment
    return [
        S(1000, straight=True, n_sections=5),
        S(60, radius=30), S(80, radius=60),
        S(300, straight=True, n_sections=2, slope=0.01),
        S(150, radius=120),
        S(200, straight=True),
        S(50, radius=25), S(70, radius=45),
        S(600, straight=True, n_sections=4, sector_break=True),
        S(60, radius=35), S(100, radius=80),
        S(350, straight=True, n_sections=2),
        S(250, radius=200, n_sections=2), S(160, radius=150),
        S(400, straight=True, n_sections=2, slope=-0.0075),
        S(60, radius=40),
        S(500, straight=True, n_sections=3, sector_break=True),
        S(50, radius=30), S(90, radius=70),
        S(700, straight=True, n_sections=3),
        S(80, radius=50), S(120, radius=90),
    ]


PRESETS = {"oval-1km": _oval_segments, "bahrain-like": _bahrain_like_segments}


def label_curves(geometry: TrackGeometry, params: VehicleParams = VehicleParams()) -> TrackGeometry:
    """Set low/high-speed curve labels from apex speeds (< 25 m/s, > 50 m/s)."""
    low = np.zeros(geometry.n_points, dtype=bool)
    high = np.zeros(geometry.n_points, dtype=bool)
    for k in range(geometry.n_points):
        if geometry.is_straight[k]:
            continue
        v = apex_speed(geometry.radius[k], params.replace(coeff_adherence=1.0, coeff_downforce=1.0),
                       alpha=geometry.alpha[k])
        low[k] = v < LOW_SPEED_APEX
        high[k] = v > HIGH_SPEED_APEX
    geometry.low_speed = low
    geometry.high_speed = high
    return geometry


def make_track(preset: str, delta_s: float = 2.0) -> TrackGeometry:
    if preset not in PRESETS:
        raise ValueError(f"unknown track preset {preset!r}; choose from {sorted(PRESETS)}")
    return label_curves(from_segments(PRESETS[preset](), delta_s, name=preset))


def reference_lap(geometry: TrackGeometry, params: VehicleParams = VehicleParams(),
                  fuel_max_g: float | None = None):
    """Combustion-only flying lap, optionally within a per-lap fuel cap (g).

    The start speed is the periodic one of the unlimited lap.  A cap is split
    over regions in proportion to the unlimited lap's consumption.
    """
    sim = LapSimulator(geometry, params)
    free = RegionBudgets.unlimited(geometry.n_regions, electric=False)
    v0 = sim.flying_start_speed(free)
    budgets = free if fuel_max_g is None else RegionBudgets.fuel_capped(sim, fuel_max_g)
    return sim.run(v0, budgets)


def make_reference(geometry: TrackGeometry, params: VehicleParams = VehicleParams()) -> ReferenceProfile:
    return ReferenceProfile.from_lap(geometry, reference_lap(geometry, params))


def planted_table(geometry: TrackGeometry, seed: int = 0) -> OvertakingProbabilityTable:
    """Ground-truth overtaking probabilities: faster classes pass more easily,
    and straights are easier than curves."""
    rng = np.random.default_rng(seed)
    order = list(CarClass)
    n_sec = geometry.n_sections
    straight_sec = np.array([geometry.is_straight[geometry.section == i].mean() > 0.5
                             for i in range(1, n_sec + 1)])
    tab = OvertakingProbabilityTable(n_sec)
    for a, b in itertools.product(order, repeat=2):
        step = order.index(b) - order.index(a)  # > 0: A is the faster class
        base = 0.25 + 0.15 * max(step, 0) if step >= 0 else 0.05
        for i in range(1, n_sec + 1):
            p = base + (0.3 if straight_sec[i - 1] else 0.0) + rng.uniform(-0.05, 0.05)
            p = float(np.clip(p, 0.0, 0.95))
            tab.add(a, b, i, int(round(1000 * p)), 1000)
    return tab


@dataclass
class SyntheticRace:
    geometry: TrackGeometry
    reference: ReferenceProfile
    records: list
    truth_table: OvertakingProbabilityTable
    planted_outliers: set = field(default_factory=set)  # (car, lap)
    pace: dict = field(default_factory=dict)


def generate_race(geometry: TrackGeometry, reference: ReferenceProfile, n_cars: dict, n_laps: int,
                  seed: int, noise: float = 0.003, pit_fraction: float = 0.5,
                  pit_loss: tuple = (60.0, 40.0)) -> SyntheticRace:
    """Simulate a race with the traffic model and read sector times off it.

    ``noise`` is the relative standard deviation of free sector times.  A
    fraction of cars gets one pit stop: the stop lap carries flag ``B`` with
    ``pit_loss[0]`` added to its last sector, the following lap gets
    ``pit_loss[1]`` added to its first sector.
    """
    rng = np.random.default_rng(seed)
    table = planted_table(geometry, seed)
    comps, dists, pace = [], {}, {}
    car = 1
    classes = [c for c in CarClass for _ in range(n_cars.get(c, n_cars.get(c.value, 0)))]
    total = len(classes)
    if total == 0:
        raise ValueError("no cars requested")
    L = reference.length
    for k, cls in enumerate(classes):
        lo, hi = CLASS_PACE[cls]
        f = rng.uniform(lo, hi)
        pace[car] = f
        samples = tuple(
            np.asarray(reference.sector_times[i] * f * (1.0 + noise * rng.standard_normal(60)))
            for i in range(3)
        )
        dists[car] = FreeSectorDistribution(car, cls, samples)
        comps.append(Competitor(car, cls, -(k + 1) * L / (total + 1)))
        car += 1
    slowest = max(CLASS_PACE[c][1] for c in set(classes))
    config = MCConfig(horizon_laps=int(math.ceil(n_laps * slowest)) + 2)
    sim = Simulator(RaceState(tuple(comps)), dists, table, reference, geometry.section_starts() * geometry.delta_s,
                    config)
    trace = sim.simulate(int(rng.integers(2**31)))
    records, outliers = [], set()
    starts = np.asarray(reference.sector_starts)
    # car 1 is the ego car of downstream runs; it does not pit
    pitting = set(rng.choice(np.arange(2, total + 1), size=min(total - 1, int(round(pit_fraction * total))),
                             replace=False).tolist())
    for c, comp in enumerate(comps):
        bounds = np.array([lap * L + s for lap in range(n_laps + 1) for s in starts] + [(n_laps) * L + L])
        times = trace.time_at(c, bounds[: 3 * n_laps + 1])
        if np.any(np.isnan(times)):
            raise RuntimeError("race horizon too short for the requested laps")
        pit_lap = int(rng.integers(n_laps // 3, 2 * n_laps // 3)) if comp.car_number in pitting else -1
        shift = 0.0
        for lap in range(1, n_laps + 1):
            t = times[3 * (lap - 1): 3 * lap + 1]
            s = list(np.diff(t))
            flag = None
            if lap == pit_lap:
                s[2] += pit_loss[0]
                flag = "B"
                outliers.add((comp.car_number, lap))
            elif lap == pit_lap + 1:
                s[0] += pit_loss[1]
                outliers.add((comp.car_number, lap))
            shift += sum(s) - (t[-1] - t[0])
            s = [round(float(x), 3) for x in s]
            records.append(SectorTimeRecord(
                car_number=comp.car_number, lap=lap, s1=s[0], s2=s[1], s3=s[2],
                elapsed=round(float(t[-1] + shift), 3), car_class=comp.car_class, stop_flag=flag,
                group="", team=f"team{comp.car_number}"))
    return SyntheticRace(geometry, reference, records, table, outliers, pace)


def planted_episodes(n_episodes: int, p: float, section_bounds, section: int, seed: int,
                     classes=(CarClass.LMP1, CarClass.LMGTE_Am), dt: float = 0.1,
                     v: float = 50.0) -> RacePositions:
    """Scripted two-car positions holding ``n_episodes`` proximity episodes
    inside ``section`` (at least 80 m long); each ends in a pass with
    probability ``p``.

    Car 1 (class ``classes[0]``) approaches car 2 from 30 m behind.  On a pass
    the gap shrinks linearly through zero at mid-section; otherwise car 1
    settles 5 m behind and drops back before the section ends.  Consecutive
    episodes are one lap apart.
    """
    rng = np.random.default_rng(seed)
    bounds = np.asarray(section_bounds, dtype=float)
    L = float(bounds[-1, 1])
    a, b = bounds[section - 1]
    if b - a < 80.0:
        raise ValueError("planted episodes need a section of at least 80 m")
    mid = 0.5 * (a + b)
    x_start = a - 40.0
    reach = mid - x_start
    pass_knots = ([x_start, mid + reach], [30.0, -30.0])
    follow_knots = ([x_start, a + 40.0, b - 10.0, b + 15.0], [30.0, 5.0, 5.0, 30.0])
    ts, pa, pb = [], [], []
    t0 = 0.0
    for e in range(n_episodes):
        xs, gs = pass_knots if rng.random() < p else follow_knots
        x = np.arange(xs[0], xs[-1] + 1e-9, v * dt)
        gap = np.interp(x, xs, gs)
        ts.append(t0 + dt * np.arange(x.size))
        pb.append(e * L + x)
        pa.append(e * L + x - gap)
        t0 = ts[-1][-1] + dt
    pos = np.vstack([np.concatenate(pa), np.concatenate(pb)])
    return RacePositions(np.concatenate(ts), pos, [1, 2], list(classes), L, (0.0, L / 3, 2 * L / 3))
