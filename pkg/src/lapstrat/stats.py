"""Competitor statistics: reconstructed speed profiles, race positions, free
sector-time multisets and per-section overtaking probabilities."""

from __future__ import annotations

import csv
import io
import itertools
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .ingest import CarClass, SectorTimeRecord

log = logging.getLogger(__name__)

DEFAULT_DT = 0.1


class StatsError(ValueError):
    pass


# ----------------------------------------------------------------------------
# reference profile and speed reconstruction
# ----------------------------------------------------------------------------

def lethargy_times(s: np.ndarray, v: np.ndarray, sector_starts) -> np.ndarray:
    """Traversal time of each sector, summing ``delta_s / v`` over the samples
    that open each grid interval (the last sample closes the lap)."""
    ds = np.diff(s)
    lethargy = ds / v[:-1]
    idx = np.searchsorted(s[:-1], np.asarray(sector_starts, dtype=float), side="left")
    bounds = np.append(idx, len(ds))
    return np.array([lethargy[bounds[i]:bounds[i + 1]].sum() for i in range(len(idx))])


@dataclass
class ReferenceProfile:
    s: np.ndarray
    v: np.ndarray
    sector_times: tuple[float, float, float]
    sector_starts: tuple[float, float, float]

    def __post_init__(self) -> None:
        self.s = np.asarray(self.s, dtype=float)
        self.v = np.asarray(self.v, dtype=float)
        self.sector_times = tuple(float(x) for x in self.sector_times)
        self.sector_starts = tuple(float(x) for x in self.sector_starts)
        if self.s.shape != self.v.shape or self.s.size < 2:
            raise StatsError("profile needs matching s and v arrays with at least two samples")
        if np.any(self.v <= 0):
            raise StatsError("reference speeds must be positive")
        if np.any(np.diff(self.s) <= 0) or self.s[0] != 0.0:
            raise StatsError("arc positions must increase strictly from 0")
        if len(self.sector_times) != 3 or len(self.sector_starts) != 3 or self.sector_starts[0] != 0.0:
            raise StatsError("a profile has exactly three sectors, the first starting at 0")
        got = lethargy_times(self.s, self.v, self.sector_starts)
        for i, (a, b) in enumerate(zip(got, self.sector_times)):
            if abs(a - b) > 0.01 * b:
                raise StatsError(f"sector {i + 1} time {b} disagrees with integrated profile ({a:.3f})")

    @property
    def length(self) -> float:
        return float(self.s[-1])

    @property
    def lap_time(self) -> float:
        return float(sum(self.sector_times))

    def sector_index(self) -> np.ndarray:
        """0-based sector of every sample (the closing sample belongs to sector 3)."""
        return np.searchsorted(np.asarray(self.sector_starts), self.s, side="right") - 1

    @classmethod
    def from_lap(cls, geometry, lap) -> ReferenceProfile:
        """Reference built from a simulated lap on ``geometry``'s grid."""
        n = geometry.n_points
        s = np.append(geometry.s, geometry.length)
        v = np.append(lap.speed[:n], lap.speed[0])
        starts = tuple(geometry.sector_starts() * geometry.delta_s)
        times = tuple(lethargy_times(s, v, starts))
        return cls(s, v, times, starts)

    def to_files(self, csv_path, sidecar_path) -> None:
        lines = ["s,v"] + [f"{a!r},{b!r}" for a, b in zip(self.s.tolist(), self.v.tolist())]
        Path(csv_path).write_text("\n".join(lines) + "\n")
        Path(sidecar_path).write_text(yaml.safe_dump({
            "sector_times": list(self.sector_times), "sector_starts": list(self.sector_starts)}))

    @classmethod
    def from_files(cls, csv_path, sidecar_path) -> ReferenceProfile:
        rows = list(csv.DictReader(io.StringIO(Path(csv_path).read_text())))
        meta = yaml.safe_load(Path(sidecar_path).read_text())
        return cls([float(r["s"]) for r in rows], [float(r["v"]) for r in rows],
                   meta["sector_times"], meta["sector_starts"])


def reconstruct_speed(reference: ReferenceProfile, sector_times) -> np.ndarray:
    """Scale the reference profile sector by sector so that sector ``i`` is
    traversed in ``sector_times[i]``: ``v = v_ref * T_ref_i / T_i``."""
    t = np.asarray(sector_times, dtype=float)
    if t.shape != (3,) or np.any(~(t > 0)):
        raise StatsError("sector times must be three positive numbers")
    ratio = np.asarray(reference.sector_times) / t
    return reference.v * ratio[reference.sector_index()]


def lap_knots(reference: ReferenceProfile, sector_times) -> np.ndarray:
    """Elapsed time at every reference sample for a lap with these sector times."""
    v = reconstruct_speed(reference, sector_times)
    return np.concatenate([[0.0], np.cumsum(np.diff(reference.s) / v[:-1])])


# ----------------------------------------------------------------------------
# race positions
# ----------------------------------------------------------------------------

@dataclass
class RacePositions:
    """Cumulative arc position of every car on a common uniform clock.

    ``pos[c, k]`` is NaN while car ``c`` has no recorded lap.  Position
    ``(lap - 1) * length + s`` means arc ``s`` of lap ``lap``.  ``eligible``
    lists the (car, lap) pairs whose traversals may be counted; ``None`` means
    all.
    """

    t: np.ndarray
    pos: np.ndarray
    cars: list[int]
    classes: list[CarClass]
    length: float
    sector_starts: tuple[float, float, float]
    eligible: set | None = None

    def is_eligible(self, car: int, lap: int) -> bool:
        return self.eligible is None or (car, lap) in self.eligible


def build_positions(records, reference: ReferenceProfile, dt: float = DEFAULT_DT,
                    eligible: set | None = None) -> RacePositions:
    """Chain reconstructed laps per car (lap start = elapsed - lap time)."""
    by_car: dict[int, list[SectorTimeRecord]] = defaultdict(list)
    for r in records:
        by_car[r.car_number].append(r)
    if not by_car:
        raise StatsError("no records")
    length = reference.length
    knots = {}
    for car, laps in by_car.items():
        laps.sort(key=lambda r: r.lap)
        ts, ps = [], []
        for r in laps:
            t0 = r.elapsed - r.lap_time
            kt = t0 + lap_knots(reference, r.sectors)
            kp = (r.lap - 1) * length + reference.s
            if ts and ps[-1][-1] >= kp[0] - 1e-9:
                kt, kp = kt[1:], kp[1:]
            ts.append(kt)
            ps.append(kp)
        kt = np.concatenate(ts)
        kp = np.concatenate(ps)
        # enforce a monotone clock even if elapsed times overlap slightly
        kt = np.maximum.accumulate(kt)
        knots[car] = (kt, kp)
    t_min = min(k[0][0] for k in knots.values())
    t_max = max(k[0][-1] for k in knots.values())
    n = int(math.floor((t_max - t_min) / dt)) + 1
    t = t_min + dt * np.arange(n)
    cars = sorted(by_car)
    pos = np.empty((len(cars), n))
    for c, car in enumerate(cars):
        kt, kp = knots[car]
        pos[c] = np.interp(t, kt, kp, left=np.nan, right=np.nan)
    classes = [by_car[car][0].car_class for car in cars]
    return RacePositions(t, pos, cars, classes, length, reference.sector_starts, eligible)


def _forward_gap(pos: np.ndarray, c: int, length: float) -> np.ndarray:
    """On-track distance from car ``c`` to the nearest car ahead, per sample."""
    gap = np.full(pos.shape[1], np.inf)
    for d in range(pos.shape[0]):
        if d == c:
            continue
        g = np.mod(pos[d] - pos[c], length)
        g = np.where(np.isnan(g), np.inf, g)
        np.minimum(gap, g, out=gap)
    return gap


@dataclass
class Traversal:
    car: int
    lap: int
    sector: int  # 1-based
    t_start: float
    t_end: float

    @property
    def duration(self) -> float:
        return self.t_end - self.t_start


def sector_traversals(positions: RacePositions, c: int) -> list[Traversal]:
    """Complete sector traversals of car index ``c`` inside the sampled window."""
    p = positions.pos[c]
    ok = ~np.isnan(p)
    if ok.sum() < 2:
        return []
    t, p = positions.t[ok], p[ok]
    L = positions.length
    first_lap = int(math.floor(p[0] / L))
    last_lap = int(math.floor(p[-1] / L))
    bounds = []
    for lap0 in range(first_lap, last_lap + 1):
        for i, a in enumerate(positions.sector_starts):
            b = positions.sector_starts[i + 1] if i < 2 else L
            bounds.append((lap0 + 1, i + 1, lap0 * L + a, lap0 * L + b))
    out = []
    # strict monotone part for inverse interpolation
    keep = np.concatenate([[True], np.diff(p) > 0])
    pt, pp = t[keep], p[keep]
    for lap, sec, a, b in bounds:
        if a < p[0] or b > p[-1]:
            continue
        out.append(Traversal(positions.cars[c], lap, sec, float(np.interp(a, pp, pt)),
                             float(np.interp(b, pp, pt))))
    return out


@dataclass
class FreeSectorDistribution:
    car: int
    car_class: CarClass
    samples: tuple  # three numpy arrays of seconds

    @property
    def complete(self) -> bool:
        return all(len(x) > 0 for x in self.samples)


def extract_free_sector_times(positions: RacePositions, gap_threshold: float = 100.0
                              ) -> dict[int, FreeSectorDistribution]:
    """Sector traversals during which the nearest car ahead stays at least
    ``gap_threshold`` metres away at every clock sample."""
    out = {}
    for c, car in enumerate(positions.cars):
        gap = _forward_gap(positions.pos, c, positions.length)
        buckets: list[list[float]] = [[], [], []]
        for tr in sector_traversals(positions, c):
            if not positions.is_eligible(car, tr.lap):
                continue
            k0 = int(np.searchsorted(positions.t, tr.t_start, side="left"))
            k1 = int(np.searchsorted(positions.t, tr.t_end, side="right"))
            if np.all(gap[k0:k1] >= gap_threshold):
                buckets[tr.sector - 1].append(tr.duration)
        dist = FreeSectorDistribution(car, positions.classes[c], tuple(np.array(b) for b in buckets))
        if not dist.complete:
            log.warning("car %s has no free traversal in some sector", car)
        out[car] = dist
    return out


def write_free_times(dists: dict, path=None) -> str:
    lines = ["car,class,sector,time"]
    for car in sorted(dists):
        d = dists[car]
        for i, arr in enumerate(d.samples, start=1):
            lines += [f"{car},{d.car_class.value},{i},{x!r}" for x in arr.tolist()]
    text = "\n".join(lines) + "\n"
    if path is not None:
        Path(path).write_text(text)
    return text


def read_free_times(path) -> dict[int, FreeSectorDistribution]:
    acc: dict[int, list[list[float]]] = {}
    cls: dict[int, CarClass] = {}
    for row in csv.DictReader(io.StringIO(Path(path).read_text())):
        car = int(row["car"])
        acc.setdefault(car, [[], [], []])[int(row["sector"]) - 1].append(float(row["time"]))
        cls[car] = CarClass.parse(row["class"])
    return {car: FreeSectorDistribution(car, cls[car], tuple(np.array(b) for b in acc[car]))
            for car in sorted(acc)}


# ----------------------------------------------------------------------------
# overtaking probabilities
# ----------------------------------------------------------------------------

@dataclass
class OvertakingProbabilityTable:
    n_sections: int
    counts: dict = field(default_factory=dict)  # (classA, classB, section) -> [xi, phi]

    def add(self, a: CarClass, b: CarClass, section: int, xi: int, phi: int) -> None:
        cnt = self.counts.setdefault((CarClass(a), CarClass(b), int(section)), [0, 0])
        cnt[0] += xi
        cnt[1] += phi

    def p(self, a, b, section: int) -> float | None:
        xi, phi = self.counts.get((CarClass(a), CarClass(b), int(section)), (0, 0))
        return xi / phi if phi > 0 else None

    def p_or_zero(self, a, b, section: int) -> float:
        p = self.p(a, b, section)
        return 0.0 if p is None else p

    def matrix(self, a, b) -> np.ndarray:
        """Probabilities for one ordered class pair, NaN where no data."""
        out = np.full(self.n_sections, np.nan)
        for i in range(1, self.n_sections + 1):
            p = self.p(a, b, i)
            if p is not None:
                out[i - 1] = p
        return out

    @classmethod
    def constant(cls, n_sections: int, p: float, classes=tuple(CarClass), resolution: int = 1000
                 ) -> OvertakingProbabilityTable:
        """Table with the same probability everywhere (scripted scenarios)."""
        tab = cls(n_sections)
        xi = int(round(p * resolution))
        for a, b in itertools.product(classes, repeat=2):
            for i in range(1, n_sections + 1):
                tab.add(a, b, i, xi, resolution)
        return tab

    def to_csv(self, path=None) -> str:
        lines = ["classA,classB,section,xi,phi,p"]
        for a, b in itertools.product(CarClass, repeat=2):
            for i in range(1, self.n_sections + 1):
                xi, phi = self.counts.get((a, b, i), (0, 0))
                p = "" if phi == 0 else repr(xi / phi)
                lines.append(f"{a.value},{b.value},{i},{xi},{phi},{p}")
        text = "\n".join(lines) + "\n"
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_csv(cls, path) -> OvertakingProbabilityTable:
        rows = list(csv.DictReader(io.StringIO(Path(path).read_text())))
        tab = cls(max(int(r["section"]) for r in rows) if rows else 0)
        for r in rows:
            if int(r["phi"]) > 0:
                tab.add(CarClass.parse(r["classA"]), CarClass.parse(r["classB"]), int(r["section"]),
                        int(r["xi"]), int(r["phi"]))
        return tab


def _runs(mask: np.ndarray) -> list[tuple[int, int]]:
    d = np.diff(np.concatenate([[0], mask.astype(np.int8), [0]]))
    return list(zip(np.flatnonzero(d == 1), np.flatnonzero(d == -1)))


def compute_overtaking_probabilities(positions: RacePositions, sections, proximity: float = 10.0
                                     ) -> OvertakingProbabilityTable:
    """Count proximity episodes (phi) and passes (xi) per ordered class pair and section.

    ``sections`` is an ``(n_sections, 2)`` array of ``[start, end)`` arc bounds
    (e.g. :meth:`TrackGeometry.section_bounds`).  An episode is a maximal run
    of samples with the two cars within ``proximity`` on track.  Each
    (lap, section) that A occupies while behind B during an episode counts one
    opportunity; a pass by A is credited to the section holding the crossing
    point, at most once per opportunity.
    """
    sections = np.asarray(sections, dtype=float)
    starts = sections[:, 0]
    n_sec = len(sections)
    L = positions.length
    tab = OvertakingProbabilityTable(n_sec)

    def section_of(x):
        return np.searchsorted(starts, np.mod(x, L), side="right")  # 1-based

    pos = positions.pos
    for a, b in itertools.permutations(range(len(positions.cars)), 2):
        r = pos[b] - pos[a]
        valid = ~np.isnan(r)
        if not valid.any():
            continue
        near = np.zeros_like(valid)
        near[valid] = np.mod(r[valid] + proximity, L) <= 2 * proximity
        if not near.any():
            continue
        car_a, car_b = positions.cars[a], positions.cars[b]
        ca, cb = positions.classes[a], positions.classes[b]
        for k0, k1 in _runs(near):
            rr = r[k0:k1]
            lap_k = np.round(rr / L)
            rel = rr - lap_k * L  # > 0 means A behind B
            pa = pos[a, k0:k1]
            laps = np.floor(pa / L).astype(np.int64) + 1
            secs = section_of(pa)
            elig = np.array([positions.is_eligible(car_a, int(la)) for la in laps])
            lb = np.floor(pos[b, k0:k1] / L).astype(np.int64) + 1
            elig &= np.array([positions.is_eligible(car_b, int(x)) for x in lb])
            opp = set()
            for la, sc, re, e in zip(laps, secs, rel, elig):
                if re > 0 and e:
                    opp.add((int(la), int(sc)))
            passed = set()
            for j in range(len(rel) - 1):
                if rel[j] > 0 and rel[j + 1] <= 0 and lap_k[j] == lap_k[j + 1] and elig[j]:
                    w = rel[j] / (rel[j] - rel[j + 1])
                    x = pa[j] + w * (pa[j + 1] - pa[j])
                    key = (int(math.floor(x / L)) + 1, int(section_of(x)))
                    opp.add(key)
                    passed.add(key)
            for _, sc in opp:
                tab.add(ca, cb, sc, 0, 1)
            for _, sc in passed:
                tab.add(ca, cb, sc, 1, 0)
    return tab
