"""Monte Carlo forecast of competitor positions.

Every competitor follows its own timeline, built by chaining laps whose sector
times are resampled from its free-sector-time multisets.  A car that closes on
the car ahead is held ``following_gap`` behind it; each time the follower
crosses a section boundary while within ``proximity`` a uniform draw against
the overtaking table decides between an overtake (the follower is placed
``swap_gap`` ahead of the leader and resumes its own timeline) and another
section of following.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit

from .ingest import CarClass
from .stats import FreeSectorDistribution, OvertakingProbabilityTable, ReferenceProfile, lap_knots

log = logging.getLogger(__name__)

CLASS_INDEX = {c: i for i, c in enumerate(CarClass)}
OVERTAKE, FOLLOW = 1, 0


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class MCConfig:
    dt: float = 0.1
    horizon_laps: int = 2
    influence: float = 100.0
    proximity: float = 10.0
    following_gap: float = 10.0
    swap_gap: float = 10.0


@dataclass(frozen=True)
class Competitor:
    car_number: int
    car_class: CarClass
    position: float  # cumulative arc position, m

    def lap(self, length: float) -> int:
        return int(self.position // length) + 1


@dataclass(frozen=True)
class RaceState:
    competitors: tuple
    t: float = 0.0

    def __post_init__(self) -> None:
        pos = [c.position for c in self.competitors]
        if len(set(pos)) != len(pos):
            raise ValueError("initial positions must be distinct")


def sample_free_lap(dist: FreeSectorDistribution, rng: np.random.Generator) -> tuple[float, float, float]:
    """Independent with-replacement draw of one time per sector."""
    out = []
    for i, arr in enumerate(dist.samples, start=1):
        if len(arr) == 0:
            raise SimulationError(f"car {dist.car} has no free sector times for sector {i}")
        out.append(float(arr[rng.integers(len(arr))]))
    return tuple(out)


@dataclass
class SimTrace:
    t: np.ndarray
    pos: np.ndarray  # (n_cars, n_t) cumulative arc positions
    cars: list[int]
    classes: list[CarClass]
    free_laps: np.ndarray  # (n_cars, n_laps, 3) sampled sector times
    first_lap: np.ndarray  # lap index (0-based) where each timeline starts
    events: dict = field(default_factory=dict)  # column arrays, see EVENT_COLUMNS
    seed: int = 0
    length: float = 0.0

    def n_events(self) -> int:
        return len(self.events["t"])

    def event_rows(self) -> list[dict]:
        cols = list(self.events)
        return [{c: self.events[c][i] for c in cols} for i in range(self.n_events())]

    def position_at(self, c: int, t):
        return np.interp(t, self.t, self.pos[c])

    def time_at(self, c: int, s):
        """First clock time at which car ``c`` reaches cumulative position ``s``
        (NaN beyond the simulated horizon)."""
        p = self.pos[c]
        keep = np.concatenate([[True], np.diff(p) > 0])
        return np.interp(s, p[keep], self.t[keep], left=np.nan, right=np.nan)


EVENT_COLUMNS = ("t", "s", "section", "follower", "leader", "outcome", "u", "p", "no_data")


@njit(cache=True)
def _section_index(x, length, starts):
    lap = np.floor(x / length)
    r = x - lap * length
    j = np.searchsorted(starts, r, side="right") - 1
    return int(lap) * starts.size + j


@njit(cache=True)
def _kernel(pos0, kt, kp, length, starts, cls, ptab, dt, n_steps, influence, proximity,
            following_gap, swap_gap, uniforms, out_pos, ev_f, ev_idx, ev_out, ev_u, ev_p, ev_nd, ev_s):
    n = pos0.size
    n_sec = starts.size
    pos = pos0.copy()
    tau = np.empty(n)
    for c in range(n):
        tau[c] = np.interp(pos[c], kp[c], kt[c])
        out_pos[c, 0] = pos[c]
    x = np.empty(n)
    target = np.empty(n)
    leader = np.empty(n, dtype=np.int64)
    gap0 = np.empty(n)
    n_ev = 0
    n_u = 0
    for k in range(n_steps):
        # leaders at the start of the step
        for c in range(n):
            best = -1
            best_g = np.inf
            for d in range(n):
                if d == c:
                    continue
                g = (pos[d] - pos[c]) % length
                if g > 0.0 and g < best_g:
                    best_g = g
                    best = d
            leader[c] = best
            gap0[c] = best_g
            target[c] = np.interp(tau[c] + dt, kt[c], kp[c])
            x[c] = target[c]
        # chain relaxation: caps only ever lower positions
        for it in range(n + 1):
            changed = False
            for c in range(n):
                l = leader[c]
                if l < 0 or gap0[c] > influence:
                    continue
                cap = pos[c] + (x[l] - pos[l]) + gap0[c] - following_gap
                v = min(target[c], cap)
                if v < pos[c]:
                    v = pos[c]
                if v < x[c]:
                    x[c] = v
                    changed = True
            if not changed:
                break
        for c in range(n):
            if x[c] < target[c]:
                tau[c] = np.interp(x[c], kp[c], kt[c])
            else:
                tau[c] = tau[c] + dt
        # overtaking decisions at section boundaries, front cars first
        order = np.argsort(-x)
        for oi in range(n):
            c = order[oi]
            l = leader[c]
            if l < 0:
                continue
            g = (x[l] - x[c]) % length
            if g <= 0.0 or g > proximity + 1e-9:
                continue
            i_old = _section_index(pos[c], length, starts)
            i_new = _section_index(x[c], length, starts)
            if i_new <= i_old:
                continue
            if n_u >= uniforms.size:
                return n_ev, -1
            u = uniforms[n_u]
            n_u += 1
            sec = i_new % n_sec
            p = ptab[cls[c], cls[l], sec]
            nd = np.isnan(p)
            if nd:
                p = 0.0
            ev_f[n_ev, 0] = k + 1
            ev_f[n_ev, 1] = c
            ev_f[n_ev, 2] = l
            ev_idx[n_ev] = sec + 1
            ev_u[n_ev] = u
            ev_p[n_ev] = p
            ev_nd[n_ev] = nd
            ev_s[n_ev] = x[c]
            if u < p:
                ev_out[n_ev] = 1
                x[c] = x[c] + g + swap_gap
                tau[c] = np.interp(x[c], kp[c], kt[c])
            else:
                ev_out[n_ev] = 0
            n_ev += 1
        for c in range(n):
            pos[c] = x[c]
            out_pos[c, k + 1] = x[c]
    return n_ev, 0


def _prob_array(table: OvertakingProbabilityTable, n_sections: int) -> np.ndarray:
    arr = np.full((len(CarClass), len(CarClass), n_sections), np.nan)
    for a in CarClass:
        for b in CarClass:
            arr[CLASS_INDEX[a], CLASS_INDEX[b]] = table.matrix(a, b)[:n_sections]
    return arr


class Simulator:
    """Holds the static inputs of a forecast so that many traces can be drawn."""

    def __init__(self, initial: RaceState, dists: dict, table: OvertakingProbabilityTable,
                 reference: ReferenceProfile, section_starts, config: MCConfig = MCConfig()):
        self.initial = initial
        self.config = config
        self.reference = reference
        self.length = reference.length
        self.starts = np.asarray(section_starts, dtype=float)
        self.ptab = _prob_array(table, len(self.starts))
        comps = initial.competitors
        for comp in comps:
            if comp.car_number not in dists:
                raise SimulationError(f"no free sector times for car {comp.car_number}")
        self.dists = [dists[c.car_number] for c in comps]
        self.cars = [c.car_number for c in comps]
        self.classes = [c.car_class for c in comps]
        self.cls = np.array([CLASS_INDEX[c] for c in self.classes], dtype=np.int64)
        self.pos0 = np.array([c.position for c in comps], dtype=float)
        self.n_steps = int(round(config.horizon_laps * reference.lap_time / config.dt))
        self.n_laps = config.horizon_laps + 3
        self.first_lap = np.floor(self.pos0 / self.length).astype(np.int64)
        self._lap_cache: dict = {}

    def _knots(self, times: tuple) -> np.ndarray:
        key = times
        got = self._lap_cache.get(key)
        if got is None:
            got = lap_knots(self.reference, times)
            if len(self._lap_cache) < 100_000:
                self._lap_cache[key] = got
        return got

    def timelines(self, rng: np.random.Generator):
        n = len(self.cars)
        ref_s = self.reference.s
        m = ref_s.size - 1
        K = self.n_laps * m + 1
        kt = np.empty((n, K))
        kp = np.empty((n, K))
        laps = np.empty((n, self.n_laps, 3))
        for c in range(n):
            t0 = 0.0
            kt[c, 0] = 0.0
            kp[c, 0] = self.first_lap[c] * self.length
            for j in range(self.n_laps):
                times = sample_free_lap(self.dists[c], rng)
                laps[c, j] = times
                knots = self._knots(times)
                sl = slice(j * m + 1, (j + 1) * m + 1)
                kt[c, sl] = t0 + knots[1:]
                kp[c, sl] = (self.first_lap[c] + j) * self.length + ref_s[1:]
                t0 = kt[c, (j + 1) * m]
        return kt, kp, laps

    def simulate(self, seed: int) -> SimTrace:
        cfg = self.config
        rng = np.random.default_rng(seed)
        kt, kp, laps = self.timelines(rng)
        n = len(self.cars)
        n_u = n * (cfg.horizon_laps + 3) * len(self.starts)
        uniforms = rng.random(n_u)
        out_pos = np.empty((n, self.n_steps + 1))
        ev_f = np.empty((n_u, 3), dtype=np.int64)
        ev_idx = np.empty(n_u, dtype=np.int64)
        ev_out = np.empty(n_u, dtype=np.int64)
        ev_u = np.empty(n_u)
        ev_p = np.empty(n_u)
        ev_nd = np.empty(n_u, dtype=np.bool_)
        ev_s = np.empty(n_u)
        n_ev, status = _kernel(self.pos0, kt, kp, self.length, self.starts, self.cls, self.ptab,
                               cfg.dt, self.n_steps, cfg.influence, cfg.proximity, cfg.following_gap,
                               cfg.swap_gap, uniforms, out_pos, ev_f, ev_idx, ev_out, ev_u, ev_p,
                               ev_nd, ev_s)
        if status != 0:
            raise SimulationError("pre-drawn uniform budget exhausted")
        t = self.initial.t + cfg.dt * np.arange(self.n_steps + 1)
        events = {
            "t": t[ev_f[:n_ev, 0]],
            "s": ev_s[:n_ev].copy(),
            "section": ev_idx[:n_ev].copy(),
            "follower": np.array(self.cars, dtype=np.int64)[ev_f[:n_ev, 1]] if n else ev_f[:0, 1],
            "leader": np.array(self.cars, dtype=np.int64)[ev_f[:n_ev, 2]] if n else ev_f[:0, 2],
            "outcome": ev_out[:n_ev].copy(),
            "u": ev_u[:n_ev].copy(),
            "p": ev_p[:n_ev].copy(),
            "no_data": ev_nd[:n_ev].copy(),
        }
        if events["no_data"].any():
            log.debug("trace %d: %d decisions hit no-data table entries (treated as p=0)",
                      seed, int(events["no_data"].sum()))
        return SimTrace(t=t, pos=out_pos, cars=list(self.cars), classes=list(self.classes),
                        free_laps=laps, first_lap=self.first_lap.copy(), events=events, seed=seed,
                        length=self.length)


def trace_seed(base_seed: int, i: int) -> int:
    return int(base_seed) ^ int(i)


def simulate(initial: RaceState, dists: dict, table: OvertakingProbabilityTable,
             reference: ReferenceProfile, section_starts, seed: int,
             config: MCConfig = MCConfig()) -> SimTrace:
    return Simulator(initial, dists, table, reference, section_starts, config).simulate(seed)


def iter_batch(sim: Simulator, n_sims: int, base_seed: int):
    if n_sims < 1:
        raise ValueError("n_sims must be >= 1")
    for i in range(n_sims):
        yield sim.simulate(trace_seed(base_seed, i))


def run_batch(initial: RaceState, dists: dict, table: OvertakingProbabilityTable,
              reference: ReferenceProfile, section_starts, n_sims: int, base_seed: int,
              config: MCConfig = MCConfig()) -> list[SimTrace]:
    """``n_sims`` independent traces; trace ``i`` uses seed ``base_seed ^ i``."""
    sim = Simulator(initial, dists, table, reference, section_starts, config)
    return list(iter_batch(sim, n_sims, base_seed))


def write_trace(trace: SimTrace, pos_path, events_path, every: int = 10) -> None:
    """Positions decimated to every ``every`` clock samples plus the event log."""
    lines = ["t,car,s"]
    for k in range(0, len(trace.t), every):
        for c, car in enumerate(trace.cars):
            lines.append(f"{trace.t[k]:.3f},{car},{trace.pos[c, k]:.3f}")
    Path(pos_path).write_text("\n".join(lines) + "\n")
    ev = ["t,s,section,follower,leader,outcome,u,p,no_data"]
    for row in trace.event_rows():
        ev.append(f"{row['t']:.3f},{row['s']:.3f},{row['section']},{row['follower']},{row['leader']},"
                  f"{'overtake' if row['outcome'] == OVERTAKE else 'follow'},{row['u']:.9f},"
                  f"{row['p']:.9f},{int(row['no_data'])}")
    Path(events_path).write_text("\n".join(ev) + "\n")
