"""Strategy evaluation under traffic with probability/cost decision trees.

For one ego lap profile and one Monte Carlo trace, sections are walked in
order on the ego's conditional timeline.  Whenever the ego would close to
within the proximity distance of a competitor, the tree branches: the
overtake succeeds with the tabulated probability at no cost, or the ego
follows through the section.  Following costs the delay at the section
exit plus the recovery loss until the ego is back on its own profile,
obtained by re-simulating the car from the reduced exit speed.  Branch
costs are differences of lap-end times, so path costs telescope to the
lap-time loss of that outcome sequence.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit

from .ingest import CarClass
from .mc_sim import CLASS_INDEX, Competitor, MCConfig, RaceState, Simulator, SimTrace, _prob_array, trace_seed
from .stats import OvertakingProbabilityTable
from .track import TrackGeometry
from .vehicle import LapResult, LapSimulator, VehicleParams

log = logging.getLogger(__name__)

PROB_TOL = 1e-9
TIE_TOL = 1e-9  # s; values closer than this count as equal


class TreeStructureError(ValueError):
    pass


@dataclass(frozen=True)
class SDPConfig:
    proximity: float = 10.0
    following_gap: float = 10.0
    min_path_prob: float = 1e-4  # below this, encounters resolve to their likelier outcome
    alpha: float = 1.0
    ego_class: CarClass = CarClass.LMP1


@dataclass
class DecisionNode:
    stage: int
    state: int
    branch_prob: float = 1.0
    branch_cost: float = 0.0
    children: list = field(default_factory=list)
    label: str = ""  # "success", "follow" or "" for pass-through nodes

    def n_nodes(self) -> int:
        total, stack = 0, [self]
        while stack:
            node = stack.pop()
            total += 1
            stack.extend(node.children)
        return total

    def depth(self) -> int:
        best, stack = 0, [(self, 0)]
        while stack:
            node, d = stack.pop()
            best = max(best, d)
            stack.extend((c, d + 1) for c in node.children)
        return best


def backward_pass(root: DecisionNode, alpha: float = 1.0) -> float:
    """Value recursion ``f = r + alpha * sum(Pr(child) * f(child))`` with
    ``f = 0`` below leaves; returns the value at the root.

    The root's own branch cost is included, so a root built as a stage-0
    node (cost 0) yields the expected cumulative loss.
    """
    value: dict = {}
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if not done:
            if node.children:
                total = sum(c.branch_prob for c in node.children)
                if abs(total - 1.0) > PROB_TOL:
                    raise TreeStructureError(
                        f"children of stage-{node.stage} node sum to probability {total!r}")
            stack.append((node, True))
            stack.extend((c, False) for c in node.children)
            continue
        future = sum(c.branch_prob * value.pop(id(c)) for c in node.children)
        value[id(node)] = node.branch_cost + alpha * future
    return value[id(root)]


def dump_tree(root: DecisionNode, compact: bool = True) -> str:
    """Indented text form; ``compact`` hides pass-through nodes."""
    lines = []
    stack = [(root, 0, 1.0)]
    while stack:
        node, indent, pp = stack.pop()
        show = not compact or node is root or node.label or not node.children
        if show:
            tag = node.label or ("leaf" if not node.children else "root" if node is root else "pass")
            lines.append(f"{'  ' * indent}[{tag}] t={node.stage} s={node.state} "
                         f"p={node.branch_prob:.4f} r={node.branch_cost:.4f} path_p={pp:.6f}")
        nxt = indent + 1 if show else indent
        for c in reversed(node.children):
            stack.append((c, nxt, pp * c.branch_prob))
    return "\n".join(lines) + "\n"


# ----------------------------------------------------------------------------
# tree construction
# ----------------------------------------------------------------------------

class TraceView:
    """Competitor kinematics of one trace, seen from an ego that starts its
    lap at arc 0 at clock time ``t_start``.  Each competitor gets a lap
    offset so that its lap coordinate at ``t_start`` lies in (0, L]."""

    def __init__(self, trace: SimTrace, length: float, t_start: float | None = None):
        self.trace = trace
        self.length = length
        self.t0 = float(trace.t[0])
        self.dt = float(trace.t[1] - trace.t[0]) if len(trace.t) > 1 else 1.0
        self.t_start = self.t0 if t_start is None else float(t_start)
        self.pos = trace.pos
        start = self.positions(np.array([self.t_start]))[:, 0]
        gap = np.mod(start, length)
        gap[gap <= 0.0] = length
        self.offset = start - gap
        self.cls = np.array([CLASS_INDEX[c] for c in trace.classes], dtype=np.int64)
        self._inverse: dict = {}

    @property
    def n_cars(self) -> int:
        return self.pos.shape[0]

    def positions(self, times: np.ndarray) -> np.ndarray:
        """(n_cars, len(times)) cumulative positions; NaN outside the trace."""
        x = (np.asarray(times, dtype=float) - self.t0) / self.dt
        last = self.pos.shape[1] - 1
        j = np.clip(np.floor(x).astype(np.int64), 0, max(last - 1, 0))
        w = x - j
        out = self.pos[:, j] * (1.0 - w) + self.pos[:, np.minimum(j + 1, last)] * w
        out[:, (x < 0) | (x > last)] = np.nan
        return out

    def speed(self, c: int, t: float) -> float:
        x = (t - self.t0) / self.dt
        last = self.pos.shape[1] - 1
        j = int(min(max(math.floor(x), 0), last - 1))
        return float((self.pos[c, j + 1] - self.pos[c, j]) / self.dt)

    def time_at(self, c: int, lap_s: np.ndarray) -> np.ndarray:
        """Clock time at which car ``c`` reaches lap coordinate ``lap_s``."""
        inv = self._inverse.get(c)
        if inv is None:
            p = self.pos[c]
            keep = np.concatenate([[True], np.diff(p) > 0])
            inv = (p[keep], self.trace.t[keep])
            self._inverse[c] = inv
        return np.interp(np.asarray(lap_s) + self.offset[c], inv[0], inv[1], left=np.nan, right=np.nan)


@dataclass
class _Timeline:
    T: np.ndarray  # ego clock time at grid points 0..n
    v: np.ndarray  # ego speed at grid points 0..n


@njit(cache=True)
def _scan(T, s, sec_lo, sec_hi, i0, pos, t0, dt, offset, prox, skip):
    """First section (0-based, >= i0) in which some competitor not in
    ``skip`` comes within ``prox``; returns (section, car, grid point) or
    (-1, -1, -1).  Ties inside a section go to the earliest grid point, then
    the smaller gap."""
    n_car, n_t = pos.shape
    last = n_t - 1
    for sec in range(i0, sec_lo.size):
        best_k = -1
        best_c = -1
        best_g = np.inf
        for c in range(n_car):
            if skip[c]:
                continue
            for k in range(sec_lo[sec], sec_hi[sec]):
                if best_k >= 0 and k > best_k:
                    break
                x = (T[k] - t0) / dt
                if x < 0.0 or x > last:
                    continue
                j = min(int(x), last - 1)
                w = x - j
                g = pos[c, j] * (1.0 - w) + pos[c, j + 1] * w - offset[c] - s[k]
                if g <= prox:
                    if best_k < 0 or k < best_k or g < best_g:
                        best_k = k
                        best_c = c
                        best_g = g
                    break
        if best_k >= 0:
            return sec, best_c, best_k
    return -1, -1, -1


class TreeBuilder:
    """Builds decision trees for one ego profile; reusable across traces."""

    def __init__(self, ego: LapResult, geometry: TrackGeometry, table: OvertakingProbabilityTable,
                 params: VehicleParams = VehicleParams(), config: SDPConfig = SDPConfig(),
                 simulator: LapSimulator | None = None):
        if len(ego.speed) != geometry.n_points or not math.isclose(ego.delta_s, geometry.delta_s):
            raise ValueError("ego profile and geometry must share the grid")
        self.ego = ego
        self.geometry = geometry
        self.config = config
        self.sim = simulator or LapSimulator(geometry, params)
        self.n = geometry.n_points
        self.s = np.arange(self.n + 1) * geometry.delta_s
        starts = geometry.section_starts()
        self.sec_lo = starts
        self.sec_hi = np.append(starts[1:], self.n)
        self.n_sec = len(starts)
        self.ptab = _prob_array(table, self.n_sec)
        self.ego_cls = CLASS_INDEX[CarClass(config.ego_class)]
        self.P = ego.cumulative_time
        self.V = np.append(ego.speed, ego.v_end)
        self.no_data = 0
        self.recover_failures = 0  # recoveries that could not rejoin the profile

    # -- encounters -------------------------------------------------------
    def _next_catch(self, view: TraceView, i: int, tl: _Timeline, passed: frozenset):
        """First encounter at or after section ``i``: (section, car, grid point)."""
        if i > self.n_sec:
            return None
        skip = np.zeros(view.n_cars, dtype=np.bool_)
        if passed:
            skip[list(passed)] = True
        sec, c, k = _scan(tl.T, self.s, self.sec_lo, self.sec_hi, i - 1, view.pos, view.t0, view.dt,
                          view.offset, self.config.proximity + 1e-6, skip)
        return None if sec < 0 else (sec + 1, c, k)

    def _prob(self, view: TraceView, c: int, i: int) -> float:
        p = self.ptab[self.ego_cls, view.cls[c], i - 1]
        if np.isnan(p):
            self.no_data += 1
            return 0.0
        return float(p)

    def _follow(self, view: TraceView, c: int, i: int, k_catch: int, tl: _Timeline) -> _Timeline:
        hi = self.sec_hi[i - 1]
        T = tl.T.copy()
        v = tl.v.copy()
        ks = np.arange(k_catch, hi + 1)
        behind = view.time_at(c, self.s[ks] + self.config.following_gap)
        T[ks] = np.fmax(T[ks], behind)
        if T[hi] <= tl.T[hi] + 1e-12:
            return tl
        if hi < self.n:
            v_exit = min(tl.v[hi], view.speed(c, T[hi]))
            self._recover(T, v, hi, v_exit)
        return _Timeline(T, v)

    def _recover(self, T: np.ndarray, v: np.ndarray, k: int, v_exit: float) -> None:
        """Overwrite the timeline beyond ``k`` (in place) by a re-simulation
        from ``v_exit`` that rejoins the ego profile."""
        n = self.n
        if not v_exit > 0.0:
            v_exit = 1e-3
        if v_exit < self.V[k] * (1.0 - 1e-9):
            rec = self.sim.run(v_exit, mode_trace=self.ego.mode, start_index=k, n_steps=n - k,
                               stop_ref=self.ego.speed, raise_errors=False)
            taken = len(rec.dt)
            j = k + taken
            if j < n and rec.v_end < self.V[j] - 1e-9:
                log.debug("recovery re-simulation failed at grid point %d; rejoining the profile", j)
                self.recover_failures += 1
                j, taken = k, 0
            else:
                T[k + 1:j + 1] = T[k] + np.cumsum(rec.dt)
                v[k:j] = rec.speed
                v[j] = rec.v_end if j < n else rec.v_end
        else:
            j = k
        T[j + 1:] = T[j] + self.P[j + 1:] - self.P[j]
        v[j + 1:] = self.V[j + 1:]

    # -- trees ------------------------------------------------------------
    def potential_encounters(self, view: TraceView, tl: _Timeline | None = None) -> int:
        """Encounters along the unobstructed timeline when every pass succeeds."""
        tl = tl or self.base_timeline(view)
        passed: frozenset = frozenset()
        i = 1
        while True:
            hit = self._next_catch(view, i, tl, passed)
            if hit is None:
                return len(passed)
            i, c, _ = hit
            passed = passed | {c}

    def base_timeline(self, view: TraceView) -> _Timeline:
        return _Timeline(view.t_start + self.P, self.V.copy())

    def build(self, trace: SimTrace | TraceView, t_start: float | None = None) -> DecisionNode:
        view = trace if isinstance(trace, TraceView) else TraceView(trace, self.geometry.length, t_start)
        tl0 = self.base_timeline(view)
        root = DecisionNode(stage=0, state=-self.potential_encounters(view, tl0))
        n_sec = self.n_sec
        min_pp = self.config.min_path_prob
        # work items: (node, next stage, timeline, passed, path prob, node already at that stage)
        stack = [(root, 1, tl0, frozenset(), 1.0, False)]
        while stack:
            node, i, tl, passed, pp, at_stage = stack.pop()
            hit = self._next_catch(view, i, tl, passed) if node.state < 0 else None
            stop = n_sec if hit is None else hit[0] - 1
            if at_stage and (hit is None or hit[0] > i):
                i += 1  # the current node already occupies stage i
            for st in range(i, stop + 1):
                child = DecisionNode(st, node.state)
                node.children.append(child)
                node = child
            if hit is None:
                continue
            sec, c, k = hit
            p = self._prob(view, c, sec)
            ftl = self._follow(view, c, sec, k, tl)
            cost = max(float(ftl.T[self.n] - tl.T[self.n]), 0.0)
            succ = (DecisionNode(sec, node.state + 1, p, 0.0, label="success"),
                    (sec, tl, passed | {c}, pp * p, True))
            foll = (DecisionNode(sec, node.state, 1.0 - p, cost, label="follow"),
                    (sec + 1, ftl, passed, pp * (1.0 - p), False))
            if pp < min_pp:
                keep = succ if p >= 0.5 else foll
                keep[0].branch_prob = 1.0
                node.children.append(keep[0])
                st, t2, ps, _, flag = keep[1]
                stack.append((keep[0], st, t2, ps, pp, flag))
                continue
            for child, (st, t2, ps, pp2, flag) in (succ, foll):
                node.children.append(child)
                stack.append((child, st, t2, ps, pp2, flag))
        return root


def build_tree(ego_profile: LapResult, trace: SimTrace, prob_table: OvertakingProbabilityTable,
               geometry: TrackGeometry, params: VehicleParams = VehicleParams(),
               config: SDPConfig = SDPConfig(), t_start: float | None = None) -> DecisionNode:
    return TreeBuilder(ego_profile, geometry, prob_table, params, config).build(trace, t_start)


# ----------------------------------------------------------------------------
# strategy evaluation
# ----------------------------------------------------------------------------

@dataclass
class StrategyEvaluation:
    strategy_id: int
    f0: float
    per_trace: np.ndarray
    win_rate: float
    lap_time: float
    coverage: float = 1.0

    @property
    def std_error(self) -> float:
        x = self.per_trace[~np.isnan(self.per_trace)]
        return float(np.std(x, ddof=1) / math.sqrt(x.size)) if x.size > 1 else 0.0


def _strategy_fields(s) -> tuple[int, LapResult]:
    return int(getattr(s, "strategy_id", 0)), s.lap


def per_trace_values(strategies, traces, geometry: TrackGeometry, table: OvertakingProbabilityTable,
                     params: VehicleParams = VehicleParams(), config: SDPConfig = SDPConfig(),
                     t_start: float | None = None) -> np.ndarray:
    """(n_strategies, n_traces) matrix of tree values; NaN where a tree failed."""
    sim = LapSimulator(geometry, params)
    builders = [TreeBuilder(_strategy_fields(s)[1], geometry, table, params, config, sim) for s in strategies]
    out = np.full((len(strategies), len(traces)), np.nan)
    for j, trace in enumerate(traces):
        view = TraceView(trace, geometry.length, t_start)
        for i, b in enumerate(builders):
            try:
                out[i, j] = backward_pass(b.build(view), config.alpha)
            except (ValueError, RuntimeError) as exc:
                log.warning("strategy %d failed on trace %d: %s", i, j, exc)
    for b in builders:
        if b.no_data:
            log.warning("%d encounters hit no-data table entries (treated as p=0)", b.no_data)
        if b.recover_failures:
            log.warning("%d recoveries fell short of the profile and rejoined it directly", b.recover_failures)
    return out


def _seed_chunk(args):
    strategies, simulator, seeds, geometry, table, params, config, t_start = args
    traces = [simulator.simulate(s) for s in seeds]
    return per_trace_values(strategies, traces, geometry, table, params, config, t_start)


def values_from_seeds(strategies, simulator: Simulator, seeds, geometry, table, params=VehicleParams(),
                      config: SDPConfig = SDPConfig(), t_start=None, jobs: int = 1) -> np.ndarray:
    """Like :func:`per_trace_values` but replays traces from their seeds,
    optionally across ``jobs`` worker processes."""
    seeds = list(seeds)
    if jobs <= 1 or len(seeds) < 2 * jobs:
        return _seed_chunk((strategies, simulator, seeds, geometry, table, params, config, t_start))
    chunks = [seeds[i::jobs] for i in range(jobs)]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        parts = list(pool.map(_seed_chunk, [(strategies, simulator, ch, geometry, table, params, config,
                                             t_start) for ch in chunks]))
    out = np.empty((len(strategies), len(seeds)))
    for i, part in enumerate(parts):
        out[:, i::jobs] = part
    return out


def summarize(strategies, values: np.ndarray) -> tuple[list[StrategyEvaluation], int]:
    """Mean values, win rates and the argmin strategy.

    Values within ``TIE_TOL`` count as tied; ties go to the faster lap.
    """
    if len(strategies) == 0 or values.shape[1] == 0:
        raise ValueError("need at least one strategy and one trace")
    ids = [_strategy_fields(s)[0] for s in strategies]
    laps = np.array([_strategy_fields(s)[1].lap_time for s in strategies])
    n_tr = values.shape[1]
    wins = np.zeros(len(strategies))
    for j in range(n_tr):
        col = values[:, j]
        ok = np.flatnonzero(~np.isnan(col))
        if ok.size == 0:
            continue
        near = ok[col[ok] <= col[ok].min() + TIE_TOL]
        best = near[np.argmin(laps[near])]
        wins[best] += 1
    evals = []
    for i, sid in enumerate(ids):
        row = values[i]
        good = ~np.isnan(row)
        cov = float(good.mean())
        if cov < 1.0:
            log.warning("strategy %d scored on %d of %d traces", sid, int(good.sum()), n_tr)
        f0 = float(row[good].mean()) if good.any() else math.inf
        evals.append(StrategyEvaluation(sid, f0, row, float(wins[i] / n_tr), float(laps[i]), cov))
    f_min = min(e.f0 for e in evals)
    near = [e for e in evals if e.f0 <= f_min + TIE_TOL]
    return evals, min(near, key=lambda e: (e.lap_time, e.strategy_id)).strategy_id


def evaluate_strategies(strategies, traces, geometry: TrackGeometry, table: OvertakingProbabilityTable,
                        params: VehicleParams = VehicleParams(), config: SDPConfig = SDPConfig(),
                        t_start: float | None = None) -> tuple[list[StrategyEvaluation], int]:
    values = per_trace_values(strategies, traces, geometry, table, params, config, t_start)
    return summarize(strategies, values)


def write_evaluation(evals: list[StrategyEvaluation], path=None) -> str:
    lines = ["strategy_id,f0,std_error,win_rate,lap_time,coverage"]
    for e in sorted(evals, key=lambda e: e.strategy_id):
        lines.append(f"{e.strategy_id},{e.f0:.6f},{e.std_error:.6f},{e.win_rate:.4f},{e.lap_time:.6f},"
                     f"{e.coverage:.4f}")
    text = "\n".join(lines) + "\n"
    if path is not None:
        Path(path).write_text(text)
    return text


# ----------------------------------------------------------------------------
# stint
# ----------------------------------------------------------------------------

@dataclass
class StintRun:
    chosen: list
    gains: np.ndarray  # per-lap expected gain over the baseline, s
    ego_times: np.ndarray  # expected ego lap times, s

    @property
    def cumulative_gain(self) -> float:
        return float(np.sum(self.gains))


@dataclass
class StintReport:
    runs: list
    baseline_id: int
    ci_level: float

    @property
    def totals(self) -> np.ndarray:
        return np.array([r.cumulative_gain for r in self.runs])

    @property
    def mean_gain(self) -> float:
        return float(self.totals.mean())

    @property
    def ci(self) -> tuple[float, float]:
        q = (1.0 - self.ci_level) / 2.0
        lo, hi = np.quantile(self.totals, [q, 1.0 - q])
        return float(lo), float(hi)

    def per_lap(self) -> list[dict]:
        n_laps = len(self.runs[0].gains)
        rows = []
        for lap in range(n_laps):
            g = np.array([r.gains[lap] for r in self.runs])
            cum = np.array([r.gains[: lap + 1].sum() for r in self.runs])
            picks = [r.chosen[lap] for r in self.runs]
            mode = max(set(picks), key=lambda x: (picks.count(x), -x))
            q = (1.0 - self.ci_level) / 2.0
            lo, hi = np.quantile(cum, [q, 1.0 - q])
            rows.append({"lap": lap + 1, "chosen": mode, "gain": float(g.mean()),
                         "cumulative": float(cum.mean()), "ci_low": float(lo), "ci_high": float(hi)})
        return rows

    def to_csv(self, path=None) -> str:
        lines = ["lap,chosen_strategy,expected_gain,cumulative_gain,ci_low,ci_high"]
        for r in self.per_lap():
            lines.append(f"{r['lap']},{r['chosen']},{r['gain']:.6f},{r['cumulative']:.6f},"
                         f"{r['ci_low']:.6f},{r['ci_high']:.6f}")
        text = "\n".join(lines) + "\n"
        if path is not None:
            Path(path).write_text(text)
        return text


def stint_run(strategies, initial: RaceState, dists: dict, table: OvertakingProbabilityTable, reference,
              geometry: TrackGeometry, n_laps: int, n_sims: int, seed: int, baseline_id: int,
              params: VehicleParams = VehicleParams(), config: SDPConfig = SDPConfig(),
              mc_config: MCConfig = MCConfig()) -> StintRun:
    """One stint: every lap draws a batch from the current competitor
    positions (ego at the line), picks the argmin strategy, and advances the
    ego by its lap time plus expected loss and each competitor to its batch
    mean position at that time."""
    if n_laps < 1:
        raise ValueError("n_laps must be >= 1")
    ids = [_strategy_fields(s)[0] for s in strategies]
    if baseline_id not in ids:
        raise ValueError(f"baseline strategy {baseline_id} not among the candidates")
    b_idx = ids.index(baseline_id)
    L = geometry.length
    starts = geometry.section_starts() * geometry.delta_s
    state = initial
    chosen, gains, ego_times = [], [], []
    rng = np.random.default_rng(seed)
    for lap in range(n_laps):
        sim = Simulator(state, dists, table, reference, starts, mc_config)
        lap_seed = int(rng.integers(2**31))
        traces = [sim.simulate(trace_seed(lap_seed, i)) for i in range(n_sims)]
        values = per_trace_values(strategies, traces, geometry, table, params, config)
        evals, best = summarize(strategies, values)
        bi = ids.index(best)
        t_best = evals[bi].lap_time + evals[bi].f0
        t_base = evals[b_idx].lap_time + evals[b_idx].f0
        chosen.append(best)
        gains.append(t_base - t_best)
        ego_times.append(t_best)
        t_end = state.t + t_best
        new_pos = np.mean([[tr.position_at(c, t_end) for c in range(len(tr.cars))] for tr in traces], axis=0)
        comps = []
        used = set()
        for comp, x in zip(state.competitors, new_pos):
            x = float(x) - L
            while x in used:
                x = math.nextafter(x, -math.inf)
            used.add(x)
            comps.append(Competitor(comp.car_number, comp.car_class, x))
        state = RaceState(tuple(comps), 0.0)
    return StintRun(chosen, np.array(gains), np.array(ego_times))


def evaluate_stint(strategies, initial: RaceState, dists: dict, table: OvertakingProbabilityTable, reference,
                   geometry: TrackGeometry, n_laps: int, n_sims: int, seed: int, baseline_id: int,
                   n_runs: int = 20, ci_level: float = 0.9, params: VehicleParams = VehicleParams(),
                   config: SDPConfig = SDPConfig(), mc_config: MCConfig = MCConfig()) -> StintReport:
    """Repeated stints with seeds ``seed ^ r``; the CI is the percentile
    interval of the cumulative gains across runs."""
    runs = [stint_run(strategies, initial, dists, table, reference, geometry, n_laps, n_sims,
                      trace_seed(seed, r), baseline_id, params, config, mc_config) for r in range(n_runs)]
    return StintReport(runs, baseline_id, ci_level)
