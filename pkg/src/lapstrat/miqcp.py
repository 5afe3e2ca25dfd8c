"""Convexified mixed-integer lap-time problem: construction, verification of
candidate trajectories, and a portable text export.

The lap is open: ``E[N]`` is the kinetic energy when crossing the line again,
so laps that do not end at their starting speed are representable.  Per
grid point ``k`` the variables are kinetic energy ``E``, speed ``v``,
lethargy ``z = dt/ds``, a one-hot mode vector ``u1..u4``, the front electric
force ``Fel``, the rear combustion force ``Fc``, the retarding force ``Fn``
(sailing or braking, <= 0), fuel ``p`` (kg), and electric energy used ``ee``
and recovered ``er`` (kJ).  Drag, downforce and rolling resistance are
linear in ``E`` because ``v**2 = 2E/m``, so the kinetic recursion stays
linear.  The speed/energy and speed/lethargy links are second-order cone
rows ``||(2a, b - c)|| <= b + c``.

Row families (N = number of grid points):

=========== ===== =================================================
family      rows  content
=========== ===== =================================================
kinetic     N     E[k+1] = E[k] + ds*(Fel+Fc+Fn - drag - rolling - grade)
soc_energy  N     ||(2 v, 2E/m - 1)|| <= 2E/m + 1   (E >= m v^2 / 2)
soc_leth    N     ||(2, z - v)|| <= z + v           (z v >= 1)
one_hot     N     u1 + u2 + u3 + u4 = 1
elec_mode   N     Fel <= F_el_max u1
comb_mode   N     Fc <= F_comb_max (u1 + u2)
neg_mode    N     -Fn <= F_neg_max (u3 + u4)
grip        2N    |Fel + Fc + Fn| <= mu' (m g cos(alpha) + kappa E)
fuel        N     p >= p_max_per_s * ds * z_min[k] * Fc / F_comb_max
elec_work   N     ee = Fel * ds / eta_traction
rec_mode    N     er <= (|F_sail| u3 + |F_dec_max| u4) * ds * eta_rec
rec_work    N     er <= -Fn * ds * eta_rec
budget      3     sum p <= p_max; sum ee <= E_max; sum ee - sum er <= E_hers
=========== ===== =================================================

The fuel row is a linear under-estimate of the bilinear consumption law:
full-throttle thrust never exceeds ``F_comb_max`` and lethargy never drops
below ``z_min = 1/v_limit``.  Objective: ``ds * sum z``.  Variable bounds
carry ``v <= v_limit[k]``.
"""

from __future__ import annotations

import io
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ga_opt import RegulationLimits
from .track import TrackGeometry
from .vehicle import LapResult, LapSimulator, VehicleParams, thrust_tables

FORMAT_TAG = "lapstrat-socp 1"
MIQCP_DELTA_S = 5.0
V_MIN = 1.0  # m/s, floor used to bound lethargy in the fuel/mode rows
VAR_BLOCK = ("E", "v", "z", "u1", "u2", "u3", "u4", "Fel", "Fc", "Fn", "p", "ee", "er")


class ProblemError(ValueError):
    pass


@dataclass(frozen=True)
class Affine:
    const: float = 0.0
    terms: tuple = ()  # ((var_index, coef), ...)

    def value(self, x: np.ndarray) -> float:
        return self.const + sum(c * x[i] for i, c in self.terms)

    def scale(self, x: np.ndarray) -> float:
        return abs(self.const) + sum(abs(c * x[i]) for i, c in self.terms)


@dataclass(frozen=True)
class Variable:
    name: str
    kind: str  # continuous | binary
    lb: float
    ub: float


@dataclass(frozen=True)
class LinearRow:
    name: str
    family: str
    terms: tuple
    sense: str  # "=", "<=", ">="
    rhs: float


@dataclass(frozen=True)
class SocRow:
    """``||(2 a, b - c)||_2 <= b + c``."""

    name: str
    family: str
    a: Affine
    b: Affine
    c: Affine


@dataclass
class DiscretizedProblem:
    name: str
    delta_s: float
    n_points: int
    variables: list = field(default_factory=list)
    objective: Affine = Affine()
    linear: list = field(default_factory=list)
    soc: list = field(default_factory=list)

    def index(self, name: str) -> int:
        if not hasattr(self, "_index") or len(self._index) != len(self.variables):
            self._index = {v.name: i for i, v in enumerate(self.variables)}
        return self._index[name]

    def family_counts(self) -> dict:
        c = Counter(r.family for r in self.linear)
        c.update(r.family for r in self.soc)
        return dict(sorted(c.items()))

    def __eq__(self, other) -> bool:
        if not isinstance(other, DiscretizedProblem):
            return NotImplemented
        return (self.name, self.delta_s, self.n_points, self.variables, self.objective, self.linear,
                self.soc) == (other.name, other.delta_s, other.n_points, other.variables,
                              other.objective, other.linear, other.soc)


def _var(name: str, k: int) -> str:
    return f"{name}[{k}]"


def build_problem(geometry: TrackGeometry, params: VehicleParams = VehicleParams(),
                  limits: RegulationLimits = RegulationLimits(),
                  delta_s: float = MIQCP_DELTA_S) -> DiscretizedProblem:
    """Constraint system on ``geometry``'s grid, which must already use ``delta_s``."""
    if geometry.n_points == 0:
        raise ProblemError("empty geometry")
    if not math.isclose(geometry.delta_s, delta_s, rel_tol=1e-12):
        raise ProblemError(f"geometry grid is {geometry.delta_s} m; resample to {delta_s} m first")
    if not np.allclose(np.diff(geometry.s), delta_s):
        raise ProblemError("geometry grid is not uniform")
    n = geometry.n_points
    m, g = params.m, params.g
    ds = delta_s
    sim = LapSimulator(geometry, params)
    v_lim = sim.v_limit
    f_el_tab, f_comb_tab = thrust_tables(params)
    f_el_max = float(np.max(f_el_tab))
    f_comb_max = float(np.max(f_comb_tab))
    mu_top = params.mu * max(1.0, params.coeff_adherence)
    f_neg_max = mu_top * (m * g + params.rho * params.cz * max(1.0, params.coeff_downforce) * params.S
                          * float(np.max(v_lim)) ** 2 / 2.0)
    eta_tr, eta_rec = params.eta_el_traction, params.eta_el_rec

    prob = DiscretizedProblem(name=geometry.name, delta_s=ds, n_points=n)
    for k in range(n):
        for base in VAR_BLOCK:
            if base.startswith("u"):
                prob.variables.append(Variable(_var(base, k), "binary", 0.0, 1.0))
            elif base == "v":
                prob.variables.append(Variable(_var(base, k), "continuous", 0.0, float(v_lim[k])))
            elif base == "Fn":
                prob.variables.append(Variable(_var(base, k), "continuous", -math.inf, 0.0))
            else:
                prob.variables.append(Variable(_var(base, k), "continuous", 0.0, math.inf))
    prob.variables.append(Variable(_var("E", n), "continuous", 0.0, math.inf))  # energy at the line
    idx = {v.name: i for i, v in enumerate(prob.variables)}

    def V(base, k):
        return idx[_var(base, k % n)]

    prob.objective = Affine(0.0, tuple((V("z", k), ds) for k in range(n)))
    rows: list = []
    socs: list = []
    for k in range(n):
        alpha = float(geometry.alpha[k])
        cz = params.cz * (params.coeff_downforce if geometry.high_speed[k] else 1.0)
        mu = params.mu * (params.coeff_adherence if geometry.low_speed[k] else 1.0)
        kappa = params.rho * cz * params.S / m  # total downforce per unit E
        a_e = params.rho * params.cx * params.S / m + params.C_res * kappa
        c0 = params.C_res * m * g * math.cos(alpha) + m * g * math.sin(alpha)
        z_min = 1.0 / (float(v_lim[k]) * (1.0 + 1e-6) + 1e-6)
        forces = ((V("Fel", k), 1.0), (V("Fc", k), 1.0), (V("Fn", k), 1.0))
        rows.append(LinearRow(f"kin[{k}]", "kinetic",
                              ((idx[_var("E", k + 1)], 1.0), (V("E", k), -(1.0 - ds * a_e)))
                              + tuple((i, -ds) for i, _ in forces), "=", -ds * c0))
        socs.append(SocRow(f"soce[{k}]", "soc_energy", Affine(0.0, ((V("v", k), 1.0),)),
                           Affine(0.0, ((V("E", k), 2.0 / m),)), Affine(1.0, ())))
        socs.append(SocRow(f"socz[{k}]", "soc_leth", Affine(1.0, ()),
                           Affine(0.0, ((V("z", k), 1.0),)), Affine(0.0, ((V("v", k), 1.0),))))
        rows.append(LinearRow(f"hot[{k}]", "one_hot", tuple((V(u, k), 1.0) for u in ("u1", "u2", "u3", "u4")),
                              "=", 1.0))
        rows.append(LinearRow(f"elm[{k}]", "elec_mode", ((V("Fel", k), 1.0), (V("u1", k), -f_el_max)),
                              "<=", 0.0))
        rows.append(LinearRow(f"cbm[{k}]", "comb_mode",
                              ((V("Fc", k), 1.0), (V("u1", k), -f_comb_max), (V("u2", k), -f_comb_max)),
                              "<=", 0.0))
        rows.append(LinearRow(f"ngm[{k}]", "neg_mode",
                              ((V("Fn", k), -1.0), (V("u3", k), -f_neg_max), (V("u4", k), -f_neg_max)),
                              "<=", 0.0))
        grip_rhs = mu * m * g * math.cos(alpha)
        rows.append(LinearRow(f"gripu[{k}]", "grip", forces + ((V("E", k), -mu * kappa),), "<=", grip_rhs))
        rows.append(LinearRow(f"gripl[{k}]", "grip", tuple((i, -1.0) for i, _ in forces)
                              + ((V("E", k), -mu * kappa),), "<=", grip_rhs))
        rows.append(LinearRow(f"fuel[{k}]", "fuel",
                              ((V("p", k), 1.0), (V("Fc", k), -params.p_max_per_s * ds * z_min / f_comb_max)),
                              ">=", 0.0))
        rows.append(LinearRow(f"elw[{k}]", "elec_work",
                              ((V("ee", k), 1.0), (V("Fel", k), -ds / eta_tr / 1000.0)), "=", 0.0))
        rows.append(LinearRow(f"rcm[{k}]", "rec_mode",
                              ((V("er", k), 1.0),
                               (V("u3", k), -abs(params.F_sail) * ds * eta_rec / 1000.0),
                               (V("u4", k), -abs(params.F_dec_max) * ds * eta_rec / 1000.0)),
                              "<=", 0.0))
        rows.append(LinearRow(f"rcw[{k}]", "rec_work",
                              ((V("er", k), 1.0), (V("Fn", k), ds * eta_rec / 1000.0)), "<=", 0.0))
    rows.append(LinearRow("fuel_total", "budget", tuple((V("p", k), 1.0) for k in range(n)), "<=",
                          limits.fuel_max_g / 1000.0))
    rows.append(LinearRow("elec_total", "budget", tuple((V("ee", k), 1.0) for k in range(n)), "<=",
                          limits.e_el_max_kj))
    rows.append(LinearRow("kers_balance", "budget",
                          tuple((V("ee", k), 1.0) for k in range(n)) + tuple((V("er", k), -1.0) for k in range(n)),
                          "<=", limits.e_rec_hers_kj))
    prob.linear = rows
    prob.soc = socs
    return prob


# ----------------------------------------------------------------------------
# verification
# ----------------------------------------------------------------------------

def _force_split(lap: LapResult) -> tuple:
    fxf, fxr = lap.ledger["F_x_f"], lap.ledger["F_x_r"]
    drive = lap.mode <= 2
    return np.where(drive, fxf, 0.0), np.where(drive, fxr, 0.0), np.where(drive, 0.0, fxf + fxr)


def resample_lap(lap: LapResult, delta_s: float, length: float) -> dict:
    """Time-consistent averages of a lap on a coarser grid.

    Lethargy is averaged over each coarse cell (so cell times add up
    exactly) and speed is its inverse.  Fuel and energies are summed with
    overlap weights, forces are distance averaged, and the mode is the one
    holding the largest time share.  The kinetic rows hold only up to the
    discretisation error of the averaging.
    """
    n_f = len(lap.speed)
    ds_f = lap.delta_s
    if not math.isclose(n_f * ds_f, length, rel_tol=1e-9):
        raise ProblemError("trajectory and problem describe different laps")
    n_c = int(round(length / delta_s))
    if not math.isclose(n_c * delta_s, length, rel_tol=1e-9):
        raise ProblemError(f"lap length is not a multiple of {delta_s} m")
    edges_f = np.arange(n_f + 1) * ds_f
    edges_c = np.arange(n_c + 1) * delta_s

    def cell_sum(per_point):
        cum = np.concatenate([[0.0], np.cumsum(per_point)])
        return np.diff(np.interp(edges_c, edges_f, cum))

    z_f = 1.0 / lap.speed
    z = cell_sum(z_f * ds_f) / delta_s
    shares = np.vstack([cell_sum(np.where(lap.mode == mo, z_f * ds_f, 0.0)) for mo in (1, 2, 3, 4)])
    fel, fc, fn = (cell_sum(f * ds_f) / delta_s for f in _force_split(lap))
    return {"z": z, "v": 1.0 / z, "mode": np.argmax(shares, axis=0) + 1, "Fel": fel, "Fc": fc, "Fn": fn,
            "p": cell_sum(lap.fuel), "ee": cell_sum(lap.e_used), "er": cell_sum(lap.e_rec)}


def assignment(lap: LapResult, problem: DiscretizedProblem, params: VehicleParams) -> np.ndarray:
    """Variable vector for a lap; trajectories on a finer grid are resampled."""
    n = problem.n_points
    if len(lap.speed) == n and math.isclose(lap.delta_s, problem.delta_s):
        fel, fc, fn = _force_split(lap)
        r = {"z": 1.0 / lap.speed, "v": lap.speed, "mode": lap.mode, "Fel": fel, "Fc": fc, "Fn": fn,
             "p": lap.fuel, "ee": lap.e_used, "er": lap.e_rec}
    elif lap.delta_s < problem.delta_s:
        r = resample_lap(lap, problem.delta_s, n * problem.delta_s)
    else:
        raise ProblemError(f"trajectory grid {lap.delta_s} m does not match problem grid {problem.delta_s} m")
    x = np.zeros(len(problem.variables))
    for k in range(n):
        x[problem.index(_var("E", k))] = 0.5 * params.m * r["v"][k] ** 2
        x[problem.index(_var(f"u{int(r['mode'][k])}", k))] = 1.0
        for name in ("v", "z", "Fel", "Fc", "Fn", "p", "ee", "er"):
            x[problem.index(_var(name, k))] = r[name][k]
    x[problem.index(_var("E", n))] = 0.5 * params.m * lap.v_end ** 2
    return x


@dataclass
class VerifyReport:
    families: dict  # family -> worst relative violation (<= 0 means satisfied)
    bounds: float
    objective: float
    tol: float

    @property
    def feasible(self) -> bool:
        return all(v <= self.tol for v in self.families.values()) and self.bounds <= self.tol

    def flagged(self) -> list[str]:
        return [f for f, v in self.families.items() if v > self.tol]

    def to_text(self) -> str:
        lines = [f"feasible {str(self.feasible).lower()}", f"tolerance {float(self.tol)!r}",
                 f"objective {float(self.objective)!r}", f"bounds {float(self.bounds)!r}"]
        lines += [f"family {f} {float(v)!r}" for f, v in sorted(self.families.items())]
        return "\n".join(lines) + "\n"


def evaluate_rows(problem: DiscretizedProblem, x: np.ndarray, tol: float = 1e-6) -> VerifyReport:
    """Worst relative violation per family for the assignment ``x``."""
    worst: dict = {}
    for row in problem.linear:
        lhs = sum(c * x[i] for i, c in row.terms)
        scale = max(1.0, abs(row.rhs) + sum(abs(c * x[i]) for i, c in row.terms))
        if row.sense == "=":
            viol = abs(lhs - row.rhs)
        elif row.sense == "<=":
            viol = lhs - row.rhs
        else:
            viol = row.rhs - lhs
        worst[row.family] = max(worst.get(row.family, -math.inf), viol / scale)
    for row in problem.soc:
        a, b, c = row.a.value(x), row.b.value(x), row.c.value(x)
        lhs = math.hypot(2.0 * a, b - c)
        scale = max(1.0, abs(b) + abs(c) + abs(2.0 * a))
        worst[row.family] = max(worst.get(row.family, -math.inf), (lhs - (b + c)) / scale)
    bnd = -math.inf
    for i, v in enumerate(problem.variables):
        scale = max(1.0, abs(x[i]))
        bnd = max(bnd, (v.lb - x[i]) / scale, (x[i] - v.ub) / scale)
        if v.kind == "binary":
            bnd = max(bnd, min(abs(x[i]), abs(x[i] - 1.0)))
    return VerifyReport(worst, bnd, problem.objective.value(x), tol)


def verify(trajectory: LapResult, problem: DiscretizedProblem, params: VehicleParams = VehicleParams(),
           tol: float = 1e-6) -> VerifyReport:
    """Check a simulated lap against the constraint system.

    The kinetic rows are the energy-form update, so a lap simulated with
    ``energy_form=True`` on the problem grid satisfies them to rounding.
    """
    return evaluate_rows(problem, assignment(trajectory, problem, params), tol)


# ----------------------------------------------------------------------------
# text export
# ----------------------------------------------------------------------------

def _fmt(x: float) -> str:
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return repr(float(x))


def _affine_text(tag: str, a: Affine) -> str:
    return " ".join([tag, _fmt(a.const)] + [f"{_fmt(c)}*{i}" for i, c in a.terms])


def export(problem: DiscretizedProblem, sink=None) -> str:
    """Serialise the problem in the line-based format documented in
    ``docs/problem_format.md``; returns the text and writes it to ``sink``
    (path or text stream) when given."""
    if problem.n_points == 0 or not problem.variables:
        raise ProblemError("cannot export an empty problem")
    out = io.StringIO()
    out.write(f"# {FORMAT_TAG}\n")
    out.write(f"name {problem.name}\n")
    out.write(f"delta_s {_fmt(problem.delta_s)}\n")
    out.write(f"n_points {problem.n_points}\n")
    out.write(f"variables {len(problem.variables)}\n")
    for i, v in enumerate(problem.variables):
        out.write(f"var {i} {v.name} {v.kind} {_fmt(v.lb)} {_fmt(v.ub)}\n")
    out.write(_affine_text("minimize", problem.objective) + "\n")
    out.write(f"linear {len(problem.linear)}\n")
    for r in problem.linear:
        out.write(" ".join(["row", r.name, r.family, r.sense, _fmt(r.rhs)]
                           + [f"{_fmt(c)}*{i}" for i, c in r.terms]) + "\n")
    out.write(f"soc {len(problem.soc)}\n")
    for r in problem.soc:
        out.write(f"cone {r.name} {r.family}\n")
        for tag, aff in (("a", r.a), ("b", r.b), ("c", r.c)):
            out.write(_affine_text(tag, aff) + "\n")
    out.write("end\n")
    text = out.getvalue()
    if sink is not None:
        if isinstance(sink, (str, Path)):
            Path(sink).write_text(text)
        else:
            sink.write(text)
    return text


def _parse_terms(tokens) -> tuple:
    terms = []
    for tok in tokens:
        c, _, i = tok.rpartition("*")
        terms.append((int(i), float(c)))
    return tuple(terms)


def parse(text: str) -> DiscretizedProblem:
    lines = iter(text.splitlines())

    def nxt():
        for ln in lines:
            if ln and not ln.startswith("#"):
                return ln.split()
        raise ProblemError("unexpected end of problem file")

    def expect(tag):
        tok = nxt()
        if tok[0] != tag:
            raise ProblemError(f"expected {tag!r}, found {tok[0]!r}")
        return tok

    name = expect("name")[1]
    delta_s = float(expect("delta_s")[1])
    n_points = int(expect("n_points")[1])
    prob = DiscretizedProblem(name, delta_s, n_points)
    for _ in range(int(expect("variables")[1])):
        _, _, vname, kind, lb, ub = nxt()
        prob.variables.append(Variable(vname, kind, float(lb), float(ub)))
    tok = expect("minimize")
    prob.objective = Affine(float(tok[1]), _parse_terms(tok[2:]))
    for _ in range(int(expect("linear")[1])):
        tok = nxt()
        prob.linear.append(LinearRow(tok[1], tok[2], _parse_terms(tok[5:]), tok[3], float(tok[4])))
    for _ in range(int(expect("soc")[1])):
        _, rname, fam = expect("cone")
        parts = []
        for tag in ("a", "b", "c"):
            tok = expect(tag)
            parts.append(Affine(float(tok[1]), _parse_terms(tok[2:])))
        prob.soc.append(SocRow(rname, fam, *parts))
    expect("end")
    return prob
