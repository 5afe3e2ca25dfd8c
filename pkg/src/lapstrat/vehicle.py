"""Longitudinal ego-vehicle model.

Point-mass longitudinal dynamics with per-axle vertical loads, a friction
circle per axle, four powertrain modes and explicit spatial integration
``v[k+1] = v[k] + v_dot * delta_s / v[k]``.

The per-point physics lives in small ``numba`` kernels so that a full lap on a
2 m grid costs a few milliseconds; the public helpers below wrap the same
kernels so that tests exercise exactly the code used inside lap simulation.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np
import yaml
from numba import njit

from .track import TrackGeometry

log = logging.getLogger(__name__)

V_CAP = 150.0  # m/s, speed used for "unlimited" grip / envelope
V_TABLE_STEP = 0.05
V_TABLE_MAX = 160.0
FULL_BRAKE = -1.0e12

# packed parameter vector layout (numba kernels take a flat float array)
P_M, P_G, P_H, P_HAERO, P_L, P_RHO, P_CX, P_CZ, P_S, P_CRES, P_MU = range(11)
P_ETA_TR, P_ETA_REC, P_FSAIL, P_FDECMAX, P_PMAX, P_CADH, P_CDOWN = range(11, 18)
N_PARAMS = 18

# step output layout
O_VNEXT, O_VDOT, O_DT = 0, 1, 2
O_FXF, O_FXR, O_FAERO, O_RF, O_RR, O_FZF, O_FZR, O_FYF, O_FYR, O_FTF, O_FTR = range(3, 14)
O_FUEL, O_EUSED, O_EREC, O_FLAGS, O_FDOWNF, O_FDOWNR = range(14, 20)
N_OUT = 20
LEDGER_FIELDS = ("F_x_f", "F_x_r", "F_aero", "R_f", "R_r", "F_z_f", "F_z_r", "F_y_f", "F_y_r", "F_t_f", "F_t_r")

FLAG_WHEEL_LIFT = 1
FLAG_SAT_FRONT = 2
FLAG_SAT_REAR = 4
FLAG_RPM_CLAMP = 8

ST_OK, ST_STALL, ST_APEX, ST_STOPPED = 0, 1, 2, 3


class PowertrainMode(IntEnum):
    BOTH = 1
    COMB_ONLY = 2
    SAILING = 3
    BRAKING = 4


class StallError(RuntimeError):
    def __init__(self, index: int, s: float):
        super().__init__(f"vehicle stalled at grid point {index} (s={s:.1f} m)")
        self.index = index
        self.s = s


class InfeasibleApexError(RuntimeError):
    def __init__(self, index: int, s: float, section: int):
        super().__init__(
            f"curve in section {section} at s={s:.1f} m cannot be reached at its apex speed "
            f"(grid point {index})"
        )
        self.index = index
        self.s = s
        self.section = section


def _pairs(curve) -> tuple[tuple[float, float], ...]:
    pts = tuple((float(a), float(b)) for a, b in curve)
    if len(pts) < 2:
        raise ValueError("torque curves need at least two points")
    if any(b < 0 for _, b in pts):
        raise ValueError("torque curves must be nonnegative")
    if any(pts[i + 1][0] <= pts[i][0] for i in range(len(pts) - 1)):
        raise ValueError("torque curve speeds must be strictly increasing")
    return pts


@dataclass(frozen=True)
class VehicleParams:
    """Ego-vehicle parameters.

    Defaults form a synthetic LMP1-like parameter set (not manufacturer data).
    Forces in N, masses in kg, lengths in m.  ``L`` is half the wheelbase.
    """

    m: float = 900.0
    g: float = 9.81
    h: float = 0.30
    h_aero: float = 0.35
    L: float = 1.5
    rho: float = 1.225
    cx: float = 0.8
    cz: float = 3.0
    S: float = 1.6
    C_res: float = 0.012
    mu: float = 1.7
    comb_torque_curve: tuple = (
        (3000.0, 300.0), (4000.0, 380.0), (5000.0, 430.0), (6000.0, 460.0),
        (7000.0, 460.0), (8000.0, 440.0), (9000.0, 380.0),
    )
    gear_ratios: tuple = (11.0, 8.0, 6.2, 5.0, 4.2, 3.6, 3.2)
    el_torque_curve: tuple = (
        (0.0, 250.0), (9500.0, 250.0), (12000.0, 199.0), (15000.0, 159.0), (18000.0, 133.0),
        (24000.0, 100.0),
    )
    tau_el: float = 6.0
    eta_el_traction: float = 0.9
    eta_el_rec: float = 0.8
    F_sail: float = -1500.0
    F_dec_max: float = -4000.0
    wheel_radius: float = 0.33
    p_max_per_s: float = 0.0223
    coeff_engine: float = 1.0
    coeff_adherence: float = 1.0
    coeff_downforce: float = 1.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "comb_torque_curve", _pairs(self.comb_torque_curve))
        object.__setattr__(self, "el_torque_curve", _pairs(self.el_torque_curve))
        object.__setattr__(self, "gear_ratios", tuple(float(x) for x in self.gear_ratios))
        for name in ("m", "g", "h", "L", "rho", "S", "mu", "wheel_radius", "tau_el"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("eta_el_traction", "eta_el_rec"):
            if not 0 < getattr(self, name) <= 1:
                raise ValueError(f"{name} must lie in (0, 1]")
        if self.F_sail > 0 or self.F_dec_max > 0:
            raise ValueError("F_sail and F_dec_max are decelerating forces and must be <= 0")
        if not self.gear_ratios or any(g <= 0 for g in self.gear_ratios):
            raise ValueError("gear ratios must be positive")

    def replace(self, **changes) -> VehicleParams:
        return dataclasses.replace(self, **changes)

    def packed(self) -> np.ndarray:
        p = np.zeros(N_PARAMS)
        p[P_M], p[P_G], p[P_H], p[P_HAERO], p[P_L] = self.m, self.g, self.h, self.h_aero, self.L
        p[P_RHO], p[P_CX], p[P_CZ], p[P_S], p[P_CRES], p[P_MU] = (
            self.rho, self.cx, self.cz, self.S, self.C_res, self.mu)
        p[P_ETA_TR], p[P_ETA_REC] = self.eta_el_traction, self.eta_el_rec
        p[P_FSAIL], p[P_FDECMAX], p[P_PMAX] = self.F_sail, self.F_dec_max, self.p_max_per_s
        p[P_CADH], p[P_CDOWN] = self.coeff_adherence, self.coeff_downforce
        return p

    # -- config IO ------------------------------------------------------
    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["comb_torque_curve"] = [list(x) for x in self.comb_torque_curve]
        d["el_torque_curve"] = [list(x) for x in self.el_torque_curve]
        d["gear_ratios"] = list(self.gear_ratios)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> VehicleParams:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown vehicle parameters: {sorted(unknown)}")
        return cls(**d)

    def to_yaml(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))

    @classmethod
    def from_yaml(cls, path) -> VehicleParams:
        return cls.from_dict(yaml.safe_load(Path(path).read_text()) or {})


# ----------------------------------------------------------------------------
# scalar physics kernels
# ----------------------------------------------------------------------------

@njit(cache=True)
def _aero(v, rho, cx, cz_eff, S):
    q = rho * S * v * v
    return 0.5 * cx * q, 0.25 * cz_eff * q


@njit(cache=True)
def _loads(v_dot, alpha, f_aero, f_down_f, f_down_r, m, g, h, h_aero, L):
    two_l = 2.0 * L
    sa = math.sin(alpha)
    ca = math.cos(alpha)
    fzf = (-f_aero * h_aero + f_down_f * two_l) / two_l + (-m * v_dot * h - m * g * h * sa + m * g * L * ca) / two_l
    fzr = (f_aero * h_aero + f_down_r * two_l) / two_l + (m * v_dot * h + m * g * h * sa + m * g * L * ca) / two_l
    return fzf, fzr


@njit(cache=True)
def _tire(f_z, f_y, mu_eff):
    f_ad = mu_eff * max(f_z, 0.0)
    if f_ad >= abs(f_y):
        return math.sqrt(f_ad * f_ad - f_y * f_y), False
    return 0.0, True


@njit(cache=True)
def _step(v, alpha, radius, low, high, mode, f_dec, frac_f, frac_r, f_el_full, f_comb_full,
          p, ds, energy_form, out):
    """One spatial step from a grid point; fills ``out`` and returns v_next."""
    m = p[P_M]
    g = p[P_G]
    cz_eff = p[P_CZ] * (p[P_CDOWN] if high else 1.0)
    mu_eff = p[P_MU] * (p[P_CADH] if low else 1.0)
    f_aero, f_down = _aero(v, p[P_RHO], p[P_CX], cz_eff, p[P_S])
    if math.isinf(radius):
        f_y = 0.0
    else:
        f_y = m * v * v / (2.0 * radius)
    sin_a = math.sin(alpha)

    v_dot = 0.0
    fzf = fzr = ftf = ftr = fxf = fxr = rf = rr = 0.0
    sat_f = sat_r = False
    brake_tot = 0.0
    for it in range(3):
        fzf, fzr = _loads(v_dot, alpha, f_aero, f_down, f_down, m, g, p[P_H], p[P_HAERO], p[P_L])
        ftf, sat_f = _tire(fzf, f_y, mu_eff)
        ftr, sat_r = _tire(fzr, f_y, mu_eff)
        rf = p[P_CRES] * max(fzf, 0.0)
        rr = p[P_CRES] * max(fzr, 0.0)
        if mode == 1:
            fxf = frac_f * min(f_el_full, ftf)
            fxr = frac_r * min(f_comb_full, ftr)
        elif mode == 2:
            fxf = 0.0
            fxr = frac_r * min(f_comb_full, ftr)
        elif mode == 3:
            fxf = max(p[P_FSAIL], -ftf)
            fxr = max(p[P_FSAIL] - fxf, -ftr)
        else:
            cap = ftf + ftr
            brake_tot = min(-f_dec, cap)
            if cap > 0.0:
                fxf = -brake_tot * ftf / cap
                fxr = -brake_tot * ftr / cap
            else:
                fxf = 0.0
                fxr = 0.0
        v_dot = (fxf + fxr - f_aero - rf - rr - m * g * sin_a) / m

    dt = ds / v
    if energy_form:
        v2 = v * v + 2.0 * v_dot * ds
        v_next = math.sqrt(v2) if v2 > 0.0 else -1.0
    else:
        v_next = v + v_dot * dt

    fuel = 0.0
    e_used = 0.0
    e_rec = 0.0
    if mode == 1 or mode == 2:
        if f_comb_full > 0.0:
            fuel = p[P_PMAX] * (fxr / f_comb_full) * dt
        if mode == 1:
            e_used = fxf * ds / p[P_ETA_TR] / 1000.0
    elif mode == 3:
        e_rec = -(fxf + fxr) * ds * p[P_ETA_REC] / 1000.0
    else:
        e_rec = min(brake_tot, -p[P_FDECMAX]) * ds * p[P_ETA_REC] / 1000.0

    flags = 0
    if fzf < 0.0 or fzr < 0.0:
        flags |= FLAG_WHEEL_LIFT
    if sat_f:
        flags |= FLAG_SAT_FRONT
    if sat_r:
        flags |= FLAG_SAT_REAR

    out[O_VNEXT] = v_next
    out[O_VDOT] = v_dot
    out[O_DT] = dt
    out[O_FXF] = fxf
    out[O_FXR] = fxr
    out[O_FAERO] = f_aero
    out[O_RF] = rf
    out[O_RR] = rr
    out[O_FZF] = fzf
    out[O_FZR] = fzr
    out[O_FYF] = f_y
    out[O_FYR] = f_y
    out[O_FTF] = ftf
    out[O_FTR] = ftr
    out[O_FUEL] = fuel
    out[O_EUSED] = e_used
    out[O_EREC] = e_rec
    out[O_FLAGS] = flags
    out[O_FDOWNF] = f_down
    out[O_FDOWNR] = f_down
    return v_next


@njit(cache=True)
def _apex_speed(radius, alpha, low, high, p, v_cap):
    """Steady-state cornering limit by fixed-point iteration on the downforce."""
    if math.isinf(radius):
        return v_cap, True
    m = p[P_M]
    cz_eff = p[P_CZ] * (p[P_CDOWN] if high else 1.0)
    mu_eff = p[P_MU] * (p[P_CADH] if low else 1.0)
    v = 0.0
    for _ in range(100):
        f_aero, f_down = _aero(v, p[P_RHO], p[P_CX], cz_eff, p[P_S])
        fzf, fzr = _loads(0.0, alpha, f_aero, f_down, f_down, m, p[P_G], p[P_H], p[P_HAERO], p[P_L])
        fz = max(min(fzf, fzr), 0.0)
        v_new = math.sqrt(mu_eff * fz * 2.0 * radius / m)
        if v_new >= v_cap:
            return v_cap, True
        if abs(v_new - v) < 1e-6:
            return v_new, True
        v = v_new
    return v, False


@njit(cache=True)
def _table_lookup(table, v):
    x = v / V_TABLE_STEP
    i = int(x)
    if i >= table.size - 1:
        return table[table.size - 1]
    if i < 0:
        return table[0]
    w = x - i
    return table[i] * (1.0 - w) + table[i + 1] * w


@njit(cache=True)
def _braking_envelope(v_lim, alpha, radius, low, high, p, ds, f_el_tab, f_comb_tab, energy_form):
    """Backward max-deceleration envelope around the closed lap."""
    n = v_lim.size
    env = v_lim.copy()
    k_star = 0
    for k in range(n):
        if v_lim[k] < v_lim[k_star]:
            k_star = k
    out = np.empty(N_OUT)
    for j in range(1, n + 1):
        k = (k_star - j) % n
        nxt = (k + 1) % n
        target = env[nxt]
        hi = V_CAP
        fe = _table_lookup(f_el_tab, hi)
        fc = _table_lookup(f_comb_tab, hi)
        vn = _step(hi, alpha[k], radius[k], low[k], high[k], 4, FULL_BRAKE, 1.0, 1.0, fe, fc, p, ds,
                   energy_form, out)
        if vn <= target:
            v_back = hi
        else:
            lo = target
            for _ in range(60):
                mid = 0.5 * (lo + hi)
                fe = _table_lookup(f_el_tab, mid)
                fc = _table_lookup(f_comb_tab, mid)
                vn = _step(mid, alpha[k], radius[k], low[k], high[k], 4, FULL_BRAKE, 1.0, 1.0, fe, fc,
                           p, ds, energy_form, out)
                if vn > target:
                    hi = mid
                else:
                    lo = mid
                if hi - lo < 1e-10:
                    break
            v_back = lo
        env[k] = min(v_lim[k], v_back)
    return env


@njit(cache=True)
def _solve(lo, hi, g_lo, g_hi, x0, slope, target, v, alpha, radius, low, high, mode, fe, fc, p, ds,
           energy_form, out):
    """Largest command in [lo, hi] whose step ends at or below ``target``.

    The command is the throttle fraction (modes 1-2) or the braking force
    (mode 4); the step end speed increases with it.  A few Newton steps from
    ``x0`` with the force-balance ``slope`` usually land within tolerance;
    otherwise Illinois-type regula falsi on the bracket finishes the job and
    returns its low side.
    """
    tol = 1e-10
    x = min(max(x0, lo), hi)
    x_prev = np.nan
    g_prev = np.nan
    for _ in range(4):
        g = _cmd_step(x, mode, v, alpha, radius, low, high, fe, fc, p, ds, energy_form, out) - target
        if g <= 0.0:
            if x > lo or np.isnan(g_lo):
                lo, g_lo = x, g
            if g > -tol:
                return x
        else:
            hi, g_hi = x, g
        if not np.isnan(x_prev) and x != x_prev:
            sec = (g - g_prev) / (x - x_prev)
            if sec > 0.0:
                slope = sec
        x_prev, g_prev = x, g
        x = min(max(x - (g + 0.5 * tol) / slope, lo), hi)
    if np.isnan(g_lo):
        g_lo = _cmd_step(lo, mode, v, alpha, radius, low, high, fe, fc, p, ds, energy_form, out) - target
    if g_lo > 0.0:
        return lo
    if np.isnan(g_hi):
        g_hi = _cmd_step(hi, mode, v, alpha, radius, low, high, fe, fc, p, ds, energy_form, out) - target
    if g_hi <= 0.0:
        return hi
    side = 0
    for _ in range(60):
        x = hi - g_hi * (hi - lo) / (g_hi - g_lo)
        if not (lo < x < hi):
            x = 0.5 * (lo + hi)
        g = _cmd_step(x, mode, v, alpha, radius, low, high, fe, fc, p, ds, energy_form, out) - target
        if g <= 0.0:
            lo, g_lo = x, g
            if side == -1:
                g_hi *= 0.5
            side = -1
            if g > -tol:
                break
        else:
            hi, g_hi = x, g
            if side == 1:
                g_lo *= 0.5
            side = 1
        if hi - lo <= 1e-12 * (abs(lo) + abs(hi) + 1.0):
            break
    return lo


@njit(cache=True)
def _cmd_step(x, mode, v, alpha, radius, low, high, fe, fc, p, ds, energy_form, out):
    if mode == 4:
        return _step(v, alpha, radius, low, high, 4, x, 1.0, 1.0, fe, fc, p, ds, energy_form, out)
    return _step(v, alpha, radius, low, high, mode, 0.0, x, x, fe, fc, p, ds, energy_form, out)


@njit(cache=True)
def _run(k0, n_steps, v0, alpha, radius, low, high, region, ban, env, e_budget, f_budget,
         mode_trace, stop_ref, p, ds, f_el_tab, f_comb_tab, energy_form,
         v_out, mode_out, led_out, e_rem_out, f_rem_out):
    """Forward driver loop.

    Propulsion mode per point comes from ``mode_trace`` when it is non-empty,
    otherwise from the per-region budgets.  Braking is always envelope driven.
    Returns (status, last index, v_end, steps taken).
    """
    n = alpha.size
    e_rem = e_budget.copy()
    f_rem = f_budget.copy()
    use_trace = mode_trace.size > 0
    use_stop = stop_ref.size > 0
    out = np.empty(N_OUT)
    v = v0
    tol_rel = 1e-6
    for i in range(n_steps):
        k = (k0 + i) % n
        nxt = (k + 1) % n
        if v > env[k] * (1.0 + tol_rel) + 1e-6:
            return ST_APEX, k, v, i
        j = region[k] - 1
        if use_trace:
            mode = mode_trace[k]
            if mode == 4:
                mode = 2
        elif f_rem[j] > 0.0:
            if e_rem[j] > 0.0 and not ban[k]:
                mode = 1
            else:
                mode = 2
        else:
            mode = 3
        fe = _table_lookup(f_el_tab, v)
        fc = _table_lookup(f_comb_tab, v)
        frac_f = 1.0
        frac_r = 1.0
        f_dec = 0.0
        target = env[nxt]
        vn = _step(v, alpha[k], radius[k], low[k], high[k], mode, f_dec, frac_f, frac_r, fe, fc, p,
                   ds, energy_form, out)
        if vn > target:
            m_ = p[P_M]
            resist = out[O_FAERO] + out[O_RF] + out[O_RR] + m_ * p[P_G] * math.sin(alpha[k])
            if energy_form:
                need = m_ * (target * target - v * v) / (2.0 * ds) + resist
                slope_f = ds / (m_ * max(target, 1e-3))
            else:
                need = m_ * (target - v) * v / ds + resist
                slope_f = ds / (m_ * v)
            full = out[O_FXF] + out[O_FXR]
            if (mode == 1 or mode == 2) and need > 0.0 and full > 0.0:
                frac_f = _solve(0.0, 1.0, np.nan, vn - target, need / full, slope_f * full, target, v,
                                alpha[k], radius[k], low[k], high[k], mode, fe, fc, p, ds,
                                energy_form, out)
                frac_r = frac_f
            else:
                mode = 4
                f_hi = p[P_FSAIL] if mode_trace.size == 0 and f_rem[j] <= 0.0 else 0.0
                f_dec = _solve(-1.0e6, f_hi, np.nan, np.nan, min(need, f_hi), slope_f, target, v,
                               alpha[k], radius[k], low[k], high[k], 4, fe, fc, p, ds, energy_form,
                               out)
            vn = _step(v, alpha[k], radius[k], low[k], high[k], mode, f_dec, frac_f, frac_r, fe, fc,
                       p, ds, energy_form, out)
        if not use_trace:
            # cap spending at the remaining region budgets
            cap_e = False
            cap_f = False
            for _ in range(6):
                changed = False
                if mode == 1 and out[O_EUSED] > e_rem[j]:
                    frac_f = frac_f * e_rem[j] / out[O_EUSED] * (1.0 - 1e-12)
                    changed = True
                    cap_e = True
                if (mode == 1 or mode == 2) and out[O_FUEL] > f_rem[j]:
                    frac_r = frac_r * f_rem[j] / out[O_FUEL] * (1.0 - 1e-12)
                    changed = True
                    cap_f = True
                if not changed:
                    break
                vn = _step(v, alpha[k], radius[k], low[k], high[k], mode, f_dec, frac_f, frac_r, fe,
                           fc, p, ds, energy_form, out)
            e_rem[j] = 0.0 if cap_e else max(e_rem[j] - out[O_EUSED], 0.0)
            f_rem[j] = 0.0 if cap_f else max(f_rem[j] - out[O_FUEL], 0.0)
        v_out[i] = v
        mode_out[i] = mode
        for c in range(N_OUT):
            led_out[i, c] = out[c]
        e_rem_out[i] = e_rem[j]
        f_rem_out[i] = f_rem[j]
        if vn <= 0.0:
            return ST_STALL, k, vn, i + 1
        v = vn
        if use_stop and v >= stop_ref[nxt]:
            return ST_STOPPED, k, v, i + 1
    return ST_OK, (k0 + n_steps - 1) % n, v, n_steps


# ----------------------------------------------------------------------------
# public scalar helpers
# ----------------------------------------------------------------------------

def aero_forces(v: float, params: VehicleParams, high_speed_curve: bool = False) -> dict:
    if v < 0:
        raise ValueError("speed must be nonnegative")
    cz = params.cz * (params.coeff_downforce if high_speed_curve else 1.0)
    f_aero, f_down = _aero(float(v), params.rho, params.cx, cz, params.S)
    return {"F_aero": f_aero, "F_down_f": f_down, "F_down_r": f_down}


def vertical_loads(v: float, v_dot: float, alpha: float, aero: dict, params: VehicleParams) -> dict:
    fzf, fzr = _loads(float(v_dot), float(alpha), aero["F_aero"], aero["F_down_f"], aero["F_down_r"],
                      params.m, params.g, params.h, params.h_aero, params.L)
    return {"F_z_f": fzf, "F_z_r": fzr, "wheel_lift": bool(fzf < 0 or fzr < 0)}


def lateral_force(v: float, curve_radius: float, params: VehicleParams) -> float:
    if math.isinf(curve_radius):
        return 0.0
    return params.m * v * v / (2.0 * curve_radius)


def tire_limits(F_z_f: float, F_z_r: float, v: float, curve_radius: float, params: VehicleParams,
                low_speed_curve: bool = False) -> dict:
    if not curve_radius > 0:
        raise ValueError("curve radius must be positive (inf for straights)")
    mu = params.mu * (params.coeff_adherence if low_speed_curve else 1.0)
    f_y = lateral_force(v, curve_radius, params)
    ftf, sat_f = _tire(float(F_z_f), f_y, mu)
    ftr, sat_r = _tire(float(F_z_r), f_y, mu)
    return {"F_t_f": ftf, "F_t_r": ftr, "F_y_f": f_y, "F_y_r": f_y,
            "saturated_f": bool(sat_f), "saturated_r": bool(sat_r)}


def _curve_interp(curve, x: float) -> tuple[float, bool]:
    xs = np.array([a for a, _ in curve])
    ys = np.array([b for _, b in curve])
    clamped = bool(x < xs[0] or x > xs[-1])
    return float(np.interp(x, xs, ys)), clamped


def engine_rpm(v: float, gear_ratio: float, params: VehicleParams) -> float:
    return v / params.wheel_radius * gear_ratio * 60.0 / (2.0 * math.pi)


def powertrain_thrust(v: float, q: int, mode: PowertrainMode | int, params: VehicleParams) -> dict:
    """Theoretically available wheel thrusts in gear ``q`` (0-based).

    Both thrusts are reported for every mode; whether they are applied is
    decided by :func:`step`.
    """
    if v < 0:
        raise ValueError("speed must be nonnegative")
    if not 0 <= q < len(params.gear_ratios):
        raise ValueError(f"invalid gear index {q}")
    tau = params.gear_ratios[q]
    t_comb, c1 = _curve_interp(params.comb_torque_curve, engine_rpm(v, tau, params))
    t_el, c2 = _curve_interp(params.el_torque_curve, engine_rpm(v, params.tau_el, params))
    return {
        "F_comb_avail": t_comb * tau * params.coeff_engine / params.wheel_radius,
        "F_el_avail": t_el * params.tau_el / params.wheel_radius,
        "rpm_clamped": c1 or c2,
        "mode": PowertrainMode(int(mode)),
    }


def best_gear(v: float, params: VehicleParams) -> int:
    """Gear maximising wheel thrust among gears whose rpm lies on the curve."""
    lo, hi = params.comb_torque_curve[0][0], params.comb_torque_curve[-1][0]
    best, best_f = None, -1.0
    for q, tau in enumerate(params.gear_ratios):
        rpm = engine_rpm(v, tau, params)
        if lo <= rpm <= hi:
            f = float(np.interp(rpm, *zip(*params.comb_torque_curve))) * tau
            if f > best_f:
                best, best_f = q, f
    if best is None:
        # below the curve in first gear or above it in top gear
        best = 0 if engine_rpm(v, params.gear_ratios[0], params) < lo else len(params.gear_ratios) - 1
    return best


def thrust_tables(params: VehicleParams) -> tuple[np.ndarray, np.ndarray]:
    """Full-throttle electric and combustion thrust on a uniform speed grid."""
    vs = np.arange(0.0, V_TABLE_MAX + V_TABLE_STEP / 2, V_TABLE_STEP)
    f_el = np.empty_like(vs)
    f_comb = np.empty_like(vs)
    for i, v in enumerate(vs):
        th = powertrain_thrust(v, best_gear(v, params), PowertrainMode.BOTH, params)
        f_el[i] = th["F_el_avail"]
        f_comb[i] = th["F_comb_avail"]
    return f_el, f_comb


@dataclass
class StepResult:
    v_next: float
    v_dot: float
    dt: float
    fuel: float  # kg
    e_used: float  # kJ
    e_rec: float  # kJ
    ledger: dict
    flags: int


def step(v_k: float, point: dict, mode: PowertrainMode | int, F_dec: float, params: VehicleParams,
         delta_s: float = 2.0, *, gear: int | None = None, energy_form: bool = False) -> StepResult:
    """Advance one grid step at full command in ``mode``.

    ``point`` carries ``alpha``, ``r`` and optionally ``low_speed`` /
    ``high_speed``.  ``F_dec`` (<= 0) is only used in braking mode.
    """
    if not v_k > 0:
        raise ValueError("step requires v_k > 0 (standing starts are not modelled)")
    if F_dec > 0:
        raise ValueError("F_dec must be <= 0")
    q = best_gear(v_k, params) if gear is None else gear
    th = powertrain_thrust(v_k, q, mode, params)
    out = np.empty(N_OUT)
    v_next = _step(float(v_k), float(point.get("alpha", 0.0)), float(point.get("r", math.inf)),
                   bool(point.get("low_speed", False)), bool(point.get("high_speed", False)),
                   int(mode), float(F_dec), 1.0, 1.0, th["F_el_avail"], th["F_comb_avail"],
                   params.packed(), float(delta_s), energy_form, out)
    if v_next <= 0:
        raise StallError(-1, 0.0)
    flags = int(out[O_FLAGS]) | (FLAG_RPM_CLAMP if th["rpm_clamped"] else 0)
    return StepResult(
        v_next=v_next, v_dot=out[O_VDOT], dt=out[O_DT], fuel=out[O_FUEL], e_used=out[O_EUSED],
        e_rec=out[O_EREC], ledger=_ledger_dict(out), flags=flags,
    )


def _ledger_dict(out: np.ndarray) -> dict:
    idx = (O_FXF, O_FXR, O_FAERO, O_RF, O_RR, O_FZF, O_FZR, O_FYF, O_FYR, O_FTF, O_FTR)
    return {name: float(out[i]) for name, i in zip(LEDGER_FIELDS, idx)}


def apex_speed(curve_radius: float, params: VehicleParams, alpha: float = 0.0,
               low_speed_curve: bool = False, high_speed_curve: bool = False) -> float:
    v, _ = _apex_speed(float(curve_radius), float(alpha), low_speed_curve, high_speed_curve,
                       params.packed(), V_CAP)
    return v


# ----------------------------------------------------------------------------
# lap simulation
# ----------------------------------------------------------------------------

@dataclass
class RegionBudgets:
    """Per-region electric (kJ) and fuel (kg) budgets plus a banned-point mask."""

    e_el_kj: np.ndarray
    fuel_kg: np.ndarray
    ban_mask: np.ndarray | None = None

    @classmethod
    def unlimited(cls, n_regions: int, electric: bool = True) -> RegionBudgets:
        e = np.full(n_regions, np.inf if electric else 0.0)
        return cls(e, np.full(n_regions, np.inf))

    @classmethod
    def fuel_capped(cls, sim: LapSimulator, fuel_max_g: float) -> RegionBudgets:
        """Combustion-only budgets: the unlimited lap's per-region fuel use,
        scaled down to ``fuel_max_g`` when it exceeds the cap."""
        geo = sim.geometry
        free = cls.unlimited(geo.n_regions, electric=False)
        lap = sim.run(sim.flying_start_speed(free), free)
        per_region = np.bincount(geo.region - 1, weights=lap.fuel, minlength=geo.n_regions)
        scale = min(1.0, fuel_max_g / 1000.0 / per_region.sum())
        return cls(np.zeros(geo.n_regions), per_region * scale)


@dataclass
class LapResult:
    speed: np.ndarray
    mode: np.ndarray
    dt: np.ndarray
    fuel: np.ndarray  # kg per point
    e_used: np.ndarray  # kJ per point
    e_rec: np.ndarray  # kJ per point
    ledger: dict
    flags: np.ndarray
    v_end: float
    delta_s: float
    e_remaining: np.ndarray = field(default=None)
    fuel_remaining: np.ndarray = field(default=None)

    @property
    def lap_time(self) -> float:
        return float(np.sum(self.dt))

    @property
    def fuel_used(self) -> float:
        return float(np.sum(self.fuel))

    @property
    def e_el_used(self) -> float:
        return float(np.sum(self.e_used))

    @property
    def e_el_rec_kers(self) -> float:
        return float(np.sum(self.e_rec))

    @property
    def cumulative_time(self) -> np.ndarray:
        """Time at which each grid point is reached (n + 1 entries)."""
        return np.concatenate([[0.0], np.cumsum(self.dt)])

    def friction_violations(self, tol: float = 1e-9) -> int:
        lg = self.ledger
        bad_f = np.abs(lg["F_x_f"]) > lg["F_t_f"] + tol
        bad_r = np.abs(lg["F_x_r"]) > lg["F_t_r"] + tol
        return int(np.sum(bad_f) + np.sum(bad_r))

    def summary(self) -> dict:
        return {
            "lap_time": self.lap_time,
            "fuel_used": self.fuel_used,
            "e_el_used": self.e_el_used,
            "e_el_rec_kers": self.e_el_rec_kers,
        }

    def to_csv(self, path, geometry: TrackGeometry | None = None) -> None:
        lines = ["# " + ",".join(f"{k}={v!r}" for k, v in self.summary().items())]
        cols = ["k", "s", "v", "mode", "dt", "fuel", "e_used", "e_rec", *LEDGER_FIELDS]
        lines.append(",".join(cols))
        for k in range(len(self.speed)):
            row = [k, k * self.delta_s, self.speed[k], int(self.mode[k]), self.dt[k], self.fuel[k],
                   self.e_used[k], self.e_rec[k], *(self.ledger[f][k] for f in LEDGER_FIELDS)]
            lines.append(",".join(f"{float(x):.6g}" if isinstance(x, float | np.floating) else str(x)
                                  for x in row))
        Path(path).write_text("\n".join(lines) + "\n")


_LEDGER_COLS = (O_FXF, O_FXR, O_FAERO, O_RF, O_RR, O_FZF, O_FZR, O_FYF, O_FYR, O_FTF, O_FTR)


class LapSimulator:
    """Caches thrust tables, apex limits and the braking envelope for one
    (geometry, params) pair and runs laps against them."""

    def __init__(self, geometry: TrackGeometry, params: VehicleParams, *, energy_form: bool = False):
        self.geometry = geometry
        self.params = params
        self.energy_form = energy_form
        self.p = params.packed()
        self.f_el_tab, self.f_comb_tab = thrust_tables(params)
        geo = geometry
        self._alpha = geo.alpha
        self._radius = geo.radius
        self._low = geo.low_speed
        self._high = geo.high_speed
        self._region = geo.region
        self.v_limit = np.array([
            _apex_speed(geo.radius[k], geo.alpha[k], geo.low_speed[k], geo.high_speed[k], self.p, V_CAP)[0]
            for k in range(geo.n_points)
        ])
        self.envelope = _braking_envelope(self.v_limit, geo.alpha, geo.radius, geo.low_speed,
                                          geo.high_speed, self.p, geo.delta_s, self.f_el_tab,
                                          self.f_comb_tab, energy_form)
        self._no_ban = np.zeros(geo.n_points, dtype=np.bool_)
        self._empty_i = np.zeros(0, dtype=np.int64)
        self._empty_f = np.zeros(0)

    def run(self, v_start: float, budgets: RegionBudgets | None = None,
            mode_trace: np.ndarray | None = None, *, start_index: int = 0,
            n_steps: int | None = None, stop_ref: np.ndarray | None = None,
            raise_errors: bool = True) -> LapResult:
        geo = self.geometry
        if not v_start > 0:
            raise ValueError("v_start must be positive (flying laps only)")
        n = geo.n_points if n_steps is None else n_steps
        if budgets is None:
            budgets = RegionBudgets.unlimited(geo.n_regions)
        ban = self._no_ban if budgets.ban_mask is None else np.asarray(budgets.ban_mask, dtype=np.bool_)
        trace = self._empty_i if mode_trace is None else np.asarray(mode_trace, dtype=np.int64)
        if trace.size and trace.size != geo.n_points:
            raise ValueError("mode trace must have one entry per grid point")
        stop = self._empty_f if stop_ref is None else np.asarray(stop_ref, dtype=float)
        v_out = np.empty(n)
        mode_out = np.empty(n, dtype=np.int64)
        led = np.empty((n, N_OUT))
        e_rem = np.empty(n)
        f_rem = np.empty(n)
        status, k_last, v_end, taken = _run(
            start_index, n, float(v_start), self._alpha, self._radius, self._low, self._high,
            self._region, ban, self.envelope, np.asarray(budgets.e_el_kj, dtype=float),
            np.asarray(budgets.fuel_kg, dtype=float), trace, stop, self.p, geo.delta_s,
            self.f_el_tab, self.f_comb_tab, self.energy_form, v_out, mode_out, led, e_rem, f_rem)
        if raise_errors and status == ST_STALL:
            raise StallError(int(k_last), float(geo.s[k_last]))
        if raise_errors and status == ST_APEX:
            raise InfeasibleApexError(int(k_last), float(geo.s[k_last]), int(geo.section[k_last]))
        t = taken
        return LapResult(
            speed=v_out[:t].copy(), mode=mode_out[:t].copy(), dt=led[:t, O_DT].copy(),
            fuel=led[:t, O_FUEL].copy(), e_used=led[:t, O_EUSED].copy(), e_rec=led[:t, O_EREC].copy(),
            ledger={name: led[:t, c].copy() for name, c in zip(LEDGER_FIELDS, _LEDGER_COLS)},
            flags=led[:t, O_FLAGS].astype(np.int64), v_end=float(v_end), delta_s=geo.delta_s,
            e_remaining=e_rem[:t].copy(), fuel_remaining=f_rem[:t].copy(),
        )

    def flying_start_speed(self, budgets: RegionBudgets | None = None, laps: int = 4) -> float:
        """End speed of repeated laps, i.e. a periodic flying-lap start speed."""
        v = float(self.envelope[0])
        v = min(v, 60.0)
        for _ in range(laps):
            v = min(self.run(v, budgets).v_end, float(self.envelope[0]))
        return v


def simulate_lap(geometry: TrackGeometry, params: VehicleParams, v_start: float,
                 budgets: RegionBudgets | None = None, mode_trace=None, *,
                 energy_form: bool = False) -> LapResult:
    """Simulate one flying lap under per-region budgets or an explicit mode trace."""
    return LapSimulator(geometry, params, energy_form=energy_form).run(v_start, budgets, mode_trace)


def tune_coefficients(geometry: TrackGeometry, params: VehicleParams, reference_speed: np.ndarray,
                      v_start: float | None = None,
                      grid: tuple = (np.linspace(0.8, 1.1, 7),) * 3) -> tuple[VehicleParams, float]:
    """Grid search over (engine, adherence, downforce) coefficients minimising
    the RMS speed error of a no-electric lap against ``reference_speed``."""
    ref = np.asarray(reference_speed, dtype=float)
    if ref.shape != (geometry.n_points,):
        raise ValueError("reference speed must be sampled on the geometry grid")
    best = (params, math.inf)
    budgets = RegionBudgets.unlimited(geometry.n_regions, electric=False)
    for ce in grid[0]:
        for ca in grid[1]:
            for cd in grid[2]:
                cand = params.replace(coeff_engine=float(ce), coeff_adherence=float(ca),
                                      coeff_downforce=float(cd))
                sim = LapSimulator(geometry, cand)
                v0 = ref[0] if v_start is None else v_start
                try:
                    lap = sim.run(min(v0, sim.envelope[0]), budgets)
                except (StallError, InfeasibleApexError):
                    continue
                rms = float(np.sqrt(np.mean((lap.speed - ref) ** 2)))
                if rms < best[1]:
                    best = (cand, rms)
    return best
