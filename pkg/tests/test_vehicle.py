import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lapstrat.synth import make_track
from lapstrat.track import Segment, from_segments
from lapstrat.vehicle import (InfeasibleApexError, LapSimulator, PowertrainMode, RegionBudgets, StallError,
                              VehicleParams, aero_forces, apex_speed, best_gear, engine_rpm, lateral_force,
                              powertrain_thrust, simulate_lap, step, tire_limits, tune_coefficients,
                              vertical_loads)


def straight_track(length=6000.0, ds=2.0):
    third = length / 3
    return from_segments([Segment(third, straight=True), Segment(third, straight=True, sector_break=True),
                          Segment(third, straight=True, sector_break=True)], ds, "straight")


# ----------------------------------------------------------------------------
# forces
# ----------------------------------------------------------------------------

def test_aero_zero_speed(params):
    assert aero_forces(0.0, params) == {"F_aero": 0.0, "F_down_f": 0.0, "F_down_r": 0.0}


def test_aero_hand_value():
    p = VehicleParams(rho=1.225, cx=1.0, S=1.5)
    assert aero_forces(50.0, p)["F_aero"] == pytest.approx(2296.875, rel=1e-12)
    assert aero_forces(50.0, p)["F_down_f"] == pytest.approx(0.25 * 1.225 * 3.0 * 1.5 * 2500, rel=1e-12)


@given(st.floats(0.0, 120.0))
def test_aero_square_law(v):
    p = VehicleParams(coeff_downforce=0.8)
    a, b = aero_forces(v, p, True), aero_forces(2 * v, p, True)
    for k in a:
        assert b[k] == pytest.approx(4 * a[k], rel=1e-12, abs=1e-12)


def test_aero_rejects_negative_speed(params):
    with pytest.raises(ValueError):
        aero_forces(-1.0, params)


def test_static_loads_split_evenly(params):
    f = vertical_loads(0.0, 0.0, 0.0, aero_forces(0.0, params), params)
    assert f["F_z_f"] == pytest.approx(params.m * params.g / 2)
    assert f["F_z_r"] == pytest.approx(params.m * params.g / 2)


def test_acceleration_transfers_load(params):
    aero = aero_forces(30.0, params)
    a = vertical_loads(30.0, 0.0, 0.0, aero, params)
    b = vertical_loads(30.0, 4.0, 0.0, aero, params)
    dz = params.m * 4.0 * params.h / (2 * params.L)
    assert b["F_z_r"] - a["F_z_r"] == pytest.approx(dz)
    assert a["F_z_f"] - b["F_z_f"] == pytest.approx(dz)


def _loads_oracle(p, v, v_dot, alpha):
    """Vertical force sum plus moments about the rear contact patch, solved as
    a linear system."""
    f_aero = 0.5 * p.rho * p.cx * p.S * v * v
    f_down = 0.25 * p.rho * p.cz * p.S * v * v
    w = p.m * p.g
    a = np.array([[1.0, 1.0], [2 * p.L, 0.0]])
    rhs = np.array([w * math.cos(alpha) + 2 * f_down,
                    w * math.cos(alpha) * p.L - (p.m * v_dot + w * math.sin(alpha)) * p.h
                    - f_aero * p.h_aero + f_down * 2 * p.L])
    return np.linalg.solve(a, rhs)


def test_loads_match_moment_oracle(params):
    v, v_dot, alpha = 80.0, 3.0, 0.02
    f = vertical_loads(v, v_dot, alpha, aero_forces(v, params), params)
    np.testing.assert_allclose([f["F_z_f"], f["F_z_r"]], _loads_oracle(params, v, v_dot, alpha), rtol=1e-12)


@settings(max_examples=200)
@given(st.floats(0, 100), st.floats(-40, 20), st.floats(-0.1, 0.1))
def test_load_sum_identity(v, v_dot, alpha):
    p = VehicleParams()
    aero = aero_forces(v, p)
    f = vertical_loads(v, v_dot, alpha, aero, p)
    total = aero["F_down_f"] + aero["F_down_r"] + p.m * p.g * math.cos(alpha)
    assert abs(f["F_z_f"] + f["F_z_r"] - total) <= 1e-6 * p.m * p.g


def test_hard_braking_lifts_rear_wheel(params):
    f = vertical_loads(5.0, -60.0, 0.0, aero_forces(5.0, params), params)
    assert f["wheel_lift"] and f["F_z_r"] < 0


def test_tire_straight_full_adhesion(params):
    t = tire_limits(5000.0, 6000.0, 50.0, math.inf, params)
    assert t["F_t_f"] == pytest.approx(params.mu * 5000.0)
    assert t["F_t_r"] == pytest.approx(params.mu * 6000.0)
    assert t["F_y_f"] == 0.0


def test_tire_friction_circle_boundary():
    # F_y = m v^2 / 2r = 900 * 400 / 200 = 1800; F_ad = 1.5 * 1200 = 1800
    t = tire_limits(1200.0, 1200.0, 20.0, 100.0, VehicleParams(mu=1.5))
    assert t["F_t_f"] == pytest.approx(0.0, abs=1e-6)
    assert not t["saturated_f"]


def test_tire_hand_value():
    p = VehicleParams(m=900.0, mu=1.6)
    t = tire_limits(6000.0, 6000.0, 40.0, 100.0, p)
    assert t["F_y_f"] == pytest.approx(7200.0)
    assert t["F_t_f"] == pytest.approx(math.sqrt(9600.0**2 - 7200.0**2), rel=1e-12)
    assert t["F_t_f"] == pytest.approx(6349.8, abs=0.05)


def test_tire_saturation_flagged(params):
    t = tire_limits(1000.0, 1000.0, 60.0, 50.0, params)
    assert t["F_t_f"] == 0.0 and t["saturated_f"] and t["saturated_r"]


def test_low_speed_adherence_coefficient():
    p = VehicleParams(coeff_adherence=0.9)
    assert tire_limits(5000, 5000, 10, math.inf, p, True)["F_t_f"] == pytest.approx(0.9 * p.mu * 5000)
    assert lateral_force(10.0, math.inf, p) == 0.0


# ----------------------------------------------------------------------------
# powertrain
# ----------------------------------------------------------------------------

def _speed_for_rpm(rpm, tau, p):
    return rpm * 2 * math.pi / 60 * p.wheel_radius / tau


def test_comb_thrust_hand_value():
    p = VehicleParams(comb_torque_curve=((2000.0, 300.0), (6000.0, 500.0), (9000.0, 400.0)),
                      gear_ratios=(3.0,))
    v = _speed_for_rpm(6000.0, 3.0, p)
    assert engine_rpm(v, 3.0, p) == pytest.approx(6000.0)
    th = powertrain_thrust(v, 0, PowertrainMode.COMB_ONLY, p)
    assert th["F_comb_avail"] == pytest.approx(500 * 3 / 0.33)
    assert th["F_comb_avail"] == pytest.approx(4545.45, abs=0.01)
    assert not th["rpm_clamped"]


def test_engine_coefficient_scales_linearly(params):
    v = 40.0
    a = powertrain_thrust(v, 3, PowertrainMode.BOTH, params)
    b = powertrain_thrust(v, 3, PowertrainMode.BOTH, params.replace(coeff_engine=0.9))
    assert b["F_comb_avail"] == pytest.approx(0.9 * a["F_comb_avail"], rel=1e-12)
    assert b["F_el_avail"] == a["F_el_avail"]


def test_braking_mode_still_reports_thrust(params):
    th = powertrain_thrust(40.0, 3, PowertrainMode.BRAKING, params)
    assert th["F_comb_avail"] > 0 and th["F_el_avail"] > 0
    assert th["mode"] is PowertrainMode.BRAKING


def test_rpm_outside_curve_is_clamped(params):
    th = powertrain_thrust(1.0, len(params.gear_ratios) - 1, PowertrainMode.BOTH, params)
    assert th["rpm_clamped"]
    assert th["F_comb_avail"] == pytest.approx(params.comb_torque_curve[0][1] * params.gear_ratios[-1] / 0.33)
    with pytest.raises(ValueError):
        powertrain_thrust(10.0, 99, PowertrainMode.BOTH, params)


def test_best_gear_maximises_thrust(params):
    for v in (20.0, 45.0, 70.0, 90.0):
        q = best_gear(v, params)
        forces = [powertrain_thrust(v, k, 1, params)["F_comb_avail"] for k in range(len(params.gear_ratios))
                  if not powertrain_thrust(v, k, 1, params)["rpm_clamped"]]
        assert powertrain_thrust(v, q, 1, params)["F_comb_avail"] == pytest.approx(max(forces))


# ----------------------------------------------------------------------------
# step
# ----------------------------------------------------------------------------

STRAIGHT = {"alpha": 0.0, "r": math.inf}


def test_step_comb_only_uses_available_thrust(params):
    v = 40.0
    res = step(v, STRAIGHT, PowertrainMode.COMB_ONLY, 0.0, params)
    th = powertrain_thrust(v, best_gear(v, params), 2, params)
    assert res.ledger["F_x_f"] == 0.0
    assert th["F_comb_avail"] < res.ledger["F_t_r"]
    assert res.ledger["F_x_r"] == pytest.approx(th["F_comb_avail"])
    assert res.e_used == 0.0
    assert res.fuel == pytest.approx(params.p_max_per_s * 2.0 / v)
    assert res.dt == pytest.approx(2.0 / v)


def test_step_force_balance(params):
    v = 55.0
    res = step(v, {"alpha": 0.01, "r": 400.0}, PowertrainMode.BOTH, 0.0, params)
    lg = res.ledger
    net = lg["F_x_f"] + lg["F_x_r"] - lg["F_aero"] - lg["R_f"] - lg["R_r"] - params.m * params.g * math.sin(0.01)
    assert res.v_dot == pytest.approx(net / params.m)
    assert res.v_next == pytest.approx(v + res.v_dot * 2.0 / v)
    assert res.e_used == pytest.approx(lg["F_x_f"] * 2.0 / params.eta_el_traction / 1000.0)


def test_step_sailing_recovery(params):
    res = step(50.0, STRAIGHT, PowertrainMode.SAILING, 0.0, params, 2.0)
    assert res.ledger["F_x_f"] + res.ledger["F_x_r"] == pytest.approx(-1500.0)
    assert res.e_rec * 1000.0 == pytest.approx(2400.0)
    assert res.fuel == 0.0


def test_step_braking_saturates_at_tire_limit(params):
    point = {"alpha": 0.0, "r": 60.0}
    res = step(35.0, point, PowertrainMode.BRAKING, -1e6, params)
    lg = res.ledger
    assert lg["F_x_f"] + lg["F_x_r"] == pytest.approx(-(lg["F_t_f"] + lg["F_t_r"]))
    assert res.e_rec == pytest.approx(4000.0 * 2.0 * 0.8 / 1000.0)


def test_step_light_braking_credits_full_force(params):
    res = step(50.0, STRAIGHT, PowertrainMode.BRAKING, -3000.0, params)
    assert res.ledger["F_x_f"] + res.ledger["F_x_r"] == pytest.approx(-3000.0)
    assert res.e_rec == pytest.approx(3000.0 * 2.0 * 0.8 / 1000.0)


def test_step_errors(params):
    with pytest.raises(ValueError):
        step(0.0, STRAIGHT, 1, 0.0, params)
    with pytest.raises(ValueError):
        step(10.0, STRAIGHT, 4, 10.0, params)
    with pytest.raises(StallError):
        step(1.0, STRAIGHT, PowertrainMode.BRAKING, -20000.0, params, 2.0)


def test_energy_form_step(params):
    res = step(40.0, STRAIGHT, PowertrainMode.SAILING, 0.0, params, energy_form=True)
    assert res.v_next ** 2 == pytest.approx(40.0**2 + 2 * res.v_dot * 2.0)


def test_apex_speed_self_consistent(params):
    r = 80.0
    v = apex_speed(r, params)
    aero = aero_forces(v, params)
    f = vertical_loads(v, 0.0, 0.0, aero, params)
    f_ad = params.mu * min(f["F_z_f"], f["F_z_r"])
    assert lateral_force(v, r, params) == pytest.approx(f_ad, rel=1e-6)
    assert apex_speed(math.inf, params) == 150.0


# ----------------------------------------------------------------------------
# laps
# ----------------------------------------------------------------------------

def test_zero_budgets_cannot_hold_speed(oval, params):
    empty = RegionBudgets(np.zeros(oval.n_regions), np.zeros(oval.n_regions))
    sim = LapSimulator(oval, params)
    try:
        lap = sim.run(30.0, empty)
    except (StallError, InfeasibleApexError):
        return
    assert np.all(lap.fuel == 0) and np.all(lap.e_used == 0)
    assert np.all(np.isin(lap.mode, [PowertrainMode.SAILING, PowertrainMode.BRAKING]))
    assert lap.v_end < 30.0


def test_terminal_speed_monotone(params):
    geo = straight_track()
    lap = simulate_lap(geo, params, 30.0)
    assert np.all(np.diff(lap.speed) >= 0)
    # near the drag limit the remaining acceleration is small
    last = step(lap.speed[-1], STRAIGHT, PowertrainMode.BOTH, 0.0, params)
    assert 0 <= last.v_dot < 0.05 * step(30.0, STRAIGHT, 1, 0.0, params).v_dot


def test_electric_budget_never_slows_straight(params):
    geo = straight_track(3000.0)
    sim = LapSimulator(geo, params)
    with_el = sim.run(40.0, RegionBudgets.unlimited(geo.n_regions, electric=True))
    without = sim.run(40.0, RegionBudgets.unlimited(geo.n_regions, electric=False))
    assert with_el.lap_time <= without.lap_time
    assert np.all(with_el.speed >= without.speed - 1e-12)


def test_lap_time_is_sum_of_steps(oval, params):
    sim = LapSimulator(oval, params)
    lap = sim.run(sim.flying_start_speed())
    assert lap.lap_time == pytest.approx(np.sum(oval.delta_s / lap.speed), abs=1e-9)
    assert lap.cumulative_time[-1] == pytest.approx(lap.lap_time, abs=1e-9)
    assert lap.e_el_used == np.sum(lap.e_used)
    assert lap.fuel_used == np.sum(lap.fuel)


def test_grid_refinement_on_oval(params):
    times = {}
    for ds in (2.0, 1.0, 0.1):
        sim = LapSimulator(make_track("oval-1km", ds), params)
        times[ds] = sim.run(sim.flying_start_speed()).lap_time
    assert abs(times[2.0] - times[0.1]) / times[0.1] < 0.005
    assert abs(times[2.0] - times[1.0]) / times[1.0] < 0.002


def test_ledger_respects_friction_circle_and_loads(bahrain, params):
    sim = LapSimulator(bahrain, params)
    lap = sim.run(sim.flying_start_speed())
    assert lap.friction_violations(1e-9) == 0
    lg = lap.ledger
    down = 0.25 * params.rho * params.S * lap.speed ** 2 * params.cz * np.where(
        bahrain.high_speed, params.coeff_downforce, 1.0)
    total = 2 * down + params.m * params.g * np.cos(bahrain.alpha)
    assert np.max(np.abs(lg["F_z_f"] + lg["F_z_r"] - total)) <= 1e-6 * params.m * params.g


def test_lap_rejects_standing_start(oval, params):
    with pytest.raises(ValueError):
        simulate_lap(oval, params, 0.0)


def test_lap_csv_export(oval, params, tmp_path):
    lap = simulate_lap(oval, params, 40.0)
    lap.to_csv(tmp_path / "lap.csv", oval)
    lines = (tmp_path / "lap.csv").read_text().splitlines()
    assert lines[0].startswith("# lap_time=")
    assert len(lines) == oval.n_points + 2


def test_params_yaml_round_trip(tmp_path):
    p = VehicleParams(coeff_engine=0.95, mu=1.55)
    p.to_yaml(tmp_path / "v.yaml")
    assert VehicleParams.from_yaml(tmp_path / "v.yaml") == p
    with pytest.raises(ValueError):
        VehicleParams(eta_el_rec=1.5)
    with pytest.raises(ValueError):
        VehicleParams(F_sail=10.0)


def test_tune_recovers_engine_coefficient(oval, params):
    truth = params.replace(coeff_engine=0.9)
    sim = LapSimulator(oval, truth)
    budgets = RegionBudgets.unlimited(oval.n_regions, electric=False)
    v0 = sim.flying_start_speed(budgets)
    ref = sim.run(v0, budgets).speed
    grid = (np.array([0.85, 0.9, 0.95, 1.0]), np.array([1.0]), np.array([1.0]))
    best, rms = tune_coefficients(oval, params, ref, v0, grid)
    assert best.coeff_engine == pytest.approx(0.9)
    assert rms < 1e-9
