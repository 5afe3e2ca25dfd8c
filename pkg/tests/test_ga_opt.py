import logging

import numpy as np
import pytest

from lapstrat.ga_opt import (PENALTY_BASE, Evaluator, GAConfig, KersBan, NoFeasibleError, RegulationLimits,
                             StrategyConstraint, fitness, generate_strategy_set, hot_start_genome, is_feasible,
                             random_population, read_strategy_set, run_ga, table2_constraints,
                             write_strategy_set)
from lapstrat.vehicle import LapSimulator, PowertrainMode, RegionBudgets

from scenarios import TOY_LIMITS, toy_evaluator

SMALL = GAConfig(population=60, generations=12, elitism=4, seed=3)
NONE = StrategyConstraint()


@pytest.fixture(scope="module")
def bahrain_eval(bahrain):
    return Evaluator(bahrain)


def test_ban_mask_covers_first_100_m_of_straight_8(bahrain, bahrain_eval):
    spec = StrategyConstraint((KersBan(8, 100.0),))
    mask = spec.ban_mask(bahrain)
    assert mask.sum() == 50
    first = np.flatnonzero(bahrain.region == 8)[0]
    assert np.array_equal(np.flatnonzero(mask), np.arange(first, first + 50))
    genome = np.array([600] * 8 + [170] * 8)
    lap = bahrain_eval.decode(genome, spec)
    assert np.all(lap.ledger["F_x_f"][mask] == 0.0)
    assert np.all(lap.e_used[mask] == 0.0)
    assert np.all(lap.mode[mask] != PowertrainMode.BOTH)
    # consumption resumes right after the ban
    assert lap.mode[first + 50] == PowertrainMode.BOTH


def test_zero_electric_budget_never_uses_mode_1(bahrain_eval):
    lap = bahrain_eval.decode(np.array([0] * 8 + [170] * 8), NONE)
    assert not np.any(lap.mode == PowertrainMode.BOTH)
    assert lap.e_el_used == 0.0


def test_region_budget_spent_on_first_eligible_points(bahrain, bahrain_eval):
    budget = 40
    genome = np.array([budget] + [0] * 7 + [170] * 8)
    lap = bahrain_eval.decode(genome, NONE)
    region = np.flatnonzero(bahrain.region == 1)
    driven = region[np.isin(lap.mode[region], (PowertrainMode.BOTH, PowertrainMode.COMB_ONLY))]
    electric = np.flatnonzero(lap.mode == PowertrainMode.BOTH)
    k = electric.size
    assert k > 0
    assert np.array_equal(electric, driven[:k])
    assert lap.e_used[electric].sum() == pytest.approx(budget, abs=1e-9)
    assert np.cumsum(lap.e_used[electric])[-2] < budget


def test_fitness_equals_lap_time():
    ev = toy_evaluator()
    genome = np.array([250, 300, 400, 400])
    f, lap = ev.fitness(genome, NONE)
    budgets = RegionBudgets(np.array([250.0, 300.0]), np.array([0.4, 0.4]))
    direct = LapSimulator(ev.geometry, ev.params).run(ev.v_start, budgets)
    assert f == direct.lap_time == lap.lap_time
    assert fitness(genome, NONE, ev.geometry, ev.params, TOY_LIMITS, ev.v_start) == f


@pytest.mark.parametrize("base", [[100, 100, 300, 300], [0, 200, 500, 400], [250, 250, 200, 200]])
def test_more_electric_budget_never_hurts(base):
    ev = toy_evaluator()
    f0, _ = ev.fitness(np.array(base), NONE)
    for region in (0, 1):
        richer = np.array(base)
        richer[region] += 100
        assert ev.fitness(richer, NONE)[0] <= f0 + 1e-12


def test_fuel_over_cap_ranks_below_every_feasible(bahrain_eval):
    over = np.array([0] * 8 + [173] * 7 + [1381 - 7 * 173 + 1])
    assert over[8:].sum() == 1382
    f, lap = bahrain_eval.fitness(over, NONE)
    assert lap is None and f == pytest.approx(PENALTY_BASE + 10.0)
    assert not is_feasible(f)


def test_ledger_violation_penalised(bahrain_eval):
    # a lean fuel split ends the lap well below the flying-start speed
    f, lap = bahrain_eval.fitness(np.array([0] * 8 + [170] * 8), NONE)
    viol = bahrain_eval.ledger_violations(lap)
    assert viol["end_speed"] > 0
    assert f > PENALTY_BASE


def test_genome_range_checked(bahrain_eval):
    with pytest.raises(ValueError):
        bahrain_eval.decode(np.array([2301] + [0] * 15), NONE)
    with pytest.raises(ValueError):
        bahrain_eval.decode(np.zeros(10, dtype=int), NONE)


def test_random_population_within_ranges():
    pop = random_population(np.random.default_rng(0), 500, 8, RegulationLimits())
    assert pop.min() >= 0
    assert pop[:, :8].max() <= 2300 and pop[:, 8:].max() <= 1381
    assert np.all(pop[:, :8].sum(axis=1) <= 4924) and np.all(pop[:, 8:].sum(axis=1) <= 1381)


def test_run_ga_deterministic():
    ev = toy_evaluator()
    a = run_ga(ev, NONE, SMALL)
    b = run_ga(ev, NONE, SMALL)
    assert np.array_equal(a.genome, b.genome)
    assert a.lap_time == b.lap_time and a.history == b.history


def test_elitism_keeps_hot_start():
    ev = toy_evaluator()
    hot = np.array([300, 300, 200, 200])
    f_hot, _ = ev.fitness(hot, NONE)
    res = run_ga(ev, NONE, GAConfig(population=30, generations=3, elitism=2, seed=9), hot)
    assert res.fitness <= f_hot
    assert all(b >= a for a, b in zip(res.history[1:], res.history))


def test_population_warning(caplog):
    with caplog.at_level(logging.WARNING):
        run_ga(toy_evaluator(), NONE, GAConfig(population=20, generations=1, elitism=2))
    assert "recommended" in caplog.text


def test_no_feasible_individual_reported(bahrain):
    ev = Evaluator(bahrain, limits=RegulationLimits(gene_e_max=0, gene_f_max=5))
    with pytest.raises(NoFeasibleError) as err:
        run_ga(ev, NONE, GAConfig(population=10, generations=1, elitism=1))
    assert err.value.best_genome.shape == (16,)


def test_kers_ban_lengths(caplog):
    with pytest.raises(ValueError):
        KersBan(1, 40.0)
    with caplog.at_level(logging.WARNING):
        KersBan(5, 70.0)
    assert "70" in caplog.text
    spec = StrategyConstraint.from_dict({"bans": [{"straight": 8, "meters": 100}]})
    assert spec == table2_constraints()[1]
    assert spec.description == "no KERS 0-100 m straight 8"
    assert StrategyConstraint.from_dict(spec.to_dict()) == spec


def test_table2_layouts():
    specs = table2_constraints()
    assert len(specs) == 15 and specs[0].bans == ()
    assert [b.straight for b in specs[8].bans] == [7, 8]


def test_strategy_set_on_oval():
    ev = toy_evaluator()
    specs = [NONE, StrategyConstraint((KersBan(1, 150.0),)), StrategyConstraint((KersBan(2, 200.0),))]
    seen = []
    original = ev.fitness

    def recording(genome, constraint):
        f, lap = original(genome, constraint)
        if lap is not None:
            seen.append((lap, ev.mask(constraint)))
        return f, lap

    ev.fitness = recording
    try:
        res, errors = generate_strategy_set(ev, specs, SMALL)
    finally:
        del ev.fitness
    assert errors == []
    assert [r.lap_time for r in res] == sorted(r.lap_time for r in res)
    times = {r.strategy_id: r.lap_time for r in res}
    assert times[1] <= min(times.values()) * 1.001
    for r in res:
        viol = ev.ledger_violations(r.lap)
        assert viol["e_el"] == viol["fuel"] == viol["kers_balance"] == 0.0
        assert r.lap.e_el_used <= TOY_LIMITS.e_el_max_kj and r.lap.fuel_used <= TOY_LIMITS.fuel_max_g / 1000
    # ban compliance for every simulated individual
    assert seen
    for lap, mask in seen:
        assert np.all(lap.e_used[mask] == 0.0) and np.all(lap.ledger["F_x_f"][mask] <= 0.0)


def test_single_and_duplicate_specs():
    ev = toy_evaluator()
    one, _ = generate_strategy_set(ev, [NONE], SMALL)
    assert len(one) == 1 and one[0].strategy_id == 1
    two, _ = generate_strategy_set(ev, [NONE, NONE], SMALL, cross_seed=False)
    assert abs(two[0].lap_time - two[1].lap_time) / two[0].lap_time < 0.001
    with pytest.raises(ValueError):
        generate_strategy_set(ev, [], SMALL)


def test_hot_start_genome_respects_caps(bahrain, bahrain_eval):
    sim = bahrain_eval.sim
    lap = sim.run(sim.flying_start_speed())
    g = hot_start_genome(lap, bahrain)
    assert g[:8].sum() <= 4924 and g[8:].sum() <= 1381
    assert np.all(g[:8] <= 2300)
    bahrain_eval.check_ranges(g)


def test_strategy_files_round_trip(tmp_path):
    ev = toy_evaluator()
    res, _ = generate_strategy_set(ev, [NONE, StrategyConstraint((KersBan(2, 100.0),))], SMALL)
    write_strategy_set(res, tmp_path)
    back = read_strategy_set(tmp_path, ev)
    assert [s.strategy_id for s in back] == [s.strategy_id for s in res]
    for a, b in zip(res, back):
        assert np.array_equal(a.genome, b.genome) and a.lap_time == b.lap_time
    assert (tmp_path / "index.csv").read_text().startswith("rank,id,lap_time")


def test_specs_for_missing_straights_reported():
    ev = toy_evaluator()
    res, errors = generate_strategy_set(ev, [NONE, StrategyConstraint((KersBan(8, 100.0),))], SMALL)
    assert [r.strategy_id for r in res] == [1]
    assert len(errors) == 1 and errors[0].startswith("spec 2") and "no straight 8" in errors[0]
