import numpy as np
import pytest

from conftest import case_a_scenario, case_b_graph, case_b_model, case_b_scenario
from oracles import oracle_filter_class
from dzcbf import sim
from dzcbf.dynamics import ConsensusModel
from dzcbf.graph import CommGraph, GraphError
from dzcbf.sim import (RunMetrics, Scenario, SimulationError, config_label, format_row, nominal_input,
                       run_closed_loop, run_study)

CASE_B_EQUILIBRIUM = [4.0, 4.0, 3.0, 2.0, 1.0, 1.0, 0.0, 0.0]


def test_nominal_input_examples():
    a = case_a_scenario()
    assert nominal_input(a, a.x0, 0) == pytest.approx([22.5])
    assert nominal_input(a, a.x0, 3) == pytest.approx([45.0])
    b = case_b_scenario()
    assert nominal_input(b, b.x0, 0) == pytest.approx([10.0, 10.0])
    assert nominal_input(b, b.x0, 3) == pytest.approx([35.0, 35.0])
    with pytest.raises(GraphError):
        nominal_input(a, a.x0, 1)


def test_scenario_validation():
    with pytest.raises(ValueError):
        case_a_scenario(dt=0.0)
    g = case_b_graph()
    with pytest.raises(ValueError):
        Scenario(g, case_b_model(g), {0: [1, 1], 3: [5, 5]}, 10.0, [0.0] * 7)
    with pytest.raises(GraphError):
        Scenario(g, case_b_model(g), {0: [1, 1]}, 10.0, [0.0] * 8)
    with pytest.raises(GraphError):
        case_a_scenario(betas={(1, 2): (0.5, 0.5)})
    with pytest.raises(ValueError):
        case_a_scenario(betas={(0, 3): (0.7, 0.7)})


def test_config_labels():
    assert config_label(50, 1.0) == "50 sims"
    assert config_label(50, 2.0) == "50 sims, 2x bounds"
    assert config_label(50, 0.5) == "50 sims, 0.5x bounds"
    row = {"configuration": "5 sims", "control_cost": None, "min_h": None, "violations": 3, "violating_runs": 1}
    assert format_row(row).split()[-2:] == ["3", "(1)"]


def test_unfiltered_case_a_violates():
    res = run_closed_loop(case_a_scenario(), use_filter=False)
    m = res.metrics
    assert m.violation_flag and m.violation_count > 0
    assert m.min_h_after_warmup is None
    assert m.control_cost == 0.0
    assert np.array_equal(res.trajectory.inputs, res.u_nominal)


def test_unfiltered_case_b_violates():
    res = run_closed_loop(case_b_scenario(), use_filter=False)
    assert res.metrics.violation_flag


def test_filtered_run_requires_datasets():
    with pytest.raises(ValueError):
        run_closed_loop(case_a_scenario(), None, None, use_filter=True)


def test_zero_leader_equilibrium_is_constant():
    # without leaders every edge would be follower-follower and fail the leader assumption
    g = CommGraph.from_lists(3, [], [])
    model = ConsensusModel(g, {}, n=1)
    scn = Scenario(g, model, {}, 1.0, [2.0, 1.0, 0.0], horizon=1.0)
    res = run_closed_loop(scn, use_filter=False)
    assert np.allclose(res.trajectory.states, res.trajectory.states[0], atol=1e-15)
    assert res.metrics.control_cost == 0.0
    assert not res.metrics.violation_flag


def test_trajectory_shapes_and_times():
    res = run_closed_loop(case_a_scenario(horizon=0.5), use_filter=False)
    t = res.trajectory
    assert t.states.shape == (51, 4) and t.inputs.shape == (51, 4)
    assert t.times[-1] == pytest.approx(0.5)
    assert set(res.h) == {"e0-1_pair", "e0-2_pair", "e0-3_pair", "e2-3_pair"}
    assert res.metrics.num_steps == 50


def test_degenerate_leader_direction_aborts():
    x0 = [1.0, 1.0, 0.5, 0.5, 1.0, 1.0, 1.0, 1.0]
    scn = case_b_scenario(x0=x0)
    with pytest.raises(SimulationError):
        run_closed_loop(scn, use_filter=False)


def _smoothness_constant(scn):
    # |hdot| <= |grad h| |xdot|; pair and ff candidates have |grad h| <= 2 sqrt(2) |xbar|-type terms
    lo, hi = scn.model.state_box
    span = (hi - lo) * np.sqrt(scn.n)
    deg = max(len(scn.graph.neighbors(i)) for i in range(scn.graph.num_agents))
    d_norm = max(np.linalg.norm(np.atleast_1d(v)) for v in scn.model.desired_disp.values())
    umax = max(abs(v) for v in scn.input_box) * np.sqrt(scn.n)
    xdot = deg * (span + d_norm) + umax
    return 4 * span * 2 * xdot


def test_h_series_respects_smoothness_bound():
    for scn in (case_a_scenario(horizon=1.0), case_b_scenario(horizon=1.0)):
        res = run_closed_loop(scn, use_filter=False)
        L = _smoothness_constant(scn)
        for series in res.h.values():
            assert np.max(np.abs(np.diff(series))) <= L * scn.dt


@pytest.mark.parametrize("factory", [case_a_scenario, case_b_scenario])
def test_oracle_bounds_keep_h_nonnegative(factory, monkeypatch):
    scn = factory()
    monkeypatch.setattr(sim, "SafetyFilter", oracle_filter_class(scn.model))
    res = run_closed_loop(scn, {}, {})
    worst = min(float(v.min()) for v in res.h.values())
    assert worst >= -1e-6


def test_oracle_filter_inactive_at_rest_costs_nothing(monkeypatch):
    # a formation equilibrium with every candidate strictly positive (the Case B
    # displacements put the parallel ff candidate exactly on its boundary)
    g = case_b_graph()
    model = ConsensusModel(g, {(0, 1): [1.0, 0.0], (1, 2): [0.0, 1.0], (2, 3): [1.0, 0.0]}, n=2)
    x = [2.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0]
    scn = Scenario(g, model, {0: x[0:2], 3: x[6:8]}, 10.0, x, horizon=0.5)
    assert np.allclose(model.vector_field(np.array(x), np.zeros(8)), 0.0)
    monkeypatch.setattr(sim, "SafetyFilter", oracle_filter_class(model))
    res = run_closed_loop(scn, {}, {})
    assert res.metrics.min_h_after_warmup > 0
    assert res.metrics.control_cost == 0.0
    assert np.array_equal(res.trajectory.states, np.tile(x, (51, 1)))


def test_filtered_case_a_is_safe(case_a_pipeline):
    scn, ds, b = case_a_pipeline
    res = run_closed_loop(scn, ds, b, horizon=2.0)
    assert not res.metrics.violation_flag
    assert res.metrics.min_h_after_warmup > 0


def test_joint_and_per_leader_solutions_agree(case_a_pipeline):
    scn, ds, b = case_a_pipeline
    # raises SimulationError on any step where they differ by more than 1e-5
    res = run_closed_loop(scn, ds, b, horizon=0.5, check_joint=True)
    assert res.metrics.num_steps == 50


def test_closed_loop_is_deterministic(case_a_pipeline):
    scn, ds, b = case_a_pipeline
    r1 = run_closed_loop(scn, ds, b, horizon=0.3)
    r2 = run_closed_loop(scn, ds, b, horizon=0.3)
    assert np.array_equal(r1.trajectory.states, r2.trajectory.states)
    assert np.array_equal(r1.trajectory.inputs, r2.trajectory.inputs)
    assert r1.metrics == r2.metrics


def test_safety_filter_estimator_interface(case_a_pipeline):
    scn, ds, b = case_a_pipeline
    f = sim.SafetyFilter(scn.graph, 1, 1).fit(ds, b)
    assert f.get_params()["rho"] == 100.0
    u, info = f.filter_input(scn.x0, np.array([22.5, 0.0, 0.0, 45.0]))
    assert u.shape == (4,) and u[1] == 0.0 and u[2] == 0.0
    assert set(info["selections"]) == set(ds)
    with pytest.raises(ValueError):
        sim.SafetyFilter(scn.graph, 1, 1).fit({})


def test_run_metrics_dict_roundtrip():
    m = RunMetrics(1.5, None, 3, True, 100, 2, 1)
    assert RunMetrics(**m.as_dict()) == m


def test_study_single_config_single_seed():
    scn = case_a_scenario(dataset=sim.DatasetSpec(horizon=0.2, k=20))
    rows = run_study(scn, [0], [(5, 2.0)], horizon=0.2)
    assert len(rows) == 1
    row = rows[0]
    assert row["configuration"] == "5 sims, 2x bounds"
    assert row["runs"] + row["failed_runs"] == 1
    with pytest.raises(ValueError):
        run_study(scn, [], [(5, 1.0)])
