"""Scenario loading, assembly orchestration, and export contracts.

The end-to-end oracle is the shipped single-part scenario: one full
pick-and-place cycle whose phase records, obstacle bookkeeping, audit
results, and report hash are checked against the documented contracts.
Loader tests exercise every validation path with minimal dicts.
"""

import json
import os

import numpy as np
import pytest
import yaml

from freeflyer import collision, harness
from freeflyer.errors import ScenarioError
from freeflyer.harness import (AssemblyPhase, PartSpec, export_run,
                               load_scenario, report_hash, rest_state,
                               run_assembly, scenario_from_dict)
from freeflyer.scenarios import scenario_path


def minimal(**over):
    d = {"seed": 1}
    d.update(over)
    return d


def two_parts(d1=(0.9, 0.0, -0.3), d2=(0.9, 0.5, -0.3), **over):
    return minimal(parts=[
        {"name": "a", "goal_center": list(d1)},
        {"name": "b", "goal_center": list(d2)},
    ], **over)


# -- loader: defaults and validation ----------------------------------------


def test_defaults_applied():
    cfg = scenario_from_dict(minimal())
    assert cfg.h == pytest.approx(0.1)
    assert cfg.robot.n_m == 2
    assert cfg.placement_tolerance == pytest.approx(0.08)
    assert cfg.grasp_angle == pytest.approx(np.pi / 4)
    assert cfg.parts == []
    assert cfg.resolved["mpc"]["horizon"] == 10
    assert cfg.resolved["planner"]["max_iterations"] == 1500
    assert cfg.resolved["placement"]["tolerance"] == pytest.approx(0.08)


def test_overrides_echoed_in_resolved():
    cfg = scenario_from_dict(minimal(smoother={"v_ref": 0.15}))
    assert cfg.smoother_opts["v_ref"] == pytest.approx(0.15)
    assert cfg.resolved["smoother"]["v_ref"] == pytest.approx(0.15)
    # untouched keys keep their defaults
    assert cfg.resolved["smoother"]["iterations"] == 120


def test_seed_required():
    with pytest.raises(ScenarioError, match="seed"):
        scenario_from_dict({})


@pytest.mark.parametrize("bad", ["7", 1.5, True, None])
def test_seed_must_be_integer(bad):
    with pytest.raises(ScenarioError, match="seed"):
        scenario_from_dict({"seed": bad})


def test_unknown_top_level_key_rejected():
    with pytest.raises(ScenarioError, match="plannr"):
        scenario_from_dict(minimal(plannr={}))


def test_unknown_nested_key_rejected():
    with pytest.raises(ScenarioError, match="horizont.*mpc"):
        scenario_from_dict(minimal(mpc={"horizont": 5}))


def test_root_must_be_mapping():
    with pytest.raises(ScenarioError, match="mapping"):
        scenario_from_dict([1, 2])


def test_workspace_bounds_checked():
    bad = {"position_low": [1, -1, -1], "position_high": [0, 1, 1]}
    with pytest.raises(ScenarioError, match="low < high"):
        scenario_from_dict(minimal(workspace=bad))


def test_overlapping_goals_name_both_parts():
    with pytest.raises(ScenarioError) as err:
        scenario_from_dict(two_parts(d2=(0.9, 0.1, -0.3)))
    assert "a" in str(err.value) and "b" in str(err.value)


def test_duplicate_part_names_rejected():
    with pytest.raises(ScenarioError, match="duplicate"):
        scenario_from_dict(minimal(parts=[
            {"name": "a", "goal_center": [0.9, 0.0, -0.3]},
            {"name": "a", "goal_center": [0.9, 0.5, -0.3]},
        ]))


def test_part_requires_goal_center():
    with pytest.raises(ScenarioError, match="goal_center"):
        scenario_from_dict(minimal(parts=[{"name": "x"}]))


def test_part_semi_axes_validated():
    with pytest.raises(ScenarioError):
        scenario_from_dict(minimal(parts=[
            {"name": "x", "goal_center": [0.9, 0, -0.3],
             "semi_axes": [0.0, 0.1, 0.1]}]))


def test_margin_ordering_enforced():
    with pytest.raises(ScenarioError, match="margin"):
        scenario_from_dict(minimal(margins={"planning": 1.1,
                                            "control": 1.2}))
    with pytest.raises(ScenarioError, match=">= 1"):
        scenario_from_dict(minimal(margins={"planning": 0.9,
                                            "control": 0.9}))


def test_armless_robot_rejects_parts():
    with pytest.raises(ScenarioError, match="arm"):
        scenario_from_dict(minimal(
            robot="free_base",
            parts=[{"name": "x", "goal_center": [0.9, 0, -0.3]}]))


def test_unknown_robot_rejected():
    with pytest.raises(ScenarioError, match="nonesuch"):
        scenario_from_dict(minimal(robot="nonesuch"))


def test_start_state_length_checked():
    with pytest.raises(ScenarioError, match="start_state"):
        scenario_from_dict(minimal(start_state=[0.0, 0.0]))


def test_rest_state_layout(astrobee):
    x = rest_state(astrobee, [0.3, -0.2, 0.1], [0.5, -0.5])
    assert x.shape == (astrobee.n_x,)
    np.testing.assert_allclose(x[:3], [0.3, -0.2, 0.1])
    np.testing.assert_allclose(x[6:8], [0.5, -0.5])
    assert np.all(x[3:6] == 0) and np.all(x[8:] == 0)


# -- loader: files -----------------------------------------------------------


def test_load_scenario_missing_file(tmp_path):
    with pytest.raises(ScenarioError, match="not found"):
        load_scenario(str(tmp_path / "nope.yaml"))


def test_load_scenario_parse_error_names_line(tmp_path):
    p = tmp_path / "broken.yaml"
    p.write_text("seed: 1\nparts: [\n")
    with pytest.raises(ScenarioError, match="line"):
        load_scenario(str(p))


def test_load_scenario_name_from_filename(tmp_path):
    p = tmp_path / "bench.yaml"
    p.write_text("seed: 4\nrobot: free_base\n")
    cfg = load_scenario(str(p))
    assert cfg.name == "bench"
    assert cfg.seed == 4


def test_shipped_pyramid10_layout():
    cfg = load_scenario(scenario_path("pyramid10"))
    assert cfg.name == "pyramid10"
    assert len(cfg.parts) == 10
    z = np.array([p.goal_center[2] for p in cfg.parts])
    assert np.sum(np.isclose(z, -0.30)) == 6     # bottom layer
    assert np.sum(np.isclose(z, -0.16)) == 3     # second layer
    assert np.sum(np.isclose(z, -0.02)) == 1     # apex
    # the ten goal ellipsoids are mutually disjoint by construction
    names = [p.name for p in cfg.parts]
    assert len(set(names)) == 10


def test_shipped_scenario_names_resolve():
    for name in ("astrobee", "corridor", "pyramid10"):
        assert os.path.exists(scenario_path(name))
    with pytest.raises(ScenarioError, match="nope"):
        scenario_path("nope")


# -- dense audit helper ------------------------------------------------------


def test_dense_audit_matches_analytic_minimum():
    # unit sphere at the origin; a straight pass at height z = 0.5 has
    # minimum quadratic form 0.25 at the closest point
    field = collision.ObstacleField([
        collision.EllipsoidObstacle.from_semi_axes(
            np.zeros(3), np.ones(3))])
    positions = np.array([[-2.0, 0.0, 0.5], [2.0, 0.0, 0.5]])
    q = harness._dense_min_clearance(field, positions, h_check=0.005)
    assert q == pytest.approx(0.25, abs=2e-3)
    inside = np.array([[-2.0, 0.0, 0.0], [2.0, 0.0, 0.0]])
    assert harness._dense_min_clearance(field, inside, h_check=0.005) \
        == pytest.approx(0.0, abs=2e-3)


def test_part_obstacle_shape():
    part = PartSpec(name="p", semi_axes=[0.1, 0.2, 0.3],
                    goal_center=[1.0, 0.0, -0.3])
    obs = part.obstacle()
    assert obs.name == "p"
    np.testing.assert_allclose(obs.center_at(0), [1.0, 0.0, -0.3])


# -- zero-part runs ----------------------------------------------------------


def test_zero_part_run_is_empty_success():
    cfg = scenario_from_dict({"seed": 2, "robot": "free_base"})
    report = run_assembly(cfg)
    assert report.success
    assert report.parts_placed == 0 and report.n_parts == 0
    assert report.phases == [] and report.obstacle_counts == []
    assert report.total_mpc_steps == 0
    assert report.min_quad == np.inf
    again = run_assembly(scenario_from_dict({"seed": 2,
                                             "robot": "free_base"}))
    assert report.hash_value() == again.hash_value()


def test_zero_part_export_header_only(tmp_path):
    cfg = scenario_from_dict({"seed": 2, "robot": "free_base"})
    report = run_assembly(cfg)
    export_run(report, str(tmp_path))
    diag = (tmp_path / "diagnostics.csv").read_text().strip().splitlines()
    assert len(diag) == 1 and diag[0].startswith("part,phase,step")
    series = (tmp_path / "timeseries.csv").read_text().strip().splitlines()
    assert len(series) == 1 and series[0].startswith("t,")
    assert (tmp_path / "report.json").exists()
    assert os.listdir(tmp_path / "trajectories") == []
    stored = (tmp_path / "report_hash.txt").read_text().strip()
    assert stored == report.hash_value()


# -- single-part end-to-end --------------------------------------------------


@pytest.fixture(scope="module")
def single_part_report():
    cfg = load_scenario(scenario_path("astrobee"))
    return cfg, run_assembly(cfg)


def test_phase_sequence_is_the_enum_order(single_part_report):
    _, report = single_part_report
    want = [p.value for p in AssemblyPhase]
    assert want == ["move_to_printer", "grasp", "move_to_goal",
                    "place", "retract"]
    assert [ph.phase for ph in report.phases] == want


def test_single_part_place_succeeds(single_part_report):
    cfg, report = single_part_report
    assert report.success and report.parts_placed == 1
    assert all(ph.success for ph in report.phases)
    assert report.min_quad >= 1.0
    for ph in report.phases:
        if ph.n_steps > 0:
            assert ph.audit_ok
    # field while the only part is worked: just the printer
    assert report.obstacle_counts == [1]


def test_grasp_and_retract_hit_arm_targets(single_part_report):
    _, report = single_part_report
    grasp = report.trajectories["keystone/grasp"]
    retract = report.trajectories["keystone/retract"]
    assert abs(grasp.states[-1, 6] - np.pi / 4) <= 0.01
    assert abs(retract.states[-1, 6]) <= 0.01


def test_transits_end_within_placement_tolerance(single_part_report):
    cfg, report = single_part_report
    by_phase = {ph.phase: ph for ph in report.phases}
    assert by_phase["move_to_printer"].terminal_error \
        <= cfg.placement_tolerance
    assert by_phase["move_to_goal"].terminal_error \
        <= cfg.placement_tolerance
    assert by_phase["place"].pose_error <= cfg.placement_tolerance


def test_phase_clocks_are_contiguous(single_part_report):
    _, report = single_part_report
    t = 0.0
    for key, traj in report.trajectories.items():
        assert traj.t0 == pytest.approx(t, abs=1e-9)
        t += traj.duration


def test_repeated_run_hashes_identically(single_part_report):
    _, first = single_part_report
    cfg = load_scenario(scenario_path("astrobee"))
    second = run_assembly(cfg)
    assert first.hash_value() == second.hash_value()


def test_report_hash_ignores_timing_fields(single_part_report):
    _, report = single_part_report
    d = report.to_dict()
    d["mean_solve_ms"] = 1e9
    d["wall_time_s"] = -3.0
    d["phases"][0]["solve_ms_mean"] = 42.0
    assert report_hash(d) == report.hash_value()
    d2 = report.to_dict()
    d2["seed"] = report.seed + 1
    assert report_hash(d2) != report.hash_value()


def test_export_is_a_pure_function_of_the_report(single_part_report,
                                                 tmp_path):
    _, report = single_part_report
    a, b = tmp_path / "a", tmp_path / "b"
    export_run(report, str(a))
    export_run(report, str(b))
    for root, _, files in os.walk(a):
        for f in files:
            pa = os.path.join(root, f)
            pb = pa.replace(str(a), str(b), 1)
            assert open(pa, "rb").read() == open(pb, "rb").read(), f
    # trajectory files carry one row per knot
    name = "000_keystone_move_to_printer.csv"
    rows = (a / "trajectories" / name).read_text().strip().splitlines()
    traj = report.trajectories["keystone/move_to_printer"]
    assert len(rows) == traj.n_knots + 1  # header + knots


def test_export_report_json_round_trips(single_part_report, tmp_path):
    _, report = single_part_report
    export_run(report, str(tmp_path))
    loaded = json.loads((tmp_path / "report.json").read_text())
    assert loaded["parts_placed"] == 1
    assert loaded["scenario"] == "astrobee"
    assert report_hash(loaded) == report.hash_value()


# -- failure handling --------------------------------------------------------


@pytest.fixture(scope="module")
def impossible_two_part():
    # a placement tolerance no tracked transit can meet, so every part
    # fails at its first transit
    return two_parts(robot="astrobee",
                     placement={"tolerance": 1e-9})


def test_failures_recorded_and_run_continues(impossible_two_part):
    report = run_assembly(scenario_from_dict(impossible_two_part))
    assert not report.success
    assert report.parts_placed == 0
    # one aborted phase per part: the run moved on to part b
    assert [ph.part for ph in report.phases] == ["a", "b"]
    assert all(ph.phase == "move_to_printer" for ph in report.phases)
    assert all(not ph.success for ph in report.phases)
    assert all(ph.detail for ph in report.phases)


def test_strict_stops_at_first_failure(impossible_two_part):
    report = run_assembly(scenario_from_dict(impossible_two_part),
                          strict=True)
    assert not report.success
    assert [ph.part for ph in report.phases] == ["a"]
