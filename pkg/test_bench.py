#!/usr/bin/env python3
"""
Tests for the evaluation harness
Plume RMSE, map exports, scenario loading and benchmark runs of the solver variants
"""

import json
import statistics
import sys
from pathlib import Path

import numpy as np
import pytest

# Add mapping path
mapping_path = Path(__file__).parent / "mapping"
sys.path.insert(0, str(mapping_path))

from src.gabp_mapping.bench import MapExport, compare_schedules, rmse_plume, run_benchmark, sensitivity_sweep
from src.gabp_mapping.dynamic import GasMapper
from src.gabp_mapping.errors import ScenarioError
from src.gabp_mapping.graph import HyperParams, Measurement
from src.gabp_mapping.occupancy import VoxelGrid, VoxelIndex
from src.gabp_mapping.plume import run_sweep
from src.gabp_mapping.scenario import Scenario

SCENARIOS = mapping_path / "scenarios"

SMALL_ROOM = {
    "name": "small-room",
    "seed": 3,
    "grid": {
        "extent": [8.0, 6.0, 3.0],
        "resolution": 1.0,
        "boxes": [{"lo": [4.0, 0.0, 0.0], "hi": [4.9, 1.9, 2.9]}],
    },
    "sources": [{"position": [1.5, 3.5, 1.5], "strength": 2000.0}],
    "wind": [1.0, 0.0],
    "sensor": {"noise_sd": 0.0, "rate_hz": 2.0},
    "plan": {
        "speed": 1.0,
        "waypoints": [[0.5, 3.5, 1.5], [6.5, 3.5, 1.5], [6.5, 5.5, 0.5], [0.5, 5.5, 2.5]],
    },
    "rmse": {"z_thresh": 50.0, "interval_s": 1.0},
    "timing": {"residual_rate": 500.0, "final_residual_s": 20.0},
}


def small_room(**timing) -> Scenario:
    raw = json.loads(json.dumps(SMALL_ROOM))
    raw["timing"].update(timing)
    return Scenario.from_dict(raw)


def assert_gated(records):
    """Each insertion starts only after the previous one has resolved"""
    for prev, cur in zip(records, records[1:]):
        assert cur.measurement.timestamp >= prev.measurement.timestamp + prev.resolve_s - 1e-9


def test_rmse_of_exact_estimate_is_zero():
    truth = np.array([[0.0, 150.0], [300.0, 20.0]])
    assert rmse_plume(truth.copy(), truth, z_thresh=100.0) == 0.0


def test_rmse_single_plume_cell():
    truth = np.array([0.0, 250.0, 50.0])
    assert rmse_plume(np.zeros(3), truth, z_thresh=100.0) == 250.0


def test_rmse_ignores_cells_below_threshold():
    truth = np.array([0.0, 250.0, 50.0])
    estimates = np.array([999.0, 240.0, -999.0])
    assert rmse_plume(estimates, truth, z_thresh=100.0) == pytest.approx(10.0)


def test_rmse_threshold_excluding_everything():
    with pytest.raises(ScenarioError, match="threshold excludes all cells"):
        rmse_plume(np.zeros(3), np.array([1.0, 2.0, 3.0]), z_thresh=100.0)


def test_rmse_shape_mismatch():
    with pytest.raises(ScenarioError):
        rmse_plume(np.zeros(3), np.zeros(4), z_thresh=-1.0)


def test_map_export_lists_graph_nodes(tmp_path):
    mapper = GasMapper(VoxelGrid((5, 5, 5)), HyperParams())
    mapper.insert_measurement(Measurement(value=42.0, timestamp=0.0, voxel=VoxelIndex(2, 2, 2)))
    export = MapExport.from_marginals(mapper.marginals(), mapper.grid, mapper.params, scenario="unit")
    assert len(export.rows) == len(mapper.graph)
    assert list(export.rows.columns) == ["ix", "iy", "iz", "mean", "variance"]
    csv_path, json_path = export.write(tmp_path, "map-unit")
    assert csv_path.exists() and json_path.exists()
    loaded = MapExport.read(csv_path)
    assert loaded.header["dims"] == [5, 5, 5]
    assert loaded.header["hyperparams"]["epsilon"] == 0.01
    assert loaded.header["scenario"] == "unit"
    rows = loaded.rows
    row = rows[(rows["ix"] == 2) & (rows["iy"] == 2) & (rows["iz"] == 2)].iloc[0]
    assert row["mean"] == mapper.marginal((2, 2, 2))[0]


def test_scenario_files_load():
    for path in sorted(SCENARIOS.glob("*.yaml")):
        scenario = Scenario.load(path)
        grid = scenario.build_grid()
        assert scenario.build_plan(grid).waypoints
        scenario.build_field(grid)
        scenario.hyper()


def test_scenario_boxes_and_planar_slice():
    scenario = Scenario.load(SCENARIOS / "desk_room.yaml")
    grid = scenario.build_grid()
    assert grid.dims == (12, 8, 4)
    assert grid.is_occupied((5, 2, 0))
    assert not grid.is_occupied((5, 2, 2))
    flat = scenario.with_overrides(planar=True).build_grid()
    assert flat.dims == (12, 8, 1)
    assert flat.is_occupied((5, 2, 0))


def test_scenario_overrides():
    scenario = Scenario.load(SCENARIOS / "desk_room.yaml").with_overrides(seed=99, epsilon=0.05, resolution=0.5)
    assert scenario.seed == 99
    assert scenario.hyper().epsilon == 0.05
    assert scenario.build_grid().dims == (24, 16, 8)


def test_invalid_scenario_rejected(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("name: broken\ngrid: {resolution: 1.0}\n")
    with pytest.raises(ScenarioError):
        Scenario.load(path)


def test_unknown_variant_rejected():
    with pytest.raises(ScenarioError):
        run_benchmark(small_room(), "gabp-magic")


def test_dynamic_and_full_variants_see_same_stream():
    # free resolves: both variants take every sample the plan offers
    scenario = small_room(message_cost_s=0.0)
    dynamic = run_benchmark(scenario, "gabp-dynamic")
    full = run_benchmark(scenario, "gabp-full")
    assert dynamic.stats.processed_measurements == full.stats.processed_measurements
    assert dynamic.stats.final_states <= full.stats.final_states
    assert full.stats.final_states == int((~full.runner.grid.occupancy).sum())
    assert len(dynamic.export.rows) == dynamic.stats.final_states
    for result in (dynamic, full):
        assert np.isfinite(result.stats.converged_rmse)
        assert result.stats.rejected_en_route == 0
        assert len(result.series) >= int(result.stats.total_runtime_s)
        assert list(result.series.columns) == ["t", "rmse", "states", "messages", "measurements"]


def test_modelled_wildfire_cost_gates_en_route_samples():
    """The first flood of a closed room costs well over a sample period, so some samples are dropped"""
    scenario = small_room()
    result = run_benchmark(scenario, "gabp-dynamic")
    first = result.runner.reports[0]
    assert result.runner.resolve_s[0] == pytest.approx(first.messages_sent * scenario.timing.message_cost_s)
    assert result.stats.rejected_en_route > 0
    assert_gated(result.sweep.records)


def test_dense_direct_matches_converged_gabp():
    scenario = small_room(message_cost_s=0.0)
    dense = run_benchmark(scenario, "dense-direct")
    full = run_benchmark(scenario, "gabp-full")
    assert dense.stats.processed_measurements == full.stats.processed_measurements
    mapper = full.runner.mapper
    mapper.converge(floor=1e-16)
    assert mapper.solver.max_residual() < 1e-16
    truth = full.runner.truth.at(full.sweep.end_time)
    converged = rmse_plume(mapper.fields()[0], truth, scenario.rmse.z_thresh)
    assert converged == pytest.approx(dense.stats.converged_rmse, rel=1e-5)


def test_slow_dense_solver_drops_en_route_samples():
    """A 10 s dense resolve against waypoints several seconds apart keeps only waypoint samples"""
    scenario = small_room(dense_resolve_s=10.0)
    dense = run_benchmark(scenario, "dense-direct")
    gabp = run_benchmark(scenario, "gabp-dynamic")
    assert dense.stats.processed_measurements == 4
    assert dense.stats.processed_measurements < gabp.stats.processed_measurements
    assert dense.stats.rejected_en_route > 0
    assert dense.stats.avg_resolve_s == 10.0
    assert_gated(dense.sweep.records)


def test_sensitivity_sweep_rows():
    frame = sensitivity_sweep(small_room(final_residual_s=1.0), epsilons=[0.1, 0.01], sigma_p_values=[None, 4.0])
    assert len(frame) == 4
    assert set(frame.columns) >= {"epsilon", "sigma_p_sq", "final_states", "converged_rmse"}
    for _, group in frame.groupby("sigma_p_sq"):
        by_eps = group.set_index("epsilon").final_states
        assert by_eps[0.1] <= by_eps[0.01]


@pytest.mark.slow
def test_warehouse_dynamic_graph_is_smaller_at_similar_accuracy():
    scenario = Scenario.load(SCENARIOS / "warehouse_50x25x10.yaml")
    dynamic = run_benchmark(scenario, "gabp-dynamic")
    full = run_benchmark(scenario, "gabp-full")
    assert dynamic.stats.processed_measurements == full.stats.processed_measurements
    assert dynamic.stats.final_states < 0.5 * full.stats.final_states
    assert dynamic.stats.converged_rmse <= 1.05 * full.stats.converged_rmse


@pytest.mark.slow
def test_warehouse_insertion_latency():
    scenario = Scenario.load(SCENARIOS / "warehouse_50x25x10.yaml")
    grid = scenario.build_grid()
    gas = scenario.build_field(grid)
    sweep = run_sweep(scenario.build_plan(grid), gas, scenario.build_sensor())
    mapper = GasMapper(grid, scenario.hyper())
    times = [mapper.insert_measurement(m).resolve_time_ns for m in sweep.measurements]
    assert statistics.median(times) < 50e6


@pytest.mark.slow
def test_desk_room_insertions_keep_up_with_two_hertz_sensor():
    scenario = Scenario.load(SCENARIOS / "desk_room.yaml")
    period = 1.0 / scenario.sensor.rate_hz
    assert period == 0.5
    result = run_benchmark(scenario, "gabp-dynamic")
    assert_gated(result.sweep.records)
    assert statistics.median(result.runner.wall_s) < period
    assert statistics.median(result.runner.resolve_s) < period


@pytest.mark.slow
@pytest.mark.parametrize("seed", [3, 11, 19, 27, 35])
def test_hybrid_schedule_beats_wildfire_only_at_equal_budget(seed):
    scenario = Scenario.load(SCENARIOS / "two_cluster.yaml").with_overrides(seed=seed)
    grid = scenario.build_grid()
    gas = scenario.build_field(grid)
    sweep = run_sweep(scenario.build_plan(grid), gas, scenario.build_sensor())
    truth = gas.field(sweep.end_time)
    frame = compare_schedules(grid, scenario.hyper(), sweep.measurements, truth, budget=5000,
                              z_thresh=scenario.rmse.z_thresh)
    hybrid = frame[frame.schedule == "hybrid"].set_index("measurement")
    wildfire = frame[frame.schedule == "wildfire"].set_index("measurement")
    assert (hybrid.budget == wildfire.budget).all()
    assert (hybrid.messages <= hybrid.budget).all() and (wildfire.messages <= wildfire.budget).all()
    first_done = int(hybrid.index[hybrid.fire_done.to_numpy()][0])
    after = hybrid.index >= first_done
    assert (hybrid.max_residual[after] <= wildfire.max_residual[after]).all()
    assert (hybrid.rmse[after] <= wildfire.rmse[after]).all()


def test_compare_schedules_rejects_empty_budget():
    grid = VoxelGrid((4, 4, 1))
    with pytest.raises(ScenarioError):
        compare_schedules(grid, HyperParams(), [], np.zeros(grid.dims), budget=0)
