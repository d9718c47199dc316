#!/usr/bin/env python3
"""
Tests for the factor-graph core
Node and edge creation, self potentials, observation attachment and time decay
"""

import math
import sys
from pathlib import Path

import pytest
from pydantic import ValidationError

# Add mapping path
mapping_path = Path(__file__).parent / "mapping"
sys.path.insert(0, str(mapping_path))

from src.gabp_mapping.errors import (
    AdjacencyError,
    ClockRegressionError,
    DuplicateNodeError,
    MappingError,
    MissingNodeError,
    ObstacleError,
)
from src.gabp_mapping.graph import FactorGraph, HyperParams, Measurement
from src.gabp_mapping.occupancy import VoxelGrid, VoxelIndex

A = VoxelIndex(1, 1, 1)
B = VoxelIndex(2, 1, 1)


def make_graph(dims=(4, 4, 4), **params) -> FactorGraph:
    return FactorGraph(VoxelGrid(dims), HyperParams(**params))


def test_first_node_carries_default_factor():
    graph = make_graph()
    node = graph.add_node(A)
    assert node.self_precision == 1e-4
    assert node.self_mean == 0.0
    assert not node.neighbors


def test_duplicate_node_rejected():
    graph = make_graph()
    graph.add_node(A)
    with pytest.raises(DuplicateNodeError, match="already present"):
        graph.add_node(A)


def test_node_inside_obstacle_rejected():
    graph = make_graph()
    graph.grid.set_occupied(A)
    with pytest.raises(ObstacleError, match="inside obstacle"):
        graph.add_node(A)
    assert A not in graph


def test_connect_adds_coupling_to_both_endpoints():
    graph = make_graph()
    graph.add_node(A)
    graph.add_node(B)
    edge = graph.connect(A, B)
    assert edge.coupling == 0.5
    assert graph.coupling(A, B) == -0.5
    for v in (A, B):
        assert graph.node(v).self_precision == pytest.approx(1e-4 + 0.5, rel=1e-15)


def test_connect_is_idempotent():
    graph = make_graph()
    graph.add_node(A)
    graph.add_node(B)
    first = graph.connect(A, B)
    again = graph.connect(B, A)
    assert again is first
    assert len(graph.edges) == 1
    assert graph.node(A).self_precision == pytest.approx(1e-4 + 0.5)


def test_connect_blocked_pair_leaves_graph_unchanged():
    graph = make_graph()
    graph.add_node(A)
    graph.add_node(B)
    graph.grid.set_occupied(B)
    version = graph.version
    assert graph.connect(A, B) is None
    assert not graph.edges
    assert graph.version == version
    assert graph.node(A).self_precision == 1e-4


def test_connect_requires_adjacency_and_nodes():
    graph = make_graph()
    graph.add_node(A)
    graph.add_node(VoxelIndex(3, 3, 3))
    with pytest.raises(AdjacencyError):
        graph.connect(A, VoxelIndex(3, 3, 3))
    with pytest.raises(MissingNodeError):
        graph.connect(A, B)


def test_disconnect_restores_potentials():
    graph = make_graph()
    graph.add_node(A)
    graph.add_node(B)
    edge = graph.connect(A, B)
    graph.disconnect(edge.id)
    assert graph.node(A).self_precision == pytest.approx(1e-4)
    assert B not in graph.node(A).neighbors
    assert graph.coupling(A, B) == 0.0


def test_single_measurement_posterior():
    """sigma_s^2 = 0.1, z = 5 on an isolated node"""
    graph = make_graph()
    graph.add_node(A)
    precision, mean = graph.attach_measurement(A, Measurement(value=5.0, timestamp=0.0, voxel=A))
    assert precision == pytest.approx(10.0001)
    assert mean == pytest.approx(4.99995, rel=1e-9)
    assert graph.information(A) == pytest.approx((10.0001, 50.0))


def test_repeated_measurements_accumulate():
    graph = make_graph()
    graph.add_node(A)
    graph.attach_measurement(A, Measurement(value=5.0, timestamp=0.0, voxel=A))
    precision, mean = graph.attach_measurement(A, Measurement(value=5.0, timestamp=1.0, voxel=A))
    assert precision == pytest.approx(20.0001)
    assert mean == pytest.approx(100.0 / 20.0001)
    assert len(graph.node(A).measurements) == 2


def test_measurement_voxel_must_match_node():
    graph = make_graph()
    graph.add_node(A)
    with pytest.raises(MappingError):
        graph.attach_measurement(A, Measurement(value=1.0, timestamp=0.0, voxel=B))


def test_rebuild_is_idempotent():
    graph = make_graph()
    for v in (A, B):
        graph.add_node(v)
    graph.connect(A, B)
    graph.attach_measurement(A, Measurement(value=7.5, timestamp=0.0, voxel=A))
    before = {v: graph.information(v) for v in graph.nodes}
    graph.rebuild()
    graph.rebuild()
    assert {v: graph.information(v) for v in graph.nodes} == before


def test_alpha_decays_with_age():
    params = HyperParams(sigma_zeta_sq=0.05)
    assert params.alpha(10.0) == pytest.approx(1.0 / 0.6)
    ages = [0.0, 1.0, 10.0, 100.0, 1000.0]
    alphas = [params.alpha(dt) for dt in ages]
    assert alphas == sorted(alphas, reverse=True)
    assert HyperParams().alpha(1e6) == pytest.approx(10.0)


def test_attach_with_later_clock_uses_age():
    graph = make_graph(sigma_zeta_sq=0.05)
    graph.add_node(A)
    graph.attach_measurement(A, Measurement(value=3.0, timestamp=0.0, voxel=A), now=10.0)
    assert graph.node(A).alphas == [pytest.approx(1.6667, rel=1e-4)]


def test_refresh_time_decay_reweights_old_measurements():
    graph = make_graph(sigma_zeta_sq=0.05)
    graph.add_node(A)
    graph.add_node(B)
    graph.attach_measurement(A, Measurement(value=3.0, timestamp=0.0, voxel=A))
    graph.attach_measurement(B, Measurement(value=3.0, timestamp=4.0, voxel=B))
    changed = graph.refresh_time_decay(10.0)
    assert changed == {A, B}
    assert graph.node(A).alphas == [pytest.approx(1.0 / 0.6)]
    assert graph.node(B).alphas == [pytest.approx(1.0 / 0.4)]
    assert graph.node(A).self_precision == pytest.approx(1e-4 + 1.0 / 0.6)


def test_refresh_without_decay_is_noop():
    graph = make_graph()
    graph.add_node(A)
    graph.attach_measurement(A, Measurement(value=3.0, timestamp=0.0, voxel=A))
    assert graph.refresh_time_decay(100.0) == set()


def test_clock_regression_rejected():
    graph = make_graph(sigma_zeta_sq=0.05)
    graph.add_node(A)
    graph.attach_measurement(A, Measurement(value=3.0, timestamp=0.0, voxel=A))
    graph.refresh_time_decay(10.0)
    with pytest.raises(ClockRegressionError):
        graph.refresh_time_decay(5.0)


def test_remove_node_drops_edges():
    graph = make_graph()
    c = VoxelIndex(0, 1, 1)
    for v in (A, B, c):
        graph.add_node(v)
    graph.connect(A, B)
    graph.connect(A, c)
    removed = graph.remove_node(A)
    assert len(removed) == 2
    assert not graph.edges
    assert graph.node(B).self_precision == pytest.approx(1e-4)


def test_audit_finds_no_edges_through_obstacles():
    graph = make_graph()
    graph.grid.set_occupied(VoxelIndex(1, 2, 1))
    for v in graph.grid.free_voxels():
        graph.add_node(v)
    for v in list(graph.nodes):
        for d in ((1, 0, 0), (0, 1, 0), (0, 0, 1)):
            u = v.offset(d)
            if u in graph.nodes:
                graph.connect(v, u)
    assert graph.audit_obstacles() == []


def test_newest_measurement_voxels_first():
    graph = make_graph(sigma_zeta_sq=0.05)
    for v in (A, B):
        graph.add_node(v)
    graph.attach_measurement(A, Measurement(value=1.0, timestamp=0.0, voxel=A))
    graph.attach_measurement(B, Measurement(value=1.0, timestamp=1.0, voxel=B))
    graph.attach_measurement(A, Measurement(value=1.0, timestamp=2.0, voxel=A))
    assert graph.measurement_voxels_newest_first() == [A, B]


def test_negative_measurement_rejected():
    with pytest.raises(ValidationError):
        Measurement(value=-1.0, timestamp=0.0, voxel=A)


@pytest.mark.parametrize(
    "overrides",
    [
        {"sigma_d_sq": 1.0},
        {"epsilon": 0.0},
        {"sigma_r_sq": 0.0},
        {"sigma_s_sq": math.inf},
        {"sigma_p_sq": -1.0},
    ],
)
def test_invalid_hyperparameters(overrides):
    with pytest.raises(ValidationError):
        HyperParams(**overrides)


def test_far_field_message_is_fixed_point():
    params = HyperParams()
    for n in (2, 4, 6):
        p = params.far_field_message(n)
        assert p < 0
        d, b = params.default_precision, params.beta
        assert p == pytest.approx(-b * b / (d + n * b + (n - 1) * p), rel=1e-10)


def test_prior_message_placeholder():
    params = HyperParams()
    precision, mean = params.prior_message(6)
    assert precision == pytest.approx(-params.far_field_message(6))
    assert mean == 0.0
    fixed = HyperParams(sigma_p_sq=4.0)
    assert fixed.prior_message(6) == (0.25, 0.0)
