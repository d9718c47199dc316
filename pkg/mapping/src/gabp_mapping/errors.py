"""Exception types raised by the mapping library."""

from __future__ import annotations

from typing import Any


class MappingError(ValueError):
    """A mutating operation was rejected because its input is invalid."""


class DuplicateNodeError(MappingError):
    def __init__(self, voxel: Any):
        super().__init__(f"node {tuple(voxel)} already present")
        self.voxel = voxel


class ObstacleError(MappingError):
    def __init__(self, voxel: Any):
        super().__init__(f"voxel {tuple(voxel)} is inside obstacle")
        self.voxel = voxel


class AdjacencyError(MappingError):
    def __init__(self, a: Any, b: Any):
        super().__init__(f"voxels {tuple(a)} and {tuple(b)} are not lattice-adjacent")
        self.pair = (a, b)


class MissingNodeError(MappingError):
    def __init__(self, voxel: Any):
        super().__init__(f"node {tuple(voxel)} is not in the graph")
        self.voxel = voxel


class OutOfBoundsError(MappingError):
    def __init__(self, what: Any, axis: str, value: float, limit: tuple[float, float]):
        super().__init__(f"{what} outside grid extent on axis {axis}: {value} not in [{limit[0]}, {limit[1]})")
        self.axis = axis


class ClockRegressionError(MappingError):
    def __init__(self, now: float, latest: float):
        super().__init__(f"clock regression: now={now} is earlier than stored timestamp {latest}")
        self.now = now
        self.latest = latest


class NumericalBreakdown(RuntimeError):
    """Non-positive precision or non-finite value inside the solver."""

    def __init__(self, message: str, edge: Any = None, node: Any = None):
        super().__init__(message)
        self.edge = edge
        self.node = node


class OracleError(RuntimeError):
    """The dense system could not be factorised."""


class ScenarioError(ValueError):
    """Malformed scenario, log or grid file, or an unknown benchmark variant."""
