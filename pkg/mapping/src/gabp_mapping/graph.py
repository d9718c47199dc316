"""
Factor-graph state of the gas distribution GMRF.

Each node carries a self potential assembled from the default factor and its
observation factors plus the regularisation terms of its edges:

    Lambda_ii = 1/sigma_d^2 + sum_k alpha_k,i + sum_{j in N_i} beta
    g_i       = z0/sigma_d^2 + sum_k alpha_k,i * z_k,i
    Lambda_ij = -beta,   beta = 1/sigma_r^2   (only for unblocked pairs)

with alpha_k,i = 1/(sigma_s^2 + sigma_zeta^2 * dt). Canonical form
exp(-x'Lx/2 + g'x), so the MAP mean is L^-1 g.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterable

from pydantic import BaseModel, ConfigDict, field_validator, model_validator

from . import config
from .errors import (
    AdjacencyError,
    ClockRegressionError,
    DuplicateNodeError,
    MappingError,
    MissingNodeError,
    ObstacleError,
)
from .occupancy import VoxelGrid, VoxelIndex, are_adjacent

logger = logging.getLogger(__name__)


class HyperParams(BaseModel):
    model_config = ConfigDict(frozen=True)

    sigma_s_sq: float = 0.1
    sigma_zeta_sq: float = math.inf
    sigma_r_sq: float = 2.0
    sigma_d_sq: float = 1e4
    sigma_p_sq: float | None = None
    z0: float = 0.0
    epsilon: float = 0.01

    @field_validator("sigma_s_sq", "sigma_r_sq", "sigma_d_sq")
    @classmethod
    def _finite_positive(cls, v: float) -> float:
        if not (v > 0 and math.isfinite(v)):
            raise ValueError("variance must be finite and strictly positive")
        return v

    @field_validator("sigma_zeta_sq")
    @classmethod
    def _zeta_positive(cls, v: float) -> float:
        if not v > 0:
            raise ValueError("sigma_zeta_sq must be strictly positive (inf disables decay)")
        return v

    @field_validator("sigma_p_sq")
    @classmethod
    def _prior_positive(cls, v: float | None) -> float | None:
        if v is not None and math.isnan(v):
            return None
        if v is not None and not (v > 0 and math.isfinite(v)):
            raise ValueError("sigma_p_sq must be finite and strictly positive")
        return v

    @field_validator("epsilon")
    @classmethod
    def _epsilon_positive(cls, v: float) -> float:
        if not v > 0:
            raise ValueError("epsilon must be > 0")
        return v

    @model_validator(mode="after")
    def _weak_default_anchor(self) -> "HyperParams":
        if self.sigma_d_sq < 100 * self.sigma_s_sq:
            raise ValueError(
                f"sigma_d_sq={self.sigma_d_sq} must be >= 100 * sigma_s_sq={100 * self.sigma_s_sq}"
            )
        return self

    @classmethod
    def from_env(cls, **overrides) -> "HyperParams":
        values = dict(
            sigma_s_sq=config.SIGMA_S_SQ,
            sigma_zeta_sq=config.SIGMA_ZETA_SQ,
            sigma_r_sq=config.SIGMA_R_SQ,
            sigma_d_sq=config.SIGMA_D_SQ,
            sigma_p_sq=None if math.isnan(config.SIGMA_P_SQ) else config.SIGMA_P_SQ,
            z0=config.Z0,
            epsilon=config.EPSILON,
        )
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)

    @property
    def beta(self) -> float:
        return 1.0 / self.sigma_r_sq

    @property
    def default_precision(self) -> float:
        return 1.0 / self.sigma_d_sq

    @property
    def decays(self) -> bool:
        return math.isfinite(self.sigma_zeta_sq)

    def alpha(self, dt: float) -> float:
        """Observation precision of a measurement of age ``dt`` seconds."""
        if not self.decays:
            return 1.0 / self.sigma_s_sq
        return 1.0 / (self.sigma_s_sq + self.sigma_zeta_sq * max(dt, 0.0))

    def far_field_message(self, n_neighbors: int) -> float:
        """
        Fixed point of the message precision recursion far from any observation.

        Solves p = -beta^2 / (1/sigma_d^2 + n*beta + (n-1)*p) for the root of
        smallest magnitude; n = 2 is a chain of nodes.
        """
        b = self.beta
        d = self.default_precision
        n = max(n_neighbors, 2)
        a2 = n - 1
        a1 = d + n * b
        disc = a1 * a1 - 4.0 * a2 * b * b
        return (-a1 + math.sqrt(disc)) / (2.0 * a2)

    def prior_message(self, n_neighbors: int = 6) -> tuple[float, float]:
        """Placeholder (precision, mean) for the previous message of a new edge."""
        p_inf = self.far_field_message(n_neighbors)
        precision = 1.0 / self.sigma_p_sq if self.sigma_p_sq is not None else -p_inf
        mean = self.beta * self.z0 / p_inf if self.z0 else 0.0
        return precision, mean


class Measurement(BaseModel):
    model_config = ConfigDict(frozen=True)

    value: float
    timestamp: float
    voxel: VoxelIndex

    @field_validator("value")
    @classmethod
    def _non_negative(cls, v: float) -> float:
        if not v >= 0:
            raise ValueError("measurement value must be >= 0")
        return v

    @field_validator("timestamp")
    @classmethod
    def _finite(cls, v: float) -> float:
        if not math.isfinite(v):
            raise ValueError("timestamp must be finite")
        return v


@dataclass(slots=True)
class NodeRecord:
    voxel: VoxelIndex
    measurements: list[Measurement] = field(default_factory=list)
    neighbors: dict[VoxelIndex, int] = field(default_factory=dict)
    self_precision: float = 0.0
    self_mean: float = 0.0
    expanded: bool = False
    alphas: list[float] = field(default_factory=list)
    information: float = 0.0  # g_i

    @property
    def degree(self) -> int:
        return len(self.neighbors)


@dataclass(slots=True, frozen=True)
class EdgeRecord:
    id: int
    a: VoxelIndex
    b: VoxelIndex
    coupling: float

    @property
    def endpoints(self) -> tuple[VoxelIndex, VoxelIndex]:
        return self.a, self.b

    def other(self, v: VoxelIndex) -> VoxelIndex:
        return self.b if v == self.a else self.a


class FactorGraph:
    """
    Nodes, edges and self potentials of the GMRF over a voxel grid.

    Single writer: callers serialise all mutating operations.
    """

    def __init__(self, grid: VoxelGrid, params: HyperParams, planar: bool | None = None):
        self.grid = grid
        self.params = params
        self.planar = grid.planar if planar is None else planar
        self.nodes: dict[VoxelIndex, NodeRecord] = {}
        self.edges: dict[int, EdgeRecord] = {}
        self.clock: float | None = None
        self.version = 0
        self._next_edge_id = 0

    def __contains__(self, voxel) -> bool:
        return voxel in self.nodes

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def max_degree(self) -> int:
        return 4 if self.planar else 6

    def node(self, voxel: VoxelIndex) -> NodeRecord:
        try:
            return self.nodes[voxel]
        except KeyError:
            raise MissingNodeError(voxel) from None

    def add_node(self, voxel: VoxelIndex) -> NodeRecord:
        voxel = VoxelIndex(*voxel)
        if voxel in self.nodes:
            raise DuplicateNodeError(voxel)
        if self.grid.is_occupied(voxel):
            raise ObstacleError(voxel)
        p = self.params
        node = NodeRecord(
            voxel=voxel,
            self_precision=p.default_precision,
            self_mean=p.z0,
            information=p.z0 * p.default_precision,
        )
        self.nodes[voxel] = node
        self.version += 1
        return node

    def edge_between(self, a: VoxelIndex, b: VoxelIndex) -> EdgeRecord | None:
        node = self.nodes.get(a)
        if node is None:
            return None
        eid = node.neighbors.get(b)
        return None if eid is None else self.edges[eid]

    def connect(self, a: VoxelIndex, b: VoxelIndex) -> EdgeRecord | None:
        """Create the regularisation edge a-b; ``None`` when occupancy blocks it."""
        if not are_adjacent(a, b):
            raise AdjacencyError(a, b)
        if self.planar and a[2] != b[2]:
            raise AdjacencyError(a, b)
        na, nb = self.node(a), self.node(b)
        existing = na.neighbors.get(b)
        if existing is not None:
            return self.edges[existing]
        if self.grid.is_blocked(a, b):
            return None
        beta = self.params.beta
        lo, hi = (a, b) if a < b else (b, a)
        edge = EdgeRecord(self._next_edge_id, lo, hi, beta)
        self._next_edge_id += 1
        self.edges[edge.id] = edge
        na.neighbors[b] = edge.id
        nb.neighbors[a] = edge.id
        self._refresh_potential(na)
        self._refresh_potential(nb)
        self.version += 1
        return edge

    def disconnect(self, edge_id: int) -> EdgeRecord:
        edge = self.edges.pop(edge_id)
        for v, other in ((edge.a, edge.b), (edge.b, edge.a)):
            node = self.nodes.get(v)
            if node is not None:
                node.neighbors.pop(other, None)
                self._refresh_potential(node)
        self.version += 1
        return edge

    def remove_node(self, voxel: VoxelIndex) -> list[EdgeRecord]:
        node = self.node(voxel)
        removed = [self.disconnect(eid) for eid in list(node.neighbors.values())]
        del self.nodes[voxel]
        if node.measurements:
            logger.warning(f"Dropped {len(node.measurements)} measurements at {tuple(voxel)} (voxel now occupied)")
        self.version += 1
        return removed

    def _check_clock(self, now: float) -> None:
        if self.clock is not None and now < self.clock:
            raise ClockRegressionError(now, self.clock)

    def attach_measurement(self, voxel: VoxelIndex, m: Measurement, now: float | None = None) -> tuple[float, float]:
        """Append ``m`` to the node's evidence; returns the new (P_ii, mu_ii)."""
        node = self.node(voxel)
        if m.voxel != node.voxel:
            raise MappingError(f"measurement voxel {tuple(m.voxel)} does not match node {tuple(node.voxel)}")
        now = m.timestamp if now is None else now
        self._check_clock(now)
        if m.timestamp > now:
            raise ClockRegressionError(now, m.timestamp)
        self.clock = now
        alpha = self.params.alpha(now - m.timestamp)
        node.measurements.append(m)
        node.alphas.append(alpha)
        self._refresh_potential(node)
        self.version += 1
        return node.self_precision, node.self_mean

    def refresh_time_decay(self, now: float) -> set[VoxelIndex]:
        """Recompute every alpha at the new age; returns nodes whose potential changed."""
        if not self.params.decays:
            return set()
        self._check_clock(now)
        latest = max((m.timestamp for n in self.nodes.values() for m in n.measurements), default=None)
        if latest is not None and now < latest:
            raise ClockRegressionError(now, latest)
        self.clock = now
        changed: set[VoxelIndex] = set()
        for node in self.nodes.values():
            if not node.measurements:
                continue
            alphas = [self.params.alpha(now - m.timestamp) for m in node.measurements]
            if alphas != node.alphas:
                node.alphas = alphas
                self._refresh_potential(node)
                changed.add(node.voxel)
        if changed:
            self.version += 1
        return changed

    def _refresh_potential(self, node: NodeRecord) -> None:
        p = self.params
        precision = p.default_precision + math.fsum(node.alphas) + p.beta * len(node.neighbors)
        information = p.z0 * p.default_precision + math.fsum(
            a * m.value for a, m in zip(node.alphas, node.measurements)
        )
        node.self_precision = precision
        node.information = information
        node.self_mean = information / precision

    def rebuild(self, voxels: Iterable[VoxelIndex] | None = None) -> None:
        """Recompute self potentials from stored measurements and neighbour lists."""
        now = self.clock
        for v in self.nodes if voxels is None else voxels:
            node = self.nodes[v]
            if now is not None:
                node.alphas = [self.params.alpha(now - m.timestamp) for m in node.measurements]
            self._refresh_potential(node)

    def information(self, voxel: VoxelIndex) -> tuple[float, float]:
        """(Lambda_ii, g_i) of a node."""
        node = self.node(voxel)
        return node.self_precision, node.information

    def coupling(self, a: VoxelIndex, b: VoxelIndex) -> float:
        """Lambda_ij; zero when no edge joins a and b."""
        edge = self.edge_between(a, b)
        return 0.0 if edge is None else -edge.coupling

    def audit_obstacles(self) -> list[EdgeRecord]:
        """Edges joining a pair the occupancy map reports blocked (should be empty)."""
        return [e for e in self.edges.values() if self.grid.is_blocked(e.a, e.b)]

    def measurement_voxels_newest_first(self) -> list[VoxelIndex]:
        ordered = sorted(
            ((m.timestamp, i, n.voxel) for n in self.nodes.values() for i, m in enumerate(n.measurements)),
            reverse=True,
        )
        seen: dict[VoxelIndex, None] = {}
        for _, _, v in ordered:
            seen.setdefault(v, None)
        return list(seen)
