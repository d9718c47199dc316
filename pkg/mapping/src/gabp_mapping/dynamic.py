"""
Dynamically expanding factor graph driven by incoming measurements.

A voxel becomes a node when it is measured or when a wildfire message arriving
at it carries a residual above epsilon. Expansion adds the free lattice
neighbours of a node once; blocked or out-of-grid directions are skipped.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import config
from .errors import ObstacleError
from .graph import FactorGraph, HyperParams, Measurement
from .occupancy import VoxelGrid, VoxelIndex
from .solver import GaBPSolver, HybridScheduler, SchedulerTrace

logger = logging.getLogger(__name__)


@dataclass
class ExpansionEvent:
    trigger_node: VoxelIndex
    created_nodes: list[VoxelIndex] = field(default_factory=list)
    created_edges: list[int] = field(default_factory=list)
    blocked_directions: int = 0


@dataclass
class InsertionReport:
    measurement: Measurement
    node_created: bool
    expansion: ExpansionEvent | None
    nodes_created: int = 0
    edges_created: int = 0
    messages_sent: int = 0
    resolve_time_ns: int = 0


class GasMapper:
    """
    Owns the graph, the solver and the scheduler for one mapping run.

    ``dynamic=False`` pre-builds a node for every free voxel and skips
    expansion entirely.
    """

    def __init__(
        self,
        grid: VoxelGrid,
        params: HyperParams | None = None,
        dynamic: bool = True,
        planar: bool | None = None,
        floor: float = config.CONVERGENCE_FLOOR,
        mode: str = "hybrid",
        trace: SchedulerTrace | None = None,
    ):
        self.grid = grid
        self.params = params or HyperParams.from_env()
        self.dynamic = dynamic
        self.graph = FactorGraph(grid, self.params, planar=planar)
        self.solver = GaBPSolver(self.graph, floor=floor, trace=trace)
        self.scheduler = HybridScheduler(self.solver, self._stage_queued, mode=mode)
        self.events: list[ExpansionEvent] = []
        self.nodes_created = 0
        self.edges_created = 0
        if dynamic:
            self.solver.expansion_hook = self.expand_if_needed
        else:
            self.build_full_graph()

    # ------------------------------------------------------------------ construction

    def build_full_graph(self) -> None:
        """One node per free voxel, one edge per unblocked adjacent pair."""
        started = time.perf_counter()
        graph = self.graph
        for ix, iy, iz in self.grid.free_voxels():
            if self.graph.planar and iz != 0:
                continue
            v = VoxelIndex(ix, iy, iz)
            if v not in graph:
                graph.add_node(v).expanded = True
                self.nodes_created += 1
        forward = [d for d in self.grid.offsets(graph.planar) if sum(d) > 0]
        for v in list(graph.nodes):
            for d in forward:
                u = v.offset(d)
                if u in graph.nodes and graph.edge_between(v, u) is None:
                    edge = graph.connect(v, u)
                    if edge is not None:
                        self.solver.add_edge(edge, track=False)
                        self.edges_created += 1
        self.solver.sync()
        logger.info(
            f"Full graph: {len(graph.nodes)} nodes, {len(graph.edges)} edges "
            f"in {time.perf_counter() - started:.2f}s"
        )

    def expand_if_needed(self, voxel: VoxelIndex) -> ExpansionEvent | None:
        """Add the missing free neighbours of ``voxel`` and their edges; no-op once expanded."""
        graph = self.graph
        node = graph.node(voxel)
        if node.expanded:
            return None
        event = ExpansionEvent(trigger_node=voxel)
        for n in self.grid.neighbors(voxel, graph.planar):
            if n is None or self.grid.is_occupied(n):
                event.blocked_directions += 1
                continue
            if n not in graph:
                graph.add_node(n)
                event.created_nodes.append(n)
            if graph.edge_between(voxel, n) is None:
                edge = graph.connect(voxel, n)
                if edge is None:
                    event.blocked_directions += 1
                    continue
                event.created_edges.append(edge.id)
                self.solver.add_edge(edge)
        node.expanded = True
        self.nodes_created += len(event.created_nodes)
        self.edges_created += len(event.created_edges)
        self.events.append(event)
        logger.debug(
            f"Expanded {tuple(voxel)}: +{len(event.created_nodes)} nodes, "
            f"+{len(event.created_edges)} edges, {event.blocked_directions} blocked"
        )
        return event

    # ------------------------------------------------------------------ measurements

    def stage_measurement(self, m: Measurement, now: float | None = None, seed: bool = True) -> InsertionReport:
        """Graph update for one measurement; the wildfire it seeds runs later."""
        v = VoxelIndex(*m.voxel)
        if self.grid.is_occupied(v):
            raise ObstacleError(v)
        graph = self.graph
        if now is None:
            now = m.timestamp if graph.clock is None else max(graph.clock, m.timestamp)
        created = v not in graph
        if created:
            graph.add_node(v)
            self.nodes_created += 1
        expansion = self.expand_if_needed(v) if self.dynamic else None
        graph.attach_measurement(v, m, now)
        changed = graph.refresh_time_decay(now)
        self.solver.touch({v} | changed)
        if seed:
            if self.params.decays:
                for u in graph.measurement_voxels_newest_first():
                    self.solver.queue_wildfire(u)
            else:
                self.solver.queue_wildfire(v)
        return InsertionReport(
            measurement=m,
            node_created=created,
            expansion=expansion,
            nodes_created=int(created) + (len(expansion.created_nodes) if expansion else 0),
            edges_created=len(expansion.created_edges) if expansion else 0,
        )

    def _stage_queued(self, m: Measurement, seed: bool) -> InsertionReport:
        return self.stage_measurement(m, seed=seed)

    def insert_measurement(self, m: Measurement, now: float | None = None) -> InsertionReport:
        """Stage ``m`` and run its wildfire to exhaustion."""
        started = time.perf_counter_ns()
        nodes_before, edges_before = self.nodes_created, self.edges_created
        sent_before = self.solver.messages_sent
        report = self.stage_measurement(m, now=now)
        while self.solver.wildfire_step() is not None:
            pass
        report.nodes_created = self.nodes_created - nodes_before
        report.edges_created = self.edges_created - edges_before
        report.messages_sent = self.solver.messages_sent - sent_before
        report.resolve_time_ns = time.perf_counter_ns() - started
        return report

    def converge(self, max_messages: int | None = None, floor: float | None = None) -> int:
        """Residual propagation until the largest residual drops below the floor."""
        return self.solver.run_residual(max_messages=max_messages, floor=floor)

    # ------------------------------------------------------------------ occupancy changes

    def set_occupied(self, voxel: VoxelIndex, occupied: bool = True) -> None:
        """Update the occupancy map and drop or re-admit the voxel in the graph."""
        voxel = VoxelIndex(*voxel)
        self.grid.set_occupied(voxel, occupied)
        graph = self.graph
        neighbors = [n for n in self.grid.neighbors(voxel, graph.planar) if n is not None and n in graph]
        if occupied:
            if voxel in graph:
                for edge in graph.remove_node(voxel):
                    self.solver.remove_edge(edge)
        else:
            if self.dynamic:
                for n in neighbors:
                    graph.nodes[n].expanded = False
            elif voxel not in graph:
                graph.add_node(voxel).expanded = True
                for n in neighbors:
                    edge = graph.connect(voxel, n)
                    if edge is not None:
                        self.solver.add_edge(edge)
        self.solver.touch(neighbors + ([voxel] if voxel in graph else []))

    # ------------------------------------------------------------------ results

    def marginal(self, voxel: VoxelIndex) -> tuple[float, float]:
        """(mean, variance); voxels not in the graph report the prior (z0, sigma_d^2)."""
        voxel = VoxelIndex(*voxel)
        if voxel not in self.graph:
            return self.params.z0, self.params.sigma_d_sq
        return self.solver.marginal(voxel)

    def marginals(self) -> dict[VoxelIndex, tuple[float, float]]:
        return self.solver.marginals()

    def fields(self) -> tuple[np.ndarray, np.ndarray]:
        """Dense mean and variance arrays over the grid, prior-filled where no node exists."""
        mean = np.full(self.grid.dims, self.params.z0, dtype=float)
        var = np.full(self.grid.dims, self.params.sigma_d_sq, dtype=float)
        for v, (mu, s2) in self.marginals().items():
            mean[v] = mu
            var[v] = s2
        return mean, var

    def snapshot(self) -> dict:
        return {
            "version": self.graph.version,
            "nodes": len(self.graph.nodes),
            "edges": len(self.graph.edges),
            "measurements": sum(len(n.measurements) for n in self.graph.nodes.values()),
            "messages_sent": self.solver.messages_sent,
            "max_residual": self.solver.max_residual(),
            "sign_flips": self.solver.sign_flips,
        }
