"""
Gaussian belief propagation over a FactorGraph.

Messages are stored per directed edge as (precision, mean) pairs together with
the last transmitted pair used for residuals. Aggregates are summed with
``math.fsum`` so that the per-node broadcast form and the per-edge form give
bitwise-identical messages.
"""

from __future__ import annotations

import heapq
import logging
import math
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import pandas as pd

from . import config
from .errors import MissingNodeError, NumericalBreakdown
from .graph import EdgeRecord, FactorGraph, Measurement
from .occupancy import VoxelIndex

logger = logging.getLogger(__name__)

WILDFIRE = "wildfire"
RESIDUAL = "residual"
ROUND_ROBIN = "round_robin"

DirectedKey = tuple[VoxelIndex, VoxelIndex]


@dataclass(slots=True)
class EdgeMessage:
    source: VoxelIndex
    target: VoxelIndex
    edge_id: int
    order: int
    prev_precision: float
    prev_mean: float
    precision: float = 0.0
    mean: float = 0.0
    information: float = 0.0
    sent: int = 0

    def reference(self) -> tuple[float, float]:
        """Last transmitted pair; the prior placeholder before the first send."""
        if self.sent:
            return self.precision, self.mean
        return self.prev_precision, self.prev_mean


def residual(p_new: float, mu_new: float, p_prev: float, mu_prev: float) -> float:
    """
    Bhattacharyya-style distance between consecutive messages on one edge.

    1/4 ln(1/4 (P_new/P_prev + P_prev/P_new + 2)) + 1/4 (P_prev + P_new)(mu_prev - mu_new)^2,
    evaluated on |P| so it stays non-negative for the negative precisions that
    attractive couplings produce.
    """
    a, b = abs(p_new), abs(p_prev)
    if a == 0.0 or b == 0.0:
        return 0.0 if a == b and mu_new == mu_prev else math.inf
    # (a/b + b/a + 2)/4 - 1 == (a - b)^2 / (4ab)
    spread = 0.25 * math.log1p((a - b) * (a - b) / (4.0 * a * b))
    shift = 0.25 * (a + b) * (mu_prev - mu_new) ** 2
    return spread + shift


class ResidualQueue:
    """Max-priority queue of directed edges keyed by residual; ties go to the lowest edge order."""

    def __init__(self):
        self._heap: list[tuple[float, int, int, DirectedKey]] = []
        self._entries: dict[DirectedKey, tuple[float, int]] = {}
        self._version = 0

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, key) -> bool:
        return key in self._entries

    def update(self, key: DirectedKey, value: float, order: int) -> None:
        if value <= 0.0:
            self._entries.pop(key, None)
            return
        self._version += 1
        self._entries[key] = (value, self._version)
        heapq.heappush(self._heap, (-value, order, self._version, key))
        if len(self._heap) > 4 * len(self._entries) + 64:
            self._compact()

    def discard(self, key: DirectedKey) -> None:
        self._entries.pop(key, None)

    def get(self, key: DirectedKey) -> float:
        entry = self._entries.get(key)
        return 0.0 if entry is None else entry[0]

    def peek(self) -> tuple[DirectedKey, float] | None:
        heap = self._heap
        while heap:
            neg, _, version, key = heap[0]
            entry = self._entries.get(key)
            if entry is not None and entry[1] == version:
                return key, -neg
            heapq.heappop(heap)
        return None

    def pop(self) -> tuple[DirectedKey, float] | None:
        top = self.peek()
        if top is not None:
            heapq.heappop(self._heap)
            del self._entries[top[0]]
        return top

    def max_residual(self) -> float:
        top = self.peek()
        return 0.0 if top is None else top[1]

    def _compact(self) -> None:
        self._heap = [item for item in self._heap if self._entries.get(item[3], (None, -1))[1] == item[2]]
        heapq.heapify(self._heap)


@dataclass
class TraceRow:
    message_index: int
    phase: str
    source: VoxelIndex
    target: VoxelIndex
    residual: float
    wall_time_ns: int


@dataclass
class SchedulerTrace:
    keep_rows: bool = False
    counts: dict[str, int] = field(default_factory=lambda: {WILDFIRE: 0, RESIDUAL: 0, ROUND_ROBIN: 0})
    rows: list[TraceRow] = field(default_factory=list)
    started_ns: int = field(default_factory=time.perf_counter_ns)

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def record(self, phase: str, source: VoxelIndex, target: VoxelIndex, r: float) -> None:
        self.counts[phase] = self.counts.get(phase, 0) + 1
        if self.keep_rows:
            self.rows.append(
                TraceRow(self.total - 1, phase, source, target, r, time.perf_counter_ns() - self.started_ns)
            )

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "message_index": [r.message_index for r in self.rows],
                "phase": [r.phase for r in self.rows],
                "from": [" ".join(map(str, r.source)) for r in self.rows],
                "to": [" ".join(map(str, r.target)) for r in self.rows],
                "residual": [r.residual for r in self.rows],
                "wall_time_ns": [r.wall_time_ns for r in self.rows],
            }
        )

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        self.to_frame().to_csv(path, index=False)
        return path


class GaBPSolver:
    """Message store, message algebra and schedulers for one FactorGraph."""

    def __init__(
        self,
        graph: FactorGraph,
        floor: float = config.CONVERGENCE_FLOOR,
        trace: SchedulerTrace | None = None,
    ):
        self.graph = graph
        self.floor = floor
        self.trace = trace or SchedulerTrace()
        self.messages: dict[DirectedKey, EdgeMessage] = {}
        self.queue = ResidualQueue()
        self.messages_sent = 0
        self.sign_flips = 0
        self.phase = RESIDUAL
        self.expansion_hook: Callable[[VoxelIndex], object] | None = None
        # wildfire state: FIFO + membership set, node being broadcast, pending starts
        self._fire: deque[VoxelIndex] = deque()
        self._fire_members: set[VoxelIndex] = set()
        self._fire_node: VoxelIndex | None = None
        self._fire_targets: deque[VoxelIndex] = deque()
        self._fire_starts: deque[VoxelIndex] = deque()

    # ------------------------------------------------------------------ graph sync

    def add_edge(self, edge: EdgeRecord, track: bool = True) -> None:
        p_prior, mu_prior = self.graph.params.prior_message(self.graph.max_degree)
        for order, (src, dst) in enumerate(((edge.a, edge.b), (edge.b, edge.a))):
            self.messages[(src, dst)] = EdgeMessage(src, dst, edge.id, 2 * edge.id + order, p_prior, mu_prior)
        if track:
            self.touch((edge.a, edge.b))

    def remove_edge(self, edge: EdgeRecord) -> None:
        for key in ((edge.a, edge.b), (edge.b, edge.a)):
            self.messages.pop(key, None)
            self.queue.discard(key)

    def sync(self) -> None:
        """Register messages for every graph edge not yet known, then track all residuals."""
        for edge in self.graph.edges.values():
            if (edge.a, edge.b) not in self.messages:
                self.add_edge(edge, track=False)
        self.touch(self.graph.nodes)

    def touch(self, voxels: Iterable[VoxelIndex]) -> None:
        """Recompute candidate residuals of every message out of ``voxels``."""
        for v in voxels:
            if v in self.graph.nodes:
                self._track_outgoing(v)

    # ------------------------------------------------------------------ algebra

    def _incoming(self, v: VoxelIndex) -> tuple[list[float], list[float], dict[VoxelIndex, EdgeMessage]]:
        node = self.graph.nodes[v]
        msgs = self.messages
        inc = {k: msgs[(k, v)] for k in node.neighbors}
        precisions = [node.self_precision] + [m.precision for m in inc.values()]
        informations = [node.information] + [m.information for m in inc.values()]
        return precisions, informations, inc

    def aggregate_excluding(self, v: VoxelIndex, exclude: VoxelIndex) -> tuple[float, float]:
        """(P_i\\j, mu_i\\j): self potential plus all incoming messages except the one from ``exclude``."""
        node = self.graph.node(v)
        if exclude not in node.neighbors:
            raise MissingNodeError(exclude)
        precisions = [node.self_precision]
        informations = [node.information]
        for k in node.neighbors:
            if k == exclude:
                continue
            m = self.messages[(k, v)]
            precisions.append(m.precision)
            informations.append(m.information)
        p = math.fsum(precisions)
        if not p > 0.0:
            raise NumericalBreakdown(f"aggregate precision {p} <= 0 at {tuple(v)} excluding {tuple(exclude)}",
                                     edge=(v, exclude))
        return p, math.fsum(informations) / p

    def broadcast_aggregates(self, v: VoxelIndex) -> dict[VoxelIndex, tuple[float, float]]:
        """All (P_i\\j, mu_i\\j) of node ``v`` from one gathered sum of potentials."""
        precisions, informations, inc = self._incoming(v)
        out = {}
        for k, m in inc.items():
            p = math.fsum(precisions + [-m.precision])
            h = math.fsum(informations + [-m.information])
            out[k] = (p, h / p if p > 0.0 else math.nan)
        return out

    def _message_from(self, p_agg: float, mu_agg: float, coupling: float, key: DirectedKey) -> tuple[float, float, float]:
        if not p_agg > 0.0:
            raise NumericalBreakdown(f"aggregate precision {p_agg} <= 0 on edge {key}", edge=key)
        lam = -coupling
        precision = -(lam * lam) / p_agg
        information = -lam * mu_agg
        mean = information / precision
        if not (math.isfinite(precision) and math.isfinite(mean)):
            raise NumericalBreakdown(f"non-finite message on edge {key}: P={precision}, mu={mean}", edge=key)
        return precision, mean, information

    def _track_outgoing(self, v: VoxelIndex) -> None:
        coupling = self.graph.params.beta
        for k, (p_agg, mu_agg) in self.broadcast_aggregates(v).items():
            key = (v, k)
            msg = self.messages[key]
            precision, mean, _ = self._message_from(p_agg, mu_agg, coupling, key)
            ref_p, ref_mu = msg.reference()
            self.queue.update(key, residual(precision, mean, ref_p, ref_mu), msg.order)

    def send_message(self, source: VoxelIndex, target: VoxelIndex) -> tuple[EdgeMessage, float]:
        """Recompute and transmit m_source->target; returns the message and its residual."""
        key = (source, target)
        msg = self.messages.get(key)
        if msg is None:
            raise MissingNodeError(target)
        edge = self.graph.edges[msg.edge_id]
        p_agg, mu_agg = self.aggregate_excluding(source, target)
        precision, mean, information = self._message_from(p_agg, mu_agg, edge.coupling, key)
        ref_p, ref_mu = msg.reference()
        r = residual(precision, mean, ref_p, ref_mu)
        if msg.sent and (precision > 0.0) != (ref_p > 0.0):
            self.sign_flips += 1
            logger.warning(f"Message precision changed sign on {tuple(source)}->{tuple(target)}; residual on |P|")
        if msg.sent:
            msg.prev_precision, msg.prev_mean = msg.precision, msg.mean
        msg.precision, msg.mean, msg.information = precision, mean, information
        msg.sent += 1
        self.messages_sent += 1
        self.trace.record(self.phase, source, target, r)
        self.queue.discard(key)
        # inputs of every message out of the target changed
        coupling = edge.coupling
        for k, (pa, ma) in self.broadcast_aggregates(target).items():
            if k == source:
                continue
            out_key = (target, k)
            out = self.messages[out_key]
            cp, cm, _ = self._message_from(pa, ma, coupling, out_key)
            rp, rm = out.reference()
            self.queue.update(out_key, residual(cp, cm, rp, rm), out.order)
        return msg, r

    # ------------------------------------------------------------------ marginals

    def marginal(self, v: VoxelIndex) -> tuple[float, float]:
        """(mu_i, P_i^-1) from the self potential and every incoming message."""
        if v not in self.graph.nodes:
            raise MissingNodeError(v)
        precisions, informations, _ = self._incoming(v)
        p = math.fsum(precisions)
        if not p > 0.0:
            raise NumericalBreakdown(f"marginal precision {p} <= 0 at node {tuple(v)}", node=v)
        return math.fsum(informations) / p, 1.0 / p

    def marginals(self) -> dict[VoxelIndex, tuple[float, float]]:
        return {v: self.marginal(v) for v in self.graph.nodes}

    def max_residual(self) -> float:
        return self.queue.max_residual()

    # ------------------------------------------------------------------ residual schedule

    def residual_step(self, floor: float | None = None) -> DirectedKey | None:
        """Send the max-residual message; ``None`` when idle (max residual below the floor)."""
        floor = self.floor if floor is None else floor
        top = self.queue.peek()
        if top is None or top[1] < floor:
            return None
        key = top[0]
        self.phase = RESIDUAL
        self.send_message(*key)
        return key

    def run_residual(self, max_messages: int | None = None, floor: float | None = None) -> int:
        sent = 0
        while max_messages is None or sent < max_messages:
            if self.residual_step(floor) is None:
                break
            sent += 1
        return sent

    # ------------------------------------------------------------------ round-robin baseline

    def round_robin_sweep(self) -> float:
        """Send every directed message once in edge order; returns the largest residual seen."""
        self.phase = ROUND_ROBIN
        worst = 0.0
        for key in sorted(self.messages, key=lambda k: self.messages[k].order):
            _, r = self.send_message(*key)
            worst = max(worst, r)
        return worst

    def run_round_robin(self, tol: float | None = None, max_sweeps: int = 10_000) -> int:
        tol = self.floor if tol is None else tol
        for sweep in range(1, max_sweeps + 1):
            if self.round_robin_sweep() < tol:
                return sweep
        logger.warning(f"Round-robin stopped after {max_sweeps} sweeps above tolerance {tol}")
        return max_sweeps

    # ------------------------------------------------------------------ wildfire schedule

    @property
    def fire_active(self) -> bool:
        return bool(self._fire_targets or self._fire or self._fire_starts)

    def queue_wildfire(self, start: VoxelIndex) -> None:
        """Schedule a wildfire iteration from ``start`` after the ones already pending."""
        self._fire_starts.append(start)

    def _seed(self, v: VoxelIndex) -> None:
        if v not in self._fire_members:
            self._fire.append(v)
            self._fire_members.add(v)

    def wildfire_step(self, epsilon: float | None = None) -> DirectedKey | None:
        """Send one wildfire message; ``None`` once the queue and pending starts are exhausted."""
        eps = self.graph.params.epsilon if epsilon is None else epsilon
        nodes = self.graph.nodes
        while True:
            while self._fire_targets:
                source = self._fire_node
                target = self._fire_targets.popleft()
                if source not in nodes or target not in nodes[source].neighbors:
                    continue
                self.phase = WILDFIRE
                _, r = self.send_message(source, target)
                if r > eps:
                    if self.expansion_hook is not None:
                        self.expansion_hook(target)
                    self._seed(target)
                return source, target
            if self._fire_node is not None:
                self._fire_members.discard(self._fire_node)
                self._fire_node = None
            if self._fire:
                t = self._fire.popleft()
                if t in nodes:
                    self._fire_node = t
                    self._fire_targets = deque(nodes[t].neighbors)
                else:
                    self._fire_members.discard(t)
                continue
            if self._fire_starts:
                self._seed(self._fire_starts.popleft())
                continue
            return None

    def wildfire_iteration(self, start: VoxelIndex, epsilon: float | None = None) -> int:
        """Run the wildfire schedule from ``start`` to exhaustion; returns messages sent."""
        self.graph.node(start)
        self.queue_wildfire(start)
        sent = 0
        while self.wildfire_step(epsilon) is not None:
            sent += 1
        return sent


@dataclass
class HybridRun:
    wildfire_messages: int = 0
    residual_messages: int = 0
    insertions: int = 0
    stopped: str = "idle"

    @property
    def messages(self) -> int:
        return self.wildfire_messages + self.residual_messages


class HybridScheduler:
    """
    Wildfire on measurement arrival, residual propagation in between.

    ``mode`` selects the schedule: ``hybrid``, ``wildfire`` (no residual phase)
    or ``residual`` (measurements inserted without a wildfire).
    """

    MODES = ("hybrid", "wildfire", "residual")

    def __init__(self, solver: GaBPSolver, stage: Callable[[Measurement, bool], object], mode: str = "hybrid"):
        if mode not in self.MODES:
            raise ValueError(f"mode must be one of {self.MODES}, got {mode!r}")
        self.solver = solver
        self.stage = stage
        self.mode = mode
        self.pending: deque[Measurement] = deque()

    def submit(self, m: Measurement) -> None:
        self.pending.append(m)

    def run(
        self,
        budget: int | None = None,
        interrupt: Callable[[], bool] | None = None,
        floor: float | None = None,
    ) -> HybridRun:
        """Process until idle, out of message budget, or ``interrupt()`` returns true."""
        run = HybridRun()
        solver = self.solver
        while True:
            while self.pending:
                self.stage(self.pending.popleft(), self.mode != "residual")
                run.insertions += 1
            if interrupt is not None and interrupt():
                run.stopped = "interrupted"
                return run
            if budget is not None and run.messages >= budget:
                run.stopped = "budget"
                return run
            if solver.fire_active:
                if solver.wildfire_step() is not None:
                    run.wildfire_messages += 1
                continue
            if self.mode == "wildfire":
                run.stopped = "idle"
                return run
            if solver.residual_step(floor) is None:
                run.stopped = "idle"
                return run
            run.residual_messages += 1
