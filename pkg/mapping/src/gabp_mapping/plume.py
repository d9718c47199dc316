"""
Analytic ground-truth gas fields and simulated sensor sweeps.

The field is a sum of advected Gaussian plumes: spread grows linearly with
downwind distance, the ground (grid floor) reflects, and upwind of a source the
kernel decays as a Gaussian of the upwind distance. Voxels that are occupied
read 0; free voxels with no free-space path to a source only see background.
"""

from __future__ import annotations

import bisect
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, field_validator
from scipy import ndimage

from .errors import ScenarioError
from .graph import Measurement
from .occupancy import VoxelGrid, VoxelIndex

logger = logging.getLogger(__name__)

Point = tuple[float, float, float]


class PlumeSource(BaseModel):
    position: Point
    strength: float = Field(gt=0)
    # (start time s, strength) steps; before the first step the base strength applies
    schedule: list[tuple[float, float]] = Field(default_factory=list)

    @field_validator("schedule")
    @classmethod
    def _sorted_schedule(cls, v):
        if any(s < 0 for _, s in v):
            raise ValueError("scheduled strengths must be >= 0")
        return sorted(v)

    def strength_at(self, t: float) -> float:
        if not self.schedule:
            return self.strength
        i = bisect.bisect_right([ts for ts, _ in self.schedule], t)
        return self.strength if i == 0 else self.schedule[i - 1][1]


class GroundTruthField:
    def __init__(
        self,
        grid: VoxelGrid,
        sources: Sequence[PlumeSource],
        wind: tuple[float, float] = (1.0, 0.0),
        diffusivity: tuple[float, float] = (0.1, 0.05),
        sigma0: float = 0.5,
        background: float = 0.0,
        planar: bool | None = None,
    ):
        speed = math.hypot(*wind)
        if not speed > 0:
            raise ScenarioError("wind speed must be positive")
        if sigma0 <= 0 or min(diffusivity) < 0 or background < 0:
            raise ScenarioError("plume spread parameters must be positive and background >= 0")
        self.grid = grid
        self.sources = list(sources)
        self.wind = wind
        self.speed = speed
        self.direction = (wind[0] / speed, wind[1] / speed)
        self.diffusivity = diffusivity
        self.sigma0 = sigma0
        self.background = background
        self.planar = grid.planar if planar is None else planar
        self._ground = grid.origin[2]
        self._reach = self._label_reach()

    def _label_reach(self) -> list[np.ndarray | None]:
        """Per source, mask of free voxels connected to the source voxel."""
        labels, _ = ndimage.label(~self.grid.occupancy)
        reach = []
        for src in self.sources:
            if not self.grid.contains(src.position):
                raise ScenarioError(f"source at {src.position} lies outside the grid")
            v = self.grid.voxel_of(src.position)
            if self.grid.is_occupied(v):
                logger.warning(f"Source at {src.position} lies inside an obstacle and is ignored")
                reach.append(None)
                continue
            reach.append(labels == labels[v])
        return reach

    def _kernel(self, src: PlumeSource, t: float, x, y, z):
        q = src.strength_at(t)
        sx, sy, sz = src.position
        ux, uy = self.direction
        dx, dy = x - sx, y - sy
        down = dx * ux + dy * uy
        cross = -dx * uy + dy * ux
        ah, av = self.diffusivity
        s0 = self.sigma0
        d = np.maximum(down, 0.0)
        sig_y = s0 + ah * d
        upwind = np.exp(-np.minimum(down, 0.0) ** 2 / (2 * s0 * s0))
        lateral = np.exp(-cross**2 / (2 * sig_y**2))
        if self.planar:
            return q / (math.sqrt(2 * math.pi) * self.speed * sig_y) * lateral * upwind
        sig_z = s0 + av * d
        h, zz = sz - self._ground, z - self._ground
        vertical = np.exp(-((zz - h) ** 2) / (2 * sig_z**2)) + np.exp(-((zz + h) ** 2) / (2 * sig_z**2))
        return q / (2 * math.pi * self.speed * sig_y * sig_z) * lateral * vertical * upwind

    def concentration_at(self, p: Sequence[float], t: float = 0.0) -> float:
        """Field value at world point ``p`` (meters) and time ``t``."""
        v = self.grid.voxel_of(p)
        if self.grid.is_occupied(v):
            return 0.0
        value = self.background
        for src, reach in zip(self.sources, self._reach):
            if reach is not None and reach[v]:
                value += float(self._kernel(src, t, p[0], p[1], p[2]))
        return value

    def field(self, t: float = 0.0) -> np.ndarray:
        """Field sampled at every voxel centre; occupied voxels hold 0."""
        x, y, z = self.grid.centers()
        out = np.full(self.grid.dims, self.background, dtype=float)
        for src, reach in zip(self.sources, self._reach):
            if reach is not None:
                out += np.where(reach, self._kernel(src, t, x, y, z), 0.0)
        out[self.grid.occupancy] = 0.0
        return out


class SensorModel(BaseModel):
    noise_sd: float = Field(0.0, ge=0)
    rate_hz: float = Field(2.0, gt=0)
    lag_s: float = Field(0.0, ge=0)  # first-order time constant


class Sensor:
    """Point sensor with a first-order lag and seeded Gaussian noise."""

    def __init__(self, model: SensorModel, seed: int = 0):
        self.model = model
        self.rng = np.random.default_rng(seed)
        self._level: float | None = None
        self._last_t: float | None = None

    def sample(self, gas: GroundTruthField, p: Sequence[float], t: float) -> Measurement:
        truth = gas.concentration_at(p, t)
        if self._level is None or self.model.lag_s == 0:
            level = truth
        else:
            gain = 1.0 - math.exp(-max(t - self._last_t, 0.0) / self.model.lag_s)
            level = self._level + (truth - self._level) * gain
        self._level, self._last_t = level, t
        noise = self.rng.normal(0.0, self.model.noise_sd) if self.model.noise_sd > 0 else 0.0
        return Measurement(value=max(level + noise, 0.0), timestamp=t, voxel=gas.grid.voxel_of(p))


class SweepPlan(BaseModel):
    waypoints: list[Point] = Field(default_factory=list)
    speed: float = Field(1.0, gt=0)
    en_route: bool = True

    @classmethod
    def sawtooth(
        cls,
        grid: VoxelGrid,
        lane_spacing: float,
        point_spacing: float,
        z_levels: Sequence[float],
        margin: float = 0.5,
        speed: float = 1.0,
        lanes: int | None = None,
        en_route: bool = True,
    ) -> "SweepPlan":
        """Lawnmower lanes along x, stepped in y, cycling the altitude through ``z_levels`` at each waypoint."""
        ox, oy, _ = grid.origin
        ex, ey = ox + grid.dims[0] * grid.resolution, oy + grid.dims[1] * grid.resolution
        xs = np.arange(ox + margin, ex - margin + 1e-9, point_spacing)
        ys = np.arange(oy + margin, ey - margin + 1e-9, lane_spacing)
        if lanes is not None:
            ys = ys[:lanes]
        waypoints: list[Point] = []
        k = 0
        for lane, y in enumerate(ys):
            for x in xs if lane % 2 == 0 else xs[::-1]:
                waypoints.append((float(x), float(y), float(z_levels[k % len(z_levels)])))
                k += 1
        return cls(waypoints=waypoints, speed=speed, en_route=en_route)


@dataclass
class SweepRecord:
    measurement: Measurement
    position: Point
    kind: str  # "waypoint" or "en_route"
    resolve_s: float


@dataclass
class SweepResult:
    records: list[SweepRecord] = field(default_factory=list)
    skipped_waypoints: int = 0
    rejected_en_route: int = 0
    end_time: float = 0.0

    @property
    def measurements(self) -> list[Measurement]:
        return [r.measurement for r in self.records]


class SweepSolver(Protocol):
    def resolve(self, m: Measurement) -> float:
        """Insert ``m``; return the solver time it took in seconds."""

    def idle(self, t_start: float, t_end: float) -> None:
        """Solver is free between the two instants."""


class InstantSolver:
    """Collects measurements and resolves them in zero time."""

    def __init__(self):
        self.received: list[Measurement] = []

    def resolve(self, m: Measurement) -> float:
        self.received.append(m)
        return 0.0

    def idle(self, t_start: float, t_end: float) -> None:
        pass


def run_sweep(
    plan: SweepPlan,
    gas: GroundTruthField,
    sensor: Sensor,
    solver: SweepSolver | None = None,
    t0: float = 0.0,
) -> SweepResult:
    """
    Fly the plan, gating samples on solver state.

    Waypoint samples wait until the previous insertion has resolved, and the
    vehicle holds at the waypoint until its own sample resolves. En-route samples
    at the sensor rate are inserted only when the solver is idle and the last
    observed resolve time fits before the next waypoint arrival.
    """
    solver = solver or InstantSolver()
    grid = gas.grid
    result = SweepResult(end_time=t0)
    if not plan.waypoints:
        return result
    for wp in plan.waypoints:
        if not grid.contains(wp):
            raise ScenarioError(f"waypoint {wp} lies outside the grid extent")
    period = 1.0 / sensor.model.rate_hz
    t = t0
    free_at = t0
    last_resolve = 0.0
    pos = np.asarray(plan.waypoints[0], dtype=float)

    def insert(p, ts, kind):
        nonlocal free_at, last_resolve
        if free_at < ts:
            solver.idle(free_at, ts)
        m = sensor.sample(gas, p, ts)
        r = solver.resolve(m)
        result.records.append(SweepRecord(m, tuple(float(c) for c in p), kind, r))
        free_at, last_resolve = ts + r, r

    for wp in plan.waypoints:
        target = np.asarray(wp, dtype=float)
        dist = float(np.linalg.norm(target - pos))
        arrive = t + dist / plan.speed
        if plan.en_route and dist > 0:
            ts = t + period
            while ts < arrive:
                p = pos + (target - pos) * ((ts - t) / (arrive - t))
                if grid.is_occupied(grid.voxel_of(p)):
                    pass
                elif free_at <= ts and ts + last_resolve <= arrive:
                    insert(p, ts, "en_route")
                else:
                    result.rejected_en_route += 1
                ts += period
        t, pos = arrive, target
        if grid.is_occupied(grid.voxel_of(wp)):
            logger.warning(f"Waypoint {wp} is inside an obstacle, skipped")
            result.skipped_waypoints += 1
            continue
        t = max(t, free_at)
        insert(wp, t, "waypoint")
        t = free_at
    result.end_time = t
    return result


def write_measurement_log(records: Sequence[SweepRecord], grid: VoxelGrid, path: str | Path) -> Path:
    """CSV with columns t, x, y, z, value (positions in meters)."""
    path = Path(path)
    frame = pd.DataFrame(
        {
            "t": [r.measurement.timestamp for r in records],
            "x": [r.position[0] for r in records],
            "y": [r.position[1] for r in records],
            "z": [r.position[2] for r in records],
            "value": [r.measurement.value for r in records],
        }
    )
    frame.to_csv(path, index=False, float_format="%.17g")
    return path


def read_measurement_log(path: str | Path, grid: VoxelGrid) -> list[Measurement]:
    try:
        frame = pd.read_csv(path, float_precision="round_trip")
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise ScenarioError(f"{path}: cannot read measurement log ({e})") from e
    missing = {"t", "x", "y", "z", "value"} - set(frame.columns)
    if missing:
        raise ScenarioError(f"{path}: missing columns {sorted(missing)}")
    out = []
    for row in frame.itertuples(index=False):
        voxel = grid.voxel_of((row.x, row.y, row.z))
        out.append(Measurement(value=float(row.value), timestamp=float(row.t), voxel=VoxelIndex(*voxel)))
    return sorted(out, key=lambda m: m.timestamp)
