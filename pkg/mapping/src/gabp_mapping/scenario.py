"""Scenario files: YAML parsed into validated pydantic models."""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Literal

import numpy as np
import yaml
from pydantic import BaseModel, Field, ValidationError, model_validator

from . import config
from .errors import ScenarioError
from .graph import HyperParams
from .occupancy import VoxelGrid, read_occgrid
from .plume import GroundTruthField, PlumeSource, Sensor, SensorModel, SweepPlan

logger = logging.getLogger(__name__)

Triple = tuple[float, float, float]


class Box(BaseModel):
    lo: Triple
    hi: Triple


class GridSpec(BaseModel):
    extent: Triple | None = None  # meters
    resolution: float = Field(1.0, gt=0)
    origin: Triple = (0.0, 0.0, 0.0)
    occgrid: str | None = None
    boxes: list[Box] = Field(default_factory=list)

    @model_validator(mode="after")
    def _one_source(self) -> "GridSpec":
        if self.extent is None and self.occgrid is None:
            raise ValueError("grid needs either 'extent' or 'occgrid'")
        return self


class SawtoothSpec(BaseModel):
    lane_spacing: float = Field(2.0, gt=0)
    point_spacing: float = Field(2.0, gt=0)
    z_levels: list[float] = Field(default_factory=lambda: [1.0, 3.0, 5.0])
    margin: float = 0.5
    lanes: int | None = None


class PlanSpec(BaseModel):
    waypoints: list[Triple] = Field(default_factory=list)
    sawtooth: SawtoothSpec | None = None
    speed: float = Field(1.0, gt=0)
    en_route: bool = True


class RmseSpec(BaseModel):
    z_thresh: float = config.Z_THRESH_PPB
    interval_s: float = Field(1.0, gt=0)


class TimingSpec(BaseModel):
    mode: Literal["modelled", "wall"] = "modelled"
    message_cost_s: float = Field(config.MESSAGE_COST_S, ge=0)
    dense_cost_s: float = Field(config.DENSE_COST_S, ge=0)
    residual_rate: float = Field(config.RESIDUAL_RATE, ge=0)
    # fixed resolve time for the dense-direct variant, overriding the cost model
    dense_resolve_s: float | None = None
    # residual budget spent after the sweep before the final RMSE, in simulated seconds
    final_residual_s: float = Field(10.0, ge=0)


class Scenario(BaseModel):
    name: str = "scenario"
    seed: int = 0
    units: str = "ppb"
    planar: bool = False
    plane_z: float = 1.0
    grid: GridSpec
    sources: list[PlumeSource] = Field(default_factory=list)
    wind: tuple[float, float] = (1.0, 0.0)
    diffusivity: tuple[float, float] = (0.1, 0.05)
    sigma0: float = Field(0.5, gt=0)
    background: float = Field(0.0, ge=0)
    sensor: SensorModel = Field(default_factory=SensorModel)
    plan: PlanSpec = Field(default_factory=PlanSpec)
    hyperparams: dict[str, float | None] = Field(default_factory=dict)
    rmse: RmseSpec = Field(default_factory=RmseSpec)
    timing: TimingSpec = Field(default_factory=TimingSpec)
    base_dir: Path = Field(default=Path("."), exclude=True)

    @classmethod
    def load(cls, path: str | Path) -> "Scenario":
        path = Path(path)
        try:
            raw = yaml.safe_load(path.read_text(encoding="utf-8"))
        except (OSError, yaml.YAMLError) as e:
            raise ScenarioError(f"{path}: cannot read scenario ({e})") from e
        if not isinstance(raw, dict):
            raise ScenarioError(f"{path}: scenario must be a mapping")
        return cls.from_dict(raw, base_dir=path.parent)

    @classmethod
    def from_dict(cls, raw: dict, base_dir: Path | None = None) -> "Scenario":
        try:
            scenario = cls(**raw)
        except ValidationError as e:
            raise ScenarioError(f"invalid scenario: {e}") from e
        if base_dir is not None:
            scenario.base_dir = base_dir
        return scenario

    def with_overrides(
        self,
        seed: int | None = None,
        epsilon: float | None = None,
        resolution: float | None = None,
        planar: bool | None = None,
        sigma_p_sq: float | None = None,
    ) -> "Scenario":
        update: dict = {}
        if seed is not None:
            update["seed"] = seed
        if planar:
            update["planar"] = True
        if resolution is not None:
            if self.grid.occgrid is not None:
                raise ScenarioError("--resolution cannot rescale an occgrid file")
            update["grid"] = self.grid.model_copy(update={"resolution": resolution})
        hyper = dict(self.hyperparams)
        if epsilon is not None:
            hyper["epsilon"] = epsilon
        if sigma_p_sq is not None:
            hyper["sigma_p_sq"] = sigma_p_sq
        update["hyperparams"] = hyper
        return self.model_copy(update=update)

    # ------------------------------------------------------------------ builders

    def build_grid(self) -> VoxelGrid:
        spec = self.grid
        if spec.occgrid is not None:
            grid = read_occgrid(self.base_dir / spec.occgrid)
            if self.planar and grid.dims[2] != 1:
                k = min(int((self.plane_z - grid.origin[2]) // grid.resolution), grid.dims[2] - 1)
                occ = grid.occupancy[:, :, k : k + 1].copy()
                grid = VoxelGrid((grid.dims[0], grid.dims[1], 1), grid.resolution,
                                 (grid.origin[0], grid.origin[1], self.plane_z - grid.resolution / 2), occ)
        else:
            res = spec.resolution
            ex, ey, ez = spec.extent
            dims = (max(1, round(ex / res)), max(1, round(ey / res)), max(1, round(ez / res)))
            origin = spec.origin
            if self.planar:
                dims = (dims[0], dims[1], 1)
                origin = (origin[0], origin[1], self.plane_z - res / 2)
            grid = VoxelGrid(dims, res, origin)
        if spec.boxes:
            x, y, z = grid.centers()
            axes = (x, y) if self.planar else (x, y, z)
            for box in spec.boxes:
                if self.planar and not box.lo[2] <= self.plane_z <= box.hi[2]:
                    continue
                inside = np.ones(grid.dims, dtype=bool)
                for c, lo, hi in zip(axes, box.lo, box.hi):
                    inside &= (c >= lo) & (c <= hi)
                grid.occupancy |= inside
        logger.info(f"Grid {grid.dims} at {grid.resolution} m, {int(grid.occupancy.sum())} occupied voxels")
        return grid

    def build_field(self, grid: VoxelGrid) -> GroundTruthField:
        sources = self.sources
        if self.planar:
            sources = [s.model_copy(update={"position": (s.position[0], s.position[1], self.plane_z)}) for s in sources]
        return GroundTruthField(
            grid, sources, wind=self.wind, diffusivity=self.diffusivity,
            sigma0=self.sigma0, background=self.background, planar=self.planar or grid.planar,
        )

    def build_plan(self, grid: VoxelGrid) -> SweepPlan:
        plan = self.plan
        if plan.sawtooth is not None:
            st = plan.sawtooth
            levels = [self.plane_z] if self.planar else st.z_levels
            return SweepPlan.sawtooth(grid, st.lane_spacing, st.point_spacing, levels, st.margin,
                                      plan.speed, st.lanes, plan.en_route)
        waypoints = plan.waypoints
        if self.planar:
            waypoints = [(x, y, self.plane_z) for x, y, _ in waypoints]
        return SweepPlan(waypoints=waypoints, speed=plan.speed, en_route=plan.en_route)

    def build_sensor(self) -> Sensor:
        return Sensor(self.sensor, seed=self.seed)

    def hyper(self) -> HyperParams:
        try:
            return HyperParams.from_env(**self.hyperparams)
        except ValidationError as e:
            raise ScenarioError(f"invalid hyperparameters: {e}") from e
