"""
Evaluation harness: RMSE over the plume region, map exports, benchmark runs of
the three solver variants, the oracle check suite and schedule comparisons.
"""

from __future__ import annotations

import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel
from scipy import ndimage

from . import config, oracle
from .dynamic import GasMapper, InsertionReport
from .errors import ScenarioError
from .graph import HyperParams, Measurement
from .occupancy import VoxelGrid, VoxelIndex
from .plume import GroundTruthField, SweepResult, run_sweep
from .scenario import Scenario

logger = logging.getLogger(__name__)

VARIANTS = ("dense-direct", "gabp-full", "gabp-dynamic")


def rmse_plume(estimates: np.ndarray, truth: np.ndarray, z_thresh: float = config.Z_THRESH_PPB) -> float:
    """RMSE over voxels whose true concentration exceeds ``z_thresh``."""
    estimates = np.asarray(estimates, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if estimates.shape != truth.shape:
        raise ScenarioError(f"estimate shape {estimates.shape} does not match field shape {truth.shape}")
    mask = truth > z_thresh
    if not mask.any():
        raise ScenarioError("threshold excludes all cells")
    return float(np.sqrt(np.mean((truth[mask] - estimates[mask]) ** 2)))


class RunStats(BaseModel):
    variant: str
    total_runtime_s: float
    avg_resolve_s: float
    processed_measurements: int
    final_states: int
    mean_states: float
    converged_rmse: float
    messages: int = 0
    rejected_en_route: int = 0
    wall_avg_resolve_s: float = 0.0


@dataclass
class MapExport:
    rows: pd.DataFrame
    header: dict

    @classmethod
    def from_marginals(
        cls,
        marginals: dict[VoxelIndex, tuple[float, float]],
        grid: VoxelGrid,
        params: HyperParams,
        **extra,
    ) -> "MapExport":
        voxels = sorted(marginals)
        rows = pd.DataFrame(
            {
                "ix": [v[0] for v in voxels],
                "iy": [v[1] for v in voxels],
                "iz": [v[2] for v in voxels],
                "mean": [marginals[v][0] for v in voxels],
                "variance": [marginals[v][1] for v in voxels],
            }
        )
        header = {
            "dims": list(grid.dims),
            "resolution": grid.resolution,
            "origin": list(grid.origin),
            "hyperparams": json.loads(params.model_dump_json()),
            "exported_at": datetime.now(timezone.utc).isoformat(),
            "nodes": len(voxels),
            **extra,
        }
        return cls(rows, header)

    def write(self, out_dir: str | Path, stem: str) -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path = out_dir / f"{stem}.csv"
        json_path = out_dir / f"{stem}.json"
        self.rows.to_csv(csv_path, index=False, float_format="%.17g")
        json_path.write_text(json.dumps(self.header, indent=2), encoding="utf-8")
        return csv_path, json_path

    @classmethod
    def read(cls, csv_path: str | Path) -> "MapExport":
        csv_path = Path(csv_path)
        header = json.loads(csv_path.with_suffix(".json").read_text(encoding="utf-8"))
        return cls(pd.read_csv(csv_path, float_precision="round_trip"), header)


# ---------------------------------------------------------------------- benchmark runs


class _TruthCache:
    """Ground-truth arrays per distinct set of source strengths."""

    def __init__(self, gas: GroundTruthField):
        self.gas = gas
        self._cache: dict[tuple[float, ...], np.ndarray] = {}

    def at(self, t: float) -> np.ndarray:
        key = tuple(s.strength_at(t) for s in self.gas.sources)
        if key not in self._cache:
            self._cache[key] = self.gas.field(t)
        return self._cache[key]


class VariantRunner:
    """Sweep solver adapter: inserts measurements, spends idle time, samples RMSE on a fixed clock."""

    def __init__(self, scenario: Scenario, grid: VoxelGrid, gas: GroundTruthField, variant: str,
                 params: HyperParams | None = None):
        if variant not in VARIANTS:
            raise ScenarioError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
        self.variant = variant
        self.timing = scenario.timing
        self.rmse_cfg = scenario.rmse
        self.params = params or scenario.hyper()
        self.grid = grid
        self.truth = _TruthCache(gas)
        self.mapper = GasMapper(grid, self.params, dynamic=variant == "gabp-dynamic", planar=scenario.planar or None)
        self.dense = variant == "dense-direct"
        if self.dense and len(self.mapper.graph) > config.DENSE_CAP:
            raise ScenarioError(
                f"dense-direct limited to {config.DENSE_CAP} variables, scenario has {len(self.mapper.graph)}"
            )
        self._estimate = np.full(grid.dims, self.params.z0)
        self._previous = self._estimate
        self._busy_until = -math.inf
        self._next_tick = 0.0
        self.reports: list[InsertionReport] = []
        self.resolve_s: list[float] = []
        self.wall_s: list[float] = []
        self.series: list[dict] = []

    # estimates -------------------------------------------------------

    def _current(self) -> np.ndarray:
        if self.dense:
            return self._estimate
        return self.mapper.fields()[0]

    def _record(self, t: float, estimate: np.ndarray) -> None:
        self.series.append(
            {
                "t": t,
                "rmse": rmse_plume(estimate, self.truth.at(t), self.rmse_cfg.z_thresh),
                "states": len(self.mapper.graph),
                "messages": self.mapper.solver.messages_sent,
                "measurements": len(self.reports),
            }
        )

    def _tick_until(self, t: float) -> None:
        while self._next_tick <= t:
            # a dense solve in progress still shows the previous solution
            est = self._previous if self.dense and self._next_tick < self._busy_until else self._current()
            self._record(self._next_tick, est)
            self._next_tick += self.rmse_cfg.interval_s

    # sweep solver protocol -------------------------------------------

    def resolve(self, m: Measurement) -> float:
        self._tick_until(m.timestamp)
        started = time.perf_counter()
        if self.dense:
            report = self.mapper.stage_measurement(m, seed=False)
            marg = oracle.solve_marginals(self.mapper.graph)
            self._previous = self._estimate
            self._estimate = np.full(self.grid.dims, self.params.z0)
            for v, (mu, _) in marg.items():
                self._estimate[v] = mu
            n = len(self.mapper.graph)
            modelled = self.timing.dense_resolve_s
            if modelled is None:
                modelled = n**3 / 3.0 * self.timing.dense_cost_s
        else:
            report = self.mapper.insert_measurement(m)
            modelled = report.messages_sent * self.timing.message_cost_s
        wall = time.perf_counter() - started
        self.reports.append(report)
        self.wall_s.append(wall)
        resolve = wall if self.timing.mode == "wall" else modelled
        self.resolve_s.append(resolve)
        self._busy_until = m.timestamp + resolve
        return resolve

    def idle(self, t_start: float, t_end: float) -> None:
        if self.dense:
            return
        self._tick_until(t_start)
        rate = self.timing.residual_rate
        t = t_start
        while t < t_end:
            stop = min(self._next_tick, t_end)
            budget = int((stop - t) * rate)
            if budget > 0:
                self.mapper.converge(max_messages=budget)
            t = stop
            if t == self._next_tick:
                self._tick_until(t)

    def finish(self, t_end: float) -> None:
        self._tick_until(t_end)


@dataclass
class BenchResult:
    stats: RunStats
    series: pd.DataFrame
    export: MapExport
    sweep: SweepResult
    runner: VariantRunner = field(repr=False)


def run_benchmark(scenario: Scenario, variant: str, params: HyperParams | None = None) -> BenchResult:
    """Fly the scenario sweep against one solver variant under the gating rule."""
    grid = scenario.build_grid()
    gas = scenario.build_field(grid)
    plan = scenario.build_plan(grid)
    runner = VariantRunner(scenario, grid, gas, variant, params=params)
    started = time.perf_counter()
    sweep = run_sweep(plan, gas, scenario.build_sensor(), runner)
    runner.finish(sweep.end_time)
    if not runner.dense:
        runner.mapper.converge(max_messages=int(scenario.timing.final_residual_s * scenario.timing.residual_rate))
    mapper = runner.mapper
    if runner.dense:
        marginals = oracle.solve_marginals(mapper.graph) if mapper.graph.nodes else {}
        estimate = runner._estimate
    else:
        marginals = mapper.marginals()
        estimate = mapper.fields()[0]
    series = pd.DataFrame(runner.series, columns=["t", "rmse", "states", "messages", "measurements"])
    stats = RunStats(
        variant=variant,
        total_runtime_s=sweep.end_time,
        avg_resolve_s=float(np.mean(runner.resolve_s)) if runner.resolve_s else 0.0,
        processed_measurements=len(runner.reports),
        final_states=len(mapper.graph),
        mean_states=float(series["states"].mean()) if len(series) else float(len(mapper.graph)),
        converged_rmse=rmse_plume(estimate, runner.truth.at(sweep.end_time), scenario.rmse.z_thresh),
        messages=mapper.solver.messages_sent,
        rejected_en_route=sweep.rejected_en_route,
        wall_avg_resolve_s=float(np.mean(runner.wall_s)) if runner.wall_s else 0.0,
    )
    export = MapExport.from_marginals(
        marginals, grid, runner.params, variant=variant, scenario=scenario.name, seed=scenario.seed,
    )
    logger.info(
        f"{variant}: {stats.processed_measurements} measurements, {stats.final_states} states, "
        f"RMSE {stats.converged_rmse:.3f}, wall {time.perf_counter() - started:.2f}s"
    )
    return BenchResult(stats, series, export, sweep, runner)


def sensitivity_sweep(
    scenario: Scenario,
    epsilons: Sequence[float],
    sigma_p_values: Sequence[float | None] = (None,),
    variant: str = "gabp-dynamic",
) -> pd.DataFrame:
    """Final states and converged RMSE per (epsilon, sigma_p^2) setting."""
    rows = []
    for eps in epsilons:
        for sp in sigma_p_values:
            params = scenario.hyper().model_copy(update={"epsilon": eps, "sigma_p_sq": sp})
            result = run_benchmark(scenario, variant, params=params)
            rows.append(
                {
                    "epsilon": eps,
                    "sigma_p_sq": sp if sp is not None else -1.0 / params.far_field_message(6),
                    "final_states": result.stats.final_states,
                    "mean_states": result.stats.mean_states,
                    "converged_rmse": result.stats.converged_rmse,
                    "messages": result.stats.messages,
                }
            )
    return pd.DataFrame(rows)


def compare_schedules(
    grid: VoxelGrid,
    params: HyperParams,
    measurements: Sequence[Measurement],
    truth: np.ndarray,
    budget: int,
    z_thresh: float = config.Z_THRESH_PPB,
    modes: Sequence[str] = ("hybrid", "wildfire"),
) -> pd.DataFrame:
    """
    Process one measurement stream under each schedule with the same message budget.

    Every schedule may send ``budget`` messages between consecutive
    measurements; wildfire-only leaves whatever its fire does not need unused.
    One row per schedule and measurement, taken at cumulative budget
    ``(k + 1) * budget``: messages actually sent, whether the wildfire had
    finished, global max residual and plume RMSE.
    """
    if budget <= 0:
        raise ScenarioError(f"message budget must be positive, got {budget}")
    rows = []
    for mode in modes:
        mapper = GasMapper(grid.copy(), params, dynamic=True, mode=mode)
        for k, m in enumerate(measurements):
            mapper.scheduler.submit(m)
            mapper.scheduler.run(budget=budget)
            rows.append(
                {
                    "schedule": mode,
                    "measurement": k,
                    "budget": (k + 1) * budget,
                    "messages": mapper.solver.messages_sent,
                    "fire_done": not mapper.solver.fire_active,
                    "max_residual": mapper.solver.max_residual(),
                    "rmse": rmse_plume(mapper.fields()[0], truth, z_thresh),
                    "states": len(mapper.graph),
                }
            )
    return pd.DataFrame(rows)


# ---------------------------------------------------------------------- oracle suite


class InstanceResult(BaseModel):
    kind: str
    seed: int
    nodes: int
    max_mean_error: float
    max_var_excess: float
    messages: int
    passed: bool
    detail: str = ""
    dims: tuple[int, int, int] | None = None


@dataclass
class OracleReport:
    results: list[InstanceResult]

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    @property
    def failing_seeds(self) -> list[tuple[str, int]]:
        return [(r.kind, r.seed) for r in self.results if not r.passed]


def random_instance(
    seed: int,
    dims: tuple[int, int, int] = (6, 6, 3),
    params: HyperParams | None = None,
) -> tuple[GasMapper, list[Measurement]]:
    """
    Full graph over a random obstacle world (10-30% fill) with 5-20 measurements.

    Free components are covered first, one measurement each in random order;
    when there are more components than measurements the rest stay unobserved
    and report the prior.
    """
    rng = np.random.default_rng(seed)
    params = params or HyperParams()
    grid = VoxelGrid(dims)
    fill = rng.uniform(0.1, 0.3)
    grid.occupancy[:] = rng.random(dims) < fill
    free = grid.free_voxels()
    total = min(len(free), int(rng.integers(5, 21)))
    labels, count = ndimage.label(~grid.occupancy)
    picks: list[VoxelIndex] = []
    for label in rng.permutation(np.arange(1, count + 1))[:total]:
        members = np.argwhere(labels == label)
        picks.append(VoxelIndex(*map(int, members[rng.integers(len(members))])))
    taken = set(picks)
    rest = [v for v in free if v not in taken]
    extra = total - len(picks)
    if extra > 0:
        picks.extend(rest[i] for i in rng.choice(len(rest), size=extra, replace=False))
    measurements = [
        Measurement(value=float(rng.uniform(0.0, 1000.0)), timestamp=float(k), voxel=v)
        for k, v in enumerate(picks)
    ]
    mapper = GasMapper(grid, params, dynamic=False)
    for m in measurements:
        mapper.stage_measurement(m, seed=False)
    return mapper, measurements


def chain_instance(seed: int, length: int, params: HyperParams | None = None) -> GasMapper:
    rng = np.random.default_rng(seed)
    params = params or HyperParams()
    mapper = GasMapper(VoxelGrid((length, 1, 1)), params, dynamic=False)
    count = int(rng.integers(1, max(2, length // 4) + 1))
    for k, ix in enumerate(sorted(rng.choice(length, size=count, replace=False))):
        mapper.stage_measurement(
            Measurement(value=float(rng.uniform(0.0, 1000.0)), timestamp=float(k), voxel=VoxelIndex(int(ix), 0, 0)),
            seed=False,
        )
    return mapper


def walled_instance(seed: int, params: HyperParams | None = None) -> tuple[GasMapper, VoxelIndex]:
    """6x6x3 world with one free voxel sealed on all sides; measurements only outside it."""
    rng = np.random.default_rng(seed)
    params = params or HyperParams()
    grid = VoxelGrid((6, 6, 3))
    sealed = VoxelIndex(3, 3, 1)
    for n in grid.neighbors(sealed):
        grid.set_occupied(n)
    mapper = GasMapper(grid, params, dynamic=False)
    free = [v for v in grid.free_voxels() if v != sealed]
    for k, i in enumerate(rng.choice(len(free), size=8, replace=False)):
        mapper.stage_measurement(
            Measurement(value=float(rng.uniform(0.0, 1000.0)), timestamp=float(k), voxel=free[i]), seed=False
        )
    return mapper, sealed


def compare_to_oracle(
    mapper: GasMapper,
    kind: str,
    seed: int,
    mean_rtol: float,
    var_rtol: float | None = None,
    floor: float = 1e-20,
    max_messages: int = 2_000_000,
) -> InstanceResult:
    """
    Converge residual BP, then compare every node against the dense solve.

    Mean errors are relative to |mu*| + 1e-6 * max|mu*|, so nodes at background
    are not judged on a vanishing denominator. Variances must not exceed the
    oracle by more than 1e-9; with ``var_rtol`` they must match it.
    """
    sent = mapper.solver.run_residual(max_messages=max_messages, floor=floor)
    exact = oracle.solve_marginals(mapper.graph)
    approx = mapper.marginals()
    scale = max((abs(mu) for mu, _ in exact.values()), default=0.0)
    worst_mean = 0.0
    worst_var = -math.inf
    failures = []
    for v, (mu_o, var_o) in exact.items():
        mu_g, var_g = approx[v]
        err = abs(mu_g - mu_o)
        denom = abs(mu_o) + 1e-6 * scale
        worst_mean = max(worst_mean, err / denom if denom > 0 else err)
        if err > mean_rtol * denom:
            failures.append(f"mean at {tuple(v)}: {mu_g} vs {mu_o}")
        worst_var = max(worst_var, var_g - var_o)
        if var_rtol is not None:
            if abs(var_g - var_o) > var_rtol * var_o:
                failures.append(f"variance at {tuple(v)}: {var_g} vs {var_o}")
        elif var_g > var_o + 1e-9:
            failures.append(f"variance above oracle at {tuple(v)}: {var_g} > {var_o}")
    if mapper.solver.max_residual() >= floor:
        failures.append(f"not converged after {sent} messages")
    return InstanceResult(
        kind=kind,
        seed=seed,
        nodes=len(exact),
        max_mean_error=worst_mean,
        max_var_excess=worst_var,
        messages=sent,
        passed=not failures,
        detail="; ".join(failures[:3]),
    )


def _run_instance(kind: str, seed: int, dims: tuple[int, int, int] = (6, 6, 3)) -> InstanceResult:
    if kind == "chain":
        length = 3 + seed % 48
        return compare_to_oracle(chain_instance(seed, length), kind, seed, mean_rtol=1e-9, var_rtol=1e-9)
    if kind == "walled":
        mapper, sealed = walled_instance(seed)
        result = compare_to_oracle(mapper, kind, seed, mean_rtol=1e-6)
        mu, var = mapper.marginal(sealed)
        if mu != mapper.params.z0 or not math.isclose(var, mapper.params.sigma_d_sq, rel_tol=1e-12):
            result.passed = False
            result.detail = f"sealed voxel reports ({mu}, {var})"
        return result
    mapper, _ = random_instance(seed, dims=dims)
    result = compare_to_oracle(mapper, kind, seed, mean_rtol=1e-6)
    result.dims = dims
    return result


def check_oracle(
    seeds: Iterable[int] = range(10),
    kinds: Sequence[str] = ("chain", "loopy", "walled"),
    workers: int = 4,
    sizes: Sequence[tuple[int, int, int]] = ((6, 6, 3),),
) -> OracleReport:
    """
    Randomised GaBP-versus-dense equivalence suite, instances fanned out over threads.

    ``sizes`` applies to the loopy random worlds; each one runs for every seed.
    """
    sizes = [tuple(int(n) for n in size) for size in sizes]
    for size in sizes:
        if len(size) != 3 or min(size) < 1:
            raise ScenarioError(f"instance size must be three positive extents, got {size}")
        if math.prod(size) > config.DENSE_CAP:
            raise ScenarioError(f"instance size {size} exceeds the dense limit of {config.DENSE_CAP} voxels")
    seeds = list(seeds)
    jobs = []
    for kind in kinds:
        if kind == "loopy":
            jobs.extend((kind, seed, size) for size in sizes for seed in seeds)
        else:
            jobs.extend((kind, seed, (6, 6, 3)) for seed in seeds)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(lambda job: _run_instance(*job), jobs))
    for r in results:
        if not r.passed:
            logger.warning(f"Oracle check failed for {r.kind} seed {r.seed}: {r.detail}")
    return OracleReport(results)
