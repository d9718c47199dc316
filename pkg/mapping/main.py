import argparse
import json
import sys
from datetime import datetime
from pathlib import Path

from rich.console import Console

from src.gabp_mapping import config
from src.gabp_mapping.bench import VARIANTS, MapExport, check_oracle, run_benchmark, sensitivity_sweep
from src.gabp_mapping.dynamic import GasMapper
from src.gabp_mapping.errors import MappingError, NumericalBreakdown, OracleError, ScenarioError
from src.gabp_mapping.plume import read_measurement_log, run_sweep, write_measurement_log
from src.gabp_mapping.scenario import Scenario

EXIT_FAILED_CHECK = 1
EXIT_BAD_INPUT = 2
EXIT_NUMERICAL = 3

# human output on stderr; stdout carries the JSON-lines summary
console = Console(stderr=True)


def _emit(record: dict):
    """One JSON line on stdout for CI consumers."""
    sys.stdout.write(json.dumps(record, default=str) + "\n")
    sys.stdout.flush()


def _size(text: str) -> tuple[int, int, int]:
    """Parse an instance size such as 6x6x3."""
    parts = text.lower().split("x")
    try:
        size = tuple(int(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like 6x6x3, got {text!r}")
    if len(size) != 3 or min(size) < 1:
        raise argparse.ArgumentTypeError(f"size must be three positive extents, got {text!r}")
    return size


def _stem(scenario: Scenario, what: str) -> str:
    ts = datetime.now().strftime("%Y%m%d-%H%M%S")
    return f"{what}-{scenario.name}-s{scenario.seed}-{ts}"


def _load(args) -> Scenario:
    scenario = Scenario.load(args.scenario)
    return scenario.with_overrides(
        seed=args.seed,
        epsilon=args.epsilon,
        resolution=args.resolution,
        planar=args.planar,
        sigma_p_sq=getattr(args, "sigma_p", None),
    )


def cmd_simulate(args) -> int:
    scenario = _load(args)
    grid = scenario.build_grid()
    gas = scenario.build_field(grid)
    sweep = run_sweep(scenario.build_plan(grid), gas, scenario.build_sensor())
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = write_measurement_log(sweep.records, grid, out_dir / f"{_stem(scenario, 'log')}.csv")
    console.print(f"[bold green]Simulated[/bold green] {len(sweep.records)} measurements ({sweep.skipped_waypoints} waypoints skipped)")
    console.print(f"[dim]Saved: {path}")
    _emit({"command": "simulate", "scenario": scenario.name, "measurements": len(sweep.records), "log": path})
    return 0


def cmd_map(args) -> int:
    scenario = _load(args)
    grid = scenario.build_grid()
    measurements = read_measurement_log(args.log, grid)
    mapper = GasMapper(grid, scenario.hyper(), dynamic=args.variant != "gabp-full",
                       planar=scenario.planar or None)
    for m in measurements:
        mapper.insert_measurement(m)
    sent = mapper.converge()
    export = MapExport.from_marginals(mapper.marginals(), grid, mapper.params, scenario=scenario.name)
    csv_path, json_path = export.write(args.out_dir, _stem(scenario, "map"))
    console.print(f"[bold blue]Mapped[/bold blue] {len(measurements)} measurements onto {len(mapper.graph)} states "
          f"({mapper.solver.messages_sent} messages, {sent} in the final residual phase)")
    console.print(f"[dim]Saved:\n - {csv_path}\n - {json_path}")
    _emit({"command": "map", **mapper.snapshot(), "map": csv_path})
    return 0


def cmd_bench(args) -> int:
    scenario = _load(args)
    out_dir = Path(args.out_dir)
    if args.sweep_epsilon:
        sigma_p = [None] + ([args.sigma_p] if args.sigma_p is not None else [])
        table = sensitivity_sweep(scenario, args.sweep_epsilon, sigma_p)
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / f"{_stem(scenario, 'sensitivity')}.csv"
        table.to_csv(path, index=False)
        console.print(table)
        for row in table.to_dict(orient="records"):
            _emit({"command": "bench", "sweep": True, **row})
        return 0
    variants = VARIANTS if args.variant == "all" else [args.variant]
    for variant in variants:
        result = run_benchmark(scenario, variant)
        stem = _stem(scenario, variant)
        out_dir.mkdir(parents=True, exist_ok=True)
        result.series.to_csv(out_dir / f"{stem}-rmse.csv", index=False)
        result.export.write(out_dir, f"{stem}-map")
        console.print(f"[bold green]{variant}[/bold green]", result.stats.model_dump())
        _emit({"command": "bench", "scenario": scenario.name, "seed": scenario.seed, **result.stats.model_dump()})
    return 0


def cmd_check(args) -> int:
    first = args.seed or 0
    report = check_oracle(
        seeds=range(first, first + args.instances),
        workers=args.workers,
        sizes=args.sizes or [(6, 6, 3)],
    )
    for r in report.results:
        colour = "green" if r.passed else "red"
        console.print(f"[{colour}]{r.kind:>6} seed={r.seed:<4}[/{colour}] nodes={r.nodes} "
              f"mean_err={r.max_mean_error:.2e} var_excess={r.max_var_excess:.2e} {r.detail}")
        _emit({"command": "check", **r.model_dump()})
    _emit({"command": "check", "passed": report.passed, "failing": report.failing_seeds})
    return 0 if report.passed else EXIT_FAILED_CHECK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Gas distribution mapping with Gaussian belief propagation")
    sub = parser.add_subparsers(dest="command")

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--scenario", type=str, default=config.SCENARIO_FILE or None, required=not config.SCENARIO_FILE,
                        help="Scenario YAML file")
    common.add_argument("--seed", type=int, default=None, help="Override the scenario seed")
    common.add_argument("--epsilon", type=float, default=None, help="Wildfire/expansion residual threshold")
    common.add_argument("--resolution", type=float, default=None, help="Voxel edge length in meters")
    common.add_argument("--out-dir", type=str, default=str(config.OUT_DIR), help="Output directory")
    common.add_argument("--2d", dest="planar", action="store_true", help="Planar grid with 4-neighbour lattice")

    sub.add_parser("simulate", parents=[common], help="Emit a measurement log from a scenario")

    p_map = sub.add_parser("map", parents=[common], help="Map a measurement log")
    p_map.add_argument("log", type=str, help="Measurement log CSV (t,x,y,z,value)")
    p_map.add_argument("--variant", choices=["gabp-dynamic", "gabp-full"], default="gabp-dynamic")

    p_bench = sub.add_parser("bench", parents=[common], help="Run the benchmark protocol")
    p_bench.add_argument("--variant", choices=[*VARIANTS, "all"], default="all")
    p_bench.add_argument("--sweep-epsilon", type=float, nargs="+", default=None,
                         help="Sensitivity sweep over these epsilon values")
    p_bench.add_argument("--sigma-p", type=float, default=None, help="Explicit prior message variance")

    p_check = sub.add_parser("check", help="GaBP versus dense-solver equivalence suite")
    p_check.add_argument("--seed", type=int, default=0, help="First instance seed")
    p_check.add_argument("--instances", type=int, default=10, help="Seeds per instance kind")
    p_check.add_argument("--workers", type=int, default=4, help="Worker threads")
    p_check.add_argument("--sizes", type=_size, nargs="+", default=None,
                         help="Random-world sizes such as 6x6x3 8x8x4 (default 6x6x3)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    config.setup_logging()
    commands = {"simulate": cmd_simulate, "map": cmd_map, "bench": cmd_bench, "check": cmd_check}
    if args.command not in commands:
        parser.print_help()
        return EXIT_BAD_INPUT
    try:
        return commands[args.command](args)
    except (ScenarioError, MappingError) as e:
        console.print(f"[bold red]Error:[/bold red] {e}")
        _emit({"command": args.command, "error": str(e)})
        return EXIT_BAD_INPUT
    except (NumericalBreakdown, OracleError) as e:
        console.print(f"[bold red]Numerical failure:[/bold red] {e}")
        _emit({"command": args.command, "error": str(e)})
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
