"""
CLI module for cavplan simulation runs, sweeps, figure data and planner benchmarks.
"""

import json
import logging
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional

from .helper_functions import canonical_json, env_number, set_log_level, setup_logging

logger = setup_logging(__name__)

DEFAULT_OUT = "results"


def _load_dotenv_if_available():
    """Load a .env file from the working directory when python-dotenv is installed."""
    try:
        from dotenv import load_dotenv
        load_dotenv(override=False)
    except ImportError:
        pass


def _fail(message: str, verbose: bool = False):
    print(f"❌ Error: {message}")
    if verbose:
        import traceback
        traceback.print_exc()
    sys.exit(1)


def _number(flag: str, raw: str, cast=float):
    try:
        return cast(raw)
    except ValueError:
        raise ValueError(f"{flag} expects a number, got '{raw}'")


def _number_list(flag: str, raw: str, cast=float) -> List:
    return [_number(flag, part.strip(), cast) for part in raw.split(",") if part.strip()]


def _parse_run_flags(args: List[str]) -> Dict:
    """Flags shared by run, sweep and bench-planner."""
    options = {
        "scenario": None,
        "demand_level": 2,
        "penetration": 0.4,
        "seed": 0,
        "seeds": 1,
        "duration": 1800.0,
        "warmup": 150.0,
        "threads": None,
        "time_limit": None,
        "benchmark": False,
        "out": None,
        "demand_scale": 1.0,
        "jobs": 1,
        "strict": True,
        "verbose": False,
        "levels": None,
        "penetrations": None,
        "workers": None,
        "time_limits": None,
        "problems": 20,
    }
    valued = {
        "--scenario": ("scenario", str),
        "--demand-level": ("demand_level", int),
        "--penetration": ("penetration", float),
        "--seed": ("seed", int),
        "--seeds": ("seeds", int),
        "--duration": ("duration", float),
        "--warmup": ("warmup", float),
        "--threads": ("threads", int),
        "--time-limit": ("time_limit", float),
        "--out": ("out", str),
        "--demand-scale": ("demand_scale", float),
        "--jobs": ("jobs", int),
        "--problems": ("problems", int),
    }
    lists = {
        "--levels": ("levels", int),
        "--penetrations": ("penetrations", float),
        "--workers": ("workers", int),
        "--time-limits": ("time_limits", float),
    }

    i = 0
    while i < len(args):
        arg = args[i]
        if arg in valued or arg in lists:
            if i + 1 >= len(args):
                raise ValueError(f"{arg} expects a value")
            raw = args[i + 1]
            if arg in valued:
                key, cast = valued[arg]
                options[key] = raw if cast is str else _number(arg, raw, cast)
            else:
                key, cast = lists[arg]
                options[key] = _number_list(arg, raw, cast)
            i += 2
        elif arg == "--benchmark":
            options["benchmark"] = True
            i += 1
        elif arg == "--non-strict":
            options["strict"] = False
            i += 1
        elif arg in ["--verbose", "-v"]:
            options["verbose"] = True
            i += 1
        else:
            raise ValueError(f"Unknown option: {arg}")

    if not 1 <= options["demand_level"] <= 5:
        raise ValueError("--demand-level must be between 1 and 5")
    if not 0.0 <= options["penetration"] <= 1.0:
        raise ValueError("--penetration must be within [0, 1]")
    if options["seeds"] < 1:
        raise ValueError("--seeds must be at least 1")
    if options["duration"] <= 0:
        raise ValueError("--duration must be positive")
    if options["warmup"] < 0 or options["warmup"] >= options["duration"]:
        raise ValueError("--warmup must be within [0, duration)")
    if options["threads"] is not None and options["threads"] < 1:
        raise ValueError("--threads must be at least 1")
    if options["time_limit"] is not None and options["time_limit"] < 0:
        raise ValueError("--time-limit must be nonnegative")
    if options["jobs"] < 1:
        raise ValueError("--jobs must be at least 1")
    return options


def _resolve_defaults(options: Dict):
    """Fill threads, time limit and output directory from the scenario and environment."""
    from .scenario import Scenario, load_scenario

    scenario = load_scenario(options["scenario"]) if options["scenario"] else Scenario()
    if options["threads"] is None:
        options["threads"] = env_number("CAVPLAN_THREADS", scenario.default_threads, int, logger)
        if options["threads"] < 1:
            logger.warning(f"Invalid CAVPLAN_THREADS value {options['threads']}. Using 1.")
            options["threads"] = 1
    if options["time_limit"] is None:
        options["time_limit"] = env_number("CAVPLAN_TIME_LIMIT", scenario.default_time_limit, float, logger)
    if options["out"] is None:
        options["out"] = os.getenv("CAVPLAN_OUT") or DEFAULT_OUT
    if options["verbose"]:
        set_log_level(logging.DEBUG)
    return scenario


def _run_specs(scenario, options: Dict, level: int, penetration: float, mode: str):
    from .experiment import RunSpec

    return [
        RunSpec(
            scenario=scenario,
            demand_level=level,
            penetration=penetration,
            seed=options["seed"] + index,
            mode=mode,
            duration=options["duration"],
            warmup=options["warmup"],
            demand_scale=options["demand_scale"],
            threads=options["threads"],
            time_limit=options["time_limit"],
            strict=options["strict"],
            out_dir=options["out"],
        )
        for index in range(options["seeds"])
    ]


def _print_summary(summary: Dict):
    overall = summary["by_class"].get("ALL", {})
    delay = overall.get("mean_delay")
    fuel = overall.get("mean_fuel")
    print(f"  {summary['mode']:<10} level {summary['demand_level']}  "
          f"penetration {summary['penetration']:.2f}  seeds {len(summary['seeds'])}")
    print(f"    vehicles {overall.get('count', 0):>6}   "
          f"delay {'n/a' if delay is None else f'{delay:8.2f} s'}   "
          f"fuel {'n/a' if fuel is None else f'{fuel:7.3f}'}   "
          f"throughput {summary['throughput']:7.1f} veh/h")
    if summary.get("safety_violations"):
        print(f"    ⚠️  {summary['safety_violations']} safety violation(s)")


def _run_guarded(action, verbose: bool):
    """Run `action`, mapping known failures to a one-line error and exit code 1."""
    from .config import ConfigurationError
    from .safety import SafetyViolationError

    try:
        return action()
    except KeyboardInterrupt:
        print("\n\nRun interrupted by user.")
        sys.exit(1)
    except ConfigurationError as e:
        details = "; ".join(f"{key}: {', '.join(messages)}" for key, messages in e.field_errors.items())
        _fail(f"{e.message}" + (f" ({details})" if details else ""), verbose)
    except SafetyViolationError as e:
        logger.error(f"Run aborted: {e.message}")
        if verbose:
            print(json.dumps(e.trace, indent=2))
        _fail(f"{e.message}; first: {e.violations[0] if e.violations else 'n/a'}", verbose)
    except Exception as e:
        _fail(str(e), verbose)


def run_command(args):
    """Handle the 'run' command."""
    if "--help" in args or "-h" in args:
        print("cavplan CLI - Run Command")
        print("=" * 70)
        print("\nSimulate one demand level and CAV penetration over one or more seeds")
        print("\nUsage:")
        print("  cavplan run [OPTIONS]")
        print("\nOptions:")
        print("  --scenario PATH        Scenario TOML file (default: built-in defaults)")
        print("  --demand-level 1..5    Demand level (default: 2)")
        print("  --penetration FLOAT    CAV share of arrivals in [0, 1] (default: 0.4)")
        print("  --seed INT             First seed (default: 0)")
        print("  --seeds N              Number of consecutive seeds (default: 1)")
        print("  --duration S           Simulated seconds (default: 1800)")
        print("  --warmup S             Warm-up excluded from metrics (default: 150)")
        print("  --threads N            Search workers per plan (default: CAVPLAN_THREADS or 1)")
        print("  --time-limit S         Search wall time per plan (default: unlimited)")
        print("  --benchmark            Disable planning; every vehicle is human-driven")
        print("  --out DIR              Output directory (default: CAVPLAN_OUT or results)")
        print("  --demand-scale FLOAT   Multiply every arrival rate (default: 1.0)")
        print("  --jobs N               Seeds run in N processes (default: 1)")
        print("  --non-strict           Count safety violations instead of aborting")
        print("  --verbose, -v          Debug logging and tracebacks")
        print("\nExamples:")
        print("  cavplan run --demand-level 3 --penetration 0.6 --seeds 5")
        print("  cavplan run --benchmark --demand-level 3 --seeds 5 --jobs 5")
        sys.exit(0)

    _load_dotenv_if_available()
    try:
        options = _parse_run_flags(args)
    except ValueError as e:
        _fail(str(e))

    def action():
        from .experiment import BENCHMARK, PLANNING, run_seeds

        scenario = _resolve_defaults(options)
        mode = BENCHMARK if options["benchmark"] else PLANNING
        specs = _run_specs(scenario, options, options["demand_level"], options["penetration"], mode)
        summary = run_seeds(specs, jobs=options["jobs"])
        print("\n✅ Run complete")
        _print_summary(summary)
        print(f"\n  Results written to {options['out']}")

    _run_guarded(action, options["verbose"])


def sweep_command(args):
    """Handle the 'sweep' command."""
    if "--help" in args or "-h" in args:
        print("cavplan CLI - Sweep Command")
        print("=" * 70)
        print("\nRun planning and benchmark mode over a grid of demand levels and penetrations")
        print("\nUsage:")
        print("  cavplan sweep [OPTIONS]")
        print("\nOptions:")
        print("  --levels LIST          Comma-separated demand levels (default: 1,2,3,4,5)")
        print("  --penetrations LIST    Comma-separated penetrations (default: 0.2,0.4,0.6,0.8,1.0)")
        print("  --demand-scale FLOAT   Multiply every arrival rate (capacity experiment)")
        print("  All 'run' options except --demand-level, --penetration and --benchmark apply.")
        print("\nExamples:")
        print("  cavplan sweep --levels 2,3 --penetrations 0.2,0.6,1.0 --seeds 3 --jobs 3")
        print("  cavplan sweep --scenario scenarios/short_zone.toml --levels 3 --penetrations 0.6")
        sys.exit(0)

    _load_dotenv_if_available()
    try:
        options = _parse_run_flags(args)
        levels = options["levels"] or [1, 2, 3, 4, 5]
        penetrations = options["penetrations"] or [0.2, 0.4, 0.6, 0.8, 1.0]
        if any(not 1 <= level <= 5 for level in levels):
            raise ValueError("--levels must lie between 1 and 5")
        if any(not 0.0 <= p <= 1.0 for p in penetrations):
            raise ValueError("--penetrations must lie within [0, 1]")
    except ValueError as e:
        _fail(str(e))

    def action():
        from .experiment import BENCHMARK, PLANNING, run_seeds

        scenario = _resolve_defaults(options)
        print(f"🔁 Sweep over {len(levels)} level(s) × {len(penetrations)} penetration(s)")
        for level in levels:
            for penetration in penetrations:
                for mode in (PLANNING, BENCHMARK):
                    summary = run_seeds(_run_specs(scenario, options, level, penetration, mode),
                                        jobs=options["jobs"])
                    _print_summary(summary)
        print(f"\n✅ Sweep complete. Results written to {options['out']}")

    _run_guarded(action, options["verbose"])


def plot_data_command(args):
    """Handle the 'plot-data' command."""
    if "--help" in args or "-h" in args:
        print("cavplan CLI - Plot-Data Command")
        print("=" * 70)
        print("\nReshape run summaries and planner benchmarks into one CSV per figure")
        print("\nUsage:")
        print("  cavplan plot-data [--in DIR] [--out DIR]")
        print("\nOptions:")
        print("  --in DIR               Directory holding summary_*.json and bench_*.json (default: results)")
        print("  --out DIR              Output directory (default: <in>/figures)")
        print("\nExamples:")
        print("  cavplan plot-data --in results --out figures")
        sys.exit(0)

    _load_dotenv_if_available()
    in_dir: Optional[str] = None
    out_dir: Optional[str] = None
    verbose = "--verbose" in args or "-v" in args
    i = 0
    while i < len(args):
        if args[i] == "--in" and i + 1 < len(args):
            in_dir = args[i + 1]
            i += 2
        elif args[i] == "--out" and i + 1 < len(args):
            out_dir = args[i + 1]
            i += 2
        else:
            i += 1
    in_dir = in_dir or os.getenv("CAVPLAN_OUT") or DEFAULT_OUT
    out_dir = out_dir or str(Path(in_dir) / "figures")
    if not Path(in_dir).is_dir():
        _fail(f"Input directory not found: {in_dir}")

    def action():
        from .experiment import plot_data

        written = plot_data(in_dir, out_dir)
        if not written:
            print(f"⚠️  No summaries or benchmarks found in {in_dir}")
            return
        print(f"✅ Wrote {len(written)} table(s) to {out_dir}")
        for path in written:
            print(f"   {path.name}")

    _run_guarded(action, verbose)


def bench_planner_command(args):
    """Handle the 'bench-planner' command."""
    if "--help" in args or "-h" in args:
        print("cavplan CLI - Bench-Planner Command")
        print("=" * 70)
        print("\nReplay planning problems recorded from a run under several search budgets")
        print("\nUsage:")
        print("  cavplan bench-planner [OPTIONS]")
        print("\nOptions:")
        print("  --levels LIST          Demand levels to sample problems from (default: 1,2,3,4,5)")
        print("  --penetration FLOAT    CAV penetration of the sampled runs (default: 0.4)")
        print("  --problems N           Problems per level (default: 20)")
        print("  --workers LIST         Worker counts (default: 1,2,4,8)")
        print("  --time-limits LIST     Wall-time limits in seconds (default: unlimited only)")
        print("  --seed INT             Seed of the sampled runs (default: 0)")
        print("  --scenario PATH        Scenario TOML file")
        print("  --out DIR              Output directory (default: CAVPLAN_OUT or results)")
        print("\nExamples:")
        print("  cavplan bench-planner --levels 3 --workers 1,4 --time-limits 0.1,0.5,1")
        sys.exit(0)

    _load_dotenv_if_available()
    try:
        options = _parse_run_flags(args)
        levels = options["levels"] or [1, 2, 3, 4, 5]
        workers = options["workers"] or [1, 2, 4, 8]
        time_limits = options["time_limits"] or [None]
        if any(w < 1 for w in workers):
            raise ValueError("--workers must be at least 1")
        if options["problems"] < 1:
            raise ValueError("--problems must be at least 1")
    except ValueError as e:
        _fail(str(e))

    def action():
        from .experiment import benchmark_planner, collect_planning_problems

        scenario = _resolve_defaults(options)
        out = Path(options["out"])
        out.mkdir(parents=True, exist_ok=True)
        for level in levels:
            problems = collect_planning_problems(scenario, level, options["penetration"], options["seed"],
                                                 options["problems"], warmup=options["warmup"],
                                                 max_duration=options["duration"])
            rows = benchmark_planner(problems, scenario, worker_counts=workers, time_limits=time_limits,
                                     level=level)
            path = out / f"bench_L{level}.json"
            path.write_text(canonical_json({"rows": rows}), encoding="utf-8")
            print(f"✅ Level {level}: {len(problems)} problem(s), {len(rows)} row(s) → {path}")

    _run_guarded(action, options["verbose"])


def check_command(args):
    """Handle the 'check' command."""
    if "--help" in args or "-h" in args:
        print("cavplan CLI - Check Command")
        print("=" * 70)
        print("\nValidate your environment and scenario")
        print("\nUsage:")
        print("  cavplan check [--scenario PATH] [OPTIONS]")
        print("\nOptions:")
        print("  --scenario PATH        Scenario TOML file to validate")
        print("  --verbose, -v          Show all checks (including passed)")
        print("\nThis command checks:")
        print("  - Python version (>= 3.10)")
        print("  - Virtual environment status")
        print("  - Required package installation")
        print("  - CAVPLAN_* environment variables")
        print("  - Scenario parse and invariants")
        print("  - Signal plan sanity")
        print("  - HiGHS LP solver")
        print("\nExamples:")
        print("  cavplan check")
        print("  cavplan check --scenario scenarios/default.toml --verbose")
        sys.exit(0)

    verbose = "--verbose" in args or "-v" in args
    scenario_path = None
    if "--scenario" in args:
        index = args.index("--scenario")
        if index + 1 < len(args):
            scenario_path = args[index + 1]

    from .checker import run_check
    try:
        exit_code = run_check(verbose=verbose, scenario_path=scenario_path)
        sys.exit(exit_code)
    except KeyboardInterrupt:
        print("\n\nCheck interrupted by user.")
        sys.exit(1)
    except Exception as e:
        print(f"\n❌ Error running check: {e}")
        import traceback
        traceback.print_exc()
        sys.exit(1)


def show_help():
    """Display comprehensive help information."""
    print("cavplan CLI")
    print("=" * 70)
    print("\nMixed-traffic simulation of a signalized approach with lane-change and")
    print("trajectory planning for connected automated vehicles.")
    print("\n" + "=" * 70)
    print("\nCOMMANDS")
    print("-" * 70)

    print("\n  run")
    print("    Simulate one demand level and penetration over one or more seeds")
    print("\n    Usage:")
    print("      cavplan run [OPTIONS]")
    print("\n    Options:")
    print("      --scenario PATH        Scenario TOML file")
    print("      --demand-level 1..5    Demand level (default: 2)")
    print("      --penetration FLOAT    CAV share of arrivals (default: 0.4)")
    print("      --seed INT / --seeds N First seed / number of seeds")
    print("      --threads N            Search workers per plan")
    print("      --time-limit S         Search wall time per plan")
    print("      --benchmark            No planning, human-driven traffic only")
    print("      --out DIR              Output directory")
    print("\n    Examples:")
    print("      cavplan run --demand-level 3 --penetration 0.6 --seeds 5")
    print("      cavplan run --benchmark --demand-level 3 --seeds 5")

    print("\n  sweep")
    print("    Planning and benchmark runs over levels × penetrations")
    print("\n    Usage:")
    print("      cavplan sweep --levels 1,2,3 --penetrations 0.2,0.6,1.0 [OPTIONS]")

    print("\n  plot-data")
    print("    Reshape summaries and benchmarks into per-figure CSV tables")
    print("\n    Usage:")
    print("      cavplan plot-data --in results --out figures")

    print("\n  bench-planner")
    print("    Planning time and optimality under worker counts and time limits")
    print("\n    Usage:")
    print("      cavplan bench-planner --levels 3 --workers 1,2,4,8 --time-limits 0.1,1")

    print("\n  check")
    print("    Validate your environment and scenario")
    print("\n    Usage:")
    print("      cavplan check [--scenario PATH] [--verbose]")

    print("\n" + "=" * 70)
    print("\nENVIRONMENT VARIABLES")
    print("-" * 70)
    print("\n  Optional:")
    print("    CAVPLAN_LOG_LEVEL     Log level name or number (defaults to INFO)")
    print("    CAVPLAN_THREADS       Default search workers per plan (defaults to 1)")
    print("    CAVPLAN_TIME_LIMIT    Default search wall time in seconds (unlimited)")
    print("    CAVPLAN_OUT           Default output directory (defaults to results)")
    print("\n  Note: Environment variables can be set in a .env file")
    print("        (.env files are automatically loaded)")

    print("\n" + "=" * 70)
    print("\nQUICK START")
    print("-" * 70)
    print("\n  1. Validate your setup:")
    print("     cavplan check")
    print("\n  2. Run planning and benchmark mode on the same demand:")
    print("     cavplan run --demand-level 3 --penetration 0.6 --seeds 3")
    print("     cavplan run --demand-level 3 --penetration 0.6 --seeds 3 --benchmark")
    print("\n  3. Build the figure tables:")
    print("     cavplan plot-data --in results --out figures")

    print("\n" + "=" * 70)
    print()


def main():
    """Main CLI entry point."""
    if len(sys.argv) > 1 and sys.argv[1] in ["--help", "-h", "help"]:
        show_help()
        sys.exit(0)

    if len(sys.argv) < 2:
        print("cavplan CLI")
        print("\nUsage:")
        print("  cavplan run [--demand-level N] [--penetration P] [--seeds N] [--benchmark]")
        print("  cavplan sweep [--levels LIST] [--penetrations LIST]")
        print("  cavplan plot-data [--in DIR] [--out DIR]")
        print("  cavplan bench-planner [--levels LIST] [--workers LIST]")
        print("  cavplan check [--scenario PATH]")
        print("\nCommands:")
        print("  run            Simulate one setting over one or more seeds")
        print("  sweep          Run planning and benchmark mode over a parameter grid")
        print("  plot-data      Reshape results into per-figure CSV tables")
        print("  bench-planner  Measure planning time and optimality")
        print("  check          Validate your environment and scenario")
        print("\nUse 'cavplan --help' for detailed information and all options.")
        sys.exit(1)

    command = sys.argv[1]
    args = sys.argv[2:]

    if command == "run":
        run_command(args)
    elif command == "sweep":
        sweep_command(args)
    elif command == "plot-data":
        plot_data_command(args)
    elif command == "bench-planner":
        bench_planner_command(args)
    elif command == "check":
        check_command(args)
    else:
        print(f"Unknown command: {command}")
        print("Available commands: run, sweep, plot-data, bench-planner, check")
        print("Use 'cavplan --help' for detailed information.")
        sys.exit(1)
