"""
cavplan Environment Checker
Validates the Python environment, dependencies, scenario files and the LP solver.
"""

import importlib.util
import os
import sys
from dataclasses import dataclass
from typing import List, Optional


@dataclass
class CheckResult:
    """Result of a validation check."""
    passed: bool
    message: str
    fix_hint: str = ""
    level: str = "error"  # error, warning, info


class CavplanChecker:
    """Environment and scenario validation for cavplan runs."""

    def __init__(self, scenario_path: Optional[str] = None):
        self.scenario_path = scenario_path
        self.results: List[CheckResult] = []
        self.errors = 0
        self.warnings = 0
        self.verbose = False

    def add_result(self, result: CheckResult):
        """Add a check result."""
        self.results.append(result)
        if not result.passed:
            if result.level == "error":
                self.errors += 1
            elif result.level == "warning":
                self.warnings += 1

    def check_python_version(self) -> CheckResult:
        version = sys.version_info
        if version < (3, 10):
            return CheckResult(
                passed=False,
                message=f"Python {version.major}.{version.minor} is too old (>= 3.10 required)",
                fix_hint="Install Python 3.10 or newer",
                level="error"
            )
        return CheckResult(passed=True, message=f"Python {version.major}.{version.minor}.{version.micro}",
                           level="info")

    def check_virtual_environment(self) -> CheckResult:
        """Check if running in a virtual environment."""
        if hasattr(sys, 'base_prefix') and sys.base_prefix != sys.prefix:
            return CheckResult(passed=True, message="Virtual environment active (venv)", level="info")
        if os.environ.get('VIRTUAL_ENV') or os.environ.get('CONDA_DEFAULT_ENV'):
            return CheckResult(passed=True, message="Virtual environment active", level="info")
        return CheckResult(
            passed=False,
            message="No virtual environment detected",
            fix_hint="python -m venv venv && source venv/bin/activate",
            level="warning"
        )

    def check_required_packages(self) -> CheckResult:
        """Check if required packages are installed."""
        required_packages = ["numpy", "scipy", "pandas", "pydantic", "canonicaljson", "dotenv"]
        if sys.version_info < (3, 11):
            required_packages.append("tomli")

        missing = [package for package in required_packages if importlib.util.find_spec(package) is None]
        if missing:
            return CheckResult(
                passed=False,
                message=f"Missing packages: {', '.join(missing)}",
                fix_hint="pip install -r requirements.txt",
                level="error"
            )
        return CheckResult(
            passed=True,
            message=f"All required packages installed ({len(required_packages)})",
            level="info"
        )

    def check_environment_variables(self) -> List[CheckResult]:
        """Check the optional CAVPLAN_* overrides."""
        try:
            from dotenv import load_dotenv
            load_dotenv(override=False)
        except ImportError:
            pass

        results = []
        for name, cast, minimum in (("CAVPLAN_THREADS", int, 1), ("CAVPLAN_TIME_LIMIT", float, 0.0)):
            raw = os.getenv(name)
            if raw is None or not raw.strip():
                continue
            try:
                value = cast(raw)
            except ValueError:
                value = None
            if value is None or value < minimum:
                results.append(CheckResult(
                    passed=False,
                    message=f"{name} is invalid: {raw}",
                    fix_hint=f"Set {name} to a number >= {minimum} or unset it (the default is used meanwhile)",
                    level="warning"
                ))
            else:
                results.append(CheckResult(passed=True, message=f"{name} = {value}", level="info"))
        return results

    def check_scenario(self) -> List[CheckResult]:
        """Parse the scenario (or the defaults) and sanity-check its signal plan."""
        from .config import ConfigurationError
        from .scenario import Scenario, load_scenario, next_red_step, signal_phase
        from .models import SignalPhase, VehicleClass

        label = self.scenario_path or "built-in defaults"
        try:
            scenario = load_scenario(self.scenario_path) if self.scenario_path else Scenario()
        except ConfigurationError as e:
            details = "; ".join(f"{key}: {', '.join(messages)}" for key, messages in e.field_errors.items())
            return [CheckResult(
                passed=False,
                message=f"Scenario {label} invalid: {e.message}" + (f" ({details})" if details else ""),
                fix_hint="Fix the listed keys in the scenario file",
                level="error"
            )]

        results = [CheckResult(passed=True, message=f"Scenario {label} parsed", level="info")]
        plan, geometry = scenario.signal_plan, scenario.geometry
        span = int(plan.cycle / plan.step_length)
        for movement in geometry.dedicated:
            lanes = geometry.dedicated_lanes(movement)
            served = any(
                plan.is_uncontrolled(lane)
                or any(signal_phase(plan, lane, t) is SignalPhase.GREEN for t in range(span))
                for lane in lanes
            )
            if not served:
                results.append(CheckResult(
                    passed=False,
                    message=f"Movement {movement.value} never sees green in lanes {sorted(lanes)}",
                    fix_hint="Widen the green window of one of its dedicated lanes",
                    level="error"
                ))
        for lane in geometry.lanes:
            if plan.is_uncontrolled(lane):
                continue
            if next_red_step(plan, lane, 0, VehicleClass.CAV) is None:
                results.append(CheckResult(
                    passed=False,
                    message=f"Lane {lane} never turns red",
                    fix_hint="Mark the lane uncontrolled instead",
                    level="warning"
                ))
        return results

    def check_lp_solver(self) -> CheckResult:
        """Solve a two-variable LP with HiGHS."""
        try:
            from scipy.optimize import linprog
            result = linprog([1.0, 1.0], A_ub=[[-1.0, -2.0]], b_ub=[-2.0], bounds=[(0, None), (0, None)],
                             method="highs")
        except Exception as e:
            return CheckResult(passed=False, message=f"HiGHS LP solve failed: {e}",
                               fix_hint="pip install 'scipy>=1.9'", level="error")
        if result.status != 0 or abs(result.fun - 1.0) > 1e-9:
            return CheckResult(passed=False, message=f"HiGHS returned an unexpected result: {result.message}",
                               fix_hint="pip install --upgrade scipy", level="error")
        return CheckResult(passed=True, message="HiGHS LP solver available", level="info")

    def run_all_checks(self, verbose: bool = False) -> bool:
        """Run every check and display the results."""
        self.verbose = verbose

        print("🔍 cavplan Environment Check")
        print("=" * 50 + "\n")

        self.add_result(self.check_python_version())
        self.add_result(self.check_virtual_environment())
        packages = self.check_required_packages()
        self.add_result(packages)
        for result in self.check_environment_variables():
            self.add_result(result)
        if packages.passed:
            for result in self.check_scenario():
                self.add_result(result)
            self.add_result(self.check_lp_solver())

        self._display_results()
        return self.errors == 0

    def _display_results(self):
        """Display all check results in a formatted manner."""
        errors = [r for r in self.results if not r.passed and r.level == "error"]
        warnings = [r for r in self.results if not r.passed and r.level == "warning"]
        success = [r for r in self.results if r.passed]

        if self.verbose and success:
            for result in success:
                print(f"✅ {result.message}")
            if warnings or errors:
                print()

        for result in warnings:
            print(f"⚠️  {result.message}")
            if result.fix_hint:
                print(f"   → {result.fix_hint}")

        if errors:
            if warnings:
                print()
            for result in errors:
                print(f"❌ {result.message}")
                if result.fix_hint:
                    print(f"   → {result.fix_hint}")

        if not self.verbose and not warnings and not errors:
            print("✅ All checks passed!")

        print("\n" + "=" * 50)
        if self.errors == 0 and self.warnings == 0:
            print("🎉 Ready! Run: cavplan run --demand-level 2 --penetration 0.4")
        elif self.errors == 0:
            print(f"✅ Ready (with {self.warnings} warning(s))")
            if not self.verbose:
                print("   Run: cavplan check --verbose for details")
        else:
            print(f"❌ {self.errors} error(s) found. Fix and run: cavplan check")
        print("=" * 50 + "\n")


def run_check(verbose: bool = False, scenario_path: Optional[str] = None) -> int:
    """Run the environment check."""
    checker = CavplanChecker(scenario_path=scenario_path)
    success = checker.run_all_checks(verbose=verbose)
    return 0 if success else 1
