"""
cavplan: lane-change and trajectory planning for connected automated vehicles on a
signalized intersection approach, with a mixed-traffic simulator around it.
"""

# Load environment variables from .env file if available
try:
    from dotenv import load_dotenv
    load_dotenv()
except ImportError:
    # python-dotenv is optional, but recommended
    pass

from .config import Config, ConfigurationError
from .models import (
    ApproachGeometry,
    Lcg,
    Movement,
    SignalPhase,
    SignalPlan,
    Trajectory,
    Vehicle,
    VehicleClass,
    VehicleState,
)
from .scenario import Scenario, load_scenario, signal_phase, signal_red
from .behavior import SceneSnapshot
from .prediction import PredictionOverflowError, PredictionResult, predict_scene
from .lcst import Lcst, LcstNode, NoStrategyError, TreeSizeError, build_lcst
from .optimizer import P2Infeasible, P2Solution, build_p2, solve_p2, validate_profile
from .planner import SearchBudget, SearchExhausted, plan_trajectory, search
from .plan_log import InMemoryPlanLog, JsonLinesPlanLog, PlanLog, PlanRecord
from .demand import DemandSpec, generate_arrivals
from .safety import SafetyViolation, SafetyViolationError
from .world import World
from .metrics import MetricsReport
from .experiment import RunSpec, run_experiment, run_seeds

__version__ = "0.3.0"

__all__ = [
    # Configuration and scenario
    "Config",
    "ConfigurationError",
    "Scenario",
    "load_scenario",
    "signal_phase",
    "signal_red",
    # Data model
    "ApproachGeometry",
    "Lcg",
    "Movement",
    "SignalPhase",
    "SignalPlan",
    "Trajectory",
    "Vehicle",
    "VehicleClass",
    "VehicleState",
    "SceneSnapshot",
    # Planning
    "PredictionOverflowError",
    "PredictionResult",
    "predict_scene",
    "Lcst",
    "LcstNode",
    "NoStrategyError",
    "TreeSizeError",
    "build_lcst",
    "P2Infeasible",
    "P2Solution",
    "build_p2",
    "solve_p2",
    "validate_profile",
    "SearchBudget",
    "SearchExhausted",
    "plan_trajectory",
    "search",
    "PlanLog",
    "InMemoryPlanLog",
    "JsonLinesPlanLog",
    "PlanRecord",
    # Simulation and experiments
    "DemandSpec",
    "generate_arrivals",
    "SafetyViolation",
    "SafetyViolationError",
    "World",
    "MetricsReport",
    "RunSpec",
    "run_experiment",
    "run_seeds",
]
