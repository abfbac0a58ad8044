"""Signal-free intersection simulator with cubic motion planning and a CBF safety filter."""

from .barrier import CbfGains, QpProblem, QpSolution, assemble_qp, solve_qp
from .dynamics import PRESETS, CavState, VehicleParams
from .geometry import Coordinator, Intersection, Path, default_intersection
from .planner import CubicPlan, PlanningLimits, plan_exit_time, solve_boundary_cubic
from .scenario import load_preset, load_scenario
from .sim import ScenarioConfig, SimLog, metrics, run, spawn_arrivals
from .tracking import TrackingGains, reference_control

__version__ = "0.1.0"

__all__ = [
    "CavState",
    "CbfGains",
    "Coordinator",
    "CubicPlan",
    "Intersection",
    "PRESETS",
    "Path",
    "PlanningLimits",
    "QpProblem",
    "QpSolution",
    "ScenarioConfig",
    "SimLog",
    "TrackingGains",
    "VehicleParams",
    "assemble_qp",
    "default_intersection",
    "load_preset",
    "load_scenario",
    "metrics",
    "plan_exit_time",
    "reference_control",
    "run",
    "solve_boundary_cubic",
    "solve_qp",
    "spawn_arrivals",
]
