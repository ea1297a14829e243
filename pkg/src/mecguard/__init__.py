"""Deterministic discrete-event simulator of a MEC host defending against DDoS.

Suspicious devices found by flow-based anomaly detection are steered to an
isolated VM for deep packet inspection, so the services VM keeps serving
legitimate users while the attack is analysed.
"""

from .scenario import Scenario, ScenarioParseError, load_scenario, parse_scenario
from .simulation import RunResult, Simulation, run_scenario

__all__ = [
    "RunResult",
    "Scenario",
    "ScenarioParseError",
    "Simulation",
    "load_scenario",
    "parse_scenario",
    "run_scenario",
]
__version__ = "0.1.0"
