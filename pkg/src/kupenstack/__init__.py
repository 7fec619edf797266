"""Declarative cloud control model with a simulated node fleet.

Public surface: the resource model, the state store, the reconciliation
runtime, the controllers, the simulator and the one-process Engine that wires
them together.
"""

from .clock import LogicalClock
from .engine import Engine
from .manifest import from_dict, load_documents, to_dict, to_json, to_yaml
from .model import (API_VERSION, Condition, ObjectMeta, ResourceObject,
                    ValidationResult, hash_config, new_object, validate)
from .runtime import (ControllerConfig, Manager, ManagerReport,
                      ReconcileOutcome, ReconcileRequest)
from .scenario import ScenarioRunner, load_scenario, run_scenario_file
from .sim import (OpenStackSim, SimNode, ValidationAgent, default_fleet,
                  load_fault_schedule)
from .store import EventType, StateStore, WatchEvent

__version__ = "0.1.0"

__all__ = [
    "API_VERSION", "Condition", "ControllerConfig", "Engine", "EventType",
    "LogicalClock", "Manager", "ManagerReport", "ObjectMeta", "OpenStackSim",
    "ReconcileOutcome", "ReconcileRequest", "ResourceObject", "ScenarioRunner",
    "SimNode", "StateStore", "ValidationAgent", "ValidationResult",
    "WatchEvent", "default_fleet", "from_dict", "hash_config",
    "load_documents", "load_fault_schedule", "new_object", "run_scenario_file",
    "to_dict", "to_json", "to_yaml", "validate",
]
