"""Executable model of per-user separation on a shared HPC cluster.

Submodules map one-to-one onto the mechanisms being modeled:

``directory``  users, groups, user private groups
``host``       processes, sockets, hidepid visibility
``ident``      identity query codec, responder and client
``engine``     user-based firewall decisions and flow table
``perms``      smask-constrained file permissions and ACLs
``sched``      whole-node scheduling, GPU assignment and epilog
``sim``        discrete-event simulator producing a trace
``isolation``  isolation oracle and trace re-checks
"""

from importlib import resources

from .directory import Directory, GroupKind
from .engine import Action, Decision, EngineConfig, Reason, UbfEngine, Verdict, decide
from .host import Endpoint, Host, Proto, Role
from .isolation import IsolationReport, brute_force_channels, check_isolation
from .perms import FileSystem, Session
from .scenario import Scenario, load_scenario
from .sched import Scheduler
from .sim import EventTrace, run

__version__ = "0.1.0"


def bundled_scenario(name: str) -> Scenario:
    """Load one of the scenarios shipped in ``ubfsim/scenarios`` by stem name."""
    ref = resources.files(__package__) / "scenarios" / f"{name}.json"
    with resources.as_file(ref) as path:
        return load_scenario(path)


def bundled_scenario_names() -> list[str]:
    folder = resources.files(__package__) / "scenarios"
    return sorted(p.name[:-5] for p in folder.iterdir() if p.name.endswith(".json"))


__all__ = [
    "Action", "Decision", "Directory", "Endpoint", "EngineConfig", "EventTrace", "FileSystem",
    "GroupKind", "Host", "IsolationReport", "Proto", "Reason", "Role", "Scenario", "Scheduler",
    "Session", "UbfEngine", "Verdict", "brute_force_channels", "bundled_scenario",
    "bundled_scenario_names", "check_isolation", "decide", "load_scenario", "run",
]
