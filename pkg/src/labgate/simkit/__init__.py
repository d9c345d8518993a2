from .analyzer import SimFaults, SimProfile, Transcript, run_analyzer
from .fleet import FleetTopology, generate_fleet
from .his_stub import FaultProfile, HisStub, run_his_stub
from .script import SimScript

__all__ = ["SimFaults", "SimProfile", "Transcript", "run_analyzer", "FleetTopology", "generate_fleet",
           "FaultProfile", "HisStub", "run_his_stub", "SimScript"]
