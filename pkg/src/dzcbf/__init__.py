"""Distributed data-driven zeroing control barrier functions for leader-follower connectivity."""
from .barriers import BarrierCandidate, KInfFunction, build_candidates
from .bounds import JacobianBoundEstimator, JacobianBounds
from .certify import BetaSplit, LocalConstraint
from .data import DerivativeDataset, KMeansReducer
from .dynamics import ConsensusModel, Trajectory
from .graph import CommGraph
from .sim import DatasetSpec, SafetyFilter, Scenario, run_closed_loop, run_study

__version__ = "0.1.0"

__all__ = [
    "BarrierCandidate", "BetaSplit", "CommGraph", "ConsensusModel", "DatasetSpec", "DerivativeDataset",
    "JacobianBoundEstimator", "JacobianBounds", "KInfFunction", "KMeansReducer", "LocalConstraint",
    "SafetyFilter", "Scenario", "Trajectory", "build_candidates", "run_closed_loop", "run_study",
]
