"""Distributed consensus over RPKI relying-party outputs."""

from .model import ConsensusConfig, VrpSet, roa
from .vote import BACKEND, VoteInstance, compute_fault_bound, threshold_vote, vote_threshold

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "ConsensusConfig", "VoteInstance", "VrpSet", "compute_fault_bound", "roa",
    "threshold_vote", "vote_threshold",
]
