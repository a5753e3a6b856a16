"""Per-object threshold vote over peers' local sets.

An object enters the global set when at least ``f + 1`` participants list
it, where ``f = floor(c * |P|)``. The threshold is clamped to ``|P|`` so that
``c = 1`` yields the intersection and ``c = 0`` the union.
"""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass
from typing import Iterable, Sequence

from .model import KINDS, ConsensusConfig, PeerSnapshot, VrpSet

log = logging.getLogger(__name__)

if os.environ.get("RPQUORUM_PURE_PYTHON"):
    from ._vote_fallback import count_votes
    BACKEND = "python"
else:
    try:
        from ._vote_kernel import count_votes
        BACKEND = "cython"
    except ImportError:
        from ._vote_fallback import count_votes
        BACKEND = "python"


def compute_fault_bound(c: float, n: int) -> int:
    if not 0.0 <= c <= 1.0:
        raise ValueError(f"consensus factor must be in [0, 1], got {c}")
    if n < 1:
        raise ValueError(f"participant count must be >= 1, got {n}")
    # round first: 0.29 * 100 evaluates to 28.999999999999996
    return math.floor(round(c * n, 9))


def vote_threshold(c: float, n: int) -> int:
    return min(compute_fault_bound(c, n) + 1, n)


@dataclass(frozen=True)
class VoteInstance:
    participants: tuple[tuple[str, frozenset], ...]
    c: float

    def __post_init__(self):
        ids = [p for p, _ in self.participants]
        if len(set(ids)) != len(ids):
            raise ValueError("participant ids must be unique")
        if not self.participants:
            raise ValueError("a vote needs at least one participant")


def threshold_vote(instance: VoteInstance) -> frozenset:
    sets = [s for _, s in instance.participants]
    return count_votes(sets, vote_threshold(instance.c, len(sets)))


@dataclass(frozen=True)
class MasterState:
    vrps: VrpSet
    skiplist: frozenset[str]
    computed_at: float
    participant_count: int
    fault_bound: int

    @property
    def threshold(self) -> int:
        return min(self.fault_bound + 1, self.participant_count)


def fresh_snapshots(snapshots: Iterable[PeerSnapshot], own: PeerSnapshot,
                    config: ConsensusConfig, now: float) -> list[PeerSnapshot]:
    out = [own]
    for snap in snapshots:
        if snap.peer == own.peer:
            continue
        if snap.is_fresh(now, config.staleness_tolerance):
            out.append(snap)
    return out


def compute_master(snapshots: Sequence[PeerSnapshot], own: PeerSnapshot,
                   config: ConsensusConfig, now: float) -> MasterState:
    """Vote every VRP kind and the skiplist across fresh snapshots plus our own."""
    voters = fresh_snapshots(snapshots, own, config, now)
    n = len(voters)
    threshold = vote_threshold(config.c, n)
    parts = {key: count_votes([getattr(s.vrps, key) for s in voters], threshold) for key in KINDS}
    skip = count_votes([s.skiplist for s in voters], threshold)
    return MasterState(
        vrps=VrpSet(**parts),
        skiplist=skip,
        computed_at=now,
        participant_count=n,
        fault_bound=compute_fault_bound(config.c, n),
    )
