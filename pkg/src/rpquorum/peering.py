"""Peer list maintenance, polling and master recomputation."""

from __future__ import annotations

import logging
import random
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Protocol, Sequence

from .model import (
    ConsensusConfig, MalformedFile, Peerlist, PeerSnapshot,
    parse_peerlist, parse_skiplist, parse_vrp_file,
)
from .vote import MasterState, compute_master

log = logging.getLogger(__name__)

ENDPOINTS = ("/peerlist", "/skiplist", "/vrps")


class PeerError(Exception):
    """A peer could not be polled; its previous snapshot is kept."""


class PeerUnreachable(PeerError):
    pass


class AuthError(PeerError):
    """The peer's certificate is invalid or does not chain to the trust root."""


class MalformedPeerData(PeerError):
    pass


class Transport(Protocol):
    def fetch(self, address: str, path: str) -> bytes: ...


@dataclass(frozen=True)
class AccessLogEntry:
    client: str
    path: str
    timestamp: float


@dataclass(frozen=True)
class PeeringState:
    self_address: str
    peerlist: Peerlist = Peerlist()
    snapshots: Mapping[str, PeerSnapshot] = field(default_factory=dict)
    candidates: frozenset[str] = frozenset()
    last_poll: float | None = None

    def __post_init__(self):
        peers = tuple(p for p in self.peerlist.peers if p != self.self_address)
        if peers != self.peerlist.peers:
            object.__setattr__(self, "peerlist", Peerlist(peers))


def poll_peer(transport: Transport, address: str, clock) -> PeerSnapshot:
    """Fetch all three files from ``address``; any failure raises :class:`PeerError`."""
    bodies = {path: transport.fetch(address, path) for path in ENDPOINTS}
    try:
        snap = PeerSnapshot(
            peer=address,
            fetched_at=clock.now(),
            vrps=parse_vrp_file(bodies["/vrps"]),
            skiplist=parse_skiplist(bodies["/skiplist"]),
            peerlist=parse_peerlist(bodies["/peerlist"]),
        )
    except MalformedFile as exc:
        raise MalformedPeerData(f"{address}: {exc}") from exc
    return snap


def discover_candidates(state: PeeringState, fetched_peerlists: Iterable[Peerlist],
                        access_log: Iterable[AccessLogEntry]) -> set[str]:
    found: set[str] = set()
    for pl in fetched_peerlists:
        found.update(pl.peers)
    for entry in access_log:
        if entry.path == "/peerlist":
            found.add(entry.client)
    known = set(state.peerlist.peers)
    return {a for a in found if a not in known and a != state.self_address}


def _store(snapshots: dict, snap: PeerSnapshot):
    old = snapshots.get(snap.peer)
    if old is None or snap.fetched_at >= old.fetched_at:
        snapshots[snap.peer] = snap


def admit_candidate(state: PeeringState, address: str, transport: Transport,
                    clock) -> PeeringState:
    """Probe ``address``; add it on success, drop it from the candidates otherwise."""
    remaining = state.candidates - {address}
    if address == state.self_address or address in state.peerlist:
        return replace(state, candidates=remaining)
    try:
        snap = poll_peer(transport, address, clock)
    except PeerError as exc:
        log.info("candidate %s rejected: %s", address, exc)
        return replace(state, candidates=remaining)
    snapshots = dict(state.snapshots)
    _store(snapshots, snap)
    return replace(state, peerlist=state.peerlist.add(address), snapshots=snapshots,
                   candidates=remaining)


def peering_round(state: PeeringState, own: PeerSnapshot, transport: Transport,
                  config: ConsensusConfig, clock, *, rng: random.Random | None = None,
                  access_log: Sequence[AccessLogEntry] = (), executor=None
                  ) -> tuple[PeeringState, MasterState]:
    """Poll all peers, discover and admit new ones, then recompute the master.

    Access-log entries are considered once: those stamped in
    ``[last_poll, round start)``. Newly admitted peers' peer lists feed
    further discovery within the same round until nothing new appears.
    """
    rng = rng or random.Random()
    start = clock.now()
    order = sorted(state.peerlist.peers)
    rng.shuffle(order)

    def attempt(addr):
        try:
            return addr, poll_peer(transport, addr, clock)
        except PeerError as exc:
            log.info("poll of %s failed: %s", addr, exc)
            return addr, None

    results = list(executor.map(attempt, order)) if executor else [attempt(a) for a in order]
    snapshots = dict(state.snapshots)
    fetched = []
    for _, snap in results:
        if snap is not None:
            _store(snapshots, snap)
            fetched.append(snap.peerlist)
    state = replace(state, snapshots=snapshots)

    lo = state.last_poll if state.last_poll is not None else float("-inf")
    window = [e for e in access_log if lo <= e.timestamp < start]
    tried: set[str] = set()
    new = discover_candidates(state, fetched, window)
    while new - tried:
        batch = sorted(new - tried)
        tried.update(batch)
        state = replace(state, candidates=state.candidates | set(batch))
        before = set(state.peerlist.peers)
        for addr in batch:
            state = admit_candidate(state, addr, transport, clock)
        admitted = [a for a in state.peerlist.peers if a not in before]
        new = discover_candidates(state, [state.snapshots[a].peerlist for a in admitted], ())

    now = clock.now()
    live = [state.snapshots[p] for p in state.peerlist.peers if p in state.snapshots]
    master = compute_master(live, replace(own, fetched_at=now), config, now)
    return replace(state, last_poll=start, candidates=frozenset()), master
