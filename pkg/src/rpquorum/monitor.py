"""Relying-party supervision: connection forensics, crash and stall detection,
local skiplist maintenance and the per-TAL validation cycle.
"""

from __future__ import annotations

import logging
import random
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Mapping, Sequence

from .model import EMPTY_VRPS, ConsensusConfig, Skiplist, SkiplistEntry, SkipSource, VrpSet

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ConnectionRecord:
    remote: str
    start_time: float
    established: bool = False
    end_time: float | None = None


ConnectionLog = dict  # remote IP -> latest ConnectionRecord


def record_packet(conn_log: ConnectionLog, event) -> ConnectionLog:
    """Apply one packet event to ``conn_log`` in place and return it.

    ``event`` needs ``direction`` ("out"/"in"), ``flags``, ``src``, ``dst``
    and ``time``.
    """
    flags = event.flags
    if event.direction == "out" and "SYN" in flags and "ACK" not in flags:
        conn_log[event.dst] = ConnectionRecord(event.dst, event.time)
        return conn_log
    remote = event.dst if event.direction == "out" else event.src
    rec = conn_log.get(remote)
    if rec is None:
        return conn_log
    if event.direction == "in" and "SYN" in flags and "ACK" in flags:
        conn_log[remote] = replace(rec, established=True)
    elif ("RST" in flags or "FIN" in flags) and rec.end_time is None:
        conn_log[remote] = replace(rec, end_time=event.time)
    return conn_log


def _domains(records: Iterable[ConnectionRecord], dnsbook: Mapping[str, str]) -> list[str]:
    out: dict[str, None] = {}
    for rec in records:
        domain = dnsbook.get(rec.remote)
        if domain is None:
            log.warning("no domain known for remote %s, skipping", rec.remote)
            continue
        out[domain] = None
    return list(out)


def detect_crash(conn_log: ConnectionLog, dnsbook: Mapping[str, str]) -> list[str]:
    """Domains with an established connection still open when the RP died."""
    return _domains(
        (r for r in conn_log.values() if r.established and r.end_time is None), dnsbook)


def detect_stalling(conn_log: ConnectionLog, dnsbook: Mapping[str, str], now: float,
                    config: ConsensusConfig) -> list[str]:
    threshold = config.stall_threshold
    return _domains(
        (r for r in conn_log.values()
         if r.established and r.end_time is None and now - r.start_time > threshold),
        dnsbook)


def update_skiplist(skiplist: Skiplist, domains: Iterable[str], now: float,
                    source: SkipSource) -> Skiplist:
    domains = list(domains)
    if not domains:
        return skiplist
    entries = dict(skiplist.entries)
    for d in domains:
        entry = SkiplistEntry(d, now, source)
        entries[entry.domain] = entry
    return Skiplist(entries)


def expire_skiplist(skiplist: Skiplist, now: float, blacklist_expiry: float) -> Skiplist:
    kept = {d: e for d, e in skiplist.entries.items() if now - e.added_at <= blacklist_expiry}
    if len(kept) == len(skiplist.entries):
        return skiplist
    return Skiplist(kept)


def shuffle_tals(previous_order: Sequence[str], node_index: int, first_run: bool,
                 rng: random.Random) -> list[str]:
    """Next TAL order.

    On the first run, node ``i`` starts with ``TAL[i mod len]`` of the sorted
    TAL list so that nodes begin on different TALs; the rest is shuffled.
    """
    order = sorted(previous_order)
    if first_run:
        first = order[node_index % len(order)]
        rest = [t for t in order if t != first]
        rng.shuffle(rest)
        return [first] + rest
    rng.shuffle(order)
    return order


@dataclass
class TalResult:
    tal: str
    outcome: str  # "ok", "crash", "stall", "error"
    started_at: float
    ended_at: float
    flagged: list[str] = field(default_factory=list)


@dataclass
class MonitorState:
    tal_order: list[str]
    first_run: bool = True
    skiplist: Skiplist = field(default_factory=Skiplist)
    tal_outputs: dict[str, tuple[float, VrpSet]] = field(default_factory=dict)
    local_vrps: VrpSet = EMPTY_VRPS
    cycles_completed: int = 0
    first_completed_at: float | None = None
    current: str = "idle"
    history: list[TalResult] = field(default_factory=list)


class Monitor:
    """Drives the relying party one TAL at a time.

    ``run_cycle`` and ``run`` are generators yielding the number of seconds to
    sleep, so the same loop runs under wall-clock time or a virtual clock.
    """

    def __init__(self, tals: Sequence[str], adapter, config: ConsensusConfig, *,
                 clock, rng: random.Random, dnsbook: Mapping[str, str],
                 master_skiplist: Callable[[], Iterable[str]] = frozenset,
                 publish_vrps: Callable[[VrpSet], None] | None = None,
                 publish_skiplist: Callable[[Skiplist], None] | None = None,
                 node_index: int = 0, refresh_interval: float = 600.0,
                 status_poll: float = 1.0, keep_history: bool = True):
        self.adapter = adapter
        self.config = config
        self.clock = clock
        self.rng = rng
        self.dnsbook = dnsbook
        self.master_skiplist = master_skiplist
        self.publish_vrps = publish_vrps or (lambda vrps: None)
        self.publish_skiplist = publish_skiplist or (lambda skiplist: None)
        self.node_index = node_index
        self.refresh_interval = refresh_interval
        self.status_poll = status_poll
        self.keep_history = keep_history
        self.state = MonitorState(tal_order=shuffle_tals(tals, node_index, True, rng))

    def _set_skiplist(self, skiplist: Skiplist):
        if skiplist is not self.state.skiplist:
            self.state.skiplist = skiplist
            self.publish_skiplist(skiplist)

    def _expire(self):
        self._set_skiplist(expire_skiplist(self.state.skiplist, self.clock.now(),
                                           self.config.blacklist_expiry))

    def validate_tal(self, tal: str):
        """Run one TAL to completion, kill or crash (Alg. 4 inner loop)."""
        self._expire()
        st = self.state
        st.current = f"running:{tal}"
        handle = self.adapter.start_validation(tal, frozenset(self.master_skiplist()))
        conn_log: ConnectionLog = {}
        started = self.clock.now()
        while True:
            for ev in self.adapter.events(handle):
                record_packet(conn_log, ev)
            now = self.clock.now()
            stalled = detect_stalling(conn_log, self.dnsbook, now, self.config)
            if stalled:
                log.info("stalling on %s under %s, killing relying party", stalled, tal)
                self.adapter.kill(handle)
                self._set_skiplist(update_skiplist(st.skiplist, stalled, now, SkipSource.STALL))
                result = TalResult(tal, "stall", started, now, stalled)
                break
            status = self.adapter.poll(handle)
            if status is not None:
                for ev in self.adapter.events(handle):
                    record_packet(conn_log, ev)
                if status == 0:
                    outcome = self.adapter.collect_output(handle)
                    st.tal_outputs[tal] = (now, outcome.vrps)
                    result = TalResult(tal, "ok", started, now)
                else:
                    crashed = detect_crash(conn_log, self.dnsbook)
                    if crashed:
                        log.info("relying party exited %s under %s; open: %s", status, tal, crashed)
                    self._set_skiplist(update_skiplist(st.skiplist, crashed, now, SkipSource.CRASH))
                    result = TalResult(tal, "crash" if crashed else "error", started, now, crashed)
                break
            yield self.status_poll
        if self.keep_history:
            st.history.append(result)
        return result

    def aggregate(self, now: float) -> VrpSet:
        """Union of per-TAL outputs still within the staleness tolerance."""
        st = self.state
        for tal in [t for t, (ts, _) in st.tal_outputs.items()
                    if now - ts > self.config.staleness_tolerance]:
            del st.tal_outputs[tal]
        return VrpSet.union(vrps for _, vrps in st.tal_outputs.values())

    def run_cycle(self):
        st = self.state
        for tal in list(st.tal_order):
            try:
                yield from self.validate_tal(tal)
            except Exception:
                log.exception("validation of %s failed in the adapter", tal)
        now = self.clock.now()
        st.local_vrps = self.aggregate(now)
        st.cycles_completed += 1
        if st.first_completed_at is None:
            st.first_completed_at = now
        self.publish_vrps(st.local_vrps)
        st.current = "sleeping"
        yield self.refresh_interval
        st.tal_order = shuffle_tals(st.tal_order, self.node_index, False, self.rng)
        st.first_run = False

    def run(self):
        while True:
            yield from self.run_cycle()
