"""Relying-party adapters.

Both implementations expose the same surface, modelled on ``Popen``:
``start_validation`` returns a handle, ``poll`` returns ``None`` while the
run is in progress and the exit status afterwards (``KILLED`` after
``kill``), ``events`` yields packet events observed since the last call,
and ``collect_output`` returns a :class:`ValidationOutcome`.
"""

from __future__ import annotations

import logging
import os
import queue
import random
import shlex
import signal
import subprocess
import tempfile
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .model import ConsensusConfig, MalformedFile, VrpSet, parse_vrp_file, serialize_skiplist
from .monitor import ConnectionLog, record_packet
from .sim import RP_ADDRESS, PacketEvent, ScenarioConfig, SimRun, simulate_validation

log = logging.getLogger(__name__)

KILLED = -signal.SIGKILL


class AdapterError(RuntimeError):
    pass


@dataclass
class ValidationOutcome:
    tal: str
    exit_status: int | None
    vrps: VrpSet | None
    log: ConnectionLog
    started_at: float
    ended_at: float | None


@dataclass(eq=False)
class RpHandle:
    tal: str
    started_at: float
    state: str = "running"  # running -> exited | killed
    exit_status: int | None = None
    ended_at: float | None = None
    delivered: list = field(default_factory=list)
    _impl: object = None


def _outcome(handle: RpHandle, vrps: VrpSet | None) -> ValidationOutcome:
    conn_log: ConnectionLog = {}
    for ev in handle.delivered:
        record_packet(conn_log, ev)
    return ValidationOutcome(handle.tal, handle.exit_status,
                             vrps if handle.exit_status == 0 else None,
                             conn_log, handle.started_at, handle.ended_at)


class SimulatedRelyingParty:
    """Adapter backed by :func:`rpquorum.sim.simulate_validation`.

    The whole run is pre-computed at start; ``poll`` and ``events`` reveal it
    as the clock advances.
    """

    def __init__(self, scenario: ScenarioConfig, clock, *, config: ConsensusConfig | None = None,
                 rng: random.Random | None = None, node_index: int = 0):
        self.scenario = scenario
        self.clock = clock
        self.config = config or ConsensusConfig()
        self.rng = rng or random.Random(scenario.seed)
        self.node_index = node_index
        self.runs: list[SimRun] = []

    def start_validation(self, tal: str, skiplist: Iterable[str]) -> RpHandle:
        if tal not in self.scenario.tals:
            raise AdapterError(f"unknown TAL {tal!r}")
        run = simulate_validation(
            tal, skiplist, self.scenario, self.clock, self.rng,
            node_index=self.node_index,
            connection_timeout=self.config.connection_timeout,
            global_timeout=self.config.global_timeout)
        self.runs.append(run)
        return RpHandle(tal, run.started_at, _impl={"run": run, "cursor": 0})

    def _advance(self, handle: RpHandle):
        if handle.state != "running":
            return
        run = handle._impl["run"]
        if self.clock.now() >= run.exit_time:
            handle.state = "exited"
            handle.exit_status = run.exit_code
            handle.ended_at = run.exit_time

    def poll(self, handle: RpHandle) -> int | None:
        self._advance(handle)
        return handle.exit_status

    def events(self, handle: RpHandle) -> list[PacketEvent]:
        impl = handle._impl
        events = impl["run"].events
        now = self.clock.now()
        start = impl["cursor"]
        end = start
        limit = handle.ended_at if handle.state == "killed" else now
        while end < len(events) and events[end].time <= limit:
            end += 1
        impl["cursor"] = end
        out = events[start:end]
        if handle.state == "killed" and not impl.get("closed"):
            impl["closed"] = True
            out = out + impl["kill_events"]
        handle.delivered.extend(out)
        return out

    def kill(self, handle: RpHandle) -> bool:
        self._advance(handle)
        if handle.state != "running":
            return True
        now = self.clock.now()
        # flush what happened before the kill, then close every open connection
        handle.state = "killed"
        handle.ended_at = now
        impl = handle._impl
        pending = [e for e in impl["run"].events[impl["cursor"]:] if e.time <= now]
        conn_log: ConnectionLog = {}
        for ev in handle.delivered + pending:
            record_packet(conn_log, ev)
        impl["kill_events"] = [
            PacketEvent(now, "out", frozenset({"RST"}), RP_ADDRESS, rec.remote)
            for rec in conn_log.values() if rec.end_time is None
        ]
        handle.exit_status = KILLED
        return True

    def collect_output(self, handle: RpHandle) -> ValidationOutcome:
        self._advance(handle)
        if handle.state == "running":
            raise AdapterError("relying party still running")
        self.events(handle)
        return _outcome(handle, handle._impl["run"].vrps)


class ExternalRelyingParty:
    """Runs a real relying-party executable per TAL.

    ``command`` is a template; ``{tal}``, ``{tal_path}``, ``{skiplist}`` and
    ``{outdir}`` are substituted. The VRP JSON is read from
    ``{outdir}/<output_name>`` after a zero exit. Packet events come from an
    optional ``capture`` object with ``start()``, ``drain() -> list`` and
    ``stop()`` (see :class:`TcpdumpCapture`).
    """

    def __init__(self, command: str | Sequence[str], tal_paths: dict[str, str], clock, *,
                 workdir: str | None = None, output_name: str = "json", capture=None):
        self.command = command
        self.tal_paths = tal_paths
        self.clock = clock
        self.workdir = workdir
        self.output_name = output_name
        self.capture = capture

    def _argv(self, tal: str, skiplist_path: str, outdir: str) -> list[str]:
        subs = {"tal": tal, "tal_path": self.tal_paths[tal],
                "skiplist": skiplist_path, "outdir": outdir}
        parts = shlex.split(self.command) if isinstance(self.command, str) else list(self.command)
        return [p.format(**subs) for p in parts]

    def start_validation(self, tal: str, skiplist: Iterable[str]) -> RpHandle:
        if tal not in self.tal_paths:
            raise AdapterError(f"unknown TAL {tal!r}")
        tmp = tempfile.mkdtemp(prefix=f"rp-{tal.lower()}-", dir=self.workdir)
        skip_path = os.path.join(tmp, "skiplist")
        Path(skip_path).write_bytes(serialize_skiplist(skiplist))
        outdir = os.path.join(tmp, "out")
        os.mkdir(outdir)
        try:
            proc = subprocess.Popen(self._argv(tal, skip_path, outdir),
                                    stdout=subprocess.DEVNULL, stderr=subprocess.DEVNULL)
        except OSError as exc:
            raise AdapterError(f"cannot start relying party: {exc}") from exc
        if self.capture is not None:
            self.capture.drain()
        return RpHandle(tal, self.clock.now(), _impl={"proc": proc, "outdir": outdir})

    def poll(self, handle: RpHandle) -> int | None:
        if handle.state == "running":
            code = handle._impl["proc"].poll()
            if code is not None:
                handle.state = "exited"
                handle.exit_status = code
                handle.ended_at = self.clock.now()
        return handle.exit_status

    def events(self, handle: RpHandle) -> list:
        if self.capture is None:
            return []
        out = self.capture.drain()
        handle.delivered.extend(out)
        return out

    def kill(self, handle: RpHandle) -> bool:
        if handle.state == "running":
            proc = handle._impl["proc"]
            proc.kill()
            proc.wait()
            handle.state = "killed"
            handle.exit_status = KILLED
            handle.ended_at = self.clock.now()
        return True

    def collect_output(self, handle: RpHandle) -> ValidationOutcome:
        self.poll(handle)
        if handle.state == "running":
            raise AdapterError("relying party still running")
        vrps = None
        if handle.exit_status == 0:
            path = os.path.join(handle._impl["outdir"], self.output_name)
            try:
                vrps = parse_vrp_file(Path(path).read_bytes())
            except (OSError, MalformedFile) as exc:
                log.warning("relying party exited 0 but output is unusable: %s", exc)
                handle.exit_status = 1
        self.events(handle)
        return _outcome(handle, vrps)


def parse_tcpdump_line(line: str, local_addresses: Iterable[str]) -> PacketEvent | None:
    """Parse one ``tcpdump -l -n -tt`` line into a packet event.

    Example input::

        1700000000.123456 IP 192.0.2.1.51234 > 198.51.100.7.443: Flags [S], seq 1, ...
    """
    parts = line.split()
    try:
        ts = float(parts[0])
        i = parts.index(">")
        src = parts[i - 1].rsplit(".", 1)[0]
        dst = parts[i + 1].rstrip(":").rsplit(".", 1)[0]
        fi = parts.index("Flags")
        raw = parts[fi + 1].strip("[],")
    except (ValueError, IndexError):
        return None
    flags = set()
    if "S" in raw:
        flags.add("SYN")
    if "." in raw:
        flags.add("ACK")
    if "F" in raw:
        flags.add("FIN")
    if "R" in raw:
        flags.add("RST")
    local = set(local_addresses)
    direction = "out" if src in local else "in"
    return PacketEvent(ts, direction, frozenset(flags), src, dst)


class TcpdumpCapture:
    """Packet source reading SYN/FIN/RST lines from a ``tcpdump`` subprocess."""

    FILTER = "tcp[tcpflags] & (tcp-syn|tcp-fin|tcp-rst) != 0"

    def __init__(self, interface: str, local_addresses: Iterable[str],
                 argv: Sequence[str] | None = None):
        self.local = list(local_addresses)
        self.argv = list(argv) if argv else ["tcpdump", "-l", "-n", "-tt", "-i", interface, self.FILTER]
        self._queue: queue.Queue = queue.Queue()
        self._proc = None

    def start(self):
        self._proc = subprocess.Popen(self.argv, stdout=subprocess.PIPE,
                                      stderr=subprocess.DEVNULL, text=True)
        threading.Thread(target=self._pump, daemon=True).start()

    def _pump(self):
        for line in self._proc.stdout:
            ev = parse_tcpdump_line(line, self.local)
            if ev is not None:
                self._queue.put(ev)

    def drain(self) -> list:
        out = []
        while True:
            try:
                out.append(self._queue.get_nowait())
            except queue.Empty:
                return out

    def stop(self):
        if self._proc is not None:
            self._proc.terminate()
