"""In-process cluster harness on a virtual clock, plus auditing, presence
verification and traffic extrapolation.
"""

from __future__ import annotations

import csv
import dataclasses
import heapq
import io
import itertools
import logging
import math
import random
import re
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

from .adapter import SimulatedRelyingParty
from .model import (
    ConsensusConfig, VrpSet, parse_vrp_file, serialize_vrp_file,
)
from .peering import PeerError
from .sim import BehaviorSwitch, ScenarioConfig, get_scenario
from .service import InMemoryNetwork, Node, NodeService

log = logging.getLogger(__name__)


class VirtualClock:
    def __init__(self, start: float = 0.0):
        self.t = start

    def now(self) -> float:
        return self.t


class Scheduler:
    """Discrete-event loop. Events at equal times run by priority, then FIFO."""

    def __init__(self, clock: VirtualClock):
        self.clock = clock
        self._queue: list = []
        self._seq = itertools.count()

    def at(self, when: float, callback: Callable[[], None], priority: int = 0):
        heapq.heappush(self._queue, (when, priority, next(self._seq), callback))

    def run_until(self, end: float):
        while self._queue and self._queue[0][0] <= end:
            when, _, _, callback = heapq.heappop(self._queue)
            self.clock.t = max(self.clock.t, when)
            callback()
        self.clock.t = max(self.clock.t, end)


# --- byzantine stubs ------------------------------------------------------

@dataclass(frozen=True)
class Poison:
    """Serve extra objects on top of the honest local output."""
    objects: VrpSet


@dataclass(frozen=True)
class Censor:
    """Withhold objects from the honest local output."""
    objects: VrpSet


@dataclass(frozen=True)
class Split:
    """Serve ``views[client]`` in addition to the honest output, per requesting node."""
    views: Mapping[str, VrpSet]


ByzantineBehavior = Poison | Censor | Split


class ByzantineService(NodeService):
    def __init__(self, inner: NodeService, behavior: ByzantineBehavior, local: Callable[[], VrpSet]):
        super().__init__(inner.address, inner.clock)
        self.behavior = behavior
        self.local = local

    def _manipulate(self, base: VrpSet, client: str) -> VrpSet:
        b = self.behavior
        if isinstance(b, Poison):
            return base | b.objects
        if isinstance(b, Censor):
            return base - b.objects
        return base | b.views.get(client, VrpSet())

    def handle_get(self, path: str, client: str):
        status, body, generated_at = super().handle_get(path, client)
        if status == 200 and path in ("/vrps", "/master"):
            base = self.local() if path == "/vrps" else parse_vrp_file(body)
            body = serialize_vrp_file(self._manipulate(base, client))
        return status, body, generated_at


# --- cluster --------------------------------------------------------------

def node_address(index: int) -> str:
    return f"10.0.0.{index + 1}:8443"


@dataclass(frozen=True)
class MetricsSample:
    time: float
    locals: tuple[int, ...]
    union: int
    consensus: int
    masters: tuple[int, ...]
    skiplists: tuple[int, ...]
    master_skiplists: tuple[int, ...]
    statuses: tuple[str, ...]


@dataclass
class ClusterResult:
    scenario: ScenarioConfig
    config: ConsensusConfig
    nodes: list[Node]
    honest: list[int]
    samples: list[MetricsSample]
    network: InMemoryNetwork
    rounds: int = 0

    def node(self, i: int) -> Node:
        return self.nodes[i]

    @property
    def first_completions(self) -> list[float]:
        """Sorted first-full-validation times of the honest nodes."""
        times = [self.nodes[i].monitor.state.first_completed_at for i in self.honest]
        return sorted(t for t in times if t is not None)

    def to_csv(self, fmt: str = "csv") -> str:
        return metrics_csv(self.samples, fmt)


class Cluster:
    """``n`` nodes sharing one scenario, one virtual clock and one in-memory network.

    Peering is tick-synchronous: every ``poll_period`` all nodes compute their
    round against the files as published at the tick, then all publish.
    """

    def __init__(self, n_nodes: int, scenario: ScenarioConfig, config: ConsensusConfig,
                 *, seed: int = 0, byzantine: Mapping[int, ByzantineBehavior] | None = None,
                 bootstrap: str | Mapping[int, Sequence[int]] = "full",
                 refresh: float | None = None, status_poll: float = 1.0,
                 start_offsets: Sequence[float] | None = None):
        if n_nodes < 1:
            raise ValueError("n_nodes must be >= 1")
        byzantine = dict(byzantine or {})
        if any(not 0 <= i < n_nodes for i in byzantine):
            raise ValueError("byzantine node index out of range")
        self.scenario = scenario
        self.config = config
        self.clock = VirtualClock()
        self.scheduler = Scheduler(self.clock)
        self.network = InMemoryNetwork()
        self.samples: list[MetricsSample] = []
        self.rounds = 0
        self.honest = [i for i in range(n_nodes) if i not in byzantine]
        addresses = [node_address(i) for i in range(n_nodes)]
        refresh = scenario.refresh_interval if refresh is None else refresh

        self.nodes: list[Node] = []
        for i in range(n_nodes):
            if bootstrap == "full":
                peers = [a for j, a in enumerate(addresses) if j != i]
            elif bootstrap == "chain":
                peers = [addresses[i + 1]] if i + 1 < n_nodes else []
            else:
                peers = [addresses[j] for j in bootstrap.get(i, ())]
            node = Node(
                addresses[i],
                adapter=SimulatedRelyingParty(scenario, self.clock, config=config,
                                              rng=random.Random(f"{seed}:rp:{i}"), node_index=i),
                config=config, clock=self.clock,
                transport=self.network.transport(addresses[i]),
                tals=list(scenario.tals), dnsbook=scenario.dnsbook(),
                rng=random.Random(f"{seed}:node:{i}"), bootstrap=peers, node_index=i,
                refresh_interval=refresh, status_poll=status_poll)
            if i in byzantine:
                inner = node.service
                node.service = ByzantineService(inner, byzantine[i], lambda n=node: n.local_vrps)
                node.service.files = inner.files
            self.network.register(node.service)
            self.nodes.append(node)

        offsets = start_offsets or [0.0] * n_nodes
        for node, off in zip(self.nodes, offsets):
            self._start_monitor(node, off)
        self.scheduler.at(config.poll_period, self._tick, priority=1)

    def add_node(self, bootstrap: Sequence[int], *, at: float | None = None, seed: int = 0) -> Node:
        """Add an honest node that knows only ``bootstrap``; used for join tests."""
        i = len(self.nodes)
        address = node_address(i)
        node = Node(
            address,
            adapter=SimulatedRelyingParty(self.scenario, self.clock, config=self.config,
                                          rng=random.Random(f"{seed}:rp:{i}"), node_index=i),
            config=self.config, clock=self.clock, transport=self.network.transport(address),
            tals=list(self.scenario.tals), dnsbook=self.scenario.dnsbook(),
            rng=random.Random(f"{seed}:node:{i}"),
            bootstrap=[node_address(j) for j in bootstrap], node_index=i,
            refresh_interval=self.scenario.refresh_interval)
        self.network.register(node.service)
        self.nodes.append(node)
        self.honest.append(i)
        self._start_monitor(node, (at if at is not None else self.clock.now()) - self.clock.now())
        return node

    def _start_monitor(self, node: Node, offset: float):
        gen = node.monitor.run()

        def step():
            delay = next(gen)
            self.scheduler.at(self.clock.now() + delay, step)

        self.scheduler.at(self.clock.now() + offset, step)

    def _tick(self):
        pending = [(node, node.compute_round()) for node in self.nodes]
        for node, (state, master) in pending:
            node.apply_round(state, master)
        self.rounds += 1
        self.samples.append(self.sample())
        self.scheduler.at(self.clock.now() + self.config.poll_period, self._tick, priority=1)

    def sample(self) -> MetricsSample:
        honest = [self.nodes[i] for i in self.honest]
        locals_ = [n.local_vrps for n in self.nodes]
        union = VrpSet.union(n.local_vrps for n in honest)
        return MetricsSample(
            time=self.clock.now(),
            locals=tuple(len(v) for v in locals_),
            union=len(union),
            consensus=len(honest[0].master.vrps) if honest else 0,
            masters=tuple(len(n.master.vrps) for n in self.nodes),
            skiplists=tuple(len(n.local_skiplist) for n in self.nodes),
            master_skiplists=tuple(len(n.master.skiplist) for n in self.nodes),
            statuses=tuple(n.monitor.state.current for n in self.nodes),
        )

    def run_until(self, end: float):
        self.scheduler.run_until(end)

    def result(self) -> ClusterResult:
        return ClusterResult(self.scenario, self.config, self.nodes, list(self.honest),
                             self.samples, self.network, self.rounds)


def run_cluster(n_nodes: int, scenario: ScenarioConfig | str, config: ConsensusConfig | None = None,
                duration: float = 1800.0, seed: int = 0, *,
                byzantine: Mapping[int, ByzantineBehavior] | None = None,
                bootstrap: str | Mapping[int, Sequence[int]] = "full",
                refresh: float | None = None,
                node_switches: Iterable[BehaviorSwitch] = (),
                status_poll: float = 1.0) -> ClusterResult:
    """Run a simulated cluster for ``duration`` virtual seconds.

    One :class:`MetricsSample` is taken after every peering round. The result
    is a pure function of the arguments.
    """
    if isinstance(scenario, str):
        scenario = get_scenario(scenario)
    extra = tuple(node_switches)
    if extra:
        scenario = dataclasses.replace(scenario, schedule=tuple(scenario.schedule) + extra)
    cluster = Cluster(n_nodes, scenario, config or ConsensusConfig(), seed=seed,
                      byzantine=byzantine, bootstrap=bootstrap, refresh=refresh,
                      status_poll=status_poll)
    cluster.run_until(duration)
    return cluster.result()


def metrics_csv(samples: Sequence[MetricsSample], fmt: str = "csv") -> str:
    """Render samples as CSV, or as whitespace-separated columns for gnuplot."""
    n = len(samples[0].locals) if samples else 0
    header = (["time", "consensus", "union"]
              + [f"local_{i}" for i in range(n)] + [f"master_{i}" for i in range(n)]
              + [f"skiplist_{i}" for i in range(n)] + [f"master_skiplist_{i}" for i in range(n)]
              + [f"status_{i}" for i in range(n)])
    rows = []
    for s in samples:
        rows.append([f"{s.time:.3f}", s.consensus, s.union, *s.locals, *s.masters,
                     *s.skiplists, *s.master_skiplists, *s.statuses])
    if fmt == "gnuplot":
        lines = ["# " + " ".join(header)]
        lines += [" ".join(str(v) for v in row) for row in rows]
        return "\n".join(lines) + "\n"
    if fmt != "csv":
        raise ValueError(f"unknown format {fmt!r}")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


# --- loopback TLS cluster -------------------------------------------------

@dataclass
class LoopbackCluster:
    runtimes: list
    addresses: list[str]

    def stop(self):
        for rt in self.runtimes:
            rt.stop()


def start_loopback_cluster(n_nodes: int, scenario: ScenarioConfig, cert_dir, *,
                           config: ConsensusConfig | None = None, base_port: int = 0,
                           refresh: float = 0.5, status_poll: float = 0.05,
                           seed: int = 0) -> LoopbackCluster:
    """Start ``n_nodes`` real nodes on 127.0.0.1 talking mutual TLS, on wall-clock time.

    Certificates are generated under ``cert_dir``. With ``base_port`` 0 the
    ports are picked by the OS. No determinism is claimed in this mode.
    """
    import socket
    from pathlib import Path

    from .certs import certgen
    from .rtr import RtrServer, new_cache
    from .service import HttpsTransport, NodeIdentity, NodeRuntime, WallClock, serve_endpoints

    config = config or ConsensusConfig(poll_period=0.5)

    def free_port():
        with socket.socket() as s:
            s.bind(("127.0.0.1", 0))
            return s.getsockname()[1]

    ports = [base_port + i if base_port else free_port() for i in range(n_nodes)]
    addresses = [f"127.0.0.1:{p}" for p in ports]
    paths = certgen(cert_dir, addresses)
    root = str(Path(cert_dir) / "root.pem")
    clock = WallClock()
    runtimes = []
    for i, addr in enumerate(addresses):
        ident = NodeIdentity(addr, str(paths[addr].cert), str(paths[addr].key), root).verify()
        rng = random.Random(f"{seed}:node:{i}")
        rtr = RtrServer(new_cache(rng=rng), host="127.0.0.1", port=0).start_in_thread()
        node = Node(addr, adapter=SimulatedRelyingParty(scenario, clock, config=config,
                                                        rng=random.Random(f"{seed}:rp:{i}"),
                                                        node_index=i),
                    config=config, clock=clock, transport=HttpsTransport(ident, timeout=2.0),
                    tals=list(scenario.tals), dnsbook=scenario.dnsbook(), rng=rng,
                    bootstrap=[a for a in addresses if a != addr][:1] if i == 0 else [addresses[0]],
                    node_index=i, refresh_interval=refresh, status_poll=status_poll, rtr=rtr,
                    keep_history=False)
        https = serve_endpoints(node.service, ident, "127.0.0.1", ports[i])
        runtimes.append(NodeRuntime(node, https=https, rtr=rtr,
                                    poll_period=config.poll_period).start())
    return LoopbackCluster(runtimes, addresses)


def wait_for(predicate: Callable[[], bool], timeout: float, interval: float = 0.1) -> bool:
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if predicate():
            return True
        time.sleep(interval)
    return predicate()


# --- audit and presence verification --------------------------------------

@dataclass
class AuditReport:
    masters: dict[str, VrpSet]
    unreachable: dict[str, str]
    diffs: dict[tuple[str, str], VrpSet]
    labels: dict[tuple[str, str], str] = field(default_factory=dict)

    @property
    def consistent(self) -> bool:
        return not any(self.diffs.values())

    def offending(self) -> set[str]:
        """Every object named in some nonempty pairwise difference."""
        out: set[str] = set()
        for d in self.diffs.values():
            out.update(v.payload for v in d)
        return out

    def render(self) -> str:
        lines = []
        for node, err in sorted(self.unreachable.items()):
            lines.append(f"UNREACHABLE {node}: {err}")
        for (a, b), d in sorted(self.diffs.items()):
            if not d:
                continue
            label = self.labels.get((a, b), "unconfirmed")
            lines.append(f"DIFF {a} <> {b} [{label}] {len(d)} objects")
            for v in d:
                side = a if v.payload in self.masters[a].kind(v.kind.file_key) else b
                lines.append(f"  {v.kind.value} only-at={side} {v.payload}")
        if not lines:
            lines.append(f"OK {len(self.masters)} masters identical")
        return "\n".join(lines) + "\n"


def audit(nodes: Sequence[str], transport, previous: AuditReport | None = None) -> AuditReport:
    """Fetch every node's ``/master`` and report pairwise symmetric differences.

    Unreachable nodes are listed, not fatal. When ``previous`` is given each
    nonempty diff is labelled ``persistent`` (also seen before) or
    ``transient`` (new since the previous pass, e.g. mid-update).
    """
    masters: dict[str, VrpSet] = {}
    unreachable: dict[str, str] = {}
    for addr in nodes:
        try:
            masters[addr] = parse_vrp_file(transport.fetch(addr, "/master"))
        except (PeerError, ValueError) as exc:
            unreachable[addr] = str(exc)
    diffs = {}
    for a, b in itertools.combinations(sorted(masters), 2):
        diffs[(a, b)] = masters[a] ^ masters[b]
    report = AuditReport(masters, unreachable, diffs)
    if previous is not None:
        report.labels = classify(previous, report)
    return report


def classify(first: AuditReport, second: AuditReport) -> dict[tuple[str, str], str]:
    """Label diffs of ``second``: ``persistent`` if any object also diverged in ``first``."""
    labels = {}
    for pair, d in second.diffs.items():
        if not d:
            continue
        earlier = first.diffs.get(pair, VrpSet())
        labels[pair] = "persistent" if (d & earlier) else "transient"
    return labels


REVOCATION_CAVEAT = "present in an earlier reference run; it may have been revoked since"
ABSENT_CAVEAT = "not produced by the reference relying party"


@dataclass(frozen=True)
class PresenceReport:
    suspects: VrpSet
    caveats: Mapping[str, str]
    checked: int

    @property
    def ok(self) -> bool:
        return not self.suspects

    def render(self) -> str:
        lines = [f"checked {self.checked} objects, {len(self.suspects)} suspect"]
        for v in self.suspects:
            lines.append(f"SUSPECT {v.kind.value} {v.payload} ({self.caveats[v.payload]})")
        return "\n".join(lines) + "\n"


def verify_presence(master: VrpSet, reference: VrpSet,
                    previous_reference: VrpSet | None = None) -> PresenceReport:
    """List master objects the reference run did not produce.

    Only presence is checked. An object missing from the master is never
    reported, since a node cannot prove it was withheld.
    """
    suspects = master - reference
    earlier = previous_reference or VrpSet()
    caveats = {}
    for v in suspects:
        revoked = v.payload in earlier.kind(v.kind.file_key)
        caveats[v.payload] = REVOCATION_CAVEAT if revoked else ABSENT_CAVEAT
    return PresenceReport(suspects, caveats, len(master))


# --- traffic extrapolation ------------------------------------------------

_UNITS = {"": 1, "b": 1, "kb": 10**3, "mb": 10**6, "gb": 10**9, "tb": 10**12,
          "kib": 2**10, "mib": 2**20, "gib": 2**30, "tib": 2**40}
_SIZE_RE = re.compile(r"^\s*([0-9]*\.?[0-9]+(?:e[+-]?\d+)?)\s*([a-z]*)\s*$", re.I)


def parse_size(text: str | float | int) -> float:
    """``"562MB"`` -> 562e6. Decimal units; ``KiB``-style binary units also accepted."""
    if isinstance(text, (int, float)):
        return float(text)
    m = _SIZE_RE.match(text)
    if not m or m.group(2).lower() not in _UNITS:
        raise ValueError(f"cannot parse size {text!r}")
    return float(m.group(1)) * _UNITS[m.group(2).lower()]


def format_size(n: float) -> str:
    for unit, scale in (("TB", 1e12), ("GB", 1e9), ("MB", 1e6), ("KB", 1e3)):
        if abs(n) >= scale:
            return f"{n / scale:.2f} {unit}"
    return f"{n:.0f} B"


@dataclass(frozen=True)
class TrafficParams:
    n_rp: int
    n_node: int
    s_obj: float
    s_vrp: float

    def __post_init__(self):
        for name in ("n_rp", "n_node", "s_obj", "s_vrp"):
            value = getattr(self, name)
            if not (value > 0 and math.isfinite(value)):
                raise ValueError(f"{name} must be positive, got {value!r}")


@dataclass(frozen=True)
class TrafficReport:
    before_bytes: float
    after_bytes: float
    ratio: float
    pp_requests_before: int
    pp_requests_after: int

    @property
    def pp_request_reduction(self) -> float:
        return self.pp_requests_before / self.pp_requests_after

    def render(self) -> str:
        return (f"before: {format_size(self.before_bytes)}\n"
                f"after:  {format_size(self.after_bytes)}\n"
                f"ratio:  {self.ratio:.2f}\n"
                f"publication point requests: {self.pp_requests_before} -> "
                f"{self.pp_requests_after} ({self.pp_request_reduction:.1f}x fewer)\n")


def traffic_extrapolation(params: TrafficParams) -> TrafficReport:
    """Every RP fetching all objects vs. nodes fetching objects and RPs fetching VRPs."""
    before = params.n_rp * params.s_obj
    after = params.n_rp * params.s_vrp + params.n_node * params.s_obj
    return TrafficReport(before, after, before / after, params.n_rp, params.n_node)
