"""Per-node service: the published data files, the mutually authenticated
HTTPS endpoints peers poll, and the wiring of monitor, peering and RTR.
"""

from __future__ import annotations

import gzip
import http.client
import http.server
import logging
import os
import random
import socket
import ssl
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

from .model import (
    EMPTY_VRPS, ConsensusConfig, Peerlist, PeerSnapshot, Skiplist, SkiplistEntry, SkipSource,
    VrpSet, parse_peerlist, serialize_peerlist, serialize_skiplist, serialize_skiplist_sidecar,
    serialize_vrp_file, split_address,
)
from .monitor import Monitor
from .peering import (
    AccessLogEntry, AuthError, PeerError, PeeringState, PeerUnreachable, peering_round,
)
from .rtr import CacheState, RtrServer, new_cache, publish_update
from .vote import MasterState

log = logging.getLogger(__name__)

PATHS = ("/peerlist", "/skiplist", "/vrps", "/master")


class WallClock:
    def now(self) -> float:
        return time.time()


class AccessLog:
    """Authenticated requests only; appended by the request handlers."""

    def __init__(self):
        self._lock = threading.Lock()
        self._entries: list[AccessLogEntry] = []

    def append(self, client: str, path: str, timestamp: float):
        with self._lock:
            self._entries.append(AccessLogEntry(client, path, timestamp))

    def entries(self, since: float | None = None) -> list[AccessLogEntry]:
        with self._lock:
            if since is None:
                return list(self._entries)
            return [e for e in self._entries if e.timestamp >= since]

    def prune(self, before: float):
        with self._lock:
            self._entries = [e for e in self._entries if e.timestamp >= before]


@dataclass(frozen=True)
class PublishedFiles:
    peerlist: bytes = b""
    skiplist: bytes = b""
    vrps: bytes = serialize_vrp_file(EMPTY_VRPS)
    master: bytes = serialize_vrp_file(EMPTY_VRPS)
    generated_at: float = 0.0

    def body(self, path: str) -> bytes | None:
        return {"/peerlist": self.peerlist, "/skiplist": self.skiplist,
                "/vrps": self.vrps, "/master": self.master}.get(path)


class NodeService:
    """What a node serves. Readers always see one complete :class:`PublishedFiles`."""

    def __init__(self, address: str, clock, data_dir: str | None = None):
        self.address = address
        self.clock = clock
        self.data_dir = Path(data_dir) if data_dir else None
        self.access_log = AccessLog()
        self._lock = threading.Lock()
        self.files = PublishedFiles(generated_at=clock.now())

    def publish(self, **changes: bytes):
        with self._lock:
            self.files = replace(self.files, generated_at=self.clock.now(), **changes)
        if self.data_dir is not None:
            self._persist(changes)

    def _persist(self, changes):
        names = {"peerlist": "peerlist", "skiplist": "skiplist", "vrps": "vrps.json",
                 "master": "master.json", "skiplist_meta": "skiplist.meta"}
        self.data_dir.mkdir(parents=True, exist_ok=True)
        for key, data in changes.items():
            target = self.data_dir / names[key]
            tmp = target.with_suffix(target.suffix + ".tmp")
            tmp.write_bytes(data)
            os.replace(tmp, target)

    def handle_get(self, path: str, client: str) -> tuple[int, bytes, float]:
        """Answer one authenticated GET; returns (status, body, generated_at)."""
        files = self.files
        now = self.clock.now()
        self.access_log.append(client, path, now)
        body = files.body(path)
        if body is None:
            return 404, b"not found\n", files.generated_at
        return 200, body, files.generated_at


# --- in-process transport -------------------------------------------------

class InMemoryNetwork:
    """Authenticated channel between in-process nodes; identity is the address."""

    def __init__(self):
        self.services: dict[str, NodeService] = {}
        self.trusted: set[str] = set()
        self.down: set[str] = set()

    def register(self, service: NodeService, trusted: bool = True):
        self.services[service.address] = service
        if trusted:
            self.trusted.add(service.address)
        else:
            self.trusted.discard(service.address)

    def transport(self, client_address: str) -> InMemoryTransport:
        return InMemoryTransport(self, client_address)


class InMemoryTransport:
    def __init__(self, network: InMemoryNetwork, client_address: str):
        self.network = network
        self.client = client_address

    def fetch(self, address: str, path: str) -> bytes:
        net = self.network
        service = net.services.get(address)
        if service is None or address in net.down:
            raise PeerUnreachable(f"{address} unreachable")
        if address not in net.trusted:
            raise AuthError(f"{address} presented an untrusted certificate")
        if self.client not in net.trusted:
            raise AuthError(f"{address} rejected our certificate")
        status, body, _ = service.handle_get(path, self.client)
        if status != 200:
            raise PeerError(f"{address}{path}: HTTP {status}")
        return body


# --- HTTPS with mutual TLS ------------------------------------------------

@dataclass(frozen=True)
class NodeIdentity:
    address: str
    cert: str
    key: str
    root: str

    def verify(self):
        """Check that the leaf chains to the configured root and is currently valid."""
        from .certs import load_cert
        import datetime as dt
        leaf, root = load_cert(self.cert), load_cert(self.root)
        try:
            leaf.verify_directly_issued_by(root)
        except Exception as exc:
            raise ValueError(f"{self.cert} is not issued by {self.root}: {exc}") from None
        now = dt.datetime.now(dt.timezone.utc)
        if not leaf.not_valid_before_utc <= now <= leaf.not_valid_after_utc:
            raise ValueError(f"{self.cert} is not valid now")
        return self

    def server_context(self) -> ssl.SSLContext:
        ctx = ssl.SSLContext(ssl.PROTOCOL_TLS_SERVER)
        ctx.minimum_version = ssl.TLSVersion.TLSv1_2
        ctx.load_cert_chain(self.cert, self.key)
        ctx.load_verify_locations(self.root)
        ctx.verify_mode = ssl.CERT_REQUIRED
        return ctx

    def client_context(self) -> ssl.SSLContext:
        ctx = ssl.SSLContext(ssl.PROTOCOL_TLS_CLIENT)
        ctx.minimum_version = ssl.TLSVersion.TLSv1_2
        ctx.load_cert_chain(self.cert, self.key)
        ctx.load_verify_locations(self.root)
        return ctx


def _peer_name(tls_sock: ssl.SSLSocket) -> str | None:
    cert = tls_sock.getpeercert()
    if not cert:
        return None
    for rdn in cert.get("subject", ()):
        for key, value in rdn:
            if key == "commonName":
                return value
    return None


class _Handler(http.server.BaseHTTPRequestHandler):
    server_version = "rpquorum"
    protocol_version = "HTTP/1.1"

    def do_GET(self):
        service: NodeService = self.server.service
        client = getattr(self.connection, "peer_identity", None) or self.client_address[0]
        status, body, generated_at = service.handle_get(self.path.split("?", 1)[0], client)
        encoding = None
        if "gzip" in self.headers.get("Accept-Encoding", ""):
            body = gzip.compress(body, mtime=0)
            encoding = "gzip"
        self.send_response(status)
        ctype = "application/json" if self.path.startswith(("/vrps", "/master")) else "text/plain"
        self.send_header("Content-Type", ctype)
        if encoding:
            self.send_header("Content-Encoding", encoding)
        self.send_header("Content-Length", str(len(body)))
        self.send_header("X-Generated-At", repr(generated_at))
        self.end_headers()
        self.wfile.write(body)

    def log_message(self, fmt, *args):
        log.debug("%s " + fmt, self.client_address[0], *args)


class HttpsNodeServer(http.server.ThreadingHTTPServer):
    daemon_threads = True

    def __init__(self, service: NodeService, identity: NodeIdentity, host: str, port: int,
                 handshake_timeout: float = 5.0):
        self.service = service
        self.ssl_context = identity.server_context()
        self.handshake_timeout = handshake_timeout
        self.rejected_handshakes = 0
        super().__init__((host, port), _Handler)

    def finish_request(self, request, client_address):
        # handshake in the worker thread so a slow or bad client cannot block accept()
        request.settimeout(self.handshake_timeout)
        try:
            tls = self.ssl_context.wrap_socket(request, server_side=True)
        except (ssl.SSLError, OSError) as exc:
            self.rejected_handshakes += 1
            log.info("rejected TLS handshake from %s: %s", client_address[0], exc)
            return
        tls.peer_identity = _peer_name(tls)
        try:
            super().finish_request(tls, client_address)
        finally:
            try:
                tls.close()
            except OSError:
                pass

    def handle_error(self, request, client_address):
        log.debug("error while serving %s", client_address, exc_info=True)

    def start_in_thread(self) -> HttpsNodeServer:
        threading.Thread(target=self.serve_forever, name="https-node", daemon=True).start()
        return self

    @property
    def port(self) -> int:
        return self.server_address[1]


def serve_endpoints(service: NodeService, identity: NodeIdentity, host: str = "127.0.0.1",
                    port: int = 8443) -> HttpsNodeServer:
    return HttpsNodeServer(service, identity, host, port).start_in_thread()


class HttpsTransport:
    def __init__(self, identity: NodeIdentity, timeout: float = 5.0, default_port: int = 8443):
        self.context = identity.client_context()
        self.timeout = timeout
        self.default_port = default_port

    def fetch(self, address: str, path: str) -> bytes:
        host, port = split_address(address, self.default_port)
        conn = http.client.HTTPSConnection(host, port, context=self.context, timeout=self.timeout)
        try:
            conn.request("GET", path, headers={"Accept-Encoding": "gzip"})
            resp = conn.getresponse()
            body = resp.read()
            if resp.status != 200:
                raise PeerError(f"{address}{path}: HTTP {resp.status}")
            if resp.getheader("Content-Encoding") == "gzip":
                body = gzip.decompress(body)
            return body
        except ssl.SSLError as exc:
            raise AuthError(f"{address}: {exc}") from exc
        except (OSError, http.client.HTTPException) as exc:
            raise PeerUnreachable(f"{address}: {exc}") from exc
        finally:
            conn.close()


# --- node wiring ----------------------------------------------------------

class Node:
    """One consensus participant: monitor + peering + published files + RTR cache."""

    def __init__(self, address: str, *, adapter, config: ConsensusConfig, clock,
                 transport, tals: Sequence[str], dnsbook, rng: random.Random,
                 bootstrap: Iterable[str] = (), node_index: int = 0,
                 refresh_interval: float = 600.0, status_poll: float = 1.0,
                 rtr: RtrServer | None = None, data_dir: str | None = None,
                 keep_history: bool = True):
        self.address = address
        self.config = config
        self.clock = clock
        self.transport = transport
        self.rng = rng
        self.node_index = node_index
        self.service = NodeService(address, clock, data_dir)
        self.peering = PeeringState(address, Peerlist(tuple(bootstrap)))
        self.master = MasterState(EMPTY_VRPS, frozenset(), clock.now(), 1, 0)
        self.master_skiplist = Skiplist()
        self.rtr = rtr
        self.cache: CacheState = rtr.cache if rtr else new_cache(rng=rng)
        self.executor = None
        self.monitor = Monitor(
            tals, adapter, config, clock=clock, rng=rng, dnsbook=dnsbook,
            master_skiplist=lambda: self.master.skiplist,
            publish_vrps=self._publish_vrps, publish_skiplist=self._publish_skiplist,
            node_index=node_index, refresh_interval=refresh_interval,
            status_poll=status_poll, keep_history=keep_history)
        self.service.publish(peerlist=serialize_peerlist(self.peering.peerlist, address))

    # monitor -> files
    def _publish_vrps(self, vrps: VrpSet):
        self.service.publish(vrps=serialize_vrp_file(vrps))

    def _publish_skiplist(self, skiplist: Skiplist):
        changes = {"skiplist": serialize_skiplist(skiplist.domains)}
        if self.service.data_dir is not None:
            changes["skiplist_meta"] = serialize_skiplist_sidecar(skiplist)
        self.service.publish(**changes)

    @property
    def local_vrps(self) -> VrpSet:
        return self.monitor.state.local_vrps

    @property
    def local_skiplist(self) -> frozenset[str]:
        return self.monitor.state.skiplist.domains

    def own_snapshot(self) -> PeerSnapshot:
        return PeerSnapshot(self.address, self.clock.now(), self.local_vrps,
                            self.local_skiplist, self.peering.peerlist)

    def compute_round(self):
        access = self.service.access_log.entries(since=self.peering.last_poll)
        return peering_round(self.peering, self.own_snapshot(), self.transport, self.config,
                             self.clock, rng=self.rng, access_log=access,
                             executor=self.executor)

    def apply_round(self, state: PeeringState, master: MasterState):
        old_peers = self.peering.peerlist
        self.peering = state
        self.master = master
        entries = {}
        for d in master.skiplist:
            prev = self.master_skiplist.entries.get(d)
            entries[d] = prev or SkiplistEntry(d, master.computed_at, SkipSource.PEER_CONSENSUS)
        self.master_skiplist = Skiplist(entries)
        changes = {"master": serialize_vrp_file(master.vrps)}
        if state.peerlist != old_peers:
            changes["peerlist"] = serialize_peerlist(state.peerlist, self.address)
        self.service.publish(**changes)
        if self.rtr is not None:
            self.rtr.update(master.vrps)
            self.cache = self.rtr.cache
        else:
            self.cache = publish_update(self.cache, master.vrps)
        if state.last_poll is not None:
            self.service.access_log.prune(state.last_poll)

    def step_peering(self):
        self.apply_round(*self.compute_round())


class NodeRuntime:
    """Wall-clock driver: HTTPS server, RTR server, monitor and peering threads."""

    def __init__(self, node: Node, *, https: HttpsNodeServer | None, rtr: RtrServer | None,
                 poll_period: float, max_workers: int = 8):
        self.node = node
        self.https = https
        self.rtr = rtr
        self.poll_period = poll_period
        self.stop_event = threading.Event()
        self.rounds = 0
        self.node.executor = ThreadPoolExecutor(max_workers=max_workers)
        self._threads: list[threading.Thread] = []

    def _monitor_loop(self):
        gen = self.node.monitor.run()
        while not self.stop_event.is_set():
            try:
                delay = next(gen)
            except Exception:
                log.exception("monitor loop failed; restarting")
                gen = self.node.monitor.run()
                delay = self.poll_period
            self.stop_event.wait(delay)

    def _peering_loop(self):
        while not self.stop_event.is_set():
            try:
                self.node.step_peering()
                self.rounds += 1
            except Exception:
                log.exception("peering round failed")
            self.stop_event.wait(self.poll_period)

    def start(self) -> NodeRuntime:
        for target, name in ((self._monitor_loop, "monitor"), (self._peering_loop, "peering")):
            t = threading.Thread(target=target, name=f"{name}-{self.node.address}", daemon=True)
            t.start()
            self._threads.append(t)
        return self

    def stop(self):
        self.stop_event.set()
        for t in self._threads:
            t.join(10)
        if self.https is not None:
            self.https.shutdown()
            self.https.server_close()
        if self.rtr is not None:
            self.rtr.stop_thread()
        self.node.executor.shutdown(wait=False)

    def run_forever(self):
        self.start()
        try:
            while not self.stop_event.is_set():
                self.stop_event.wait(1.0)
        except KeyboardInterrupt:
            pass
        finally:
            self.stop()


class ReverseDnsBook(dict):
    """Address-to-domain map that falls back to reverse DNS for unknown remotes."""

    def get(self, key, default=None):
        if key in self:
            return self[key]
        try:
            name = socket.gethostbyaddr(key)[0].lower()
        except OSError:
            return default
        self[key] = name
        return name


def load_bootstrap(path) -> list[str]:
    if not path:
        return []
    return list(parse_peerlist(Path(path).read_bytes()).peers)


def node_main(config, *, bootstrap: Iterable[str] | None = None,
              identity: NodeIdentity | None = None, scenario=None,
              clock=None) -> NodeRuntime:
    """Build a node from a :class:`~rpquorum.config.NodeConfig` and start it.

    ``config.mode`` selects the adapter: ``sim`` uses the scenario (a preset
    name or JSON file), ``live`` wraps ``config.rp_command``. Wiring is
    otherwise identical. Returns the started runtime.
    """
    from .adapter import ExternalRelyingParty, SimulatedRelyingParty, TcpdumpCapture
    from .sim import TALS, get_scenario

    clock = clock or WallClock()
    if identity is None:
        if not (config.cert and config.key and config.root):
            raise ValueError("tls.cert, tls.key and tls.root are required")
        identity = NodeIdentity(config.address, config.cert, config.key, config.root)
    identity.verify()
    if bootstrap is None:
        bootstrap = load_bootstrap(config.bootstrap)
    rng = random.Random(config.seed * 1000 + config.node_index)

    if config.mode == "sim":
        scenario = scenario or get_scenario(config.scenario)
        adapter = SimulatedRelyingParty(scenario, clock, config=config.consensus,
                                        rng=random.Random(rng.random()), node_index=config.node_index)
        tals = list(scenario.tals)
        dnsbook = scenario.dnsbook()
    else:
        if not config.rp_command or not config.tal_dir:
            raise ValueError("live mode needs node.rp_command and node.tal_dir")
        tal_paths = {p.stem.upper(): str(p) for p in sorted(Path(config.tal_dir).glob("*.tal"))}
        capture = None
        if config.capture_interface:
            capture = TcpdumpCapture(config.capture_interface, [split_address(config.address, 0)[0]])
            capture.start()
        adapter = ExternalRelyingParty(config.rp_command, tal_paths, clock, capture=capture)
        tals = list(tal_paths) or list(TALS)
        dnsbook = ReverseDnsBook()

    tls_ctx = identity.server_context() if config.rtr_tls else None
    rtr = RtrServer(new_cache(rng=rng), host=config.rtr_host, port=config.rtr_port,
                    ssl_context=tls_ctx).start_in_thread()
    node = Node(config.address, adapter=adapter, config=config.consensus, clock=clock,
                transport=HttpsTransport(identity, timeout=config.poll_timeout,
                                         default_port=config.https_port),
                tals=tals, dnsbook=dnsbook, rng=rng, bootstrap=bootstrap,
                node_index=config.node_index, refresh_interval=config.refresh_interval,
                status_poll=config.status_poll, rtr=rtr, data_dir=config.data_dir,
                keep_history=False)
    https = serve_endpoints(node.service, identity, config.listen_host, config.https_port)
    return NodeRuntime(node, https=https, rtr=rtr, poll_period=config.consensus.poll_period).start()
