"""Shared domain types and the three node data files.

Every validated payload is reduced to a canonical JSON string; two payloads
are the same object exactly when their canonical strings are byte-equal.
Consensus, diffing and serialization all operate on those strings.
"""

from __future__ import annotations

import functools
import gzip
import ipaddress
import json
import math
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Iterator, Mapping

KINDS = ("roas", "aspas", "bgpsec_keys")

ASN_MAX = 2**32


class VrpKind(str, Enum):
    ROA = "roa"
    ASPA = "aspa"
    BGPSEC_KEY = "bgpsec-key"

    @property
    def file_key(self) -> str:
        return _FILE_KEYS[self]


_FILE_KEYS = {VrpKind.ROA: "roas", VrpKind.ASPA: "aspas", VrpKind.BGPSEC_KEY: "bgpsec_keys"}
_KIND_BY_KEY = {v: k for k, v in _FILE_KEYS.items()}


class MalformedFile(ValueError):
    """A node data file could not be parsed; the whole file is rejected."""


def _dumps(obj) -> str:
    return json.dumps(obj, separators=(",", ":"), ensure_ascii=False)


def parse_asn(value) -> int:
    """Accept ``65537``, ``"65537"`` or ``"AS65537"``."""
    if isinstance(value, bool):
        raise ValueError(f"invalid ASN {value!r}")
    if isinstance(value, int):
        asn = value
    elif isinstance(value, str):
        text = value.strip()
        if text[:2].upper() == "AS":
            text = text[2:]
        if not text.isdigit():
            raise ValueError(f"invalid ASN {value!r}")
        asn = int(text)
    else:
        raise ValueError(f"invalid ASN {value!r}")
    if not 0 <= asn < ASN_MAX:
        raise ValueError(f"ASN out of range: {asn}")
    return asn


@dataclass(frozen=True, order=True)
class Vrp:
    """One validated payload, identified by its kind and canonical string."""

    kind: VrpKind
    payload: str

    def fields(self) -> dict:
        return json.loads(self.payload)


def canonicalize_roa(asn, prefix, max_length, ta: str) -> Vrp:
    asn = parse_asn(asn)
    try:
        net = ipaddress.ip_network(str(prefix), strict=True)
    except ValueError as exc:
        raise ValueError(f"invalid CIDR prefix {prefix!r}: {exc}") from None
    if isinstance(max_length, bool) or not isinstance(max_length, int):
        try:
            max_length = int(str(max_length))
        except ValueError:
            raise ValueError(f"invalid maxLength {max_length!r}") from None
    if max_length < net.prefixlen:
        raise ValueError(f"maxLength {max_length} < prefix length {net.prefixlen} for {net}")
    if max_length > net.max_prefixlen:
        raise ValueError(f"maxLength {max_length} exceeds {net.max_prefixlen} for {net}")
    if not ta:
        raise ValueError("missing trust anchor")
    # key order is part of the identity; do not sort
    payload = _dumps({"asn": f"AS{asn}", "prefix": str(net), "maxLength": max_length, "ta": str(ta)})
    return Vrp(VrpKind.ROA, payload)


def canonicalize_aspa(customer, providers: Iterable, ta: str | None = None) -> Vrp:
    customer = parse_asn(customer)
    provs = sorted({parse_asn(p) for p in providers})
    obj = {"customer": f"AS{customer}", "providers": [f"AS{p}" for p in provs]}
    if ta:
        obj["ta"] = str(ta)
    return Vrp(VrpKind.ASPA, _dumps(obj))


def canonicalize_bgpsec_key(asn, ski: str, pubkey: str, ta: str | None = None) -> Vrp:
    asn = parse_asn(asn)
    ski = str(ski).strip().lower().replace(":", "")
    if not ski or not re.fullmatch(r"[0-9a-f]+", ski):
        raise ValueError(f"invalid SKI {ski!r}")
    if not pubkey:
        raise ValueError("missing public key")
    obj = {"asn": f"AS{asn}", "ski": ski, "pubkey": str(pubkey)}
    if ta:
        obj["ta"] = str(ta)
    return Vrp(VrpKind.BGPSEC_KEY, _dumps(obj))


def canonicalize_vrp(kind: VrpKind | str, raw: Mapping) -> Vrp:
    """Build the canonical form of one raw payload record.

    ``raw`` may use either this package's field names or the ones emitted by
    common relying-party JSON exports (integer ASNs, ``customer_asid``,
    ``max_length``).
    """
    kind = VrpKind(kind) if not isinstance(kind, VrpKind) else kind
    try:
        if kind is VrpKind.ROA:
            max_len = raw["maxLength"] if "maxLength" in raw else raw["max_length"]
            return canonicalize_roa(raw["asn"], raw["prefix"], max_len, raw["ta"])
        if kind is VrpKind.ASPA:
            customer = raw["customer"] if "customer" in raw else raw["customer_asid"]
            return canonicalize_aspa(customer, raw.get("providers", ()), raw.get("ta"))
        return canonicalize_bgpsec_key(raw["asn"], raw["ski"], raw["pubkey"], raw.get("ta"))
    except KeyError as exc:
        raise ValueError(f"{kind.value} record missing field {exc.args[0]!r}") from None


def roa(asn, prefix, max_length=None, ta="RIPE") -> str:
    """Shorthand returning the canonical string of a ROA payload."""
    if max_length is None:
        max_length = ipaddress.ip_network(prefix).prefixlen
    return canonicalize_roa(asn, prefix, max_length, ta).payload


@dataclass(frozen=True)
class VrpSet:
    """Validated payloads partitioned by kind, each a set of canonical strings."""

    roas: frozenset[str] = frozenset()
    aspas: frozenset[str] = frozenset()
    bgpsec_keys: frozenset[str] = frozenset()

    def __post_init__(self):
        for key in KINDS:
            value = getattr(self, key)
            if not isinstance(value, frozenset):
                object.__setattr__(self, key, frozenset(value))

    @classmethod
    def from_vrps(cls, vrps: Iterable[Vrp]) -> VrpSet:
        parts: dict[str, set[str]] = {k: set() for k in KINDS}
        for v in vrps:
            parts[v.kind.file_key].add(v.payload)
        return cls(**parts)

    def kind(self, key: str) -> frozenset[str]:
        return getattr(self, key)

    def __iter__(self) -> Iterator[Vrp]:
        for key in KINDS:
            kind = _KIND_BY_KEY[key]
            for payload in getattr(self, key):
                yield Vrp(kind, payload)

    def __len__(self) -> int:
        return len(self.roas) + len(self.aspas) + len(self.bgpsec_keys)

    def __bool__(self) -> bool:
        return len(self) > 0

    def _combine(self, other: VrpSet, op) -> VrpSet:
        return VrpSet(*(op(getattr(self, k), getattr(other, k)) for k in KINDS))

    def __or__(self, other: VrpSet) -> VrpSet:
        return self._combine(other, frozenset.__or__)

    def __and__(self, other: VrpSet) -> VrpSet:
        return self._combine(other, frozenset.__and__)

    def __sub__(self, other: VrpSet) -> VrpSet:
        return self._combine(other, frozenset.__sub__)

    def __xor__(self, other: VrpSet) -> VrpSet:
        return self._combine(other, frozenset.__xor__)

    def issubset(self, other: VrpSet) -> bool:
        return all(getattr(self, k) <= getattr(other, k) for k in KINDS)

    @staticmethod
    def union(sets: Iterable[VrpSet]) -> VrpSet:
        out = VrpSet()
        for s in sets:
            out = out | s
        return out


EMPTY_VRPS = VrpSet()


def parse_vrp_file(data: bytes | str) -> VrpSet:
    """Parse a VRP JSON document (optionally gzip-compressed)."""
    if isinstance(data, bytearray):
        data = bytes(data)
    # peers re-serve identical documents every round; results are immutable
    return _parse_vrp_cached(data)


@functools.lru_cache(maxsize=512)
def _parse_vrp_cached(data: bytes | str) -> VrpSet:
    if isinstance(data, bytes):
        if data[:2] == b"\x1f\x8b":
            try:
                data = gzip.decompress(data)
            except (OSError, EOFError) as exc:
                raise MalformedFile(f"bad gzip stream: {exc}") from None
        try:
            data = data.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedFile(str(exc)) from None
    try:
        doc = json.loads(data)
    except json.JSONDecodeError as exc:
        raise MalformedFile(f"invalid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise MalformedFile("top level must be an object")
    parts = {}
    for key in KINDS:
        items = doc.get(key, [])
        if not isinstance(items, list):
            raise MalformedFile(f"{key!r} must be a list")
        kind = _KIND_BY_KEY[key]
        out = set()
        for item in items:
            if not isinstance(item, dict):
                raise MalformedFile(f"{key!r} entries must be objects")
            try:
                out.add(canonicalize_vrp(kind, item).payload)
            except ValueError as exc:
                raise MalformedFile(str(exc)) from None
        parts[key] = frozenset(out)
    return VrpSet(**parts)


def serialize_vrp_file(vrps: VrpSet) -> bytes:
    # canonical strings are valid JSON objects, so splice them in directly
    chunks = []
    for key in KINDS:
        chunks.append(f'"{key}":[' + ",".join(sorted(getattr(vrps, key))) + "]")
    return ("{" + ",".join(chunks) + "}\n").encode("utf-8")


# --- skiplist -------------------------------------------------------------

_LABEL = r"[a-z0-9_](?:[a-z0-9_-]{0,61}[a-z0-9_])?"
_DOMAIN_RE = re.compile(rf"^{_LABEL}(?:\.{_LABEL})*$")


def normalize_domain(text: str) -> str:
    domain = text.strip().lower().rstrip(".")
    if not domain or len(domain) > 253 or not _DOMAIN_RE.match(domain):
        raise ValueError(f"invalid publication point domain {text!r}")
    return domain


class SkipSource(str, Enum):
    CRASH = "crash"
    STALL = "stall"
    PEER_CONSENSUS = "peer-consensus"


@dataclass(frozen=True)
class SkiplistEntry:
    domain: str
    added_at: float
    source: SkipSource

    def __post_init__(self):
        object.__setattr__(self, "domain", normalize_domain(self.domain))
        object.__setattr__(self, "source", SkipSource(self.source))


@dataclass(frozen=True)
class Skiplist:
    """Domains to avoid, keyed by domain, with node-local timestamps."""

    entries: Mapping[str, SkiplistEntry] = field(default_factory=dict)

    @property
    def domains(self) -> frozenset[str]:
        return frozenset(self.entries)

    def __contains__(self, domain: str) -> bool:
        return domain in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(sorted(self.entries))


def _content_lines(text: str) -> Iterator[tuple[int, str]]:
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if line:
            yield lineno, line


def _as_text(data: bytes | str) -> str:
    if isinstance(data, (bytes, bytearray)):
        try:
            return data.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedFile(str(exc)) from None
    return data


def parse_skiplist(data: bytes | str) -> frozenset[str]:
    """Parse the domains-only wire format."""
    out = set()
    for lineno, line in _content_lines(_as_text(data)):
        if "/" in line or ":" in line or " " in line:
            raise MalformedFile(f"line {lineno}: expected a bare domain, got {line!r}")
        try:
            out.add(normalize_domain(line))
        except ValueError as exc:
            raise MalformedFile(f"line {lineno}: {exc}") from None
    return frozenset(out)


def serialize_skiplist(domains: Iterable[str]) -> bytes:
    return "".join(f"{d}\n" for d in sorted(set(domains))).encode("utf-8")


def parse_skiplist_sidecar(data: bytes | str) -> Skiplist:
    """Parse the node-local metadata file: ``domain<TAB>added_at<TAB>source``."""
    entries = {}
    for lineno, line in _content_lines(_as_text(data)):
        parts = line.split()
        if len(parts) != 3:
            raise MalformedFile(f"line {lineno}: expected 3 fields")
        try:
            added_at = float(parts[1])
            if not math.isfinite(added_at):
                raise ValueError("timestamp is not finite")
            entry = SkiplistEntry(parts[0], added_at, SkipSource(parts[2]))
        except ValueError as exc:
            raise MalformedFile(f"line {lineno}: {exc}") from None
        entries[entry.domain] = entry
    return Skiplist(entries)


def serialize_skiplist_sidecar(skiplist: Skiplist) -> bytes:
    lines = []
    for domain in sorted(skiplist.entries):
        e = skiplist.entries[domain]
        lines.append(f"{e.domain}\t{e.added_at!r}\t{e.source.value}\n")
    return "".join(lines).encode("utf-8")


# --- peerlist -------------------------------------------------------------

def normalize_address(text: str) -> str:
    """Validate ``host``, ``host:port``, ``ip`` or ``[v6]:port``."""
    addr = text.strip()
    if not addr:
        raise ValueError("empty address")
    host, port = addr, None
    if addr.startswith("["):
        end = addr.find("]")
        if end < 0:
            raise ValueError(f"invalid address {text!r}")
        host, rest = addr[1:end], addr[end + 1:]
        if rest:
            if not rest.startswith(":"):
                raise ValueError(f"invalid address {text!r}")
            port = rest[1:]
        ipaddress.IPv6Address(host)
    elif addr.count(":") == 1:
        host, port = addr.split(":")
    if port is not None:
        if not port.isdigit() or not 0 < int(port) < 65536:
            raise ValueError(f"invalid port in {text!r}")
    try:
        ip = ipaddress.ip_address(host)
    except ValueError:
        host = normalize_domain(host)
    else:
        host = str(ip)
    if port is None:
        return host
    if ":" in host:
        return f"[{host}]:{int(port)}"
    return f"{host}:{int(port)}"


def split_address(address: str, default_port: int) -> tuple[str, int]:
    if address.startswith("["):
        host, _, rest = address[1:].partition("]")
        return host, int(rest[1:]) if rest else default_port
    if address.count(":") == 1:
        host, port = address.split(":")
        return host, int(port)
    return address, default_port


@dataclass(frozen=True)
class Peerlist:
    peers: tuple[str, ...] = ()

    def __post_init__(self):
        seen = dict.fromkeys(normalize_address(p) for p in self.peers)
        object.__setattr__(self, "peers", tuple(seen))

    def __contains__(self, address: str) -> bool:
        return address in self.peers

    def __iter__(self):
        return iter(self.peers)

    def __len__(self):
        return len(self.peers)

    def add(self, address: str) -> Peerlist:
        return Peerlist(self.peers + (address,))


def parse_peerlist(data: bytes | str) -> Peerlist:
    peers = []
    for lineno, line in _content_lines(_as_text(data)):
        try:
            peers.append(normalize_address(line))
        except ValueError as exc:
            raise MalformedFile(f"line {lineno}: {exc}") from None
    return Peerlist(tuple(peers))


def serialize_peerlist(peerlist: Peerlist | Iterable[str], self_address: str | None = None) -> bytes:
    peers = peerlist.peers if isinstance(peerlist, Peerlist) else Peerlist(tuple(peerlist)).peers
    return "".join(f"{p}\n" for p in peers if p != self_address).encode("utf-8")


# --- snapshots and configuration ------------------------------------------

@dataclass(frozen=True)
class PeerSnapshot:
    """One peer's data files as fetched at ``fetched_at``."""

    peer: str
    fetched_at: float
    vrps: VrpSet = EMPTY_VRPS
    skiplist: frozenset[str] = frozenset()
    peerlist: Peerlist = Peerlist()

    def is_fresh(self, now: float, staleness_tolerance: float) -> bool:
        return now - self.fetched_at <= staleness_tolerance


@dataclass(frozen=True)
class ConsensusConfig:
    """Vote and monitoring parameters; durations are in seconds."""

    c: float = 0.5
    staleness_tolerance: float = 3600.0
    poll_period: float = 10.0
    blacklist_expiry: float = 86400.0
    stall_fraction: float = 0.9
    global_timeout: float = 3600.0

    def __post_init__(self):
        if not 0.0 <= self.c <= 1.0:
            raise ValueError(f"c must be in [0, 1], got {self.c}")
        for name in ("staleness_tolerance", "poll_period", "blacklist_expiry", "global_timeout"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if not 0.0 < self.stall_fraction <= 1.0:
            raise ValueError(f"stall_fraction must be in (0, 1], got {self.stall_fraction}")

    @property
    def connection_timeout(self) -> float:
        # the relying party drops a single repository connection at a quarter of its run budget
        return self.global_timeout / 4

    @property
    def stall_threshold(self) -> float:
        return self.stall_fraction * self.connection_timeout


DnsBook = dict  # remote IP -> publication point domain
