"""Seedable simulation of the publication point ecosystem.

Each trust anchor owns a flat list of publication points (delegation chains
are flattened). A point has a behavior that may be switched by a time
schedule, optionally only for some nodes. Simulating one validation run
produces a packet-event timeline, an exit time and code, and the VRPs the
run would have emitted.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Union

from .model import VrpSet, canonicalize_aspa, canonicalize_roa, normalize_domain, parse_vrp_file, serialize_vrp_file

TALS = ("AFRINIC", "APNIC", "ARIN", "LACNIC", "RIPE")

DEFAULT_LATENCY = (0.05, 0.5)


@dataclass(frozen=True)
class Benign:
    latency: tuple[float, float] | None = None


@dataclass(frozen=True)
class Flaky:
    availability: float

    def __post_init__(self):
        if not 0.0 <= self.availability <= 1.0:
            raise ValueError("availability must be in [0, 1]")


@dataclass(frozen=True)
class Jitter:
    drop: float

    def __post_init__(self):
        if not 0.0 <= self.drop <= 1.0:
            raise ValueError("drop must be in [0, 1]")


@dataclass(frozen=True)
class Stalling:
    hold: float

    def __post_init__(self):
        if not self.hold > 0:
            raise ValueError("hold must be > 0")


@dataclass(frozen=True)
class Crashing:
    pass


PpBehavior = Union[Benign, Flaky, Jitter, Stalling, Crashing]


@dataclass(frozen=True)
class PublicationPoint:
    domain: str
    ip: str
    behavior: PpBehavior = Benign()
    vrps: VrpSet = VrpSet()
    latency: tuple[float, float] = DEFAULT_LATENCY


@dataclass(frozen=True)
class BehaviorSwitch:
    at: float
    domain: str
    behavior: PpBehavior
    nodes: frozenset[int] | None = None  # None: every node

    def applies_to(self, node_index: int) -> bool:
        return self.nodes is None or node_index in self.nodes


@dataclass(frozen=True)
class ScenarioConfig:
    name: str
    tals: Mapping[str, tuple[PublicationPoint, ...]]
    seed: int = 0
    schedule: tuple[BehaviorSwitch, ...] = ()
    refresh_interval: float | None = None

    def __post_init__(self):
        domains = [pp.domain for pps in self.tals.values() for pp in pps]
        if len(set(domains)) != len(domains):
            raise ValueError("publication point domains must be unique")
        ips = [pp.ip for pps in self.tals.values() for pp in pps]
        if len(set(ips)) != len(ips):
            raise ValueError("publication point addresses must be unique")
        known = set(domains)
        for sw in self.schedule:
            if sw.domain not in known:
                raise ValueError(f"schedule references unknown domain {sw.domain!r}")
        object.__setattr__(self, "schedule", tuple(sorted(self.schedule, key=lambda s: s.at)))

    def points(self) -> Iterable[PublicationPoint]:
        for pps in self.tals.values():
            yield from pps

    def point(self, domain: str) -> PublicationPoint:
        for pp in self.points():
            if pp.domain == domain:
                return pp
        raise KeyError(domain)

    def tal_of(self, domain: str) -> str:
        for tal, pps in self.tals.items():
            if any(pp.domain == domain for pp in pps):
                return tal
        raise KeyError(domain)

    def dnsbook(self) -> dict[str, str]:
        return {pp.ip: pp.domain for pp in self.points()}

    def ground_truth(self, tal: str | None = None) -> VrpSet:
        """Union of all contributions, for one TAL or for all of them."""
        pps = self.tals[tal] if tal else list(self.points())
        return VrpSet.union(pp.vrps for pp in pps)

    def behavior_at(self, domain: str, t: float, node_index: int = 0) -> PpBehavior:
        behavior = self.point(domain).behavior
        for sw in self.schedule:
            if sw.at > t:
                break
            if sw.domain == domain and sw.applies_to(node_index):
                behavior = sw.behavior
        return behavior


# --- simulated runs -------------------------------------------------------

RP_ADDRESS = "192.0.2.1"


@dataclass(frozen=True)
class PacketEvent:
    time: float
    direction: str  # "out" from the relying party, "in" towards it
    flags: frozenset[str]
    src: str
    dst: str

    @property
    def remote(self) -> str:
        return self.dst if self.direction == "out" else self.src


def _out(t, flags, remote, local=RP_ADDRESS):
    return PacketEvent(t, "out", frozenset(flags), local, remote)


def _in(t, flags, remote, local=RP_ADDRESS):
    return PacketEvent(t, "in", frozenset(flags), remote, local)


@dataclass
class SimRun:
    tal: str
    started_at: float
    events: list[PacketEvent]
    exit_time: float
    exit_code: int
    vrps: VrpSet | None
    contacted: list[str] = field(default_factory=list)


def _subset(vrps: VrpSet, keep_fraction: float, rng: random.Random) -> VrpSet:
    parts = {}
    for key in ("roas", "aspas", "bgpsec_keys"):
        items = sorted(getattr(vrps, key))
        k = len(items) - round((1.0 - keep_fraction) * len(items))
        parts[key] = frozenset(rng.sample(items, k))
    return VrpSet(**parts)


def simulate_validation(tal: str, skiplist: Iterable[str], scenario: ScenarioConfig,
                        clock, rng: random.Random, *, node_index: int = 0,
                        connection_timeout: float = 900.0,
                        global_timeout: float = 3600.0) -> SimRun:
    """Simulate one relying-party run over the points under ``tal``.

    Points are visited in list order; skiplisted domains are never contacted.
    ``connection_timeout`` is the relying party's own per-connection limit
    and ``global_timeout`` its whole-run limit (exceeding it exits with 1).
    """
    if tal not in scenario.tals:
        raise KeyError(f"unknown TAL {tal!r}")
    skip = {normalize_domain(d) for d in skiplist}
    start = clock.now()
    t = start
    events: list[PacketEvent] = []
    contacted: list[str] = []
    output = VrpSet()
    exit_code = 0

    for pp in scenario.tals[tal]:
        if pp.domain in skip:
            continue
        behavior = scenario.behavior_at(pp.domain, t, node_index)
        lo, hi = pp.latency
        if isinstance(behavior, Benign) and behavior.latency is not None:
            lo, hi = behavior.latency
        latency = rng.uniform(lo, hi)
        handshake = latency * 0.1
        contacted.append(pp.domain)
        events.append(_out(t, {"SYN"}, pp.ip))

        if isinstance(behavior, Crashing):
            events.append(_in(t + handshake, {"SYN", "ACK"}, pp.ip))
            # a malformed object kills the process while the transfer is still open
            t += 2 * handshake
            exit_code = 1
            output = None
            break
        if isinstance(behavior, Flaky) and rng.random() >= behavior.availability:
            events.append(_in(t + handshake, {"RST", "ACK"}, pp.ip))
            t += handshake
            continue

        events.append(_in(t + handshake, {"SYN", "ACK"}, pp.ip))
        if isinstance(behavior, Stalling):
            if behavior.hold < connection_timeout:
                t += behavior.hold
                events.append(_in(t, {"FIN", "ACK"}, pp.ip))
                output = output | pp.vrps
            else:
                t += connection_timeout
                events.append(_out(t, {"RST"}, pp.ip))
            continue
        t += latency
        events.append(_in(t, {"FIN", "ACK"}, pp.ip))
        if isinstance(behavior, Jitter):
            output = output | _subset(pp.vrps, 1.0 - behavior.drop, rng)
        else:
            output = output | pp.vrps

    if t - start > global_timeout:
        cutoff = start + global_timeout
        events = [e for e in events if e.time <= cutoff]
        t, exit_code, output = cutoff, 1, None
    return SimRun(tal, start, events, t, exit_code, output, contacted)


# --- scenario files -------------------------------------------------------

def _behavior_to_json(b: PpBehavior) -> dict:
    if isinstance(b, Benign):
        return {"kind": "benign", **({"latency": list(b.latency)} if b.latency else {})}
    if isinstance(b, Flaky):
        return {"kind": "flaky", "availability": b.availability}
    if isinstance(b, Jitter):
        return {"kind": "jitter", "drop": b.drop}
    if isinstance(b, Stalling):
        return {"kind": "stalling", "hold": b.hold}
    return {"kind": "crashing"}


def _behavior_from_json(obj: Mapping) -> PpBehavior:
    kind = obj.get("kind")
    if kind == "benign":
        lat = obj.get("latency")
        return Benign(tuple(lat) if lat else None)
    if kind == "flaky":
        return Flaky(float(obj["availability"]))
    if kind == "jitter":
        return Jitter(float(obj["drop"]))
    if kind == "stalling":
        return Stalling(float(obj["hold"]))
    if kind == "crashing":
        return Crashing()
    raise ValueError(f"unknown behavior kind {kind!r}")


def scenario_to_json(scenario: ScenarioConfig) -> dict:
    tals = {}
    for tal, pps in scenario.tals.items():
        tals[tal] = [
            {
                "domain": pp.domain,
                "ip": pp.ip,
                "behavior": _behavior_to_json(pp.behavior),
                "latency": list(pp.latency),
                "vrps": json.loads(serialize_vrp_file(pp.vrps)),
            }
            for pp in pps
        ]
    doc = {
        "name": scenario.name,
        "seed": scenario.seed,
        "tals": tals,
        "schedule": [
            {
                "at": sw.at,
                "domain": sw.domain,
                "behavior": _behavior_to_json(sw.behavior),
                **({"nodes": sorted(sw.nodes)} if sw.nodes is not None else {}),
            }
            for sw in scenario.schedule
        ],
    }
    if scenario.refresh_interval is not None:
        doc["refresh_interval"] = scenario.refresh_interval
    return doc


def scenario_from_json(doc: Mapping) -> ScenarioConfig:
    try:
        tals = {}
        for tal, pps in doc["tals"].items():
            tals[tal] = tuple(
                PublicationPoint(
                    domain=normalize_domain(pp["domain"]),
                    ip=pp["ip"],
                    behavior=_behavior_from_json(pp.get("behavior", {"kind": "benign"})),
                    vrps=parse_vrp_file(json.dumps(pp.get("vrps", {}))),
                    latency=tuple(pp.get("latency", DEFAULT_LATENCY)),
                )
                for pp in pps
            )
        schedule = tuple(
            BehaviorSwitch(
                at=float(sw["at"]),
                domain=normalize_domain(sw["domain"]),
                behavior=_behavior_from_json(sw["behavior"]),
                nodes=frozenset(sw["nodes"]) if "nodes" in sw else None,
            )
            for sw in doc.get("schedule", ())
        )
        return ScenarioConfig(
            name=doc.get("name", "custom"),
            tals=tals,
            seed=int(doc.get("seed", 0)),
            schedule=schedule,
            refresh_interval=doc.get("refresh_interval"),
        )
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed scenario document: {exc!r}") from None


def load_scenario(path) -> ScenarioConfig:
    with open(path, encoding="utf-8") as fh:
        return scenario_from_json(json.load(fh))


# --- presets --------------------------------------------------------------

CRASH_TARGET = "rpki.ripe.net"
BLACKOUT_TARGET = "rpki-repo.apnic-2.net"


def build_tree(pps_per_tal: int = 3, roas_per_pp: int = 6, latency=(8.0, 25.0)) -> dict:
    """Deterministic synthetic publication point tree, one root point per TAL."""
    tals = {}
    for i, tal in enumerate(TALS):
        pps = []
        for j in range(pps_per_tal):
            if j == 0:
                domain = f"rpki.{tal.lower()}.net"
            else:
                domain = f"rpki-repo.{tal.lower()}-{j}.net"
            asn = 64496 + i * 100 + j
            roas = set()
            for k in range(roas_per_pp):
                if k % 3 == 2:
                    prefix = f"2001:db8:{i:x}{j:x}{k:02x}::/48"
                    roas.add(canonicalize_roa(asn, prefix, 48, tal))
                else:
                    prefix = f"10.{i * 16 + j}.{k}.0/24"
                    roas.add(canonicalize_roa(asn, prefix, 24, tal))
            aspas = {canonicalize_aspa(asn, [asn + 1000, asn + 2000], tal)}
            pps.append(PublicationPoint(
                domain=domain,
                ip=f"198.51.{i}.{j + 10}",
                vrps=VrpSet.from_vrps(roas | aspas),
                latency=latency,
            ))
        tals[tal] = tuple(pps)
    return tals


def scenario_presets() -> dict[str, ScenarioConfig]:
    tree = build_tree()
    return {
        "benign-A": ScenarioConfig("benign-A", tree, refresh_interval=10.0),
        "benign-B": ScenarioConfig("benign-B", tree, refresh_interval=600.0),
        "dos-ripe": ScenarioConfig(
            "dos-ripe", tree, refresh_interval=10.0,
            schedule=(BehaviorSwitch(900.0, CRASH_TARGET, Crashing()),),
        ),
        "blackout": ScenarioConfig(
            "blackout", tree, refresh_interval=10.0,
            schedule=(
                BehaviorSwitch(900.0, BLACKOUT_TARGET, Jitter(0.9), frozenset({0})),
                BehaviorSwitch(1500.0, BLACKOUT_TARGET, Benign(), frozenset({0})),
            ),
        ),
    }


def get_scenario(name_or_path: str) -> ScenarioConfig:
    presets = scenario_presets()
    if name_or_path in presets:
        return presets[name_or_path]
    if name_or_path.endswith(".json"):
        return load_scenario(name_or_path)
    raise KeyError(f"unknown scenario preset {name_or_path!r} (known: {', '.join(presets)})")
