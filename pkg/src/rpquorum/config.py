"""Node configuration: an INI-style file with ``[consensus]``, ``[node]`` and
``[tls]`` sections. All durations are in seconds.

Example::

    [node]
    profile = experiment-a
    address = 10.0.0.5:8443
    https_port = 8443
    rtr_port = 8323
    bootstrap = /etc/rpquorum/peers.txt

    [consensus]
    c = 0.5
    staleness_tolerance = 3600

    [tls]
    cert = /etc/rpquorum/node.pem
    key = /etc/rpquorum/node.key
    root = /etc/rpquorum/root.pem
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .model import ConsensusConfig, normalize_address

PROFILES = {
    "experiment-a": {"refresh_interval": 10.0},
    "experiment-b": {"refresh_interval": 600.0},
}

ENV_OVERRIDES = {
    "RPQUORUM_CERT": ("tls", "cert"),
    "RPQUORUM_KEY": ("tls", "key"),
    "RPQUORUM_ROOT": ("tls", "root"),
    "RPQUORUM_HTTPS_PORT": ("node", "https_port"),
    "RPQUORUM_RTR_PORT": ("node", "rtr_port"),
    "RPQUORUM_BOOTSTRAP": ("node", "bootstrap"),
    "RPQUORUM_DATA_DIR": ("node", "data_dir"),
}


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass(frozen=True)
class NodeConfig:
    consensus: ConsensusConfig = field(default_factory=ConsensusConfig)
    address: str = "127.0.0.1:8443"
    listen_host: str = "0.0.0.0"
    https_port: int = 8443
    rtr_host: str = "0.0.0.0"
    rtr_port: int = 8323
    rtr_tls: bool = False
    mode: str = "sim"
    scenario: str = "benign-A"
    node_index: int = 0
    seed: int = 0
    refresh_interval: float = 600.0
    status_poll: float = 1.0
    poll_timeout: float = 5.0
    bootstrap: str | None = None
    data_dir: str | None = None
    cert: str | None = None
    key: str | None = None
    root: str | None = None
    rp_command: str | None = None
    tal_dir: str | None = None
    capture_interface: str | None = None

    def __post_init__(self):
        if self.https_port == self.rtr_port:
            raise ConfigError("node.rtr_port", "must differ from node.https_port")
        if not self.refresh_interval > 0:
            raise ConfigError("node.refresh_interval", "must be > 0")
        if self.mode not in ("sim", "live"):
            raise ConfigError("node.mode", f"must be 'sim' or 'live', got {self.mode!r}")
        if not 0 < self.https_port < 65536:
            raise ConfigError("node.https_port", "out of range")
        if not 0 < self.rtr_port < 65536:
            raise ConfigError("node.rtr_port", "out of range")


_NODE_TYPES = {f.name: f.type for f in fields(NodeConfig)}
_CONSENSUS_FIELDS = {f.name for f in fields(ConsensusConfig)}


def _coerce(path: str, raw: str, kind: str):
    kind = kind.replace(" | None", "")
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
    except ValueError:
        raise ConfigError(path, f"expected {kind}, got {raw!r}") from None
    return raw.strip()


def load_config(path=None, *, env=None, overrides: dict | None = None) -> NodeConfig:
    """Load and validate a node configuration; a missing ``path`` means all defaults."""
    env = os.environ if env is None else env
    parser = configparser.ConfigParser(interpolation=None)
    if path is not None:
        text = Path(path).read_text(encoding="utf-8")
        try:
            parser.read_string(text, source=str(path))
        except configparser.Error as exc:
            raise ConfigError(str(path), str(exc)) from None
    for var, (section, key) in ENV_OVERRIDES.items():
        if var in env:
            if not parser.has_section(section):
                parser.add_section(section)
            parser.set(section, key, env[var])

    for section in parser.sections():
        if section not in ("consensus", "node", "tls"):
            raise ConfigError(section, "unknown section")

    node_kwargs = {}
    if parser.has_section("node"):
        profile = parser.get("node", "profile", fallback=None)
        if profile is not None:
            if profile not in PROFILES:
                raise ConfigError("node.profile", f"unknown profile {profile!r}")
            node_kwargs.update(PROFILES[profile])
        for key, raw in parser.items("node"):
            if key == "profile":
                continue
            if key not in _NODE_TYPES or key in ("consensus", "cert", "key", "root"):
                raise ConfigError(f"node.{key}", "unknown key")
            node_kwargs[key] = _coerce(f"node.{key}", raw, _NODE_TYPES[key])
    if parser.has_section("tls"):
        for key, raw in parser.items("tls"):
            if key not in ("cert", "key", "root"):
                raise ConfigError(f"tls.{key}", "unknown key")
            node_kwargs[key] = raw.strip()

    cons_kwargs = {}
    if parser.has_section("consensus"):
        for key, raw in parser.items("consensus"):
            if key not in _CONSENSUS_FIELDS:
                raise ConfigError(f"consensus.{key}", "unknown key")
            cons_kwargs[key] = _coerce(f"consensus.{key}", raw, "float")
    try:
        consensus = ConsensusConfig(**cons_kwargs)
    except ValueError as exc:
        name = str(exc).split()[0]
        raise ConfigError(f"consensus.{name}", str(exc)) from None

    if "address" in node_kwargs:
        try:
            node_kwargs["address"] = normalize_address(node_kwargs["address"])
        except ValueError as exc:
            raise ConfigError("node.address", str(exc)) from None
    cfg = NodeConfig(consensus=consensus, **node_kwargs)
    if overrides:
        cfg = replace(cfg, **overrides)
    return cfg
