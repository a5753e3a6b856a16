"""RPKI-to-Router (version 1) cache server for the consensus VRPs.

Only prefix-origin payloads are served. The cache keeps the last ``window``
serials so routers can fetch incremental diffs; anything older gets a
Cache Reset.
"""

from __future__ import annotations

import asyncio
import ipaddress
import json
import logging
import random
import ssl
import struct
import threading
from dataclasses import dataclass, field, replace
from enum import IntEnum
from functools import lru_cache
from typing import Iterable, Mapping

from .model import VrpSet

log = logging.getLogger(__name__)

VERSION = 1
HEADER = struct.Struct("!BBHI")
MAX_PDU = 64 * 1024
DEFAULT_PORT = 8323


class PduType(IntEnum):
    SERIAL_NOTIFY = 0
    SERIAL_QUERY = 1
    RESET_QUERY = 2
    CACHE_RESPONSE = 3
    IPV4_PREFIX = 4
    IPV6_PREFIX = 6
    END_OF_DATA = 7
    CACHE_RESET = 8
    ERROR_REPORT = 10


class ErrorCode(IntEnum):
    CORRUPT_DATA = 0
    INTERNAL_ERROR = 1
    NO_DATA_AVAILABLE = 2
    INVALID_REQUEST = 3
    UNSUPPORTED_VERSION = 4
    UNSUPPORTED_PDU_TYPE = 5


class RtrProtocolError(Exception):
    def __init__(self, code: ErrorCode, message: str, pdu: bytes = b""):
        super().__init__(message)
        self.code = code
        self.pdu = pdu


@dataclass(frozen=True)
class Pdu:
    type: PduType
    session_id: int = 0
    serial: int = 0
    flags: int = 0
    prefix: ipaddress.IPv4Network | ipaddress.IPv6Network | None = None
    max_len: int = 0
    asn: int = 0
    refresh: int = 3600
    retry: int = 600
    expire: int = 7200
    error_code: int = 0
    encapsulated: bytes = b""
    text: str = ""
    version: int = VERSION


def encode_pdu(p: Pdu) -> bytes:
    t = p.type
    if t in (PduType.SERIAL_NOTIFY, PduType.SERIAL_QUERY):
        return HEADER.pack(p.version, t, p.session_id, 12) + struct.pack("!I", p.serial)
    if t in (PduType.RESET_QUERY, PduType.CACHE_RESET):
        return HEADER.pack(p.version, t, 0, 8)
    if t == PduType.CACHE_RESPONSE:
        return HEADER.pack(p.version, t, p.session_id, 8)
    if t in (PduType.IPV4_PREFIX, PduType.IPV6_PREFIX):
        net = p.prefix
        width = 32 if t == PduType.IPV4_PREFIX else 128
        if net is None or net.max_prefixlen != width:
            raise ValueError(f"{t.name} needs a matching prefix")
        if not net.prefixlen <= p.max_len <= width:
            raise ValueError(f"invalid max length {p.max_len} for {net}")
        length = 20 if width == 32 else 32
        return (HEADER.pack(p.version, t, 0, length)
                + struct.pack("!BBBB", p.flags, net.prefixlen, p.max_len, 0)
                + net.network_address.packed + struct.pack("!I", p.asn))
    if t == PduType.END_OF_DATA:
        return HEADER.pack(p.version, t, p.session_id, 24) + struct.pack(
            "!IIII", p.serial, p.refresh, p.retry, p.expire)
    if t == PduType.ERROR_REPORT:
        text = p.text.encode("utf-8")
        length = 8 + 4 + len(p.encapsulated) + 4 + len(text)
        return (HEADER.pack(p.version, t, p.error_code, length)
                + struct.pack("!I", len(p.encapsulated)) + p.encapsulated
                + struct.pack("!I", len(text)) + text)
    raise ValueError(f"cannot encode PDU type {t}")


_FIXED_LENGTHS = {
    PduType.SERIAL_NOTIFY: 12, PduType.SERIAL_QUERY: 12, PduType.RESET_QUERY: 8,
    PduType.CACHE_RESPONSE: 8, PduType.IPV4_PREFIX: 20, PduType.IPV6_PREFIX: 32,
    PduType.END_OF_DATA: 24, PduType.CACHE_RESET: 8,
}


def decode_pdu(data: bytes) -> Pdu:
    """Decode exactly one PDU; ``data`` must hold the whole frame and nothing more."""
    if len(data) < HEADER.size:
        raise RtrProtocolError(ErrorCode.CORRUPT_DATA, "truncated header", bytes(data))
    version, raw_type, field16, length = HEADER.unpack_from(data)
    if version != VERSION:
        raise RtrProtocolError(ErrorCode.UNSUPPORTED_VERSION, f"version {version}", bytes(data))
    try:
        t = PduType(raw_type)
    except ValueError:
        raise RtrProtocolError(ErrorCode.UNSUPPORTED_PDU_TYPE, f"type {raw_type}", bytes(data)) from None
    if length != len(data):
        raise RtrProtocolError(ErrorCode.CORRUPT_DATA,
                               f"length field {length} != frame size {len(data)}", bytes(data))
    fixed = _FIXED_LENGTHS.get(t)
    if fixed is not None and length != fixed:
        raise RtrProtocolError(ErrorCode.CORRUPT_DATA, f"{t.name} must be {fixed} bytes", bytes(data))
    body = data[8:]
    if t in (PduType.SERIAL_NOTIFY, PduType.SERIAL_QUERY):
        return Pdu(t, session_id=field16, serial=struct.unpack("!I", body)[0])
    if t in (PduType.RESET_QUERY, PduType.CACHE_RESET):
        return Pdu(t)
    if t == PduType.CACHE_RESPONSE:
        return Pdu(t, session_id=field16)
    if t in (PduType.IPV4_PREFIX, PduType.IPV6_PREFIX):
        flags, plen, mlen, _ = struct.unpack_from("!BBBB", body)
        width = 4 if t == PduType.IPV4_PREFIX else 16
        addr = ipaddress.ip_address(bytes(body[4:4 + width]))
        (asn,) = struct.unpack_from("!I", body, 4 + width)
        try:
            net = ipaddress.ip_network(f"{addr}/{plen}", strict=True)
        except ValueError as exc:
            raise RtrProtocolError(ErrorCode.CORRUPT_DATA, str(exc), bytes(data)) from None
        if not plen <= mlen <= width * 8:
            raise RtrProtocolError(ErrorCode.CORRUPT_DATA, "bad max length", bytes(data))
        return Pdu(t, flags=flags, prefix=net, max_len=mlen, asn=asn)
    if t == PduType.END_OF_DATA:
        serial, refresh, retry, expire = struct.unpack("!IIII", body)
        return Pdu(t, session_id=field16, serial=serial, refresh=refresh, retry=retry, expire=expire)
    # error report
    try:
        (enc_len,) = struct.unpack_from("!I", body)
        enc = bytes(body[4:4 + enc_len])
        (text_len,) = struct.unpack_from("!I", body, 4 + enc_len)
        text_raw = bytes(body[8 + enc_len:8 + enc_len + text_len])
        if len(enc) != enc_len or len(text_raw) != text_len or 8 + enc_len + text_len != len(body):
            raise struct.error("inconsistent lengths")
        text = text_raw.decode("utf-8")
    except (struct.error, UnicodeDecodeError) as exc:
        raise RtrProtocolError(ErrorCode.CORRUPT_DATA, f"bad error report: {exc}", bytes(data)) from None
    return Pdu(t, error_code=field16, encapsulated=enc, text=text)


def split_frames(buf: bytes) -> tuple[list[bytes], bytes]:
    """Cut complete frames off the front of ``buf``; returns (frames, rest)."""
    frames = []
    while len(buf) >= HEADER.size:
        _, _, _, length = HEADER.unpack_from(buf)
        if length < HEADER.size or length > MAX_PDU:
            raise RtrProtocolError(ErrorCode.CORRUPT_DATA, f"bad length {length}", bytes(buf[:8]))
        if len(buf) < length:
            break
        frames.append(bytes(buf[:length]))
        buf = buf[length:]
    return frames, buf


# --- cache state ----------------------------------------------------------

WireRoa = tuple  # (network, max_len, asn)


@lru_cache(maxsize=1 << 18)
def roa_to_wire(payload: str) -> WireRoa:
    obj = json.loads(payload)
    asn = obj["asn"]
    asn = int(asn[2:]) if isinstance(asn, str) else int(asn)
    return (ipaddress.ip_network(obj["prefix"]), int(obj["maxLength"]), asn)


def wire_set(vrps: VrpSet) -> frozenset:
    # distinct trust anchors can produce the same router-visible tuple
    return frozenset(roa_to_wire(p) for p in vrps.roas)


def _wire_key(w: WireRoa):
    net, mlen, asn = w
    return (net.version, net.network_address.packed, net.prefixlen, mlen, asn)


@dataclass(frozen=True)
class Timers:
    refresh: int = 3600
    retry: int = 600
    expire: int = 7200


@dataclass(frozen=True)
class CacheState:
    session_id: int
    serial: int = 0
    current: frozenset = frozenset()
    snapshots: tuple[tuple[int, frozenset], ...] = ()
    window: int = 10
    ready: bool = False

    def snapshot(self, serial: int) -> frozenset | None:
        for s, snap in self.snapshots:
            if s == serial:
                return snap
        return None


def new_cache(session_id: int | None = None, window: int = 10, rng: random.Random | None = None) -> CacheState:
    if session_id is None:
        session_id = (rng or random.SystemRandom()).randrange(1 << 16)
    return CacheState(session_id=session_id, window=window, snapshots=((0, frozenset()),))


def publish_update(cache: CacheState, master: VrpSet) -> CacheState:
    """Install a new master; bumps the serial only if the router-visible set changed."""
    new = wire_set(master)
    if new == cache.current:
        return cache if cache.ready else replace(cache, ready=True)
    serial = (cache.serial + 1) % (1 << 32)
    snaps = cache.snapshots + ((serial, new),)
    snaps = snaps[-(cache.window + 1):]
    return replace(cache, serial=serial, current=new, snapshots=snaps, ready=True)


def _prefix_pdu(w: WireRoa, announce: bool) -> Pdu:
    net, mlen, asn = w
    t = PduType.IPV4_PREFIX if net.version == 4 else PduType.IPV6_PREFIX
    return Pdu(t, flags=1 if announce else 0, prefix=net, max_len=mlen, asn=asn)


def diff(old: frozenset, new: frozenset) -> list[Pdu]:
    out = [_prefix_pdu(w, False) for w in sorted(old - new, key=_wire_key)]
    out += [_prefix_pdu(w, True) for w in sorted(new - old, key=_wire_key)]
    return out


def _end(cache: CacheState, timers: Timers) -> Pdu:
    return Pdu(PduType.END_OF_DATA, session_id=cache.session_id, serial=cache.serial,
               refresh=timers.refresh, retry=timers.retry, expire=timers.expire)


def error_pdu(code: ErrorCode, text: str, encapsulated: bytes = b"") -> Pdu:
    return Pdu(PduType.ERROR_REPORT, error_code=int(code), encapsulated=encapsulated, text=text)


def handle_client(cache: CacheState, pdu: Pdu, timers: Timers = Timers()) -> list[Pdu]:
    """Responses to one router query. An Error Report in the output means close."""
    if pdu.type == PduType.RESET_QUERY:
        if not cache.ready:
            return [error_pdu(ErrorCode.NO_DATA_AVAILABLE, "no data yet", encode_pdu(pdu))]
        body = [_prefix_pdu(w, True) for w in sorted(cache.current, key=_wire_key)]
        return [Pdu(PduType.CACHE_RESPONSE, session_id=cache.session_id), *body, _end(cache, timers)]
    if pdu.type == PduType.SERIAL_QUERY:
        if not cache.ready:
            return [error_pdu(ErrorCode.NO_DATA_AVAILABLE, "no data yet", encode_pdu(pdu))]
        if pdu.session_id != cache.session_id:
            return [Pdu(PduType.CACHE_RESET)]
        old = cache.snapshot(pdu.serial)
        if old is None:
            return [Pdu(PduType.CACHE_RESET)]
        return [Pdu(PduType.CACHE_RESPONSE, session_id=cache.session_id),
                *diff(old, cache.current), _end(cache, timers)]
    if pdu.type == PduType.ERROR_REPORT:
        return []
    return [error_pdu(ErrorCode.INVALID_REQUEST, f"unexpected {pdu.type.name} from router",
                      encode_pdu(pdu))]


def apply_response(state: set, pdus: Iterable[Pdu]) -> set:
    """Router-side application of announce/withdraw PDUs."""
    for p in pdus:
        if p.type in (PduType.IPV4_PREFIX, PduType.IPV6_PREFIX):
            w = (p.prefix, p.max_len, p.asn)
            if p.flags & 1:
                state.add(w)
            else:
                state.discard(w)
    return state


# --- network server -------------------------------------------------------

class RtrServer:
    """asyncio RTR server; optionally wrapped in TLS."""

    def __init__(self, cache: CacheState | None = None, *, host: str = "127.0.0.1",
                 port: int = DEFAULT_PORT, ssl_context: ssl.SSLContext | None = None,
                 timers: Timers = Timers()):
        self.cache = cache or new_cache()
        self.host, self.port = host, port
        self.ssl_context = ssl_context
        self.timers = timers
        self._writers: set[asyncio.StreamWriter] = set()
        self._server = None
        self._loop: asyncio.AbstractEventLoop | None = None
        self._thread: threading.Thread | None = None

    async def start(self):
        self._loop = asyncio.get_running_loop()
        self._server = await asyncio.start_server(self._serve, self.host, self.port, ssl=self.ssl_context)
        self.port = self._server.sockets[0].getsockname()[1]
        return self

    async def close(self):
        for w in list(self._writers):
            w.close()
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()

    async def _serve(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter):
        self._writers.add(writer)
        buf = b""
        try:
            while True:
                chunk = await reader.read(65536)
                if not chunk:
                    return
                buf += chunk
                try:
                    frames, buf = split_frames(buf)
                    for frame in frames:
                        pdu = decode_pdu(frame)
                        out = handle_client(self.cache, pdu, self.timers)
                        writer.write(b"".join(encode_pdu(p) for p in out))
                        await writer.drain()
                        if pdu.type == PduType.ERROR_REPORT or any(
                                p.type == PduType.ERROR_REPORT for p in out):
                            return
                except RtrProtocolError as exc:
                    log.info("RTR protocol error from router: %s", exc)
                    writer.write(encode_pdu(error_pdu(exc.code, str(exc), exc.pdu)))
                    await writer.drain()
                    return
        except (ConnectionError, asyncio.IncompleteReadError):
            return
        finally:
            self._writers.discard(writer)
            writer.close()

    async def _notify(self):
        frame = encode_pdu(Pdu(PduType.SERIAL_NOTIFY, session_id=self.cache.session_id,
                               serial=self.cache.serial))
        for w in list(self._writers):
            try:
                w.write(frame)
                await w.drain()
            except ConnectionError:
                self._writers.discard(w)

    def update(self, master: VrpSet) -> bool:
        """Install a new master from any thread; notifies routers if the serial moved."""
        new = publish_update(self.cache, master)
        changed = new.serial != self.cache.serial
        self.cache = new
        if changed and self._loop is not None and self._loop.is_running():
            asyncio.run_coroutine_threadsafe(self._notify(), self._loop)
        return changed

    def start_in_thread(self) -> RtrServer:
        ready = threading.Event()
        loop = asyncio.new_event_loop()

        def runner():
            asyncio.set_event_loop(loop)
            loop.run_until_complete(self.start())
            ready.set()
            loop.run_forever()

        self._thread = threading.Thread(target=runner, name="rtr-server", daemon=True)
        self._thread.start()
        ready.wait(10)
        return self

    def stop_thread(self):
        if self._loop is None:
            return
        fut = asyncio.run_coroutine_threadsafe(self.close(), self._loop)
        fut.result(10)
        self._loop.call_soon_threadsafe(self._loop.stop)
        if self._thread is not None:
            self._thread.join(10)


class RtrClient:
    """Minimal router-side client for tests and audits."""

    def __init__(self, host: str, port: int, ssl_context: ssl.SSLContext | None = None):
        self.host, self.port, self.ssl_context = host, port, ssl_context
        self.session_id: int | None = None
        self.serial: int | None = None
        self.roas: set = set()
        self.notifies: list[Pdu] = []
        self._reader = self._writer = None
        self._buf = b""

    async def connect(self):
        self._reader, self._writer = await asyncio.open_connection(
            self.host, self.port, ssl=self.ssl_context)
        return self

    async def close(self):
        if self._writer is not None:
            self._writer.close()

    async def read_pdu(self, timeout: float = 5.0) -> Pdu:
        while True:
            frames, rest = split_frames(self._buf)
            if frames:
                first = frames[0]
                self._buf = self._buf[len(first):]
                return decode_pdu(first)
            chunk = await asyncio.wait_for(self._reader.read(65536), timeout)
            if not chunk:
                raise ConnectionError("server closed the connection")
            self._buf += chunk

    async def _exchange(self, query: Pdu) -> list[Pdu]:
        self._writer.write(encode_pdu(query))
        await self._writer.drain()
        out = []
        while True:
            p = await self.read_pdu()
            if p.type == PduType.SERIAL_NOTIFY:
                self.notifies.append(p)
                continue
            out.append(p)
            if p.type in (PduType.END_OF_DATA, PduType.CACHE_RESET, PduType.ERROR_REPORT):
                return out

    async def reset(self) -> list[Pdu]:
        out = await self._exchange(Pdu(PduType.RESET_QUERY))
        if out[-1].type == PduType.END_OF_DATA:
            self.roas = apply_response(set(), out)
            self.session_id, self.serial = out[-1].session_id, out[-1].serial
        return out

    async def refresh(self) -> list[Pdu]:
        """Serial query; falls back to a full reset on Cache Reset."""
        if self.serial is None:
            return await self.reset()
        out = await self._exchange(Pdu(PduType.SERIAL_QUERY, session_id=self.session_id, serial=self.serial))
        if out[-1].type == PduType.CACHE_RESET:
            return out + await self.reset()
        if out[-1].type == PduType.END_OF_DATA:
            apply_response(self.roas, out)
            self.serial = out[-1].serial
        return out


async def fetch_roas(host: str, port: int, ssl_context=None) -> set:
    client = await RtrClient(host, port, ssl_context).connect()
    try:
        await client.reset()
        return client.roas
    finally:
        await client.close()
