"""Deterministic synthetic packet traces with constructive ground truth.

A :class:`Scenario` lists traffic elements (sessions, SYN floods, zombie
connections) and stream modifiers (head/tail truncation, duplication).
:func:`synth` renders it to pcap bytes and reports, for every flow it
emitted, what a correct recovery should produce. Ground truth is tallied
from the generated packets themselves, not by running the flow cache.
"""

from __future__ import annotations

import dataclasses
import io
import json
import os
import random
from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

from .pcap import (
    LINKTYPE_ETHERNET,
    PROTO_TCP,
    PROTO_UDP,
    PacketRecord,
    PcapWriter,
    Resolution,
    TcpFlags,
)

US = 1_000_000
S, A, F, R, P = TcpFlags.SYN, TcpFlags.ACK, TcpFlags.FIN, TcpFlags.RST, TcpFlags.PSH


class InvalidScenario(ValueError):
    pass


# -- scenario elements ---------------------------------------------------

@dataclass
class Session:
    """One client/server exchange.

    TCP sessions follow the usual open, request/response, FIN close
    sequence. ``headless`` drops the three opening packets and
    ``first_sender`` then decides which side speaks first. ``close`` is
    ``"fin"``, ``"rst"`` or ``"none"``.
    """

    start: float = 0.0
    client: str | None = None
    server: str | None = None
    client_port: int | None = None
    service_port: int = 80
    proto: str = "tcp"
    requests: list[int] = field(default_factory=lambda: [200])
    responses: list[int] = field(default_factory=list)
    rtt: float = 0.01
    close: str = "fin"
    final_ack_delay: float | None = None
    headless: bool = False
    first_sender: str = "client"


@dataclass
class Sessions:
    """``count`` sessions with random endpoints and exponential start gaps."""

    count: int = 10
    start: float = 0.0
    mean_gap: float = 0.5
    service_ports: list[int] = field(default_factory=lambda: [80, 443, 22, 25, 53])
    proto: str = "tcp"
    requests: tuple[int, int] = (1, 3)
    payload_size: tuple[int, int] = (40, 1400)
    respond: bool = True
    rtt: float = 0.01
    think_time: float = 0.2
    close: str = "fin"
    headless: bool = False
    first_sender: str = "client"


@dataclass
class SynFlood:
    """``n`` SYN (and optionally SYN-ACK) pairs, on one tuple or spoofed."""

    n: int = 1000
    start: float = 0.0
    interval: float = 0.001
    client: str | None = None
    server: str | None = None
    client_port: int | None = None
    service_port: int = 80
    spoofed: bool = False
    answered: bool = True


@dataclass
class Zombie:
    """Long-lived connection kept open by periodic keepalive ACKs."""

    duration: float = 600.0
    keepalive_interval: float = 30.0
    start: float = 0.0
    client: str | None = None
    server: str | None = None
    client_port: int | None = None
    service_port: int = 80
    headless: bool = False


@dataclass
class TruncateHead:
    """Drop the first ``k`` packets (or ``fraction`` of all packets)."""

    k: int | None = None
    fraction: float | None = None


@dataclass
class TruncateTail:
    k: int | None = None
    fraction: float | None = None


@dataclass
class Duplicate:
    """Repeat each packet with probability ``fraction`` at the same time."""

    fraction: float = 0.01


@dataclass
class Interleave:
    """``"time"`` merges elements by timestamp; ``"sequential"`` plays them back to back."""

    policy: str = "time"
    gap: float = 1.0


ELEMENT_TYPES = {
    "session": Session,
    "sessions": Sessions,
    "syn_flood": SynFlood,
    "zombie": Zombie,
    "truncate_head": TruncateHead,
    "truncate_tail": TruncateTail,
    "duplicate": Duplicate,
    "interleave": Interleave,
}
_TRAFFIC = (Session, Sessions, SynFlood, Zombie)


@dataclass
class Scenario:
    seed: int = 0
    elements: list = field(default_factory=list)
    base_time: float = 1_600_000_000.0

    @classmethod
    def from_dict(cls, doc: dict) -> "Scenario":
        if not isinstance(doc, dict):
            raise InvalidScenario("scenario document must be a mapping")
        elements = []
        for i, item in enumerate(doc.get("elements", [])):
            item = dict(item)
            kind = item.pop("type", None)
            if kind not in ELEMENT_TYPES:
                raise InvalidScenario(f"element {i}: unknown type {kind!r}")
            try:
                elements.append(ELEMENT_TYPES[kind](**item))
            except TypeError as exc:
                raise InvalidScenario(f"element {i} ({kind}): {exc}") from None
        extra = set(doc) - {"seed", "elements", "base_time"}
        if extra:
            raise InvalidScenario(f"unknown scenario keys: {', '.join(sorted(extra))}")
        return cls(seed=int(doc.get("seed", 0)), elements=elements,
                   base_time=float(doc.get("base_time", 1_600_000_000.0)))

    @classmethod
    def from_file(cls, path: str | os.PathLike) -> "Scenario":
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
        if str(path).endswith((".yaml", ".yml")):
            import yaml

            doc = yaml.safe_load(text)
        else:
            doc = json.loads(text)
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        names = {v: k for k, v in ELEMENT_TYPES.items()}
        return {
            "seed": self.seed,
            "base_time": self.base_time,
            "elements": [{"type": names[type(e)], **dataclasses.asdict(e)} for e in self.elements],
        }


# -- ground truth ---------------------------------------------------------

@dataclass
class ExpectedFlow:
    """What a correct recovery yields for one generated flow.

    Counts are oriented client (initiator) to server.
    """

    tag: int
    proto: int
    client: str
    client_port: int
    server: str
    service_port: int
    kind: str
    packets: int = 0
    fwd_packets: int = 0
    bwd_packets: int = 0
    flags: dict[str, list[int]] = field(default_factory=dict)
    first_ts: int | None = None
    last_ts: int | None = None
    disposition: str = ""

    def flag(self, name: str, direction: str) -> int:
        return self.flags.get(name, [0, 0])[0 if direction == "fwd" else 1]


@dataclass
class GroundTruth:
    flows: list[ExpectedFlow]
    packets: int

    def to_dict(self) -> dict:
        return {"packets": self.packets, "flows": [dataclasses.asdict(f) for f in self.flows]}


@dataclass
class _Tagged:
    pkt: PacketRecord
    tag: int
    forward: bool
    order: int = 0


class _Builder:
    def __init__(self, scenario: Scenario):
        self.rng = random.Random(scenario.seed)
        self.base = int(round(scenario.base_time * US))
        self.flows: list[ExpectedFlow] = []
        self.used: set[tuple] = set()
        self._client_n = 0
        self._server_n = 0

    # endpoints
    def client_addr(self) -> str:
        self._client_n += 1
        n = self._client_n
        return f"10.{(n >> 16) & 255}.{(n >> 8) & 255}.{n & 255 or 1}"

    def server_addr(self) -> str:
        self._server_n += 1
        n = self._server_n % 4096
        return f"192.168.{(n >> 8) + 1}.{(n & 255) or 254}"

    def ephemeral(self, client: str, server: str, service: int, proto: int) -> int:
        while True:
            port = self.rng.randint(49152, 65535)
            key = (proto, client, port, server, service)
            if key not in self.used:
                self.used.add(key)
                return port

    def new_flow(self, proto: int, client: str, cport: int, server: str, sport: int, kind: str) -> int:
        self.used.add((proto, client, cport, server, sport))
        tag = len(self.flows)
        self.flows.append(ExpectedFlow(tag, proto, client, cport, server, sport, kind))
        return tag

    def payload(self, size: int) -> bytes:
        return self.rng.randbytes(size) if size else b""


def _proto_number(name: str) -> int:
    try:
        return {"tcp": PROTO_TCP, "udp": PROTO_UDP}[name.lower()]
    except KeyError:
        raise InvalidScenario(f"unsupported session protocol {name!r}") from None


def _pkt(ts: int, src: str, sport: int, dst: str, dport: int, proto: int, flags: TcpFlags, payload: bytes) -> PacketRecord:
    header = 40 if proto == PROTO_TCP else 28
    if ":" in src:
        header += 20
    return PacketRecord(
        ts=ts, src_ip=src, dst_ip=dst, src_port=sport, dst_port=dport, proto=proto,
        tcp_flags=flags if proto == PROTO_TCP else TcpFlags(0),
        ip_len=header + len(payload), payload_len=len(payload), payload=payload,
    )


def _render_session(b: _Builder, s: Session, t0: int) -> list[_Tagged]:
    proto = _proto_number(s.proto)
    if s.close not in ("fin", "rst", "none"):
        raise InvalidScenario(f"session close must be fin, rst or none, got {s.close!r}")
    if s.first_sender not in ("client", "server", "random"):
        raise InvalidScenario(f"first_sender must be client, server or random, got {s.first_sender!r}")
    client = s.client or b.client_addr()
    server = s.server or b.server_addr()
    cport = s.client_port if s.client_port is not None else b.ephemeral(client, server, s.service_port, proto)
    tag = b.new_flow(proto, client, cport, server, s.service_port, "session")
    d = max(int(round(s.rtt * US)), 1)
    out: list[_Tagged] = []
    t = t0

    def emit(from_client: bool, flags: TcpFlags, size: int = 0, delay: int = d) -> None:
        nonlocal t
        if out:
            t += delay
        if from_client:
            p = _pkt(t, client, cport, server, s.service_port, proto, flags, b.payload(size))
        else:
            p = _pkt(t, server, s.service_port, client, cport, proto, flags, b.payload(size))
        out.append(_Tagged(p, tag, from_client))

    first = s.first_sender
    if first == "random":
        first = b.rng.choice(("client", "server"))
    exchange: list[tuple[bool, int]] = []
    for i in range(max(len(s.requests), len(s.responses))):
        if i < len(s.requests):
            exchange.append((True, s.requests[i]))
        if i < len(s.responses):
            exchange.append((False, s.responses[i]))
    if first == "server":
        if not any(not c for c, _ in exchange):
            exchange.append((False, 100))
        first_server = next(i for i, (c, _) in enumerate(exchange) if not c)
        exchange = exchange[first_server:] + exchange[:first_server]

    if proto == PROTO_UDP:
        for from_client, size in exchange:
            emit(from_client, TcpFlags(0), size)
        return out

    if not s.headless:
        emit(True, S)
        emit(False, S | A)
        emit(True, A)
    for from_client, size in exchange:
        emit(from_client, P | A, size)
        emit(not from_client, A)
    if s.close == "fin":
        emit(True, F | A)
        emit(False, F | A)
        delay = d if s.final_ack_delay is None else int(round(s.final_ack_delay * US))
        emit(True, A, delay=delay)
    elif s.close == "rst":
        emit(True, R | A)
    return out


def _render_sessions(b: _Builder, s: Sessions, t0: int) -> list[_Tagged]:
    out = []
    t = t0
    lo, hi = s.requests
    smin, smax = s.payload_size
    for i in range(s.count):
        if i:
            t += int(round(b.rng.expovariate(1.0 / s.mean_gap) * US)) if s.mean_gap > 0 else 0
        n_req = b.rng.randint(lo, hi)
        reqs = [b.rng.randint(smin, smax) for _ in range(n_req)]
        resps = [b.rng.randint(smin, smax) for _ in range(n_req)] if s.respond else []
        sess = Session(
            proto=s.proto,
            service_port=b.rng.choice(s.service_ports),
            requests=reqs,
            responses=resps,
            rtt=s.rtt * (0.5 + b.rng.random()),
            close=s.close,
            headless=s.headless,
            first_sender=s.first_sender,
        )
        out.extend(_render_session(b, sess, t))
    return out


def _render_flood(b: _Builder, f: SynFlood, t0: int) -> list[_Tagged]:
    out = []
    d = max(int(round(f.interval * US)), 1)
    server = f.server or b.server_addr()
    if not f.spoofed:
        client = f.client or b.client_addr()
        cport = f.client_port if f.client_port is not None else b.ephemeral(client, server, f.service_port, PROTO_TCP)
        tag = b.new_flow(PROTO_TCP, client, cport, server, f.service_port, "syn_flood")
    for i in range(f.n):
        t = t0 + i * d
        if f.spoofed:
            client = f"{b.rng.randint(11, 223)}.{b.rng.randint(0, 255)}.{b.rng.randint(0, 255)}.{b.rng.randint(1, 254)}"
            cport = b.ephemeral(client, server, f.service_port, PROTO_TCP)
            tag = b.new_flow(PROTO_TCP, client, cport, server, f.service_port, "syn_flood")
        out.append(_Tagged(_pkt(t, client, cport, server, f.service_port, PROTO_TCP, S, b""), tag, True))
        if f.answered:
            out.append(_Tagged(_pkt(t + d // 2, server, f.service_port, client, cport, PROTO_TCP, S | A, b""), tag, False))
    return out


def _render_zombie(b: _Builder, z: Zombie, t0: int) -> list[_Tagged]:
    if z.keepalive_interval <= 0 or z.duration <= 0:
        raise InvalidScenario("zombie duration and keepalive_interval must be positive")
    client = z.client or b.client_addr()
    server = z.server or b.server_addr()
    cport = z.client_port if z.client_port is not None else b.ephemeral(client, server, z.service_port, PROTO_TCP)
    tag = b.new_flow(PROTO_TCP, client, cport, server, z.service_port, "zombie")
    out = []
    d = 10_000
    t = t0

    def emit(from_client: bool, flags: TcpFlags, size: int = 0) -> None:
        nonlocal t
        if from_client:
            p = _pkt(t, client, cport, server, z.service_port, PROTO_TCP, flags, b.payload(size))
        else:
            p = _pkt(t, server, z.service_port, client, cport, PROTO_TCP, flags, b.payload(size))
        out.append(_Tagged(p, tag, from_client))
        t += d

    if not z.headless:
        emit(True, S)
        emit(False, S | A)
        emit(True, A)
    emit(True, P | A, 20)
    emit(False, A)
    step = int(round(z.keepalive_interval * US))
    end = t0 + int(round(z.duration * US))
    t = t0 + step
    while t <= end:
        start = t
        emit(True, A)
        emit(False, A)
        t = start + step
    return out


def _apply_modifier(b: _Builder, mod, packets: list[_Tagged]) -> list[_Tagged]:
    if isinstance(mod, (TruncateHead, TruncateTail)):
        if (mod.k is None) == (mod.fraction is None):
            raise InvalidScenario("truncation needs exactly one of k or fraction")
        k = mod.k if mod.k is not None else int(round(mod.fraction * len(packets)))
        if k < 0:
            raise InvalidScenario("truncation count must be non-negative")
        if isinstance(mod, TruncateHead):
            return packets[k:]
        return packets[:len(packets) - k] if k else packets
    if isinstance(mod, Duplicate):
        if not 0 <= mod.fraction <= 1:
            raise InvalidScenario("duplicate fraction must be in [0, 1]")
        out = []
        for tp in packets:
            out.append(tp)
            if b.rng.random() < mod.fraction:
                out.append(_Tagged(tp.pkt, tp.tag, tp.forward, tp.order))
        return out
    raise InvalidScenario(f"not a modifier: {mod!r}")


def synth_packets(scenario: Scenario) -> tuple[list[PacketRecord], GroundTruth]:
    """Render a scenario to an ordered packet list plus its ground truth."""
    b = _Builder(scenario)
    policy = "time"
    gap = US
    for el in scenario.elements:
        if isinstance(el, Interleave):
            if el.policy not in ("time", "sequential"):
                raise InvalidScenario(f"unknown interleave policy {el.policy!r}")
            policy, gap = el.policy, int(round(el.gap * US))

    packets: list[_Tagged] = []
    cursor = b.base
    order = 0
    for el in scenario.elements:
        if not isinstance(el, _TRAFFIC):
            continue
        if policy == "sequential":
            t0 = cursor
        else:
            t0 = b.base + int(round(el.start * US))
        if isinstance(el, Session):
            chunk = _render_session(b, el, t0)
        elif isinstance(el, Sessions):
            chunk = _render_sessions(b, el, t0)
        elif isinstance(el, SynFlood):
            chunk = _render_flood(b, el, t0)
        else:
            chunk = _render_zombie(b, el, t0)
        for tp in chunk:
            tp.order = order
            order += 1
        packets.extend(chunk)
        if chunk:
            cursor = max(tp.pkt.ts for tp in chunk) + gap
    packets.sort(key=lambda tp: (tp.pkt.ts, tp.order))

    for el in scenario.elements:
        if isinstance(el, (TruncateHead, TruncateTail, Duplicate)):
            packets = _apply_modifier(b, el, packets)

    truth = _tally(b.flows, packets)
    return [tp.pkt for tp in packets], truth


_FLAG_NAMES = ("syn", "ack", "fin", "rst", "psh", "urg")


def _tally(flows: list[ExpectedFlow], packets: Sequence[_Tagged]) -> GroundTruth:
    for f in flows:
        f.flags = {name: [0, 0] for name in _FLAG_NAMES}
    seen_syn = {f.tag: False for f in flows}
    seen_end = {f.tag: False for f in flows}
    for tp in packets:
        f = flows[tp.tag]
        f.packets += 1
        if tp.forward:
            f.fwd_packets += 1
        else:
            f.bwd_packets += 1
        f.first_ts = tp.pkt.ts if f.first_ts is None else min(f.first_ts, tp.pkt.ts)
        f.last_ts = tp.pkt.ts if f.last_ts is None else max(f.last_ts, tp.pkt.ts)
        fl = tp.pkt.tcp_flags
        for name in _FLAG_NAMES:
            if fl & TcpFlags[name.upper()]:
                f.flags[name][0 if tp.forward else 1] += 1
        if fl & S:
            seen_syn[tp.tag] = True
        if fl & (F | R):
            seen_end[tp.tag] = True
    kept = []
    for f in flows:
        if not f.packets:
            continue
        if f.proto == PROTO_TCP:
            opened, closed = seen_syn[f.tag], seen_end[f.tag]
        else:
            opened, closed = True, False
        f.disposition = {
            (True, True): "complete",
            (True, False): "unterminated",
            (False, True): "uninitialised",
            (False, False): "partial-both",
        }[(opened, closed)]
        kept.append(f)
    return GroundTruth(kept, len(packets))


def write_pcap(
    packets: Iterable[PacketRecord],
    path: str | os.PathLike | None = None,
    resolution: Resolution | str = Resolution.MICRO,
    link_type: int = LINKTYPE_ETHERNET,
    snaplen: int = 65535,
) -> int | bytes:
    """Encode packets as a classic pcap file.

    Returns the number of bytes written, or the file contents when ``path``
    is ``None``.
    """
    buf = io.BytesIO()
    writer = PcapWriter(buf, resolution=resolution, link_type=link_type, snaplen=snaplen)
    writer.write_all(packets)
    data = buf.getvalue()
    if path is None:
        return data
    with open(path, "wb") as fh:
        fh.write(data)
    return len(data)


def synth(scenario: Scenario, **pcap_options: Any) -> tuple[bytes, GroundTruth]:
    """Render a scenario straight to pcap bytes."""
    packets, truth = synth_packets(scenario)
    return write_pcap(packets, None, **pcap_options), truth


# -- canned scenarios used by tests and the CLI examples -------------------

def clean_corpus(n: int = 100, seed: int = 1, mean_gap: float = 0.05) -> Scenario:
    return Scenario(seed=seed, elements=[Sessions(count=n, mean_gap=mean_gap)])


def syn_flood(n: int = 1000, seed: int = 1) -> Scenario:
    return Scenario(seed=seed, elements=[SynFlood(n=n)])


def headless_corpus(n: int = 1000, seed: int = 1) -> Scenario:
    """Sessions with the opening removed and a random side speaking first."""
    return Scenario(seed=seed, elements=[
        Sessions(count=n, mean_gap=0.02, service_ports=[21, 22, 25, 53, 80, 110, 143, 443, 993],
                 headless=True, first_sender="random"),
    ])
