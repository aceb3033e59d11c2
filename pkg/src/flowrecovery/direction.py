"""Flow direction inference and address-based orientation."""

from __future__ import annotations

import enum
import ipaddress
import os
from dataclasses import dataclass
from typing import Iterable, Sequence

from .pcap import PacketRecord, TcpFlags

FTP_DATA_PORTS = frozenset({20, 989})


class PortClass(str, enum.Enum):
    WELL_KNOWN = "well-known"
    REGISTERED = "registered"
    DYNAMIC = "dynamic"


class Decision(str, enum.Enum):
    FORWARD = "forward"
    REVERSE = "reverse"
    UNKNOWN = "unknown"


class DirectionMethod(str, enum.Enum):
    SYN_OBSERVED = "syn-observed"
    SYNACK_OBSERVED = "synack-observed"
    PORT_INFERRED = "port-inferred"
    FTP_SPECIAL = "ftp-special"
    DEFAULT_FORWARD = "default-forward"


class Orientation(str, enum.Enum):
    INBOUND = "inbound"
    OUTBOUND = "outbound"
    INTERNAL = "internal"
    EXTERNAL = "external"
    UNKNOWN = "unknown"


class MalformedCidr(ValueError):
    pass


@dataclass(frozen=True)
class DirectionVerdict:
    decision: Decision
    method: DirectionMethod

    @property
    def reverse(self) -> bool:
        return self.decision is Decision.REVERSE


DEFAULT_VERDICT = DirectionVerdict(Decision.FORWARD, DirectionMethod.DEFAULT_FORWARD)


def classify_port(port: int) -> PortClass:
    if not 0 <= port <= 65535:
        raise ValueError(f"port out of range: {port}")
    if port <= 1023:
        return PortClass.WELL_KNOWN
    if port <= 49151:
        return PortClass.REGISTERED
    return PortClass.DYNAMIC


def infer_direction(
    first_pkt: PacketRecord,
    reversed_service_ports: Iterable[int] = FTP_DATA_PORTS,
) -> DirectionVerdict:
    """Decide who initiated a flow from its first observed packet.

    Handshake flags win over port heuristics. Without them, the lower of the
    non-dynamic ports is taken as the service port and placed on the
    responder side, except for ports in ``reversed_service_ports`` (FTP
    active data by default) whose holder opens the connection.
    """
    special = frozenset(reversed_service_ports)
    flags = first_pkt.tcp_flags
    sport, dport = first_pkt.src_port, first_pkt.dst_port

    if first_pkt.is_tcp and flags & TcpFlags.SYN:
        if not flags & TcpFlags.ACK:
            if sport in special:
                return DirectionVerdict(Decision.FORWARD, DirectionMethod.FTP_SPECIAL)
            return DirectionVerdict(Decision.FORWARD, DirectionMethod.SYN_OBSERVED)
        return DirectionVerdict(Decision.REVERSE, DirectionMethod.SYNACK_OBSERVED)

    if sport == dport:
        return DEFAULT_VERDICT
    src_dynamic = classify_port(sport) is PortClass.DYNAMIC
    dst_dynamic = classify_port(dport) is PortClass.DYNAMIC
    if src_dynamic and dst_dynamic:
        return DEFAULT_VERDICT

    service_is_src = sport < dport
    service = sport if service_is_src else dport
    if service in special:
        # the special-port side is the initiator
        decision = Decision.FORWARD if service_is_src else Decision.REVERSE
        return DirectionVerdict(decision, DirectionMethod.FTP_SPECIAL)
    decision = Decision.REVERSE if service_is_src else Decision.FORWARD
    return DirectionVerdict(decision, DirectionMethod.PORT_INFERRED)


Network = ipaddress.IPv4Network | ipaddress.IPv6Network


def parse_cidrs(cidrs: Iterable[str]) -> list[Network]:
    nets = []
    for text in cidrs:
        text = text.strip()
        if not text:
            continue
        try:
            nets.append(ipaddress.ip_network(text, strict=False))
        except ValueError as exc:
            raise MalformedCidr(f"bad address range {text!r}: {exc}") from None
    return nets


def load_cidr_file(path: str | os.PathLike) -> list[Network]:
    """Read one CIDR per line; ``#`` starts a comment."""
    with open(path, encoding="utf-8") as fh:
        lines = [line.split("#", 1)[0] for line in fh]
    return parse_cidrs(lines)


def _is_local(addr: str, nets: Sequence[Network]) -> bool:
    ip = ipaddress.ip_address(addr)
    return any(ip.version == net.version and ip in net for net in nets)


def orient(flow, local_cidrs: Sequence[Network | str]) -> Orientation:
    """Place a flow relative to the local address ranges.

    ``flow`` is anything exposing initiator/responder addresses as
    ``src_ip``/``dst_ip`` (a retired flow record or a feature row).
    """
    if not local_cidrs:
        return Orientation.UNKNOWN
    nets = [n if not isinstance(n, str) else parse_cidrs([n])[0] for n in local_cidrs]
    src_local = _is_local(flow.src_ip, nets)
    dst_local = _is_local(flow.dst_ip, nets)
    if src_local and dst_local:
        return Orientation.INTERNAL
    if src_local:
        return Orientation.OUTBOUND
    if dst_local:
        return Orientation.INBOUND
    return Orientation.EXTERNAL
