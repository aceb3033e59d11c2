"""Streaming reader and encoder for classic libpcap trace files.

Only the classic format is handled (both byte orders, micro- and
nanosecond magics). Records are decoded one at a time so memory use does
not depend on trace size. Several files can be chained: the reader moves
on to the next path when the current one is exhausted.
"""

from __future__ import annotations

import enum
import os
import socket
import struct
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterable, Iterator, Sequence

MAGIC_MICRO = 0xA1B2C3D4
MAGIC_NANO = 0xA1B23C4D
PCAPNG_MAGIC = 0x0A0D0D0A

GLOBAL_HEADER_LEN = 24
RECORD_HEADER_LEN = 16

LINKTYPE_ETHERNET = 1
LINKTYPE_RAW = 101
LINKTYPE_LINUX_SLL = 113
SUPPORTED_LINKTYPES = frozenset({LINKTYPE_ETHERNET, LINKTYPE_RAW, LINKTYPE_LINUX_SLL})

ETH_IPV4 = 0x0800
ETH_IPV6 = 0x86DD
ETH_VLAN = (0x8100, 0x88A8, 0x9100)
MAX_VLAN_DEPTH = 2

PROTO_ICMP = 1
PROTO_TCP = 6
PROTO_UDP = 17

_IPV6_EXT_HEADERS = frozenset({0, 43, 60})
_IPV6_FRAGMENT = 44
_IPV6_AH = 51


class TcpFlags(enum.IntFlag):
    """TCP control bits at their wire positions."""

    FIN = 0x01
    SYN = 0x02
    RST = 0x04
    PSH = 0x08
    ACK = 0x10
    URG = 0x20


NO_FLAGS = TcpFlags(0)


class Resolution(str, enum.Enum):
    MICRO = "micro"
    NANO = "nano"


class ByteOrder(str, enum.Enum):
    NATIVE = "native"
    SWAPPED = "swapped"


class PcapError(Exception):
    """Base class for trace decoding failures."""


class EmptyPathList(PcapError, ValueError):
    pass


class UnrecognizedMagic(PcapError):
    pass


class MalformedRecordHeader(PcapError):
    pass


@dataclass(frozen=True, slots=True)
class PacketRecord:
    """One decoded IP packet.

    ``ts`` is microseconds since the epoch. ``payload`` holds the captured
    transport payload, which may be shorter than ``payload_len`` when the
    capture was cut by the snap length.
    """

    ts: int
    src_ip: str
    dst_ip: str
    src_port: int
    dst_port: int
    proto: int
    tcp_flags: TcpFlags
    ip_len: int
    payload_len: int
    payload: bytes = b""
    truncated: bool = False

    @property
    def is_tcp(self) -> bool:
        return self.proto == PROTO_TCP


@dataclass
class BoundaryGap:
    """Timestamp gap across one file boundary of a chained read."""

    file_index: int
    last_ts: int
    first_ts: int

    @property
    def gap_us(self) -> int:
        return self.first_ts - self.last_ts

    @property
    def gap_seconds(self) -> float:
        return self.gap_us / 1e6

    @property
    def flagged(self) -> bool:
        return self.gap_us < 0


@dataclass
class ReaderDiagnostics:
    malformed_records: int = 0
    unsupported_link: int = 0
    non_ip: int = 0
    fragments_skipped: int = 0
    undecodable: int = 0
    backwards_timestamps: int = 0
    nano_truncated: int = 0
    truncated_packets: int = 0
    events: list[str] = field(default_factory=list)


def _read_global_header(fh: BinaryIO, path: Path) -> tuple[str, Resolution, int, int]:
    raw = fh.read(GLOBAL_HEADER_LEN)
    if len(raw) < 4:
        raise UnrecognizedMagic(f"{path}: file too short for a pcap header")
    (magic_le,) = struct.unpack("<I", raw[:4])
    (magic_be,) = struct.unpack(">I", raw[:4])
    if magic_le in (MAGIC_MICRO, MAGIC_NANO):
        endian, magic = "<", magic_le
    elif magic_be in (MAGIC_MICRO, MAGIC_NANO):
        endian, magic = ">", magic_be
    elif magic_le == PCAPNG_MAGIC:
        raise UnrecognizedMagic(f"{path}: pcapng files are not supported, convert to classic pcap")
    else:
        raise UnrecognizedMagic(f"{path}: unrecognized magic 0x{magic_le:08x}")
    if len(raw) < GLOBAL_HEADER_LEN:
        raise UnrecognizedMagic(f"{path}: truncated global header")
    _, _, _, _, _, snaplen, linktype = struct.unpack(endian + "IHHiIII", raw)
    resolution = Resolution.NANO if magic == MAGIC_NANO else Resolution.MICRO
    return endian, resolution, snaplen, linktype


class TraceReader:
    """Iterate over the IP packets of one or more pcap files in order.

    Use :func:`open_trace` to construct. The reader is an iterator of
    :class:`PacketRecord`; :meth:`next_packet` returns ``None`` at the end
    of the last file.
    """

    def __init__(self, paths: Sequence[str | os.PathLike], strict: bool = False):
        if not paths:
            raise EmptyPathList("at least one trace file is required")
        self.source = [Path(p) for p in paths]
        for path in self.source:
            with open(path, "rb") as fh:
                _read_global_header(fh, path)
        self.current_index = -1
        self.timestamp_resolution = Resolution.MICRO
        self.byte_order = ByteOrder.NATIVE
        self.link_type = LINKTYPE_ETHERNET
        self.snaplen = 0
        self.packets_read = 0
        self.packets_skipped = 0
        self.diagnostics = ReaderDiagnostics()
        self.boundaries: list[BoundaryGap] = []
        self.files_done = 0
        self.strict = strict

        self._fh: BinaryIO | None = None
        self._size = 0
        self._endian = "<"
        self._last_ts: int | None = None
        self._max_ts: int | None = None
        self._last_ts_prev_file: int | None = None
        self._first_in_file = True
        self._open_next()

    # -- file switching -------------------------------------------------
    def _open_next(self) -> bool:
        if self._fh is not None:
            self._fh.close()
            self._fh = None
            self.files_done += 1
            if self._last_ts is not None:
                self._last_ts_prev_file = self._last_ts
        self.current_index += 1
        if self.current_index >= len(self.source):
            return False
        path = self.source[self.current_index]
        fh = open(path, "rb")
        self._endian, self.timestamp_resolution, self.snaplen, self.link_type = _read_global_header(fh, path)
        file_little = self._endian == "<"
        host_little = sys.byteorder == "little"
        self.byte_order = ByteOrder.NATIVE if file_little == host_little else ByteOrder.SWAPPED
        self._fh = fh
        self._size = os.fstat(fh.fileno()).st_size
        self._last_ts = None
        self._max_ts = None
        self._first_in_file = True
        if self.link_type not in SUPPORTED_LINKTYPES:
            self.diagnostics.events.append(f"{path}: unsupported link type {self.link_type}, records skipped")
        return True

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None
        self.current_index = len(self.source)

    def __enter__(self) -> "TraceReader":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def __iter__(self) -> Iterator[PacketRecord]:
        while True:
            pkt = self.next_packet()
            if pkt is None:
                return
            yield pkt

    # -- record decoding ------------------------------------------------
    def _read_record(self) -> tuple[int, bytes, int] | None:
        """Return (ts_us, frame, orig_len) or None at end of current file."""
        fh = self._fh
        assert fh is not None
        hdr = fh.read(RECORD_HEADER_LEN)
        if not hdr:
            return None
        path = self.source[self.current_index]
        if len(hdr) < RECORD_HEADER_LEN:
            self.diagnostics.malformed_records += 1
            self.diagnostics.events.append(f"{path}: partial record header at end of file")
            return None
        ts_sec, ts_sub, incl_len, orig_len = struct.unpack(self._endian + "IIII", hdr)
        remaining = self._size - fh.tell()
        if incl_len > remaining:
            msg = f"{path}: record declares {incl_len} captured bytes but only {remaining} remain"
            if self.strict:
                raise MalformedRecordHeader(msg)
            self.diagnostics.malformed_records += 1
            self.diagnostics.events.append(msg)
            return None
        frame = fh.read(incl_len)
        if self.timestamp_resolution is Resolution.NANO:
            if ts_sub % 1000:
                self.diagnostics.nano_truncated += 1
            ts = ts_sec * 1_000_000 + ts_sub // 1000
        else:
            ts = ts_sec * 1_000_000 + ts_sub
        return ts, frame, orig_len

    def next_packet(self) -> PacketRecord | None:
        while self._fh is not None:
            rec = self._read_record()
            if rec is None:
                if not self._open_next():
                    return None
                continue
            ts, frame, orig_len = rec
            if self.link_type not in SUPPORTED_LINKTYPES:
                self.diagnostics.unsupported_link += 1
                self.packets_skipped += 1
                continue
            pkt = decode_frame(frame, self.link_type, ts, len(frame) < orig_len, self.diagnostics)
            if pkt is None:
                self.packets_skipped += 1
                continue
            self._note_timestamp(ts)
            self.packets_read += 1
            if pkt.truncated:
                self.diagnostics.truncated_packets += 1
            return pkt
        return None

    def _note_timestamp(self, ts: int) -> None:
        if self._first_in_file:
            self._first_in_file = False
            if self._last_ts_prev_file is not None:
                self.boundaries.append(BoundaryGap(self.current_index, self._last_ts_prev_file, ts))
        elif self._max_ts is not None and ts < self._max_ts:
            self.diagnostics.backwards_timestamps += 1
        self._last_ts = ts
        self._max_ts = ts if self._max_ts is None else max(self._max_ts, ts)


def open_trace(paths: Sequence[str | os.PathLike] | str | os.PathLike, strict: bool = False) -> TraceReader:
    """Open one trace file or an ordered list of files for chained reading.

    With ``strict`` a record header whose capture length runs past the end
    of the file raises :class:`MalformedRecordHeader`; otherwise the rest of
    that file is abandoned and the event is kept in ``reader.diagnostics``.
    """
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    return TraceReader(list(paths), strict=strict)


def chain_continuity(reader: TraceReader) -> list[BoundaryGap]:
    """Gaps between the last packet of each file and the first of the next.

    Files without any decodable packet are bridged over. Negative gaps are
    reported as ``flagged``.
    """
    return list(reader.boundaries)


# -- frame decoding -----------------------------------------------------

def decode_frame(
    frame: bytes,
    link_type: int,
    ts: int,
    truncated: bool = False,
    diag: ReaderDiagnostics | None = None,
) -> PacketRecord | None:
    """Decode a captured link-layer frame; ``None`` when it is not usable IP."""
    diag = diag if diag is not None else ReaderDiagnostics()
    if link_type == LINKTYPE_ETHERNET:
        if len(frame) < 14:
            diag.undecodable += 1
            return None
        ethertype = struct.unpack_from("!H", frame, 12)[0]
        off = 14
        depth = 0
        while ethertype in ETH_VLAN and depth < MAX_VLAN_DEPTH:
            if len(frame) < off + 4:
                diag.undecodable += 1
                return None
            ethertype = struct.unpack_from("!H", frame, off + 2)[0]
            off += 4
            depth += 1
    elif link_type == LINKTYPE_LINUX_SLL:
        if len(frame) < 16:
            diag.undecodable += 1
            return None
        ethertype = struct.unpack_from("!H", frame, 14)[0]
        off = 16
    elif link_type == LINKTYPE_RAW:
        if not frame:
            diag.undecodable += 1
            return None
        version = frame[0] >> 4
        ethertype = ETH_IPV4 if version == 4 else ETH_IPV6 if version == 6 else 0
        off = 0
    else:
        diag.unsupported_link += 1
        return None

    if ethertype == ETH_IPV4:
        return _decode_ipv4(frame, off, ts, truncated, diag)
    if ethertype == ETH_IPV6:
        return _decode_ipv6(frame, off, ts, truncated, diag)
    diag.non_ip += 1
    return None


def _decode_ipv4(frame: bytes, off: int, ts: int, truncated: bool, diag: ReaderDiagnostics) -> PacketRecord | None:
    if len(frame) < off + 20 or frame[off] >> 4 != 4:
        diag.undecodable += 1
        return None
    ihl = (frame[off] & 0x0F) * 4
    total_len, frag = struct.unpack_from("!H2xH", frame, off + 2)
    proto = frame[off + 9]
    if ihl < 20 or total_len < ihl or len(frame) < off + ihl:
        diag.undecodable += 1
        return None
    if frag & 0x1FFF:
        diag.fragments_skipped += 1
        return None
    src = socket.inet_ntop(socket.AF_INET, frame[off + 12:off + 16])
    dst = socket.inet_ntop(socket.AF_INET, frame[off + 16:off + 20])
    return _decode_transport(frame, off + ihl, off + total_len, total_len, proto, src, dst, ts, truncated, diag)


def _decode_ipv6(frame: bytes, off: int, ts: int, truncated: bool, diag: ReaderDiagnostics) -> PacketRecord | None:
    if len(frame) < off + 40 or frame[off] >> 4 != 6:
        diag.undecodable += 1
        return None
    payload_len = struct.unpack_from("!H", frame, off + 4)[0]
    nxt = frame[off + 6]
    src = socket.inet_ntop(socket.AF_INET6, frame[off + 8:off + 24])
    dst = socket.inet_ntop(socket.AF_INET6, frame[off + 24:off + 40])
    ip_len = 40 + payload_len
    end = off + ip_len
    pos = off + 40
    while nxt in _IPV6_EXT_HEADERS or nxt in (_IPV6_FRAGMENT, _IPV6_AH):
        if len(frame) < pos + 8:
            diag.undecodable += 1
            return None
        hdr_next = frame[pos]
        if nxt == _IPV6_FRAGMENT:
            frag_off = struct.unpack_from("!H", frame, pos + 2)[0] >> 3
            if frag_off:
                diag.fragments_skipped += 1
                return None
            hlen = 8
        elif nxt == _IPV6_AH:
            hlen = (frame[pos + 1] + 2) * 4
        else:
            hlen = (frame[pos + 1] + 1) * 8
        nxt = hdr_next
        pos += hlen
    return _decode_transport(frame, pos, end, ip_len, nxt, src, dst, ts, truncated, diag)


def _decode_transport(
    frame: bytes,
    pos: int,
    end: int,
    ip_len: int,
    proto: int,
    src: str,
    dst: str,
    ts: int,
    truncated: bool,
    diag: ReaderDiagnostics,
) -> PacketRecord | None:
    if proto == PROTO_TCP:
        if len(frame) < pos + 20:
            diag.undecodable += 1
            return None
        sport, dport = struct.unpack_from("!HH", frame, pos)
        data_off = (frame[pos + 12] >> 4) * 4
        flags = TcpFlags(frame[pos + 13] & 0x3F)
        start = pos + max(data_off, 20)
    elif proto == PROTO_UDP:
        if len(frame) < pos + 8:
            diag.undecodable += 1
            return None
        sport, dport = struct.unpack_from("!HH", frame, pos)
        flags = NO_FLAGS
        start = pos + 8
    else:
        sport = dport = 0
        flags = NO_FLAGS
        start = pos
    payload_len = max(0, end - start)
    payload = frame[start:min(end, len(frame))] if start < end else b""
    return PacketRecord(
        ts=ts,
        src_ip=src,
        dst_ip=dst,
        src_port=sport,
        dst_port=dport,
        proto=proto,
        tcp_flags=flags,
        ip_len=ip_len,
        payload_len=payload_len,
        payload=payload,
        truncated=truncated,
    )


# -- encoding -----------------------------------------------------------

def _ipv4_checksum(header: bytes) -> int:
    total = sum(struct.unpack(f"!{len(header) // 2}H", header))
    while total >> 16:
        total = (total & 0xFFFF) + (total >> 16)
    return ~total & 0xFFFF


def encode_packet(pkt: PacketRecord, link_type: int = LINKTYPE_ETHERNET) -> bytes:
    """Build a link-layer frame carrying ``pkt``.

    ``pkt.payload`` must hold the full transport payload; ``ip_len`` and
    ``payload_len`` are recomputed from it, so they are not trusted.
    """
    payload = pkt.payload
    if pkt.proto == PROTO_TCP:
        transport = struct.pack(
            "!HHIIBBHHH", pkt.src_port, pkt.dst_port, 0, 0, 5 << 4, int(pkt.tcp_flags), 65535, 0, 0
        )
    elif pkt.proto == PROTO_UDP:
        transport = struct.pack("!HHHH", pkt.src_port, pkt.dst_port, 8 + len(payload), 0)
    else:
        transport = b""
    body = transport + payload
    v6 = ":" in pkt.src_ip
    if v6:
        ip = struct.pack("!IHBB", 6 << 28, len(body), pkt.proto, 64)
        ip += socket.inet_pton(socket.AF_INET6, pkt.src_ip) + socket.inet_pton(socket.AF_INET6, pkt.dst_ip)
        ethertype = ETH_IPV6
    else:
        hdr = struct.pack(
            "!BBHHHBBH4s4s", 0x45, 0, 20 + len(body), 0, 0x4000, 64, pkt.proto, 0,
            socket.inet_pton(socket.AF_INET, pkt.src_ip), socket.inet_pton(socket.AF_INET, pkt.dst_ip),
        )
        ip = hdr[:10] + struct.pack("!H", _ipv4_checksum(hdr)) + hdr[12:]
        ethertype = ETH_IPV4
    if link_type == LINKTYPE_RAW:
        return ip + body
    if link_type == LINKTYPE_LINUX_SLL:
        return struct.pack("!HHH8sH", 0, 1, 6, b"\x02\x00\x00\x00\x00\x01\x00\x00", ethertype) + ip + body
    if link_type == LINKTYPE_ETHERNET:
        return b"\x02\x00\x00\x00\x00\x02" + b"\x02\x00\x00\x00\x00\x01" + struct.pack("!H", ethertype) + ip + body
    raise ValueError(f"cannot encode link type {link_type}")


class PcapWriter:
    """Write classic pcap records to a binary stream."""

    def __init__(
        self,
        fh: BinaryIO,
        resolution: Resolution | str = Resolution.MICRO,
        link_type: int = LINKTYPE_ETHERNET,
        snaplen: int = 65535,
        endian: str = "<",
    ):
        self.fh = fh
        self.resolution = Resolution(resolution)
        self.link_type = link_type
        self.snaplen = snaplen
        self.endian = endian
        self.bytes_written = 0
        magic = MAGIC_NANO if self.resolution is Resolution.NANO else MAGIC_MICRO
        self._write(struct.pack(endian + "IHHiIII", magic, 2, 4, 0, 0, snaplen, link_type))

    def _write(self, data: bytes) -> None:
        self.fh.write(data)
        self.bytes_written += len(data)

    def write_frame(self, ts: int, frame: bytes) -> None:
        sec, usec = divmod(ts, 1_000_000)
        sub = usec * 1000 if self.resolution is Resolution.NANO else usec
        captured = frame[: self.snaplen]
        self._write(struct.pack(self.endian + "IIII", sec, sub, len(captured), len(frame)))
        self._write(captured)

    def write(self, pkt: PacketRecord) -> None:
        self.write_frame(pkt.ts, encode_packet(pkt, self.link_type))

    def write_all(self, packets: Iterable[PacketRecord]) -> int:
        for pkt in packets:
            self.write(pkt)
        return self.bytes_written
