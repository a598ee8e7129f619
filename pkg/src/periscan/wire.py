"""Compact probe/response frame codec spoken by every backend.

A frame is a 36-byte header followed by a protocol body:

    byte 0      version marker (0x06)
    byte 1      protocol (58=ICMPv6, 6=TCP, 253=app exchange)
    byte 2      hop limit
    byte 3      reserved
    bytes 4-19  source address (128-bit, network order)
    bytes 20-35 destination address

ICMPv6 body: type, code, checksum(=0), then per-type rest. Echo bodies
carry identifier/sequence plus a 4-byte payload whose first byte echoes
the hop limit the probe was sent with (so error quotes preserve it).
Error bodies (type 1/3) carry 4 unused bytes then a quote of the
offending frame, truncated like a real minimum-MTU quote.

TCP body: sport, dport, seq, ack, flags (SYN=0x02, ACK=0x10, RST=0x04).

App body: transport (6/17), port, connection id, length, raw bytes.
The app channel abstracts one connect+request+response exchange.

Classification works on these bytes alone, so a byte-identical datagram
classifies the same no matter which backend delivered it.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

from .prefixes import Address

VERSION = 0x06
PROTO_ICMP6 = 58
PROTO_TCP = 6
PROTO_APP = 253

ICMP_DEST_UNREACH = 1
ICMP_TIME_EXCEEDED = 3
ICMP_ECHO_REQUEST = 128
ICMP_ECHO_REPLY = 129

TCP_SYN = 0x02
TCP_RST = 0x04
TCP_ACK = 0x10

TRANSPORT_TCP = 6
TRANSPORT_UDP = 17

_HEADER = struct.Struct("!BBBB16s16s")
_ICMP_HEAD = struct.Struct("!BBH")
_ECHO_BODY = struct.Struct("!HHB3s")
_TCP_BODY = struct.Struct("!HHIIB")
_APP_HEAD = struct.Struct("!BHIH")

_ECHO_MAGIC = b"psc"
#: Error quotes keep at least this much of the offending frame.
QUOTE_LIMIT = 96


class FrameError(ValueError):
    """Raised for truncated or structurally invalid frames."""


def _addr_bytes(addr: Address) -> bytes:
    return addr.value.to_bytes(16, "big")


def _header(proto: int, hop_limit: int, src: Address, dst: Address) -> bytes:
    return _HEADER.pack(VERSION, proto, hop_limit, 0, _addr_bytes(src), _addr_bytes(dst))


def build_echo_request(
    src: Address, dst: Address, hop_limit: int, ident: int, seq: int
) -> bytes:
    body = _ICMP_HEAD.pack(ICMP_ECHO_REQUEST, 0, 0)
    body += _ECHO_BODY.pack(ident & 0xFFFF, seq & 0xFFFF, hop_limit & 0xFF, _ECHO_MAGIC)
    return _header(PROTO_ICMP6, hop_limit, src, dst) + body


def build_echo_reply(request: "Frame") -> bytes:
    """Reply to a parsed echo request, echoing identifier/sequence/payload."""
    icmp = request.icmp
    assert icmp is not None and icmp.icmp_type == ICMP_ECHO_REQUEST
    body = _ICMP_HEAD.pack(ICMP_ECHO_REPLY, 0, 0)
    body += _ECHO_BODY.pack(icmp.ident, icmp.seq, icmp.orig_hop_limit, _ECHO_MAGIC)
    return _header(PROTO_ICMP6, 64, request.dst, request.src) + body


def build_icmp_error(
    reporter: Address, original: bytes, icmp_type: int, icmp_code: int
) -> bytes:
    """Type 1/3 error quoting the offending frame back to its sender."""
    orig = parse_frame(original)
    body = _ICMP_HEAD.pack(icmp_type, icmp_code, 0)
    body += b"\x00" * 4 + original[:QUOTE_LIMIT]
    return _header(PROTO_ICMP6, 64, reporter, orig.src) + body


def build_tcp(
    src: Address, dst: Address, sport: int, dport: int, seq: int, ack: int, flags: int,
    hop_limit: int = 64,
) -> bytes:
    body = _TCP_BODY.pack(sport, dport, seq, ack, flags)
    return _header(PROTO_TCP, hop_limit, src, dst) + body


def build_app(
    src: Address,
    dst: Address,
    transport: int,
    port: int,
    conn_id: int,
    payload: bytes,
    hop_limit: int = 64,
) -> bytes:
    body = _APP_HEAD.pack(transport, port, conn_id, len(payload)) + payload
    return _header(PROTO_APP, hop_limit, src, dst) + body


@dataclass(frozen=True)
class IcmpBody:
    icmp_type: int
    icmp_code: int
    # Echo fields (requests and replies)
    ident: int = 0
    seq: int = 0
    orig_hop_limit: int = 0
    # Error quote (types 1/3): raw bytes of the offending frame
    quoted: bytes = b""


@dataclass(frozen=True)
class TcpBody:
    sport: int
    dport: int
    seq: int
    ack: int
    flags: int


@dataclass(frozen=True)
class AppBody:
    transport: int
    port: int
    conn_id: int
    payload: bytes


@dataclass(frozen=True)
class Frame:
    proto: int
    hop_limit: int
    src: Address
    dst: Address
    icmp: IcmpBody | None = None
    tcp: TcpBody | None = None
    app: AppBody | None = None

    def with_hop_limit(self, hop_limit: int, raw: bytes) -> bytes:
        """Re-serialize raw frame bytes with a different hop limit."""
        return raw[:2] + bytes([hop_limit & 0xFF]) + raw[3:]


def parse_frame(data: bytes) -> Frame:
    if len(data) < _HEADER.size:
        raise FrameError(f"short frame: {len(data)} bytes")
    version, proto, hop_limit, _, src_b, dst_b = _HEADER.unpack_from(data)
    if version != VERSION:
        raise FrameError(f"bad version byte {version:#x}")
    src = Address(int.from_bytes(src_b, "big"))
    dst = Address(int.from_bytes(dst_b, "big"))
    body = data[_HEADER.size :]
    if proto == PROTO_ICMP6:
        return Frame(proto, hop_limit, src, dst, icmp=_parse_icmp(body))
    if proto == PROTO_TCP:
        if len(body) < _TCP_BODY.size:
            raise FrameError("short TCP body")
        sport, dport, seq, ack, flags = _TCP_BODY.unpack_from(body)
        return Frame(proto, hop_limit, src, dst, tcp=TcpBody(sport, dport, seq, ack, flags))
    if proto == PROTO_APP:
        if len(body) < _APP_HEAD.size:
            raise FrameError("short app body")
        transport, port, conn_id, length = _APP_HEAD.unpack_from(body)
        payload = body[_APP_HEAD.size : _APP_HEAD.size + length]
        if len(payload) < length:
            raise FrameError("truncated app payload")
        return Frame(proto, hop_limit, src, dst, app=AppBody(transport, port, conn_id, payload))
    raise FrameError(f"unknown protocol {proto}")


def _parse_icmp(body: bytes) -> IcmpBody:
    if len(body) < _ICMP_HEAD.size:
        raise FrameError("short ICMP body")
    icmp_type, icmp_code, _ = _ICMP_HEAD.unpack_from(body)
    rest = body[_ICMP_HEAD.size :]
    if icmp_type in (ICMP_ECHO_REQUEST, ICMP_ECHO_REPLY):
        if len(rest) < _ECHO_BODY.size:
            raise FrameError("short echo body")
        ident, seq, orig_hop, _ = _ECHO_BODY.unpack_from(rest)
        return IcmpBody(icmp_type, icmp_code, ident=ident, seq=seq, orig_hop_limit=orig_hop)
    if icmp_type in (ICMP_DEST_UNREACH, ICMP_TIME_EXCEEDED):
        if len(rest) < 4:
            raise FrameError("short ICMP error body")
        return IcmpBody(icmp_type, icmp_code, quoted=rest[4:])
    return IcmpBody(icmp_type, icmp_code)
