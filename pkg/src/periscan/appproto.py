"""Minimal wire codecs for the application probes the toolkit speaks.

Just enough DNS, NTP, TLS and HTTP to build requests, emulate servers
and validate responses; no compression-pointer chasing beyond what our
own answer builder emits.
"""

from __future__ import annotations

import struct

DNS_TYPE_A = 1
DNS_TYPE_TXT = 16
DNS_CLASS_IN = 1
DNS_CLASS_CHAOS = 3

#: Fixed probe-owned name used for resolver checks in simulated scans.
PROBE_QUERY_NAME = "probe.periscan.example"
VERSION_BIND_NAME = "version.bind"


def _encode_name(name: str) -> bytes:
    out = b""
    for label in name.strip(".").split("."):
        raw = label.encode("ascii")
        out += bytes([len(raw)]) + raw
    return out + b"\x00"


def _skip_name(payload: bytes, offset: int) -> int:
    while offset < len(payload):
        length = payload[offset]
        if length == 0:
            return offset + 1
        if length & 0xC0:
            return offset + 2
        offset += 1 + length
    raise ValueError("truncated DNS name")


def build_dns_query(
    name: str = PROBE_QUERY_NAME,
    txid: int = 0,
    qtype: int = DNS_TYPE_A,
    qclass: int = DNS_CLASS_IN,
    recursion: bool = True,
) -> bytes:
    flags = 0x0100 if recursion else 0x0000
    header = struct.pack("!HHHHHH", txid & 0xFFFF, flags, 1, 0, 0, 0)
    return header + _encode_name(name) + struct.pack("!HH", qtype, qclass)


def parse_dns_query(payload: bytes) -> tuple[int, str, int, int] | None:
    """(txid, name, qtype, qclass) of the first question, or None."""
    if len(payload) < 12:
        return None
    txid, flags, qdcount, _, _, _ = struct.unpack_from("!HHHHHH", payload)
    if flags & 0x8000 or qdcount < 1:
        return None
    labels = []
    offset = 12
    try:
        while True:
            length = payload[offset]
            if length == 0:
                offset += 1
                break
            labels.append(payload[offset + 1 : offset + 1 + length].decode("ascii"))
            offset += 1 + length
        qtype, qclass = struct.unpack_from("!HH", payload, offset)
    except (IndexError, struct.error, UnicodeDecodeError):
        return None
    return txid, ".".join(labels), qtype, qclass


def build_dns_answer(query: bytes, rdata: bytes, rtype: int, rclass: int) -> bytes:
    """Answer a query we built ourselves: echo the question, add one record."""
    parsed = parse_dns_query(query)
    if parsed is None:
        raise ValueError("not a parseable query")
    txid, _, _, _ = parsed
    question_end = _skip_name(query, 12) + 4
    question = query[12:question_end]
    header = struct.pack("!HHHHHH", txid, 0x8180, 1, 1, 0, 0)
    record = b"\xc0\x0c" + struct.pack("!HHIH", rtype, rclass, 60, len(rdata)) + rdata
    return header + question + record


def build_dns_a_answer(query: bytes, addr4: bytes = b"\x7f\x00\x00\x01") -> bytes:
    return build_dns_answer(query, addr4, DNS_TYPE_A, DNS_CLASS_IN)


def build_dns_txt_answer(query: bytes, text: str) -> bytes:
    raw = text.encode("ascii")
    return build_dns_answer(query, bytes([len(raw)]) + raw, DNS_TYPE_TXT, DNS_CLASS_CHAOS)


def dns_is_answer(payload: bytes, txid: int | None = None) -> bool:
    """A positive answer: response bit set, no error, at least one record."""
    if len(payload) < 12:
        return False
    rid, flags, _, ancount, _, _ = struct.unpack_from("!HHHHHH", payload)
    if txid is not None and rid != (txid & 0xFFFF):
        return False
    return bool(flags & 0x8000) and (flags & 0x000F) == 0 and ancount >= 1


def dns_extract_txt(payload: bytes) -> str | None:
    """TXT string from the first answer record of our own answer layout."""
    if not dns_is_answer(payload):
        return None
    try:
        offset = _skip_name(payload, 12) + 4  # past question
        offset = _skip_name(payload, offset)
        rtype, _, _, rdlength = struct.unpack_from("!HHIH", payload, offset)
        offset += 10
        if rtype != DNS_TYPE_TXT or rdlength < 1:
            return None
        txt_len = payload[offset]
        return payload[offset + 1 : offset + 1 + txt_len].decode("ascii", "replace")
    except (IndexError, struct.error, ValueError):
        return None


NTP_MODE_CLIENT = 3
NTP_MODE_SERVER = 4


def build_ntp_client() -> bytes:
    # LI=0, VN=4, mode=3
    return bytes([0x23]) + b"\x00" * 47


def build_ntp_server_reply() -> bytes:
    return bytes([0x24]) + b"\x00" * 47


def ntp_is_server_reply(payload: bytes) -> bool:
    return len(payload) >= 48 and (payload[0] & 0x07) == NTP_MODE_SERVER


_TLS_SUITE = b"\x13\x01"  # TLS_AES_128_GCM_SHA256


def build_tls_client_hello() -> bytes:
    body = (
        b"\x03\x03" + b"\x00" * 32 + b"\x00"  # version, random, empty session id
        + b"\x00\x02" + _TLS_SUITE            # one cipher suite
        + b"\x01\x00"                          # null compression
    )
    handshake = b"\x01" + len(body).to_bytes(3, "big") + body
    return b"\x16\x03\x01" + len(handshake).to_bytes(2, "big") + handshake


def build_tls_server_hello() -> bytes:
    body = b"\x03\x03" + b"\x00" * 32 + b"\x00" + _TLS_SUITE + b"\x00"
    handshake = b"\x02" + len(body).to_bytes(3, "big") + body
    return b"\x16\x03\x03" + len(handshake).to_bytes(2, "big") + handshake


def tls_is_server_hello(payload: bytes) -> bool:
    return len(payload) > 5 and payload[0] == 0x16 and payload[5] == 0x02


def build_http_request(path: str = "/", host: str = "periscan") -> bytes:
    return (
        f"GET {path} HTTP/1.1\r\nHost: {host}\r\n"
        "User-Agent: periscan/0.1\r\nConnection: close\r\n\r\n"
    ).encode("ascii")


def parse_http_request(payload: bytes) -> tuple[str, str]:
    """(method, path); defaults to GET / when the request is not HTTP."""
    try:
        line = payload.split(b"\r\n", 1)[0].decode("ascii")
        method, path, _ = line.split(" ", 2)
        return method, path
    except (ValueError, UnicodeDecodeError):
        return "GET", "/"


def build_http_response(
    status: int,
    reason: str,
    headers: dict[str, str] | list[tuple[str, str]] | None = None,
    body: bytes = b"",
) -> bytes:
    items = list(headers.items()) if isinstance(headers, dict) else list(headers or [])
    if not any(k.lower() == "content-length" for k, _ in items):
        items.append(("Content-Length", str(len(body))))
    head = f"HTTP/1.1 {status} {reason}\r\n" + "".join(
        f"{k}: {v}\r\n" for k, v in items
    )
    return head.encode("latin-1") + b"\r\n" + body
