"""Transport backends: the wall-clock stub and the gated live transport.

Every backend speaks the frame bytes from `wire` through the same four
calls: open(), send(data, destination), receive(max_wait) and now().
The simulated backend lives in `simnet`; the stub here runs on the real
clock and is what rate-limit behaviour is measured against. The live
backend drives actual sockets and is deliberately hard to turn on: it
needs both an explicit opt-in and raw-socket privileges, and nothing in
the test suite ever loads it.
"""

from __future__ import annotations

import heapq
import os
import socket
import struct
import time
from typing import Callable

from . import wire
from .prefixes import Address

LIVE_ENABLE_ENV = "PERISCAN_ENABLE_LIVE"


class LiveBackendDisabled(RuntimeError):
    pass


def echo_responder(data: bytes) -> list[bytes]:
    """Stub responder answering every echo request; other probes unanswered."""
    try:
        frame = wire.parse_frame(data)
    except wire.FrameError:
        return []
    if frame.icmp is not None and frame.icmp.icmp_type == wire.ICMP_ECHO_REQUEST:
        return [wire.build_echo_reply(frame)]
    return []


class StubBackend:
    """Wall-clock backend that swallows probes and synthesizes replies.

    Stands in for the live transport in tests: records every send
    timestamp (the rate-limit oracle) and feeds probes through an
    optional responder with a fixed delivery latency.
    """

    def __init__(
        self,
        responder: Callable[[bytes], list[bytes]] | None = echo_responder,
        latency: float = 0.0,
        clock: Callable[[], float] = time.monotonic,
    ):
        self.responder = responder
        self.latency = latency
        self._clock = clock
        self.send_times: list[float] = []
        self.sent_frames: list[bytes] = []
        self._pending: list[tuple[float, int, bytes, Address]] = []
        self._seq = 0

    def open(self) -> None:
        pass

    def close(self) -> None:
        self._pending.clear()

    def now(self) -> float:
        return self._clock()

    def send(self, data: bytes, destination: Address) -> None:
        now = self.now()
        self.send_times.append(now)
        self.sent_frames.append(data)
        if self.responder is None:
            return
        for reply in self.responder(data):
            source = wire.parse_frame(reply).src
            heapq.heappush(
                self._pending, (now + self.latency, self._seq, reply, source)
            )
            self._seq += 1

    def receive(self, max_wait: float) -> tuple[bytes, Address] | None:
        deadline = self.now() + max(max_wait, 0.0)
        if self._pending and self._pending[0][0] <= deadline:
            arrival, _, data, source = heapq.heappop(self._pending)
            remaining = arrival - self.now()
            if remaining > 0:
                time.sleep(remaining)
            return data, source
        remaining = deadline - self.now()
        if remaining > 0:
            time.sleep(remaining)
        return None


class LiveBackend:
    """Raw-socket transport for real scans. Requires explicit enablement.

    ICMPv6 echo probes ride a raw ICMPv6 socket with per-send hop limits;
    TCP reachability and application exchanges use kernel TCP (connect
    plus a single request/response), which reports SYN-ACK/RST outcomes
    without crafting segments. ICMPv6 errors arriving on the raw socket
    are translated back into frames quoting the original probe so the
    engine's correlation works unchanged.
    """

    def __init__(self, source: Address | None = None):
        if os.environ.get(LIVE_ENABLE_ENV) != "1":
            raise LiveBackendDisabled(
                f"live scanning requires {LIVE_ENABLE_ENV}=1"
            )
        if hasattr(os, "geteuid") and os.geteuid() != 0:
            raise LiveBackendDisabled("live scanning requires raw-socket privileges")
        self._icmp = None
        self._source = source or Address(0)
        self._pending: list[tuple[float, int, bytes, Address]] = []
        self._seq = 0
        self._sent: dict[tuple[int, int], bytes] = {}

    def open(self) -> None:
        proto = socket.getprotobyname("ipv6-icmp")
        self._icmp = socket.socket(socket.AF_INET6, socket.SOCK_RAW, proto)
        self._icmp.setblocking(False)

    def close(self) -> None:
        if self._icmp is not None:
            self._icmp.close()
            self._icmp = None

    def now(self) -> float:
        return time.monotonic()

    def _queue(self, frame_bytes: bytes, source: Address, when: float) -> None:
        heapq.heappush(self._pending, (when, self._seq, frame_bytes, source))
        self._seq += 1

    def send(self, data: bytes, destination: Address) -> None:
        frame = wire.parse_frame(data)
        if frame.icmp is not None and frame.icmp.icmp_type == wire.ICMP_ECHO_REQUEST:
            self._send_echo(frame, data, destination)
        elif frame.tcp is not None and frame.tcp.flags & wire.TCP_SYN:
            self._tcp_connect_probe(frame, destination)
        elif frame.app is not None:
            self._app_exchange(frame, destination)

    def _send_echo(self, frame, data: bytes, destination: Address) -> None:
        assert self._icmp is not None, "backend not open"
        icmp = frame.icmp
        self._sent[(icmp.ident, icmp.seq)] = data
        packet = struct.pack(
            "!BBHHH", wire.ICMP_ECHO_REQUEST, 0, 0, icmp.ident, icmp.seq
        ) + bytes([frame.hop_limit])
        self._icmp.setsockopt(
            socket.IPPROTO_IPV6, socket.IPV6_UNICAST_HOPS, frame.hop_limit
        )
        self._icmp.sendto(packet, (str(destination), 0))

    def _tcp_connect_probe(self, frame, destination: Address) -> None:
        tcp = frame.tcp
        sock = socket.socket(socket.AF_INET6, socket.SOCK_STREAM)
        sock.settimeout(2.0)
        try:
            sock.connect((str(destination), tcp.dport))
            flags = wire.TCP_SYN | wire.TCP_ACK
        except ConnectionRefusedError:
            flags = wire.TCP_RST | wire.TCP_ACK
        except OSError:
            return
        finally:
            sock.close()
        reply = wire.build_tcp(
            destination, frame.src, tcp.dport, tcp.sport, 0,
            (tcp.seq + 1) & 0xFFFFFFFF, flags,
        )
        self._queue(reply, destination, self.now())

    def _app_exchange(self, frame, destination: Address) -> None:
        app = frame.app
        if app.transport == wire.TRANSPORT_UDP:
            sock = socket.socket(socket.AF_INET6, socket.SOCK_DGRAM)
            sock.settimeout(2.0)
            try:
                sock.sendto(app.payload, (str(destination), app.port))
                payload, _ = sock.recvfrom(65535)
            except OSError:
                return
            finally:
                sock.close()
        else:
            sock = socket.socket(socket.AF_INET6, socket.SOCK_STREAM)
            sock.settimeout(3.0)
            try:
                sock.connect((str(destination), app.port))
                if app.payload:
                    sock.sendall(app.payload)
                chunks = []
                while len(b"".join(chunks)) < 65535:
                    chunk = sock.recv(8192)
                    if not chunk:
                        break
                    chunks.append(chunk)
                payload = b"".join(chunks)
            except ConnectionRefusedError:
                payload = b""
            except OSError:
                return
            finally:
                sock.close()
        reply = wire.build_app(
            destination, frame.src, app.transport, app.port, app.conn_id, payload
        )
        self._queue(reply, destination, self.now())

    def _translate_icmp(self, packet: bytes, source: Address) -> bytes | None:
        """Map a kernel ICMPv6 message onto a frame the engine can match."""
        if len(packet) < 8:
            return None
        icmp_type, icmp_code = packet[0], packet[1]
        if icmp_type == wire.ICMP_ECHO_REPLY:
            ident, seq = struct.unpack_from("!HH", packet, 4)
            original = self._sent.get((ident, seq))
            hop = wire.parse_frame(original).icmp.orig_hop_limit if original else 0
            body = struct.pack("!BBH", wire.ICMP_ECHO_REPLY, 0, 0)
            body += struct.pack("!HHB3s", ident, seq, hop, b"psc")
            header = struct.pack(
                "!BBBB16s16s", wire.VERSION, wire.PROTO_ICMP6, 64, 0,
                source.value.to_bytes(16, "big"),
                self._source.value.to_bytes(16, "big"),
            )
            return header + body
        if icmp_type in (wire.ICMP_TIME_EXCEEDED, wire.ICMP_DEST_UNREACH):
            # The quote is a real IPv6 packet; dig the echo ident/seq out
            # of its ICMPv6 payload (IPv6 header is 40 bytes).
            quoted = packet[8:]
            if len(quoted) < 48:
                return None
            ident, seq = struct.unpack_from("!HH", quoted, 44)
            original = self._sent.get((ident, seq))
            if original is None:
                return None
            return wire.build_icmp_error(source, original, icmp_type, icmp_code)
        return None

    def receive(self, max_wait: float) -> tuple[bytes, Address] | None:
        assert self._icmp is not None, "backend not open"
        deadline = self.now() + max(max_wait, 0.0)
        while True:
            if self._pending and self._pending[0][0] <= self.now():
                _, _, data, source = heapq.heappop(self._pending)
                return data, source
            remaining = deadline - self.now()
            if remaining <= 0:
                return None
            import select

            readable, _, _ = select.select([self._icmp], [], [], min(remaining, 0.2))
            if not readable:
                continue
            packet, addrinfo = self._icmp.recvfrom(65535)
            source = Address.parse(addrinfo[0].split("%")[0])
            translated = self._translate_icmp(packet, source)
            if translated is not None:
                return translated, source
