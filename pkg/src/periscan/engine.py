"""Rate-limited scan executor over pluggable transport backends.

The engine runs a sender lane and a receiver lane cooperatively over a
shared correlation table: probes are paced out by a token interval while
arriving datagrams are matched against outstanding probes, so sending
never blocks on responses. A scan is complete when every target has been
sent (including retries) and the table has drained through matches or
timeouts. Responses stream in arrival order, not target order.

All timing comes from the backend clock, so the same loop runs against
wall time (live/stub) or virtual time (simnet) unchanged. Backends must
honor the receive contract: receive(max_wait) either returns a datagram
or consumes the wait (blocking in real time or advancing virtual time);
a receive that returns empty without letting time pass starves the loop.
"""

from __future__ import annotations

import hashlib
import heapq
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping

from . import wire
from .prefixes import Address

#: Fixed source address stamped on every probe frame.
PROBER_SOURCE = Address.parse("fd00::1")

DEFAULT_MAX_PPS = 100_000
DEFAULT_TIMEOUT = 5.0
DEFAULT_RETRIES = 1


class EngineError(Exception):
    pass


class BackendError(EngineError):
    """A backend send/receive failed; the scan aborted with partial results."""


@dataclass(frozen=True)
class Icmp6Echo:
    hop_limit: int = 64
    payload_tag: int = 0

    def __post_init__(self):
        if not 1 <= self.hop_limit <= 255:
            raise ValueError(f"hop_limit {self.hop_limit} outside 1..255")
        if not 0 <= self.payload_tag <= 0xFFFF:
            raise ValueError("payload_tag must fit in 16 bits")


@dataclass(frozen=True)
class TcpSyn:
    port: int

    def __post_init__(self):
        if not 1 <= self.port <= 65535:
            raise ValueError(f"port {self.port} outside 1..65535")


@dataclass(frozen=True)
class AppRequest:
    port: int
    request: bytes = b""
    read_limit: int = 4096
    transport: int = wire.TRANSPORT_TCP

    def __post_init__(self):
        if not 1 <= self.port <= 65535:
            raise ValueError(f"port {self.port} outside 1..65535")
        if self.read_limit <= 0:
            raise ValueError("read_limit must be positive")


ProbeKind = Icmp6Echo | TcpSyn | AppRequest


@dataclass(frozen=True)
class ProbeSpec:
    kind: ProbeKind
    timeout: float = DEFAULT_TIMEOUT
    retries: int = DEFAULT_RETRIES

    def __post_init__(self):
        if self.timeout <= 0:
            raise ValueError("timeout must be positive")
        if self.retries < 0:
            raise ValueError("retries must be >= 0")


@dataclass(frozen=True)
class RateLimit:
    max_pps: int = DEFAULT_MAX_PPS

    def __post_init__(self):
        if self.max_pps < 1:
            raise ValueError("max_pps must be >= 1")


# Response payload variants.


@dataclass(frozen=True)
class Icmp:
    icmp_type: int
    icmp_code: int
    echoed_hop_limit: int = 0


@dataclass(frozen=True)
class SynAck:
    pass


@dataclass(frozen=True)
class Rst:
    pass


@dataclass(frozen=True)
class AppPayload:
    status_line: str
    headers: tuple[tuple[str, str], ...]
    body_prefix: bytes

    def header(self, name: str) -> str | None:
        low = name.lower()
        for key, value in self.headers:
            if key.lower() == low:
                return value
        return None


@dataclass(frozen=True)
class Timeout:
    pass


ResponsePayload = Icmp | SynAck | Rst | AppPayload | Timeout


@dataclass(frozen=True)
class ProbeResponse:
    target: Address
    source: Address
    payload: ResponsePayload
    rtt: float
    probe_id: tuple
    #: Arrival instant on the scan clock (first_seen material downstream).
    arrived: float = 0.0

    @property
    def is_timeout(self) -> bool:
        return isinstance(self.payload, Timeout)


@dataclass(frozen=True)
class Unsolicited:
    source: Address | None
    reason: str
    raw: bytes = b""


@dataclass
class ScanStats:
    targets_probed: int = 0
    sent_packets: int = 0
    matched: int = 0
    timeouts: int = 0
    unsolicited: int = 0
    started_at: float = 0.0
    finished_at: float = 0.0
    aborted: bool = False

    @property
    def elapsed(self) -> float:
        return max(self.finished_at - self.started_at, 0.0)

    def conservation_holds(self) -> bool:
        """matched + timeouts == targets probed, for completed scans."""
        return self.matched + self.timeouts == self.targets_probed


@dataclass
class _Outstanding:
    key: tuple
    target: Address
    send_time: float
    deadline: float
    attempts_left: int
    read_limit: int = 4096
    queued_resend: bool = False


def _parse_app_payload(payload: bytes, read_limit: int) -> AppPayload:
    """Split an application response into status line, headers and body.

    Non-HTTP payloads land whole in body_prefix with an empty status line.
    """
    if payload.startswith(b"HTTP/"):
        head, sep, body = payload.partition(b"\r\n\r\n")
        if not sep:
            head, sep, body = payload.partition(b"\n\n")
        lines = head.replace(b"\r\n", b"\n").split(b"\n")
        status = lines[0].decode("latin-1", "replace")
        headers = []
        for line in lines[1:]:
            name, colon, value = line.partition(b":")
            if colon:
                headers.append(
                    (name.decode("latin-1", "replace").strip(),
                     value.decode("latin-1", "replace").strip())
                )
        return AppPayload(status, tuple(headers), body[:read_limit])
    return AppPayload("", (), payload[:read_limit])


def _quoted_probe_key(quoted: bytes) -> tuple | None:
    """Recover the probe key from the frame quoted inside an ICMP error."""
    try:
        frame = wire.parse_frame(quoted)
    except wire.FrameError:
        return None
    if frame.icmp is not None and frame.icmp.icmp_type == wire.ICMP_ECHO_REQUEST:
        return ("icmp", frame.icmp.ident, frame.icmp.seq)
    if frame.tcp is not None:
        return ("tcp", frame.tcp.sport, frame.tcp.dport, frame.tcp.seq)
    if frame.app is not None:
        return ("app", frame.app.conn_id)
    return None


def match_response(
    raw: bytes,
    source: Address,
    outstanding: Mapping[tuple, _Outstanding],
    now: float = 0.0,
) -> ProbeResponse | Unsolicited:
    """Classify one backend datagram against the correlation table.

    Never silently drops: anything unmatched comes back as Unsolicited
    with a reason. The classification depends only on the bytes, so live
    and simulated deliveries of identical datagrams agree.
    """
    try:
        frame = wire.parse_frame(raw)
    except wire.FrameError as exc:
        return Unsolicited(source, f"unparseable: {exc}", raw)

    if frame.icmp is not None:
        icmp = frame.icmp
        if icmp.icmp_type == wire.ICMP_ECHO_REPLY:
            key = ("icmp", icmp.ident, icmp.seq)
            entry = outstanding.get(key)
            if entry is None:
                return Unsolicited(source, "echo reply for unknown probe", raw)
            payload = Icmp(icmp.icmp_type, icmp.icmp_code, icmp.orig_hop_limit)
            return _matched(entry, frame.src, payload, now)
        if icmp.icmp_type in (wire.ICMP_TIME_EXCEEDED, wire.ICMP_DEST_UNREACH):
            key = _quoted_probe_key(icmp.quoted)
            if key is None:
                return Unsolicited(source, "icmp error with unparseable quote", raw)
            entry = outstanding.get(key)
            if entry is None:
                return Unsolicited(source, "icmp error for unknown probe", raw)
            echoed = 0
            try:
                quoted = wire.parse_frame(icmp.quoted)
                if quoted.icmp is not None:
                    echoed = quoted.icmp.orig_hop_limit
                else:
                    echoed = quoted.hop_limit
            except wire.FrameError:
                pass
            payload = Icmp(icmp.icmp_type, icmp.icmp_code, echoed)
            return _matched(entry, frame.src, payload, now)
        return Unsolicited(source, f"unclassified icmp type {icmp.icmp_type}", raw)

    if frame.tcp is not None:
        tcp = frame.tcp
        # Response ports are swapped relative to the probe's view.
        key = ("tcp", tcp.dport, tcp.sport, (tcp.ack - 1) & 0xFFFFFFFF)
        entry = outstanding.get(key)
        if entry is None:
            return Unsolicited(source, "tcp segment with no matching probe", raw)
        if tcp.flags & wire.TCP_RST:
            return _matched(entry, frame.src, Rst(), now)
        if tcp.flags & wire.TCP_SYN and tcp.flags & wire.TCP_ACK:
            return _matched(entry, frame.src, SynAck(), now)
        return Unsolicited(source, f"tcp flags {tcp.flags:#x} not classifiable", raw)

    if frame.app is not None:
        key = ("app", frame.app.conn_id)
        entry = outstanding.get(key)
        if entry is None:
            return Unsolicited(source, "app response for unknown connection", raw)
        if not frame.app.payload:
            # Connection refused or server sent nothing.
            return _matched(entry, frame.src, Rst(), now)
        payload = _parse_app_payload(frame.app.payload, entry.read_limit)
        return _matched(entry, frame.src, payload, now)

    return Unsolicited(source, f"unknown protocol {frame.proto}", raw)


def _matched(entry: _Outstanding, src: Address, payload, now: float) -> ProbeResponse:
    return ProbeResponse(
        target=entry.target,
        source=src,
        payload=payload,
        rtt=max(now - entry.send_time, 0.0),
        probe_id=entry.key,
        arrived=now,
    )


class ScanRun:
    """One scan in flight: iterate for responses, cancel to stop early.

    Cancelling stops the sender immediately; responses already yielded are
    the flushed partial result.
    """

    def __init__(self, gen: Iterator[ProbeResponse], stats: ScanStats, backend):
        self._gen = gen
        self.stats = stats
        self._backend = backend

    def __iter__(self) -> Iterator[ProbeResponse]:
        return self._gen

    def __next__(self) -> ProbeResponse:
        return next(self._gen)

    def now(self) -> float:
        return self._backend.now()

    def cancel(self) -> None:
        self._gen.close()


class Scanner:
    """Binds a backend, rate limit and retry policy into a scan capability."""

    def __init__(
        self,
        backend,
        rate: RateLimit | None = None,
        timeout: float = DEFAULT_TIMEOUT,
        retries: int = DEFAULT_RETRIES,
        seed: int = 0,
    ):
        self.backend = backend
        self.rate = rate or RateLimit()
        self.timeout = timeout
        self.retries = retries
        self.seed = seed
        self._counter = 0
        self.last_stats: ScanStats | None = None

    def now(self) -> float:
        return self.backend.now()

    def next_ordinal(self) -> int:
        ordinal = self._counter
        self._counter += 1
        return ordinal

    def spec(self, kind: ProbeKind, timeout: float | None = None,
             retries: int | None = None) -> ProbeSpec:
        return ProbeSpec(
            kind,
            timeout=self.timeout if timeout is None else timeout,
            retries=self.retries if retries is None else retries,
        )

    def scan(self, targets: Iterable[Address], spec: ProbeSpec) -> ScanRun:
        return run_scan(targets, spec, self.rate, self.backend, scanner=self)


def run_scan(
    targets: Iterable[Address],
    spec: ProbeSpec,
    rate: RateLimit,
    backend,
    scanner: Scanner | None = None,
) -> ScanRun:
    """Probe every target at most retries+1 times within the rate budget.

    Yields a ProbeResponse per arrival and a Timeout record for every
    target that never answered; the send rate never exceeds max_pps over
    any one-second window (probes are paced a full interval apart).
    """
    stats = ScanStats()
    owner = scanner or Scanner(backend, rate)
    gen = _scan_loop(targets, spec, rate, backend, stats, owner)
    run = ScanRun(gen, stats, backend)
    if scanner is not None:
        scanner.last_stats = stats
    return run


def _probe_seq32(seed: int, ordinal: int) -> int:
    digest = hashlib.blake2b(
        ordinal.to_bytes(8, "big"), key=seed.to_bytes(8, "big"), digest_size=4
    ).digest()
    return int.from_bytes(digest, "big")


def _scan_loop(
    targets: Iterable[Address],
    spec: ProbeSpec,
    rate: RateLimit,
    backend,
    stats: ScanStats,
    scanner: Scanner,
) -> Iterator[ProbeResponse]:
    interval = 1.0 / rate.max_pps
    outstanding: dict[tuple, _Outstanding] = {}
    resend: deque[tuple] = deque()
    deadlines: list[tuple[float, int, tuple]] = []
    deadline_seq = 0
    target_iter = iter(targets)
    # One-slot lookahead so exhaustion is known without waiting on the pacer.
    next_fresh = next(target_iter, None)

    stats.started_at = backend.now()
    # Token bucket starts empty: the first send waits one interval.
    next_send = stats.started_at + interval

    def build_probe(target: Address, entry: _Outstanding | None):
        """Frame + key for a fresh probe (entry None) or a retransmit."""
        kind = spec.kind
        if entry is not None:
            key = entry.key
            if isinstance(kind, Icmp6Echo):
                data = wire.build_echo_request(
                    PROBER_SOURCE, target, kind.hop_limit, key[1], key[2]
                )
            elif isinstance(kind, TcpSyn):
                data = wire.build_tcp(
                    PROBER_SOURCE, target, key[1], key[2], key[3], 0, wire.TCP_SYN
                )
            else:
                data = wire.build_app(
                    PROBER_SOURCE, target, kind.transport, kind.port, key[1],
                    kind.request,
                )
            return data, key
        ordinal = scanner.next_ordinal()
        if isinstance(kind, Icmp6Echo):
            ident = (kind.payload_tag + (ordinal >> 16)) & 0xFFFF
            seq = ordinal & 0xFFFF
            key = ("icmp", ident, seq)
            data = wire.build_echo_request(
                PROBER_SOURCE, target, kind.hop_limit, ident, seq
            )
        elif isinstance(kind, TcpSyn):
            sport = 0xC000 | (ordinal & 0x3FFF)
            seq32 = _probe_seq32(scanner.seed, ordinal)
            key = ("tcp", sport, kind.port, seq32)
            data = wire.build_tcp(
                PROBER_SOURCE, target, sport, kind.port, seq32, 0, wire.TCP_SYN
            )
        else:
            conn_id = ordinal & 0xFFFFFFFF
            key = ("app", conn_id)
            data = wire.build_app(
                PROBER_SOURCE, target, kind.transport, kind.port, conn_id,
                kind.request,
            )
        return data, key

    def send_one(now: float) -> bool:
        """Send one probe (retransmits first); False if nothing to send."""
        nonlocal next_fresh, deadline_seq
        entry = None
        target = None
        while resend:
            key = resend.popleft()
            candidate = outstanding.get(key)
            if candidate is not None and candidate.queued_resend:
                entry = candidate
                target = candidate.target
                break
        if entry is None:
            if next_fresh is None:
                return False
            target = next_fresh
            next_fresh = next(target_iter, None)
        data, key = build_probe(target, entry)
        try:
            backend.send(data, target)
        except Exception as exc:
            stats.aborted = True
            raise BackendError(f"send failed: {exc}") from exc
        stats.sent_packets += 1
        if entry is None:
            stats.targets_probed += 1
            entry = _Outstanding(
                key=key,
                target=target,
                send_time=now,
                deadline=now + spec.timeout,
                attempts_left=spec.retries,
                read_limit=getattr(spec.kind, "read_limit", 4096),
            )
            outstanding[key] = entry
        else:
            entry.send_time = now
            entry.deadline = now + spec.timeout
            entry.queued_resend = False
        heapq.heappush(deadlines, (entry.deadline, deadline_seq, entry.key))
        deadline_seq += 1
        return True

    def expire(now: float):
        """Fire timeouts due by `now`; yields Timeout records."""
        while deadlines and deadlines[0][0] <= now:
            _, _, key = heapq.heappop(deadlines)
            entry = outstanding.get(key)
            if entry is None or entry.queued_resend or entry.deadline > now:
                continue
            if entry.attempts_left > 0:
                entry.attempts_left -= 1
                entry.queued_resend = True
                resend.append(key)
                continue
            del outstanding[key]
            stats.timeouts += 1
            yield ProbeResponse(
                target=entry.target,
                source=entry.target,
                payload=Timeout(),
                rtt=spec.timeout,
                probe_id=key,
                arrived=now,
            )

    try:
        while True:
            now = backend.now()
            yield from expire(now)

            want_send = bool(resend) or next_fresh is not None
            if want_send and now >= next_send:
                if send_one(now):
                    # Strict pacing keeps every 1-second window within budget.
                    next_send = max(next_send + interval, now + interval)
                continue

            if not want_send and not outstanding:
                break

            waits = []
            if want_send:
                waits.append(next_send - now)
            if deadlines:
                waits.append(deadlines[0][0] - now)
            wait = max(min(waits) if waits else spec.timeout, 0.0)
            try:
                got = backend.receive(wait)
            except Exception as exc:
                stats.aborted = True
                raise BackendError(f"receive failed: {exc}") from exc
            if got is None:
                continue
            data, source = got
            result = match_response(data, source, outstanding, backend.now())
            if isinstance(result, Unsolicited):
                stats.unsolicited += 1
                continue
            entry = outstanding.pop(result.probe_id, None)
            if entry is None:
                stats.unsolicited += 1
                continue
            stats.matched += 1
            yield result
        stats.finished_at = backend.now()
        assert stats.conservation_holds(), (
            f"conservation violated: {stats.matched} + {stats.timeouts} != "
            f"{stats.targets_probed}"
        )
    except GeneratorExit:
        stats.aborted = True
        stats.finished_at = backend.now()
        raise
