"""ICMPv6 routing-loop detection.

Sends an echo request toward an unassigned target behind the device
under test with a hop limit of 32 (99% of Internet paths are shorter
than 32 hops, so a genuine destination would answer or refuse rather
than expire in transit). A Time Exceeded reply re-triggers the probe at
hop limit h+2; a second Time Exceeded confirms the packet is circulating
between forwarders rather than progressing. Trials repeat the pair to
harden the verdict: every trial must confirm, and loss never acquits a
loop (silence after a first Time Exceeded stays inconclusive).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Iterable

from .engine import Icmp6Echo, ProbeResponse, Scanner
from .prefixes import Address, slash64_of
from . import wire

DEFAULT_HOP_LIMIT = 32
DEFAULT_INCREMENT = 2
DEFAULT_TRIALS = 2

#: Interface identifier planted into the probed /64 to hit unassigned
#: space; fixed (not random) so re-scans are idempotent.
UNASSIGNED_IID = 0xFEED_FACE_CAFE_BEEF


def choose_unassigned_target(
    device: Address, iid: int = UNASSIGNED_IID
) -> Address:
    """An address in the device's /64 that is almost surely unassigned.

    Never returns the device itself: if the device happens to own the
    constant identifier, the low bit is flipped.
    """
    base = slash64_of(device).bits
    target = Address(base | (iid & 0xFFFFFFFFFFFFFFFF))
    if target == device:
        target = Address(base | ((iid ^ 1) & 0xFFFFFFFFFFFFFFFF))
    return target


@dataclass(frozen=True)
class LoopProbePlan:
    initial_hop_limit: int = DEFAULT_HOP_LIMIT
    increment: int = DEFAULT_INCREMENT
    trials: int = DEFAULT_TRIALS
    target_strategy: Callable[[Address], Address] = choose_unassigned_target

    def __post_init__(self):
        if self.initial_hop_limit < 1:
            raise ValueError("initial_hop_limit must be >= 1")
        if self.initial_hop_limit + self.increment > 255:
            raise ValueError("hop limit after increment exceeds 255")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")


class IcmpCategory(enum.Enum):
    DESTINATION_UNREACHABLE = "DestinationUnreachable"
    TIME_EXCEEDED = "TimeExceeded"
    ECHO_REPLY = "EchoReply"
    OTHER = "Other"


@dataclass(frozen=True)
class IcmpClass:
    category: IcmpCategory
    icmp_type: int
    icmp_code: int


def classify_icmp(icmp_type: int, icmp_code: int) -> IcmpClass:
    """Bucket an ICMPv6 (type, code) pair; derived from nothing else."""
    if icmp_type == wire.ICMP_DEST_UNREACH:
        category = IcmpCategory.DESTINATION_UNREACHABLE
    elif icmp_type == wire.ICMP_TIME_EXCEEDED:
        category = IcmpCategory.TIME_EXCEEDED
    elif icmp_type == wire.ICMP_ECHO_REPLY:
        category = IcmpCategory.ECHO_REPLY
    else:
        category = IcmpCategory.OTHER
    return IcmpClass(category, icmp_type, icmp_code)


class Verdict(enum.Enum):
    CONFIRMED = "Confirmed"
    NOT_LOOPING = "NotLooping"
    INCONCLUSIVE = "Inconclusive"


@dataclass(frozen=True)
class LoopObservation:
    hop_limit_sent: int
    icmp_type: int
    icmp_code: int
    reporter: Address


@dataclass
class LoopEvidence:
    device: Address
    observations: list[LoopObservation] = field(default_factory=list)
    verdict: Verdict = Verdict.INCONCLUSIVE
    error: str | None = None


def _single_probe(
    scanner: Scanner, target: Address, hop_limit: int
) -> ProbeResponse:
    spec = scanner.spec(Icmp6Echo(hop_limit=hop_limit))
    responses = list(scanner.scan([target], spec))
    assert len(responses) == 1, "single-target scan must yield one record"
    return responses[0]


def probe_for_loop(
    device: Address, plan: LoopProbePlan, scanner: Scanner
) -> LoopEvidence:
    """Run the h / h+increment confirmation against one device.

    Confirmed only when every trial sees Time Exceeded at both hop
    limits. An echo reply or unreachable on the first probe acquits the
    device; anything mixed (including loss) is inconclusive.
    """
    evidence = LoopEvidence(device=device)
    target = plan.target_strategy(device)
    h0, h1 = plan.initial_hop_limit, plan.initial_hop_limit + plan.increment

    def observe(hop: int, response: ProbeResponse) -> IcmpClass | None:
        if response.is_timeout:
            return None
        payload = response.payload
        icmp_type = getattr(payload, "icmp_type", None)
        if icmp_type is None:
            return None
        cls = classify_icmp(icmp_type, payload.icmp_code)
        evidence.observations.append(
            LoopObservation(hop, icmp_type, payload.icmp_code, response.source)
        )
        return cls

    try:
        for _ in range(plan.trials):
            first = observe(h0, _single_probe(scanner, target, h0))
            if first is None or first.category is IcmpCategory.OTHER:
                evidence.verdict = Verdict.INCONCLUSIVE
                return evidence
            if first.category in (
                IcmpCategory.ECHO_REPLY,
                IcmpCategory.DESTINATION_UNREACHABLE,
            ):
                evidence.verdict = Verdict.NOT_LOOPING
                return evidence

            second = observe(h1, _single_probe(scanner, target, h1))
            if second is None or second.category is not IcmpCategory.TIME_EXCEEDED:
                # Loss or a mixed outcome must not acquit a loop.
                evidence.verdict = Verdict.INCONCLUSIVE
                return evidence
        evidence.verdict = Verdict.CONFIRMED
    except Exception as exc:  # scanner failure
        evidence.verdict = Verdict.INCONCLUSIVE
        evidence.error = str(exc)
    return evidence


def detect_loops(
    devices: Iterable[Address], plan: LoopProbePlan, scanner: Scanner
) -> list[LoopEvidence]:
    """Probe a device list in order; evidence attaches to the probed device."""
    return [probe_for_loop(device, plan, scanner) for device in devices]
