"""Response-guided prefix selection.

Filters an announced-prefix pool into scan-worthy prefixes: /28../48
candidates are scanned directly, shorter prefixes get an exploratory
scan whose responding sources pick out active child prefixes, longer
ones are skipped. A candidate survives only if responses keep arriving;
a silent stretch longer than the threshold terminates its scan early and
rejects it. Silence runs on the scan clock (virtual under simnet), never
wall time.
"""

from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

from .engine import BackendError, Icmp6Echo, ProbeResponse, Scanner
from .prefixes import LengthClass, Prefix, classify_length
from .targetgen import TargetSpace, derive_seed, iter_targets
from .wire import ICMP_ECHO_REPLY

DEFAULT_TAU = 120.0
DEFAULT_EXPLORATORY_BUDGET = 1 << 16
DEFAULT_CHILD_LEN = 28


class RgpsError(Exception):
    pass


class ForeignSource(RgpsError):
    """A response source fell outside the scanned parent prefix."""


class RgpsScanError(RgpsError):
    """Scanner failure mid-selection; carries the partial outcome."""

    def __init__(self, message: str, partial: "RgpsOutcome"):
        super().__init__(message)
        self.partial = partial


@dataclass(frozen=True)
class RgpsConfig:
    tau: float = DEFAULT_TAU
    exploratory_budget: int = DEFAULT_EXPLORATORY_BUDGET
    child_len: int = DEFAULT_CHILD_LEN
    #: Probes per candidate scan; None traverses the candidate in full.
    scan_budget: int | None = None
    hop_limit: int = 64

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.exploratory_budget < 1:
            raise ValueError("exploratory_budget must be >= 1")
        if not 28 <= self.child_len <= 48:
            raise ValueError("child_len must be within 28..48")


class RejectReason(enum.Enum):
    TOO_LONG = "TooLong"
    SILENT_TIMEOUT = "SilentTimeout"
    NO_ACTIVE_CHILDREN = "NoActiveChildren"


@dataclass
class RgpsOutcome:
    good: set[Prefix] = field(default_factory=set)
    rejected: list[tuple[Prefix, RejectReason]] = field(default_factory=list)
    derived: dict[Prefix, list[Prefix]] = field(default_factory=dict)


def silence_monitor(
    response_times: Sequence[float], scan_clock: float, tau: float
) -> float | None:
    """First instant at which tau seconds passed with no response.

    Gaps include scan start to first response and last response to scan
    end. Returns the firing instant (gap start + tau), or None if every
    gap stayed within tau.
    """
    last = 0.0
    for t in response_times:
        if t - last > tau:
            return last + tau
        last = t
    if scan_clock - last > tau:
        return last + tau
    return None


def derive_active_subprefixes(
    responses: Iterable[ProbeResponse], parent: Prefix, child_len: int
) -> list[Prefix]:
    """Distinct child prefixes covering at least one response source."""
    mask_shift = 128 - child_len
    seen: set[int] = set()
    for response in responses:
        source = response.source
        if not parent.contains(source):
            raise ForeignSource(
                f"source {source} outside scanned parent {parent}"
            )
        seen.add((source.value >> mask_shift) << mask_shift)
    return [Prefix(bits, child_len, parent.meta) for bits in sorted(seen)]


def _is_echo_reply(response: ProbeResponse) -> bool:
    payload = response.payload
    return getattr(payload, "icmp_type", None) == ICMP_ECHO_REPLY


def _candidate_targets(prefix: Prefix, seed: int, budget: int | None):
    space = TargetSpace.of([prefix])
    targets = iter_targets(space, derive_seed(seed, str(prefix)))
    if budget is None:
        return targets
    return itertools.islice(targets, budget)


def _scan_candidate(
    candidate: Prefix,
    cfg: RgpsConfig,
    scanner: Scanner,
    sink: Callable[[ProbeResponse], None] | None,
) -> bool:
    """Scan one candidate; True if it survived the silence monitor.

    Responses that arrived strictly before the firing instant are still
    reported to the sink (they are discovered devices), but the candidate
    itself is rejected once the monitor fires.
    """
    spec = scanner.spec(Icmp6Echo(hop_limit=cfg.hop_limit))
    run = scanner.scan(
        _candidate_targets(candidate, scanner.seed, cfg.scan_budget), spec
    )
    started = run.now()
    last_activity = started
    fired = False
    for response in run:
        now = run.now()
        if now - last_activity > cfg.tau:
            fired = True
            run.cancel()
            break
        if not response.is_timeout:
            last_activity = now
            if sink is not None and _is_echo_reply(response):
                sink(response)
    if not fired and run.now() - last_activity > cfg.tau:
        fired = True  # trailing silence: the monitor would have fired mid-scan
    return not fired


def select_good_prefixes(
    pool: Sequence[Prefix],
    cfg: RgpsConfig,
    scanner: Scanner,
    sink: Callable[[ProbeResponse], None] | None = None,
) -> RgpsOutcome:
    """Run the selection over a prefix pool.

    `sink` receives every responsive-source observation (deduplication is
    the report layer's business). Scanner failures raise RgpsScanError
    carrying the partial outcome.
    """
    if not pool:
        raise RgpsError("empty prefix pool")
    outcome = RgpsOutcome()
    seen: set[tuple[int, int]] = set()
    try:
        for prefix in pool:
            key = (prefix.bits, prefix.length)
            if key in seen:
                continue
            seen.add(key)

            verdict = classify_length(prefix)
            if verdict is LengthClass.TOO_LONG:
                outcome.rejected.append((prefix, RejectReason.TOO_LONG))
                continue

            if verdict is LengthClass.IN_RANGE:
                candidates = [prefix]
            else:
                exploratory = _exploratory_scan(prefix, cfg, scanner, sink)
                candidates = derive_active_subprefixes(
                    exploratory, prefix, cfg.child_len
                )
                outcome.derived[prefix] = candidates
                if not candidates:
                    outcome.rejected.append(
                        (prefix, RejectReason.NO_ACTIVE_CHILDREN)
                    )
                    continue

            for candidate in candidates:
                if _scan_candidate(candidate, cfg, scanner, sink):
                    outcome.good.add(candidate)
                else:
                    outcome.rejected.append(
                        (candidate, RejectReason.SILENT_TIMEOUT)
                    )
    except BackendError as exc:
        raise RgpsScanError(f"scanner failed: {exc}", outcome) from exc
    return outcome


def _exploratory_scan(
    prefix: Prefix,
    cfg: RgpsConfig,
    scanner: Scanner,
    sink: Callable[[ProbeResponse], None] | None,
) -> list[ProbeResponse]:
    """Capped random sample of a too-short prefix to locate active children."""
    spec = scanner.spec(Icmp6Echo(hop_limit=cfg.hop_limit))
    run = scanner.scan(
        _candidate_targets(prefix, scanner.seed, cfg.exploratory_budget), spec
    )
    hits: list[ProbeResponse] = []
    for response in run:
        if _is_echo_reply(response):
            hits.append(response)
            if sink is not None:
                sink(response)
    return hits
