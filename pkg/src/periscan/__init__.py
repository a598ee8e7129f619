"""periscan: backend-pluggable IPv6 periphery measurement toolkit."""

from .engine import (
    AppPayload,
    AppRequest,
    Icmp,
    Icmp6Echo,
    ProbeResponse,
    ProbeSpec,
    RateLimit,
    Scanner,
    SynAck,
    TcpSyn,
    Timeout,
    run_scan,
)
from .prefixes import (
    Address,
    LengthClass,
    Prefix,
    PrefixMeta,
    Rir,
    classify_length,
    decompose,
    parse_prefix,
    slash64_of,
)
from .targetgen import EXHAUSTED, TargetSpace, iter_targets, new_permutation, next_target

__version__ = "0.1.0"

__all__ = [
    "Address",
    "AppPayload",
    "AppRequest",
    "EXHAUSTED",
    "Icmp",
    "Icmp6Echo",
    "LengthClass",
    "Prefix",
    "PrefixMeta",
    "ProbeResponse",
    "ProbeSpec",
    "RateLimit",
    "Rir",
    "Scanner",
    "SynAck",
    "TargetSpace",
    "TcpSyn",
    "Timeout",
    "classify_length",
    "decompose",
    "iter_targets",
    "new_permutation",
    "next_target",
    "parse_prefix",
    "run_scan",
    "slash64_of",
    "__version__",
]
