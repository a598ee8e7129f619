"""Canonical IPv6 prefix and address model.

Prefixes are stored as a 128-bit integer with all host bits zeroed plus a
length; provenance (ASN, ISP, region, registry) rides along as optional
metadata and is never consulted by the arithmetic here.
"""

from __future__ import annotations

import enum
import ipaddress
from dataclasses import dataclass, field

MAX_BITS = 128
_FULL = (1 << MAX_BITS) - 1

# Scan-worthiness gate: /28 through /48 are scannable as-is, shorter
# prefixes need decomposition, longer ones are skipped.
MIN_SCAN_LENGTH = 28
MAX_SCAN_LENGTH = 48


class PrefixError(ValueError):
    """Base class for prefix parse/arithmetic failures."""


class MalformedPrefix(PrefixError):
    """The textual form is not `<ipv6-literal>/<len>`."""


class InvalidLength(PrefixError):
    """Prefix length outside 0..128 or inconsistent with the parent."""


class Rir(enum.Enum):
    AFRINIC = "AFRINIC"
    APNIC = "APNIC"
    ARIN = "ARIN"
    LACNIC = "LACNIC"
    RIPE = "RIPE"


#: Report bucket for registry strings outside the five known RIRs.
OTHER_RIR = "OTHER"

_RIR_ALIASES = {
    "AFRINIC": Rir.AFRINIC,
    "APNIC": Rir.APNIC,
    "ARIN": Rir.ARIN,
    "LACNIC": Rir.LACNIC,
    "RIPE": Rir.RIPE,
    "RIPE NCC": Rir.RIPE,
    "RIPENCC": Rir.RIPE,
}


def parse_rir(text: str) -> Rir | None:
    """Map a registry string to the closed RIR enum, or None if unknown."""
    return _RIR_ALIASES.get(text.strip().upper())


@dataclass(frozen=True)
class PrefixMeta:
    """Provenance carried opaquely from the announced-prefix input file."""

    asn: int | None = None
    isp: str | None = None
    region: str | None = None
    rir: Rir | None = None
    #: Raw registry string as read from the input; kept so unknown
    #: registries survive round-trips and can be grouped as OTHER.
    rir_text: str | None = None

    def rir_group(self) -> str:
        if self.rir is not None:
            return self.rir.value
        if self.rir_text:
            return OTHER_RIR
        return OTHER_RIR


@dataclass(frozen=True, order=True)
class Address:
    """A single IPv6 address as a 128-bit unsigned integer."""

    value: int

    def __post_init__(self) -> None:
        if not 0 <= self.value <= _FULL:
            raise PrefixError(f"address value out of range: {self.value}")

    @classmethod
    def parse(cls, text: str) -> "Address":
        try:
            return cls(int(ipaddress.IPv6Address(text)))
        except (ipaddress.AddressValueError, ValueError) as exc:
            raise MalformedPrefix(f"bad IPv6 address {text!r}: {exc}") from exc

    def __str__(self) -> str:
        return str(ipaddress.IPv6Address(self.value))


def _host_mask(length: int) -> int:
    return (1 << (MAX_BITS - length)) - 1


@dataclass(frozen=True)
class Prefix:
    """An IPv6 prefix in canonical form (host bits zero)."""

    bits: int
    length: int
    meta: PrefixMeta | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        if not 0 <= self.length <= MAX_BITS:
            raise InvalidLength(f"prefix length {self.length} outside 0..128")
        if not 0 <= self.bits <= _FULL:
            raise PrefixError(f"prefix bits out of range")
        if self.bits & _host_mask(self.length):
            raise PrefixError(
                f"non-canonical prefix: host bits set in {self.bits:#x}/{self.length}"
            )

    @property
    def size(self) -> int:
        """Number of addresses covered."""
        return 1 << (MAX_BITS - self.length)

    def first_address(self) -> Address:
        return Address(self.bits)

    def last_address(self) -> Address:
        return Address(self.bits | _host_mask(self.length))

    def address_at(self, offset: int) -> Address:
        if not 0 <= offset < self.size:
            raise PrefixError(f"offset {offset} outside prefix of size {self.size}")
        return Address(self.bits + offset)

    def contains(self, addr: Address) -> bool:
        return (addr.value & ~_host_mask(self.length) & _FULL) == self.bits

    def contains_prefix(self, other: "Prefix") -> bool:
        return other.length >= self.length and self.contains(Address(other.bits))

    def with_meta(self, meta: PrefixMeta | None) -> "Prefix":
        return Prefix(self.bits, self.length, meta)

    def __str__(self) -> str:
        return f"{ipaddress.IPv6Address(self.bits)}/{self.length}"

    def __repr__(self) -> str:
        return f"Prefix({str(self)})"


def parse_prefix(text: str, meta: PrefixMeta | None = None) -> Prefix:
    """Parse `<ipv6-literal>/<len>` into a canonical Prefix.

    Host bits below the prefix length are masked to zero rather than
    rejected; BGP dumps routinely contain non-canonical entries.
    """
    body = text.strip()
    if "/" not in body:
        raise MalformedPrefix(f"missing '/<len>' in {body!r}")
    literal, _, lenpart = body.rpartition("/")
    try:
        length = int(lenpart)
    except ValueError as exc:
        raise MalformedPrefix(f"bad prefix length in {body!r}") from exc
    if length < 0 or length > MAX_BITS:
        raise InvalidLength(f"prefix length {length} outside 0..128")
    try:
        value = int(ipaddress.IPv6Address(literal))
    except (ipaddress.AddressValueError, ValueError) as exc:
        raise MalformedPrefix(f"bad IPv6 literal {literal!r}: {exc}") from exc
    return Prefix(value & ~_host_mask(length) & _FULL, length, meta)


def decompose(parent: Prefix, child_len: int) -> list[Prefix]:
    """Split a prefix into all children of the given length, ascending.

    Children inherit the parent's meta. `decompose(p, p.length)` is `[p]`.
    """
    if child_len < parent.length:
        raise InvalidLength(
            f"child length {child_len} shorter than parent /{parent.length}"
        )
    if child_len > MAX_BITS:
        raise InvalidLength(f"child length {child_len} exceeds 128")
    count = 1 << (child_len - parent.length)
    stride = 1 << (MAX_BITS - child_len)
    return [
        Prefix(parent.bits + i * stride, child_len, parent.meta) for i in range(count)
    ]


def slash64_of(addr: Address) -> Prefix:
    """The /64 containing an address (low 64 bits zeroed)."""
    return Prefix(addr.value & ~((1 << 64) - 1) & _FULL, 64)


class LengthClass(enum.Enum):
    IN_RANGE = "InRange"
    TOO_SHORT = "TooShort"
    TOO_LONG = "TooLong"


def classify_length(prefix: Prefix) -> LengthClass:
    """Gate a prefix by scan-worthiness of its length (/28../48 inclusive)."""
    if prefix.length < MIN_SCAN_LENGTH:
        return LengthClass.TOO_SHORT
    if prefix.length > MAX_SCAN_LENGTH:
        return LengthClass.TOO_LONG
    return LengthClass.IN_RANGE


def parse_pool_line(line: str) -> Prefix | None:
    """Parse one `prefix,asn,isp,region,rir` record; None for blank/comment."""
    body = line.strip()
    if not body or body.startswith("#"):
        return None
    fields = [f.strip() for f in body.split(",")]
    fields += [""] * (5 - len(fields))
    prefix_text, asn_text, isp, region, rir_text = fields[:5]
    asn = int(asn_text) if asn_text else None
    meta = PrefixMeta(
        asn=asn,
        isp=isp or None,
        region=region or None,
        rir=parse_rir(rir_text) if rir_text else None,
        rir_text=rir_text or None,
    )
    return parse_prefix(prefix_text, meta)


def load_pool(lines) -> list[Prefix]:
    """Load an announced-prefix pool, dropping exact duplicates.

    Nested prefixes are distinct pool entries and are preserved.
    """
    seen: set[tuple[int, int]] = set()
    pool: list[Prefix] = []
    for lineno, line in enumerate(lines, 1):
        try:
            prefix = parse_pool_line(line)
        except PrefixError as exc:
            raise PrefixError(f"line {lineno}: {exc}") from exc
        if prefix is None:
            continue
        key = (prefix.bits, prefix.length)
        if key in seen:
            continue
        seen.add(key)
        pool.append(prefix)
    return pool


def render_pool_line(prefix: Prefix, extra: str | None = None) -> str:
    """Render a prefix back to the pool file format (plus optional column)."""
    meta = prefix.meta or PrefixMeta()
    rir = meta.rir.value if meta.rir else (meta.rir_text or "")
    fields = [
        str(prefix),
        str(meta.asn) if meta.asn is not None else "",
        meta.isp or "",
        meta.region or "",
        rir,
    ]
    if extra is not None:
        fields.append(extra)
    return ",".join(fields)
