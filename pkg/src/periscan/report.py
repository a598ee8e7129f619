"""Deduplication, aggregation and rendering of measurement results.

Aggregates reproduce the table shapes used throughout: per-group counts
with percentages under one of two denominators (the group's own total or
the global total), rounded half-up to two decimals. Results persist as
append-only NDJSON with a schema tag per record; aggregation reads those
records back as plain dicts.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from enum import Enum
from typing import Iterable, Mapping, Sequence

from filelock import FileLock

from .engine import ProbeResponse
from .prefixes import Address, Prefix, PrefixMeta, slash64_of

SCHEMA_DEVICE = "device@1"
SCHEMA_LOOP = "loop@1"
SCHEMA_EXPOSURE = "exposure@1"
SCHEMA_HLEV = "hlev@1"

#: IPv4-mapped IPv6 prefix (::ffff:0:0/96) used to embed v4 targets.
V4_MAPPED_BASE = 0xFFFF << 32


def round_half_up(value: Decimal | float | int | str, places: int) -> Decimal:
    # Floats go through their shortest repr so 1.005 means the decimal
    # 1.005, not its slightly-smaller binary neighbour.
    if isinstance(value, float):
        value = str(value)
    quantum = Decimal(1).scaleb(-places)
    return Decimal(value).quantize(quantum, rounding=ROUND_HALF_UP)


def percent(count: int, denominator: int, places: int = 2) -> float:
    """Half-up percentage; zero denominators yield zero."""
    if denominator <= 0:
        return 0.0
    exact = Decimal(count) * 100 / Decimal(denominator)
    return float(round_half_up(exact, places))


def humanize(count: int, unit: str | None = None) -> str:
    """Render counts the way the summary tables do (281.92M, 87.40k)."""
    if unit is None:
        unit = "M" if count >= 10**6 else "k" if count >= 10**3 else ""
    if unit == "M":
        return f"{round_half_up(Decimal(count) / 10**6, 2)}M"
    if unit == "k":
        return f"{round_half_up(Decimal(count) / 10**3, 2)}k"
    return str(count)


def address_family(addr: Address) -> str:
    """v4 for IPv4-mapped addresses, else v6."""
    return "v4" if (addr.value >> 32) == 0xFFFF else "v6"


@dataclass(frozen=True)
class PeripheryDevice:
    address: Address
    slash64: Prefix
    first_seen: float
    provenance: PrefixMeta | None = None

    def __post_init__(self):
        if self.slash64 != slash64_of(self.address):
            raise ValueError("slash64 must be the /64 containing the address")


def dedupe_devices(
    responses: Iterable[ProbeResponse],
    provenance: PrefixMeta | None = None,
) -> list[PeripheryDevice]:
    """One device per distinct responding source, earliest arrival first.

    The response stream is in arrival order, so the first sighting of a
    source fixes first_seen.
    """
    seen: dict[int, PeripheryDevice] = {}
    for response in responses:
        if response.is_timeout:
            continue
        source = response.source
        if source.value not in seen:
            seen[source.value] = PeripheryDevice(
                address=source,
                slash64=slash64_of(source),
                first_seen=response.arrived,
                provenance=provenance,
            )
    return sorted(seen.values(), key=lambda d: d.first_seen)


class PercentDef(Enum):
    OF_GROUP_TOTAL = "OfGroupTotal"
    OF_GLOBAL_TOTAL = "OfGlobalTotal"


@dataclass(frozen=True)
class AggregateRow:
    key: str
    count: int
    denominator: int
    percent: float

    @classmethod
    def from_counts(cls, key: str, count: int, denominator: int,
                    places: int = 2) -> "AggregateRow":
        return cls(key, count, denominator, percent(count, denominator, places))


GROUP_KEYS = ("rir", "region", "asn", "isp", "service", "vendor", "tool")


def aggregate(
    records: Sequence[Mapping],
    group_by: str,
    percent_def: PercentDef = PercentDef.OF_GLOBAL_TOTAL,
    hit_field: str | None = None,
    places: int = 2,
) -> list[AggregateRow]:
    """Group records and compute count/denominator/percent rows.

    A record counts when `hit_field` (if given) is truthy; the
    denominator is either the group's record total or the global counted
    total, per `percent_def`. Rows sort by descending count, then key.
    """
    if group_by not in GROUP_KEYS:
        raise KeyError(f"unknown group key {group_by!r}")
    group_total: dict[str, int] = {}
    group_hits: dict[str, int] = {}
    for record in records:
        key = str(record.get(group_by, "") or "OTHER")
        group_total[key] = group_total.get(key, 0) + 1
        if hit_field is None or record.get(hit_field):
            group_hits[key] = group_hits.get(key, 0) + 1
    global_hits = sum(group_hits.values())
    rows = []
    for key in group_total:
        count = group_hits.get(key, 0)
        denominator = (
            group_total[key]
            if percent_def is PercentDef.OF_GROUP_TOTAL
            else global_hits
        )
        rows.append(AggregateRow(key, count, denominator, percent(count, denominator, places)))
    rows.sort(key=lambda r: (-r.count, r.key))
    return rows


def slash64_share(devices: Sequence[PeripheryDevice]) -> tuple[int, float]:
    """(distinct /64 count, share of devices sitting in distinct /64s).

    The share is a one-decimal percentage, the granularity the device
    tables use.
    """
    if not devices:
        return 0, 0.0
    distinct = len({d.slash64.bits for d in devices})
    return distinct, percent(distinct, len(devices), places=1)


class ReportFormat(Enum):
    PLAIN_TABLE = "table"
    CSV = "csv"
    NDJSON = "ndjson"


def render_report(rows: Sequence[AggregateRow], fmt: ReportFormat,
                  group_name: str = "group") -> bytes:
    """Byte-deterministic rendering of aggregate rows."""
    if fmt is ReportFormat.CSV:
        import csv as _csv
        import io

        buf = io.StringIO()
        writer = _csv.writer(buf, lineterminator="\r\n")
        writer.writerow([group_name, "count", "denominator", "percent"])
        for row in rows:
            writer.writerow([row.key, row.count, row.denominator, f"{row.percent:.2f}"])
        return buf.getvalue().encode("utf-8")
    if fmt is ReportFormat.NDJSON:
        lines = [
            json.dumps(
                {
                    "schema": "aggregate@1",
                    "key": row.key,
                    "count": row.count,
                    "denominator": row.denominator,
                    "percent": row.percent,
                },
                sort_keys=True,
                separators=(",", ":"),
            )
            for row in rows
        ]
        return ("\n".join(lines) + "\n").encode("utf-8") if lines else b""
    width = max([len(group_name)] + [len(r.key) for r in rows]) + 2
    out = [f"{group_name:<{width}}{'#':>14}{'human':>10}{'%':>9}"]
    for row in rows:
        out.append(
            f"{row.key:<{width}}{row.count:>14}{humanize(row.count):>10}"
            f"{row.percent:>8.2f}%"
        )
    return ("\n".join(out) + "\n").encode("utf-8")


# NDJSON persistence.


def write_ndjson(path, records: Iterable[Mapping], schema: str) -> int:
    """Append records under an exclusive lock; returns the record count."""
    lines = []
    for record in records:
        doc = {"schema": schema}
        doc.update(record)
        lines.append(json.dumps(doc, sort_keys=True, separators=(",", ":")))
    if not lines:
        return 0
    with FileLock(str(path) + ".lock"):
        with open(path, "a", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")
    return len(lines)


def read_ndjson(path) -> list[dict]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            body = line.strip()
            if body:
                records.append(json.loads(body))
    return records


def device_record(device: PeripheryDevice) -> dict:
    meta = device.provenance or PrefixMeta()
    return {
        "address": str(device.address),
        "slash64": str(device.slash64),
        "first_seen": device.first_seen,
        "asn": meta.asn,
        "isp": meta.isp,
        "region": meta.region,
        "rir": meta.rir_group() if (meta.rir or meta.rir_text) else None,
    }


def loop_record(evidence) -> dict:
    return {
        "device": str(evidence.device),
        "verdict": evidence.verdict.value,
        "vulnerable": evidence.verdict.value == "Confirmed",
        "observations": [
            {
                "hop_limit_sent": obs.hop_limit_sent,
                "icmp_type": obs.icmp_type,
                "icmp_code": obs.icmp_code,
                "reporter": str(obs.reporter),
            }
            for obs in evidence.observations
        ],
        "error": evidence.error,
    }


def exposure_record(record) -> dict:
    return {
        "device": str(record.device),
        "service": record.service.name,
        "responsive": record.responsive,
        "banner": record.banner.decode("latin-1") if record.banner else "",
        "product": record.extracted.product if record.extracted else None,
        "version": record.extracted.version_pattern if record.extracted else None,
        "vendor": record.vendor,
        "cves": list(record.cves),
    }


def hlev_record(candidate) -> dict:
    return {
        "address": str(candidate.address),
        "family": address_family(candidate.address),
        "port": candidate.port,
        "tool": candidate.tool,
        "stage": int(candidate.stage),
        "evidence": candidate.evidence,
    }


def parse_device_lines(records: Iterable[dict]) -> list[Address]:
    return [Address.parse(r["address"]) for r in records]
