"""Hierarchical verification of exposed LLM deployment tools.

Three-stage funnel per tool: a TCP SYN sweep over the tool's default
port records reachable endpoints (stage 0), an HTTP request with default
settings is matched against tool-specific response signatures (stage 1),
and the tool's model-listing endpoint is queried for enumerable model
metadata cross-referenced with a known-model list (stage 2). Candidate
counts shrink monotonically through the stages; a tool without a
confirmation endpoint (LobeChat) terminates at stage 1 and never enters
the verified-exposed set.

Signature semantics:
  body      every whitespace-separated token of the expected value must
            appear in the first 16 KiB of the body
  grep      substring over the whole response (status line, headers, body)
  <header>  exact case-insensitive header value match after collapsing
            internal whitespace
"""

from __future__ import annotations

import csv
import enum
import io
import json
import re
from dataclasses import dataclass, field
from importlib import resources
from typing import Iterable, Sequence

from . import appproto
from .engine import AppPayload, AppRequest, ProbeResponse, Scanner, SynAck, TcpSyn
from .prefixes import Address

BODY_MATCH_LIMIT = 16 * 1024

TOOL_PORTS = {
    "Ollama": 11434,
    "LMStudio": 1234,
    "GPT4All": 4891,
    "JanAi": 1337,
    "VLLM": 8000,
    "Xinference": 9997,
    "LobeChat": 3210,
}


class HlevError(Exception):
    pass


@dataclass(frozen=True)
class MatchRule:
    field: str
    value: str

    def matches(self, payload: AppPayload) -> bool:
        if self.field == "body":
            body = payload.body_prefix[:BODY_MATCH_LIMIT].decode("latin-1", "replace")
            return all(token in body for token in self.value.split())
        if self.field == "grep":
            whole = (
                payload.status_line
                + "".join(f"{k}: {v}" for k, v in payload.headers)
                + payload.body_prefix[:BODY_MATCH_LIMIT].decode("latin-1", "replace")
            )
            return self.value in whole
        observed = payload.header(self.field)
        if observed is None:
            return False
        collapse = re.sub(r"\s+", "", observed)
        return collapse.lower() == re.sub(r"\s+", "", self.value).lower()


@dataclass(frozen=True)
class ToolProfile:
    tool: str
    port: int
    match1: MatchRule
    match2: MatchRule | None = None
    confirm_path: str | None = None
    confirm_kind: str | None = None

    def __post_init__(self):
        expected = TOOL_PORTS.get(self.tool)
        if expected is not None and self.port != expected:
            raise HlevError(f"{self.tool} must use port {expected}, got {self.port}")

    def signature_matches(self, payload: AppPayload) -> bool:
        if not self.match1.matches(payload):
            return False
        if self.match2 is not None and not self.match2.matches(payload):
            return False
        return True


def load_signature_table(text: str) -> list[ToolProfile]:
    """Parse `tool,port,match1_field,match1_value,match2_field,match2_value,
    confirm_path,confirm_kind` records."""
    profiles = []
    for row in csv.reader(io.StringIO(text)):
        if not row or row[0].lstrip().startswith("#"):
            continue
        row += [""] * (8 - len(row))
        tool, port, f1, v1, f2, v2, confirm_path, confirm_kind = row[:8]
        profiles.append(
            ToolProfile(
                tool=tool,
                port=int(port),
                match1=MatchRule(f1, v1),
                match2=MatchRule(f2, v2) if f2 else None,
                confirm_path=confirm_path or None,
                confirm_kind=confirm_kind or None,
            )
        )
    return profiles


def dump_signature_table(profiles: Sequence[ToolProfile]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    for p in profiles:
        writer.writerow(
            [
                p.tool,
                p.port,
                p.match1.field,
                p.match1.value,
                p.match2.field if p.match2 else "",
                p.match2.value if p.match2 else "",
                p.confirm_path or "",
                p.confirm_kind or "",
            ]
        )
    return buf.getvalue()


def default_signature_table() -> list[ToolProfile]:
    return load_signature_table(default_signature_bytes().decode("utf-8"))


def default_signature_bytes() -> bytes:
    return resources.files("periscan.data").joinpath("signatures.csv").read_bytes()


def load_known_models(text: str) -> list[str]:
    names = []
    for line in text.splitlines():
        body = line.strip()
        if body and not body.startswith("#"):
            names.append(body)
    return names


def default_known_models() -> list[str]:
    text = resources.files("periscan.data").joinpath("known_models.txt").read_text("utf-8")
    return load_known_models(text)


class Stage(enum.IntEnum):
    RESPONSE0 = 0
    RESPONSE1 = 1
    RESPONSE2 = 2


@dataclass
class HlevCandidate:
    address: Address
    port: int
    tool: str
    stage: Stage
    evidence: dict = field(default_factory=dict)


class RejectReason(enum.Enum):
    NO_HTTP = "NoHttp"
    SIGNATURE_MISMATCH = "SignatureMismatch"
    AUTH_REQUIRED = "AuthRequired"
    UNPARSEABLE = "Unparseable"
    NO_KNOWN_MODELS = "NoKnownModels"


@dataclass(frozen=True)
class Rejection:
    address: Address
    port: int
    tool: str
    stage: Stage
    reason: RejectReason


@dataclass
class FunnelStats:
    probed: int = 0
    r0: int = 0
    r1: int = 0
    r2: int = 0

    def monotone(self) -> bool:
        return self.r2 <= self.r1 <= self.r0 <= self.probed


def stage0_syn_sweep(
    addresses: Iterable[Address],
    profiles: Sequence[ToolProfile],
    scanner: Scanner,
    stats: dict[str, FunnelStats] | None = None,
) -> list[HlevCandidate]:
    """SYN probe every address on every tool port; SYN-ACK makes a candidate."""
    if not profiles:
        raise HlevError("no tool profiles")
    targets = list(addresses)
    candidates: list[HlevCandidate] = []
    for profile in profiles:
        if stats is not None:
            stats.setdefault(profile.tool, FunnelStats()).probed += len(targets)
        if not targets:
            continue
        run = scanner.scan(targets, scanner.spec(TcpSyn(port=profile.port)))
        for response in run:
            if isinstance(response.payload, SynAck):
                candidates.append(
                    HlevCandidate(
                        address=response.target,
                        port=profile.port,
                        tool=profile.tool,
                        stage=Stage.RESPONSE0,
                        evidence={"syn_ack": True},
                    )
                )
                if stats is not None:
                    stats[profile.tool].r0 += 1
    candidates.sort(key=lambda c: (c.port, c.address.value))
    return candidates


def _http_exchange(
    scanner: Scanner, address: Address, port: int, path: str
) -> AppPayload | None:
    request = AppRequest(
        port=port,
        request=appproto.build_http_request(path),
        read_limit=BODY_MATCH_LIMIT,
    )
    payload = None
    for response in scanner.scan([address], scanner.spec(request)):
        if isinstance(response.payload, AppPayload):
            payload = response.payload
    return payload


def stage1_http_verify(
    candidate: HlevCandidate, profile: ToolProfile, scanner: Scanner
) -> HlevCandidate | Rejection:
    """Promote a reachable endpoint only if the tool signature matches."""
    if candidate.stage is not Stage.RESPONSE0 or candidate.port != profile.port:
        raise HlevError("stage-1 input must be a Response 0 candidate for this tool")
    payload = _http_exchange(scanner, candidate.address, candidate.port, "/")
    if payload is None or not payload.status_line.startswith("HTTP/"):
        return Rejection(
            candidate.address, candidate.port, profile.tool, Stage.RESPONSE1,
            RejectReason.NO_HTTP,
        )
    if not profile.signature_matches(payload):
        return Rejection(
            candidate.address, candidate.port, profile.tool, Stage.RESPONSE1,
            RejectReason.SIGNATURE_MISMATCH,
        )
    evidence = dict(candidate.evidence)
    evidence["signature"] = profile.match1.value
    return HlevCandidate(
        address=candidate.address,
        port=candidate.port,
        tool=profile.tool,
        stage=Stage.RESPONSE1,
        evidence=evidence,
    )


def _extract_model_names(doc) -> list[str]:
    """Model identifiers from the list shapes the tools serve."""
    names: list[str] = []
    if isinstance(doc, dict):
        items = doc.get("models", doc.get("data", []))
        if isinstance(items, list):
            for item in items:
                if isinstance(item, str):
                    names.append(item)
                elif isinstance(item, dict):
                    name = item.get("name") or item.get("id") or item.get("model")
                    if isinstance(name, str):
                        names.append(name)
    elif isinstance(doc, list):
        names = [item for item in doc if isinstance(item, str)]
    return names


def _status_code(payload: AppPayload) -> int:
    try:
        return int(payload.status_line.split(" ", 2)[1])
    except (IndexError, ValueError):
        return 0


def stage2_model_confirm(
    candidate: HlevCandidate,
    profile: ToolProfile,
    scanner: Scanner,
    known_models: Sequence[str] | None = None,
) -> HlevCandidate | Rejection:
    """Query the model-list endpoint; promotion needs recognizable models.

    A 401/403 answer is the properly-secured outcome and rejects the
    candidate as AuthRequired.
    """
    if candidate.stage is not Stage.RESPONSE1:
        raise HlevError("stage-2 input must be a Response 1 candidate")
    if profile.confirm_path is None:
        return candidate  # no confirmation interface: stays Response 1
    if known_models is None:
        known_models = default_known_models()
    payload = _http_exchange(
        scanner, candidate.address, candidate.port, profile.confirm_path
    )
    if payload is None or not payload.status_line.startswith("HTTP/"):
        return Rejection(
            candidate.address, candidate.port, profile.tool, Stage.RESPONSE2,
            RejectReason.NO_HTTP,
        )
    status = _status_code(payload)
    if status in (401, 403):
        return Rejection(
            candidate.address, candidate.port, profile.tool, Stage.RESPONSE2,
            RejectReason.AUTH_REQUIRED,
        )
    try:
        doc = json.loads(payload.body_prefix.decode("utf-8"))
    except (ValueError, UnicodeDecodeError):
        return Rejection(
            candidate.address, candidate.port, profile.tool, Stage.RESPONSE2,
            RejectReason.UNPARSEABLE,
        )
    names = _extract_model_names(doc)
    recognized = [
        name
        for name in names
        if any(known.lower() in name.lower() for known in known_models)
    ]
    if not names or not recognized:
        return Rejection(
            candidate.address, candidate.port, profile.tool, Stage.RESPONSE2,
            RejectReason.NO_KNOWN_MODELS,
        )
    evidence = dict(candidate.evidence)
    evidence["models"] = names
    evidence["recognized"] = recognized
    return HlevCandidate(
        address=candidate.address,
        port=candidate.port,
        tool=profile.tool,
        stage=Stage.RESPONSE2,
        evidence=evidence,
    )


def run_hlev(
    addresses: Iterable[Address],
    profiles: Sequence[ToolProfile],
    scanner: Scanner,
    known_models: Sequence[str] | None = None,
) -> tuple[list[HlevCandidate], dict[str, FunnelStats]]:
    """Compose the funnel; returns (verified exposed set, per-tool stats)."""
    by_port = {p.port: p for p in profiles}
    stats: dict[str, FunnelStats] = {p.tool: FunnelStats() for p in profiles}
    verified: list[HlevCandidate] = []
    reachable = stage0_syn_sweep(addresses, profiles, scanner, stats)
    for candidate in reachable:
        profile = by_port[candidate.port]
        promoted = stage1_http_verify(candidate, profile, scanner)
        if isinstance(promoted, Rejection):
            continue
        stats[profile.tool].r1 += 1
        if profile.confirm_path is None:
            continue  # terminates at Response 1 (no API confirmation column)
        confirmed = stage2_model_confirm(promoted, profile, scanner, known_models)
        if isinstance(confirmed, Rejection):
            continue
        stats[profile.tool].r2 += 1
        verified.append(confirmed)
    for tool_stats in stats.values():
        assert tool_stats.monotone(), "funnel counts must shrink stage by stage"
    return verified, stats
