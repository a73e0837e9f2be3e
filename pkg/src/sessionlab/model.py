"""Shared domain types: log entries, sessions, session metadata and labels."""
from __future__ import annotations

import hashlib
import json
from collections import Counter
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum
from functools import cached_property
from typing import Iterable, Iterator, Optional, Sequence


class SourceType(str, Enum):
    SYSLOG = "syslog"
    APACHE_ACCESS = "apache_access"
    AUTH = "auth"
    DNS = "dns"
    AUDIT = "audit"
    SURICATA = "suricata"
    RAW = "raw"


class AttackTag(str, Enum):
    RECONNAISSANCE = "reconnaissance"
    COMPROMISE = "compromise"
    LATERAL_MOVEMENT = "lateral_movement"
    DATA_EXFILTRATION = "data_exfiltration"


class ParseStatus(str, Enum):
    PARSED = "parsed"
    FALLBACK_RAW = "fallback_raw"


class Label(str, Enum):
    NORMAL = "normal"
    ANOMALOUS = "anomalous"


class SchemaError(ValueError):
    """Raised when a JSON record does not match the expected layout."""


def format_ts(ts: datetime) -> str:
    """RFC 3339 UTC with microseconds, e.g. ``2022-01-12T08:30:01.000000Z``."""
    return ts.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%S.%fZ")


def parse_ts(text: str) -> datetime:
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    ts = datetime.fromisoformat(text)
    if ts.tzinfo is None:
        raise SchemaError(f"timestamp without offset: {text!r}")
    return ts.astimezone(timezone.utc)


def utc(ts: datetime) -> datetime:
    if ts.tzinfo is None:
        return ts.replace(tzinfo=timezone.utc)
    return ts.astimezone(timezone.utc)


@dataclass(frozen=True)
class LogEntry:
    timestamp: datetime
    host: str
    source_type: SourceType
    message: str
    process: Optional[str] = None
    user: Optional[str] = None
    attack_tags: frozenset = field(default_factory=frozenset)
    parse_status: ParseStatus = ParseStatus.PARSED

    def __post_init__(self):
        if self.timestamp.tzinfo is None:
            raise ValueError("timestamp must be timezone-aware")
        if self.timestamp.utcoffset().total_seconds() != 0:
            object.__setattr__(self, "timestamp", self.timestamp.astimezone(timezone.utc))
        object.__setattr__(self, "source_type", SourceType(self.source_type))
        object.__setattr__(self, "parse_status", ParseStatus(self.parse_status))
        object.__setattr__(self, "attack_tags", frozenset(AttackTag(t) for t in self.attack_tags))

    @property
    def key(self) -> "ContextKey":
        return ContextKey(self.host, self.process, self.user)

    def to_dict(self) -> dict:
        return {
            "timestamp": format_ts(self.timestamp),
            "host": self.host,
            "source_type": self.source_type.value,
            "process": self.process,
            "user": self.user,
            "message": self.message,
            "attack_tags": sorted(t.value for t in self.attack_tags),
            "parse_status": self.parse_status.value,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LogEntry":
        try:
            return cls(
                timestamp=parse_ts(d["timestamp"]),
                host=d["host"],
                source_type=SourceType(d["source_type"]),
                process=d.get("process"),
                user=d.get("user"),
                message=d["message"],
                attack_tags=frozenset(d.get("attack_tags", ())),
                parse_status=ParseStatus(d["parse_status"]),
            )
        except (KeyError, ValueError, TypeError) as exc:
            raise SchemaError(f"invalid LogEntry record: {exc}") from exc


@dataclass(frozen=True, order=True)
class ContextKey:
    """Session grouping key. ``None`` process/user is an explicit value of its own."""

    host: str
    process: Optional[str] = None
    user: Optional[str] = None

    def sort_key(self) -> tuple:
        # None sorts before any string
        return (self.host, self.process is not None, self.process or "",
                self.user is not None, self.user or "")


@dataclass(frozen=True)
class SessionMeta:
    duration_seconds: float
    host: str
    hour: int
    is_weekend: bool
    log_types: dict
    parsing_stats: dict

    def to_dict(self) -> dict:
        return {
            "duration_seconds": self.duration_seconds,
            "host": self.host,
            "hour": self.hour,
            "is_weekend": self.is_weekend,
            "log_types": dict(self.log_types),
            "parsing_stats": {k: dict(v) for k, v in self.parsing_stats.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SessionMeta":
        try:
            return cls(
                duration_seconds=float(d["duration_seconds"]),
                host=d["host"],
                hour=int(d["hour"]),
                is_weekend=bool(d["is_weekend"]),
                log_types=dict(d["log_types"]),
                parsing_stats={k: dict(v) for k, v in d["parsing_stats"].items()},
            )
        except (KeyError, ValueError, TypeError, AttributeError) as exc:
            raise SchemaError(f"invalid SessionMeta record: {exc}") from exc


@dataclass(frozen=True)
class Session:
    entries: tuple
    meta: SessionMeta
    label: Label

    def __post_init__(self):
        if not self.entries:
            raise ValueError("a session needs at least one entry")
        object.__setattr__(self, "entries", tuple(self.entries))
        object.__setattr__(self, "label", Label(self.label))

    @classmethod
    def from_entries(cls, entries: Sequence[LogEntry]) -> "Session":
        return cls(tuple(entries), derive_meta(entries), derive_label(entries))

    @property
    def key(self) -> ContextKey:
        return self.entries[0].key

    @property
    def start(self) -> datetime:
        return self.entries[0].timestamp

    @property
    def end(self) -> datetime:
        return self.entries[-1].timestamp

    @property
    def is_anomalous(self) -> bool:
        return self.label is Label.ANOMALOUS

    @cached_property
    def session_id(self) -> str:
        k = self.key
        blob = json.dumps([k.host, k.process, k.user, format_ts(self.start)])
        return hashlib.sha1(blob.encode()).hexdigest()[:16]

    def tags(self) -> frozenset:
        out = set()
        for e in self.entries:
            out |= e.attack_tags
        return frozenset(out)

    def to_dict(self) -> dict:
        return {
            "entries": [e.to_dict() for e in self.entries],
            "meta": self.meta.to_dict(),
            "label": self.label.value,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Session":
        try:
            entries = tuple(LogEntry.from_dict(e) for e in d["entries"])
            return cls(entries, SessionMeta.from_dict(d["meta"]), Label(d["label"]))
        except (KeyError, ValueError, TypeError) as exc:
            if isinstance(exc, SchemaError):
                raise
            raise SchemaError(f"invalid Session record: {exc}") from exc


def derive_label(entries: Sequence[LogEntry]) -> Label:
    if not entries:
        raise ValueError("cannot label an empty session")
    if any(e.attack_tags for e in entries):
        return Label.ANOMALOUS
    return Label.NORMAL


def derive_meta(entries: Sequence[LogEntry]) -> SessionMeta:
    if not entries:
        raise ValueError("cannot describe an empty session")
    key = entries[0].key
    for i in range(1, len(entries)):
        if entries[i].timestamp < entries[i - 1].timestamp:
            raise ValueError(f"entries not sorted by timestamp at index {i}")
        if entries[i].key != key:
            raise ValueError(f"entry {i} has context key {entries[i].key}, expected {key}")

    first = entries[0].timestamp
    duration = (entries[-1].timestamp - first).total_seconds()
    log_types = Counter(e.source_type.value for e in entries)
    stats: dict = {}
    for e in entries:
        per = stats.setdefault(e.source_type.value, {"parsed": 0, "fallback_raw": 0})
        per[e.parse_status.value] += 1
    return SessionMeta(
        duration_seconds=duration,
        host=entries[0].host,
        hour=first.hour,
        is_weekend=first.weekday() >= 5,
        log_types=dict(sorted(log_types.items())),
        parsing_stats=dict(sorted(stats.items())),
    )


def dump_jsonl(records: Iterable, path) -> int:
    """Write objects exposing ``to_dict`` one per line. Returns the count."""
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_dict(), ensure_ascii=False, sort_keys=True))
            fh.write("\n")
            n += 1
    return n


def iter_jsonl(path) -> Iterator[dict]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"{path}:{lineno}: not valid JSON ({exc.msg})") from exc


def load_entries(path) -> list:
    return [LogEntry.from_dict(d) for d in iter_jsonl(path)]


def load_sessions(path) -> list:
    return [Session.from_dict(d) for d in iter_jsonl(path)]
