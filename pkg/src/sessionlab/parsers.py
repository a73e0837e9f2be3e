"""Line grammars for the supported text log formats, with a total raw fallback.

Every input line yields exactly one :class:`LogEntry`. Lines that match no
grammar are kept verbatim with ``parse_status=fallback_raw``; their timestamps
are interpolated between the nearest parsed neighbours of the same file.
"""
from __future__ import annotations

import gzip
import io
import json
import os
import re
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta, timezone
from importlib import resources
from pathlib import Path
from typing import Callable, Iterable, Iterator, Optional

from .model import AttackTag, LogEntry, ParseStatus, SourceType

SYSLOG_TS = "%Y %b %d %H:%M:%S"
APACHE_TS = "%d/%b/%Y:%H:%M:%S %z"
SURICATA_TS = "%m/%d/%Y-%H:%M:%S.%f"

_SYSLOG_HEADER = re.compile(
    r"^(?P<ts>[A-Z][a-z]{2} [ \d]\d \d{2}:\d{2}:\d{2}) (?P<host>\S+) "
    r"(?P<process>[\w./-]+?)(?:\[(?P<pid>\d+)\])?: (?P<message>.*)$"
)
_APACHE = re.compile(
    r'^(?P<client>\S+) (?P<ident>\S+) (?P<user>\S+) \[(?P<ts>[^\]]+)\] '
    r'"(?P<request>[^"]*)" (?P<status>\d{3}) (?P<size>\d+|-)'
    r'(?: "(?P<referer>[^"]*)" "(?P<agent>[^"]*)")?$'
)
_AUDIT = re.compile(
    r"^type=(?P<type>[A-Z_]+) msg=audit\((?P<sec>\d+)\.(?P<frac>\d+):(?P<serial>\d+)\): (?P<body>.*)$"
)
_SURICATA = re.compile(
    r"^(?P<ts>\d{2}/\d{2}/\d{4}-\d{2}:\d{2}:\d{2}\.\d{6})\s+\[\*\*\] "
    r"\[(?P<gid>\d+):(?P<sid>\d+):(?P<rev>\d+)\] (?P<signature>.+?) \[\*\*\]"
    r"(?: \[Classification: (?P<classification>[^\]]*)\])? \[Priority: (?P<priority>\d+)\] "
    r"\{(?P<proto>\w+)\} (?P<src>\S+) -> (?P<dst>\S+)$"
)
_DNS_MESSAGE = re.compile(r"^(?:query\[\w+\]|reply|forwarded|cached|config|NXDOMAIN) \S+")

# Positions of usernames inside message text. Only these spans are ever
# treated as identifiers by the anonymizer.
USER_PATTERNS = {
    SourceType.SYSLOG: [
        re.compile(r"(?:Accepted|Failed) \S+ for (?:invalid user )?(?P<user>[\w.@-]+)"),
        re.compile(r"[Ii]nvalid user (?P<user>[\w.@-]+)"),
        re.compile(r"for user (?P<user>[\w.@-]+)"),
        re.compile(r"\b(?:user|sasl_username)=(?P<user>[\w.@-]+)"),
        re.compile(r"\buser=<(?P<user>[\w.@-]+)>"),
        re.compile(r"of user (?P<user>[\w.@-]+)"),
        re.compile(r"^\((?P<user>[\w.@-]+)\) CMD "),
        re.compile(r"^\s*(?P<user>[\w.@-]+) : TTY="),
    ],
    SourceType.APACHE_ACCESS: [re.compile(r'^\S+ \S+ (?P<user>[^\s-][^\s]*) "')],
    SourceType.AUDIT: [re.compile(r'acct="(?P<user>[^"]+)"')],
}
USER_PATTERNS[SourceType.AUTH] = USER_PATTERNS[SourceType.SYSLOG]


class ParseIOError(OSError):
    """I/O failure while reading a log file, with the line number reached."""


def user_spans(message: str, source_type: SourceType) -> list:
    """Return sorted, non-overlapping ``(start, end)`` spans of usernames in ``message``."""
    spans = []
    for pat in USER_PATTERNS.get(source_type, ()):
        for m in pat.finditer(message):
            s, e = m.span("user")
            if not any(s < e2 and s2 < e for s2, e2 in spans):
                spans.append((s, e))
    return sorted(spans)


def _find_user(message: str, source_type: SourceType) -> Optional[str]:
    for pat in USER_PATTERNS.get(source_type, ()):
        m = pat.search(message)
        if m:
            return m.group("user")
    return None


@dataclass(frozen=True)
class FormatGrammar:
    """A line pattern for one source type.

    ``extract`` receives the regex match and returns the entry fields, or
    ``None`` when the line is structurally valid but semantically not of this
    format (e.g. a non-dnsmasq line under the DNS grammar).
    """

    source_type: SourceType
    pattern: re.Pattern
    timestamp_format: str
    extract: Callable

    def match(self, raw: str, default_host: str, year: int) -> Optional[dict]:
        m = self.pattern.match(raw)
        if m is None:
            return None
        try:
            return self.extract(m, default_host, year)
        except ValueError:
            return None


def _syslog_fields(m, default_host, year, source_type):
    ts = datetime.strptime(f"{year} {m['ts']}", SYSLOG_TS).replace(tzinfo=timezone.utc)
    message = m["message"]
    return {
        "timestamp": ts,
        "host": m["host"],
        "process": m["process"],
        "user": _find_user(message, source_type),
        "message": message,
    }


def _extract_syslog(m, default_host, year):
    return _syslog_fields(m, default_host, year, SourceType.SYSLOG)


def _extract_auth(m, default_host, year):
    return _syslog_fields(m, default_host, year, SourceType.AUTH)


def _extract_dns(m, default_host, year):
    if m["process"] != "dnsmasq" or not _DNS_MESSAGE.match(m["message"]):
        return None
    fields = _syslog_fields(m, default_host, year, SourceType.DNS)
    fields["user"] = None
    return fields


def _extract_apache(m, default_host, year):
    ts = datetime.strptime(m["ts"], APACHE_TS).astimezone(timezone.utc)
    user = m["user"] if m["user"] != "-" else None
    message = f'{m["client"]} {m["ident"]} {m["user"]} "{m["request"]}" {m["status"]} {m["size"]}'
    if m["referer"] is not None:
        message += f' "{m["referer"]}" "{m["agent"]}"'
    return {"timestamp": ts, "host": default_host, "process": "httpd", "user": user, "message": message}


_EXE = re.compile(r'\bexe="(?P<exe>[^"]+)"')
_COMM = re.compile(r'\bcomm="(?P<comm>[^"]+)"')


def _extract_audit(m, default_host, year):
    micros = int(m["frac"].ljust(6, "0")[:6])
    ts = datetime.fromtimestamp(int(m["sec"]), tz=timezone.utc) + timedelta(microseconds=micros)
    body = m["body"]
    exe = _EXE.search(body)
    comm = _COMM.search(body)
    if exe:
        process = os.path.basename(exe["exe"])
    elif comm:
        process = comm["comm"]
    else:
        process = "auditd"
    message = f"type={m['type']} {body}"
    return {
        "timestamp": ts,
        "host": default_host,
        "process": process,
        "user": _find_user(message, SourceType.AUDIT),
        "message": message,
    }


def _extract_suricata(m, default_host, year):
    ts = datetime.strptime(m["ts"], SURICATA_TS).replace(tzinfo=timezone.utc)
    raw = m.string
    message = raw[m.end("ts"):].strip()
    return {"timestamp": ts, "host": default_host, "process": "suricata", "user": None, "message": message}


GRAMMARS = {
    SourceType.SYSLOG: FormatGrammar(SourceType.SYSLOG, _SYSLOG_HEADER, SYSLOG_TS, _extract_syslog),
    SourceType.AUTH: FormatGrammar(SourceType.AUTH, _SYSLOG_HEADER, SYSLOG_TS, _extract_auth),
    SourceType.DNS: FormatGrammar(SourceType.DNS, _SYSLOG_HEADER, SYSLOG_TS, _extract_dns),
    SourceType.APACHE_ACCESS: FormatGrammar(SourceType.APACHE_ACCESS, _APACHE, APACHE_TS, _extract_apache),
    SourceType.AUDIT: FormatGrammar(SourceType.AUDIT, _AUDIT, "epoch", _extract_audit),
    SourceType.SURICATA: FormatGrammar(SourceType.SURICATA, _SURICATA, SURICATA_TS, _extract_suricata),
}

# Order used when no hint is available; more specific grammars first.
_DETECT_ORDER = [
    SourceType.DNS, SourceType.APACHE_ACCESS, SourceType.AUDIT,
    SourceType.SURICATA, SourceType.SYSLOG,
]


def _match(raw: str, hint: SourceType, default_host: str, year: int):
    if hint is SourceType.RAW:
        for st in _DETECT_ORDER:
            fields = GRAMMARS[st].match(raw, default_host, year)
            if fields is not None:
                return st, fields
        return None, None
    fields = GRAMMARS[hint].match(raw, default_host, year)
    return (hint, fields) if fields is not None else (None, None)


def parse_line(raw: str, hint=SourceType.RAW, default_host: str = "unknown", *,
               year: int = 1970, fallback_time: Optional[datetime] = None) -> LogEntry:
    """Parse one line. Never fails: unmatched lines become ``fallback_raw`` entries."""
    hint = SourceType(hint)
    st, fields = _match(raw, hint, default_host, year)
    if fields is not None:
        return LogEntry(source_type=st, parse_status=ParseStatus.PARSED, **fields)
    if fallback_time is None:
        fallback_time = datetime(year, 1, 1, tzinfo=timezone.utc)
    return LogEntry(
        timestamp=fallback_time,
        host=default_host,
        source_type=hint,
        message=raw,
        parse_status=ParseStatus.FALLBACK_RAW,
    )


@dataclass
class ParseStats:
    """Parsed/fallback counts per source type."""

    counts: dict = field(default_factory=dict)

    def add(self, entry: LogEntry) -> None:
        per = self.counts.setdefault(entry.source_type.value, {"parsed": 0, "fallback_raw": 0})
        per[entry.parse_status.value] += 1

    def merge(self, other: "ParseStats") -> None:
        for st, per in other.counts.items():
            mine = self.counts.setdefault(st, {"parsed": 0, "fallback_raw": 0})
            for k, v in per.items():
                mine[k] += v

    @property
    def parsed(self) -> int:
        return sum(v["parsed"] for v in self.counts.values())

    @property
    def fallback_raw(self) -> int:
        return sum(v["fallback_raw"] for v in self.counts.values())

    @property
    def total(self) -> int:
        return self.parsed + self.fallback_raw

    def to_dict(self) -> dict:
        return {
            "parsed": self.parsed,
            "fallback_raw": self.fallback_raw,
            "per_source": {k: dict(v) for k, v in sorted(self.counts.items())},
        }


def _interpolate(left: datetime, right: datetime, i: int, n: int) -> datetime:
    # i-th of n pending lines strictly between two anchors
    span = right - left
    return left + span * (i + 1) / (n + 1)


def iter_parse(lines: Iterable[str], hint=SourceType.RAW, default_host: str = "unknown", *,
               year: int = 1970, start_time: Optional[datetime] = None,
               stats: Optional[ParseStats] = None) -> Iterator[LogEntry]:
    """Parse lines in file order, yielding entries in the same order.

    Runs of unparseable lines are held back until the next parsed line so their
    timestamps can be interpolated; memory is bounded by the longest such run.
    """
    hint = SourceType(hint)
    if start_time is None:
        start_time = datetime(year, 1, 1, tzinfo=timezone.utc)
    left: Optional[datetime] = None
    pending: list = []

    def flush(right: Optional[datetime]):
        n = len(pending)
        for i, raw in enumerate(pending):
            if right is None:
                # trailing run, or a file with no parsed line at all
                ts = left if left is not None else start_time
            else:
                lo = left if left is not None else min(start_time, right)
                ts = _interpolate(lo, right, i, n)
            entry = parse_line(raw, hint, default_host, year=year, fallback_time=ts)
            if stats is not None:
                stats.add(entry)
            yield entry
        pending.clear()

    for raw in lines:
        st, fields = _match(raw, hint, default_host, year)
        if fields is None:
            pending.append(raw)
            continue
        entry = LogEntry(source_type=st, parse_status=ParseStatus.PARSED, **fields)
        if pending:
            yield from flush(entry.timestamp)
        if stats is not None:
            stats.add(entry)
        left = entry.timestamp
        yield entry
    if pending:
        yield from flush(None)


def parse_stream(lines: Iterable[str], hint=SourceType.RAW, default_host: str = "unknown", *,
                 year: int = 1970, start_time: Optional[datetime] = None):
    """Parse a whole stream; returns ``(entries, ParseStats)``."""
    stats = ParseStats()
    entries = list(iter_parse(lines, hint, default_host, year=year, start_time=start_time, stats=stats))
    return entries, stats


_HINT_NAMES = {
    "syslog": SourceType.SYSLOG, "messages": SourceType.SYSLOG,
    "auth": SourceType.AUTH, "secure": SourceType.AUTH,
    "apache_access": SourceType.APACHE_ACCESS, "access": SourceType.APACHE_ACCESS,
    "apache": SourceType.APACHE_ACCESS,
    "dns": SourceType.DNS, "dnsmasq": SourceType.DNS,
    "audit": SourceType.AUDIT,
    "suricata": SourceType.SURICATA, "fast": SourceType.SURICATA,
}


def hint_from_filename(path) -> SourceType:
    """Infer the format from names like ``auth.log``, ``web01.auth.log`` or ``fast.log.gz``."""
    name = Path(path).name.lower()
    if name.endswith(".gz"):
        name = name[:-3]
    if name.endswith(".log"):
        name = name[:-4]
    for part in reversed(name.split(".")):
        if part in _HINT_NAMES:
            return _HINT_NAMES[part]
    return SourceType.RAW


def read_lines(path) -> Iterator[str]:
    """Yield lines without their terminators; gzip is detected by magic bytes."""
    path = Path(path)
    lineno = 0
    try:
        with open(path, "rb") as probe:
            gz = probe.read(2) == b"\x1f\x8b"
        raw = gzip.open(path, "rb") if gz else open(path, "rb")
        with io.TextIOWrapper(raw, encoding="utf-8", errors="replace", newline="") as fh:
            for line in fh:
                lineno += 1
                yield line.rstrip("\r\n")
    except (OSError, EOFError) as exc:
        raise ParseIOError(f"{path}:{lineno + 1}: {exc}") from exc


def parse_file(path, hint=None, default_host: Optional[str] = None, *, year: int = 1970,
               start_time: Optional[datetime] = None, stats: Optional[ParseStats] = None) -> list:
    """Parse one file. ``default_host`` falls back to the parent directory name."""
    path = Path(path)
    if hint is None:
        hint = hint_from_filename(path)
    if default_host is None:
        default_host = path.parent.name or "unknown"
    return list(iter_parse(read_lines(path), hint, default_host, year=year,
                           start_time=start_time, stats=stats))


# --- ground-truth line labels ----------------------------------------------

def load_tag_map(path=None) -> dict:
    """Label-name to tag-family table; defaults to the shipped ``tag_map.json``."""
    if path is None:
        text = resources.files("sessionlab.data").joinpath("tag_map.json").read_text()
    else:
        text = Path(path).read_text(encoding="utf-8")
    return {k.lower(): AttackTag(v) for k, v in json.loads(text).items()}


def map_tag(name: str, table: dict) -> AttackTag:
    try:
        return table[name.strip().lower()]
    except KeyError:
        raise ValueError(f"attack label {name!r} has no entry in the tag map") from None


def read_labels(path, table: Optional[dict] = None) -> dict:
    """Read ``labels.jsonl`` into ``{file: {line_number: frozenset(AttackTag)}}``."""
    table = load_tag_map() if table is None else table
    out: dict = {}
    with open(path, encoding="utf-8") as fh:
        for n, raw in enumerate(fh, 1):
            if not raw.strip():
                continue
            try:
                rec = json.loads(raw)
                tags = frozenset(map_tag(t, table) for t in rec["labels"])
                per = out.setdefault(rec["file"], {})
                per[int(rec["line"])] = per.get(int(rec["line"]), frozenset()) | tags
            except (KeyError, ValueError, TypeError) as exc:
                raise ValueError(f"{path}:{n}: bad label record ({exc})") from exc
    return out


def attach_tags(entries: Iterable[LogEntry], line_tags: dict) -> Iterator[LogEntry]:
    """Attach tags by 1-based position in the file the entries were parsed from."""
    for lineno, entry in enumerate(entries, 1):
        tags = line_tags.get(lineno)
        yield replace(entry, attack_tags=entry.attack_tags | tags) if tags else entry
