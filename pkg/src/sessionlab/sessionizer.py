"""Gap-based sessionization of a time-ordered entry stream."""
from __future__ import annotations

import heapq
from dataclasses import dataclass
from datetime import timedelta
from fractions import Fraction
from typing import Iterable, Iterator

from .model import ContextKey, LogEntry, Session

DEFAULT_GAP_SECONDS = 300.0


class UnsortedInputError(ValueError):
    def __init__(self, index: int, message: str):
        super().__init__(message)
        self.index = index


def _order(session_start, key: ContextKey) -> tuple:
    return (session_start, key.sort_key())


class _Open:
    __slots__ = ("entries", "serial")

    def __init__(self, entry: LogEntry, serial: int):
        self.entries = [entry]
        self.serial = serial

    @property
    def first(self):
        return self.entries[0].timestamp

    @property
    def last(self):
        return self.entries[-1].timestamp


class Sessionizer:
    """Incremental sessionizer.

    A key's open session is closed as soon as the stream clock reaches its last
    entry plus the gap, so memory holds only sessions that can still grow plus
    closed ones waiting for earlier-starting open sessions (output is ordered by
    ``(first timestamp, key)``).
    """

    def __init__(self, gap_seconds: float = DEFAULT_GAP_SECONDS):
        if not gap_seconds > 0:
            raise ValueError("gap_seconds must be positive")
        self.gap = timedelta(seconds=gap_seconds)
        self._open: dict = {}
        self._open_heap: list = []   # (first, keysort, serial, key)
        self._expiry: list = []      # (deadline, serial, key)
        self._closed: list = []      # (first, keysort, serial, Session)
        self._serial = 0
        self._index = 0
        self._prev = None

    def _close(self, key: ContextKey) -> None:
        sess = self._open.pop(key)
        heapq.heappush(self._closed, (sess.first, key.sort_key(), sess.serial, Session.from_entries(sess.entries)))

    def _expire(self, now) -> None:
        while self._expiry and self._expiry[0][0] <= now:
            deadline, serial, key = heapq.heappop(self._expiry)
            sess = self._open.get(key)
            if sess is not None and sess.serial == serial and sess.last + self.gap == deadline:
                self._close(key)

    def _ready(self) -> Iterator[Session]:
        while self._closed:
            while self._open_heap:
                first, ks, serial, key = self._open_heap[0]
                sess = self._open.get(key)
                if sess is not None and sess.serial == serial:
                    break
                heapq.heappop(self._open_heap)
            if self._open_heap and self._open_heap[0][:2] < self._closed[0][:2]:
                return
            yield heapq.heappop(self._closed)[3]

    def push(self, entry: LogEntry) -> list:
        """Add one entry; return sessions that are now final and in order."""
        ts = entry.timestamp
        if self._prev is not None and ts < self._prev:
            raise UnsortedInputError(
                self._index, f"entry {self._index} at {ts} precedes previous entry at {self._prev}")
        self._prev = ts
        self._index += 1

        self._expire(ts)
        key = entry.key
        sess = self._open.get(key)
        if sess is None:
            self._serial += 1
            sess = _Open(entry, self._serial)
            self._open[key] = sess
            heapq.heappush(self._open_heap, (ts, key.sort_key(), sess.serial, key))
        else:
            sess.entries.append(entry)
        heapq.heappush(self._expiry, (ts + self.gap, sess.serial, key))
        return list(self._ready())

    def finish(self) -> list:
        for key in list(self._open):
            self._close(key)
        self._open_heap.clear()
        self._expiry.clear()
        return list(self._ready())

    @property
    def open_sessions(self) -> int:
        return len(self._open)


def iter_sessions(entries: Iterable[LogEntry], gap_seconds: float = DEFAULT_GAP_SECONDS) -> Iterator[Session]:
    sz = Sessionizer(gap_seconds)
    for entry in entries:
        yield from sz.push(entry)
    yield from sz.finish()


def sessionize(entries: Iterable[LogEntry], gap_seconds: float = DEFAULT_GAP_SECONDS) -> list:
    """Split a timestamp-sorted stream into sessions per context key.

    A new session starts whenever the gap to the previous entry of the same key
    is at least ``gap_seconds``. Sessions come back sorted by first timestamp,
    then key.
    """
    return list(iter_sessions(entries, gap_seconds))


def sort_entries(entries: Iterable[LogEntry]) -> list:
    """Stable sort by timestamp; ties keep ingestion order."""
    return sorted(entries, key=lambda e: e.timestamp)


@dataclass(frozen=True)
class Prevalence:
    anomalous: int
    total: int

    @property
    def fraction(self) -> Fraction:
        return Fraction(self.anomalous, self.total)

    @property
    def value(self) -> float:
        return self.anomalous / self.total

    def __float__(self) -> float:
        return self.value

    def to_dict(self) -> dict:
        return {"anomalous": self.anomalous, "total": self.total,
                "fraction": str(self.fraction), "value": self.value}


def prevalence(sessions) -> Prevalence:
    sessions = list(sessions)
    if not sessions:
        raise ValueError("prevalence of an empty session list is undefined")
    return Prevalence(sum(1 for s in sessions if s.is_anomalous), len(sessions))
