"""Keyed, deterministic pseudonymization of IP addresses and usernames.

IPv4 addresses use the Crypto-PAn construction: output bit ``i`` is input bit
``i`` XOR a pseudorandom function of the ``i``-bit input prefix, which makes the
mapping a prefix-preserving bijection. The flip is forced to zero while the
prefix is still inside an RFC 1918 network prefix, so private addresses stay in
their private block (the result is still of the Crypto-PAn form, hence still a
prefix-preserving bijection).
"""
from __future__ import annotations

import hashlib
import hmac
import ipaddress
import re
from dataclasses import dataclass, field, replace
from functools import lru_cache
from importlib import resources
from typing import Optional

from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

from .model import LogEntry
from .parsers import user_spans

PRIVATE_PREFIXES = [(0x0A000000, 8), (0xAC100000, 12), (0xC0A80000, 16)]

IPV4_TOKEN = re.compile(r"(?<![\d.])(\d{1,3}(?:\.\d{1,3}){3})(?![\d.])")


def _load_usernames() -> tuple:
    text = resources.files("sessionlab.data").joinpath("usernames.txt").read_text()
    return tuple(w.strip() for w in text.splitlines() if w.strip() and not w.startswith("#"))


@dataclass(frozen=True)
class AnonKey:
    secret: bytes
    username_dictionary: tuple = field(default_factory=_load_usernames)

    def __post_init__(self):
        if len(self.secret) != 32:
            raise ValueError("anonymization key must be exactly 32 bytes")
        if not self.username_dictionary:
            raise ValueError("username dictionary is empty")
        object.__setattr__(self, "username_dictionary", tuple(self.username_dictionary))

    @classmethod
    def from_hex(cls, text: str) -> "AnonKey":
        return cls(bytes.fromhex(text.strip()))

    @classmethod
    def from_file(cls, path) -> "AnonKey":
        with open(path, encoding="ascii") as fh:
            return cls.from_hex(fh.read())


def _private_guard(addr: int, length: int) -> bool:
    """True if the first ``length`` bits of ``addr`` are a proper prefix of a private network."""
    for net, plen in PRIVATE_PREFIXES:
        if length < plen and (addr ^ net) >> (32 - length) == 0:
            return True
    return False


class _CryptoPAn:
    def __init__(self, secret: bytes):
        self._enc = Cipher(algorithms.AES(secret[:16]), modes.ECB()).encryptor()  # noqa: S305
        self._pad = self._enc.update(secret[16:])
        self._pad_int = int.from_bytes(self._pad, "big")

    def _flip(self, addr: int, length: int) -> int:
        # first `length` bits from addr, the rest from the pad
        mask = ((1 << 128) - 1) ^ ((1 << (128 - length)) - 1) if length else 0
        block = ((addr << 96) & mask) | (self._pad_int & ~mask & ((1 << 128) - 1))
        return self._enc.update(block.to_bytes(16, "big"))[0] >> 7

    def anonymize(self, addr: int) -> int:
        flips = 0
        for i in range(32):
            if _private_guard(addr, i):
                continue
            flips |= self._flip(addr, i) << (31 - i)
        return addr ^ flips


@lru_cache(maxsize=64)
def _cipher(secret: bytes) -> _CryptoPAn:
    return _CryptoPAn(secret)


@lru_cache(maxsize=1 << 16)
def _anon_int(secret: bytes, addr: int) -> int:
    return _cipher(secret).anonymize(addr)


def _parse_ipv4(addr: str) -> int:
    try:
        return int(ipaddress.IPv4Address(addr))
    except ipaddress.AddressValueError as exc:
        raise ValueError(f"malformed IPv4 address: {addr!r}") from exc


def anonymize_ip(addr: str, key: AnonKey) -> str:
    """Prefix-preserving keyed substitute for a dotted-quad address."""
    return str(ipaddress.IPv4Address(_anon_int(key.secret, _parse_ipv4(addr))))


def _is_ipv4(token: str) -> bool:
    try:
        ipaddress.IPv4Address(token)
    except ipaddress.AddressValueError:
        return False
    return True


def anonymize_text_ips(text: str, key: AnonKey) -> str:
    def sub(m):
        tok = m.group(1)
        return anonymize_ip(tok, key) if _is_ipv4(tok) else tok
    return IPV4_TOKEN.sub(sub, text)


class Anonymizer:
    """Stateful front end holding the username collision table for one key.

    The base synthetic name for a user is a keyed index into the dictionary and
    never depends on other users. When two users land on the same base name,
    the one seen later gets a numeric suffix, so suffixes depend on first-seen
    order; the pipeline feeds entries in a fixed order, which keeps output
    reproducible.
    """

    def __init__(self, key: AnonKey):
        self.key = key
        self._forward: dict = {}
        self._taken: dict = {}

    def ip(self, addr: str) -> str:
        return anonymize_ip(addr, self.key)

    def user(self, name: str) -> str:
        if not name:
            raise ValueError("cannot anonymize an empty username")
        hit = self._forward.get(name)
        if hit is not None:
            return hit
        words = self.key.username_dictionary
        digest = hmac.new(self.key.secret, b"user\x00" + name.encode(), hashlib.sha256).digest()
        base = words[int.from_bytes(digest[:8], "big") % len(words)]
        candidate, n = base, 1
        while candidate == name or self._taken.get(candidate, name) != name:
            n += 1
            candidate = f"{base}{n}"
        self._taken[candidate] = name
        self._forward[name] = candidate
        return candidate

    def entry(self, entry: LogEntry) -> LogEntry:
        """Substitute identifiers in host, user and message; everything else is untouched."""
        host = self.ip(entry.host) if _is_ipv4(entry.host) else entry.host
        message = entry.message
        spans = user_spans(message, entry.source_type)
        if spans:
            parts, pos = [], 0
            for s, e in spans:
                parts.append(anonymize_text_ips(message[pos:s], self.key))
                tok = message[s:e]
                parts.append(self.ip(tok) if _is_ipv4(tok) else self.user(tok))
                pos = e
            parts.append(anonymize_text_ips(message[pos:], self.key))
            message = "".join(parts)
        else:
            message = anonymize_text_ips(message, self.key)
        user: Optional[str] = entry.user
        if user:
            user = self.ip(user) if _is_ipv4(user) else self.user(user)
        if host == entry.host and user == entry.user and message == entry.message:
            return entry
        return replace(entry, host=host, user=user, message=message)


def anonymize_user(name: str, key) -> str:
    """Synthetic username for ``name``. ``key`` is an :class:`Anonymizer` or an :class:`AnonKey`.

    A bare key gets a fresh collision table, so pass an ``Anonymizer`` when
    mapping many names that must stay distinct.
    """
    anon = key if isinstance(key, Anonymizer) else Anonymizer(key)
    return anon.user(name)


def anonymize_entry(entry: LogEntry, key) -> LogEntry:
    anon = key if isinstance(key, Anonymizer) else Anonymizer(key)
    return anon.entry(entry)
