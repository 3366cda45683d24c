"""Canonical value notation: the deterministic byte encoding for all records.

Every signed payload, ledger block, and fixture file in this system is encoded
with this notation, so two structurally equal values always encode to the same
bytes. The format is a length-prefixed, ASCII-framed object notation:

    null        n
    bool        T | F
    int         i<decimal>e          canonical decimal, no leading zeros, no -0
    str         u<len>:<utf-8>       len counts bytes, not characters
    bytes       x<len>:<hex>         len counts bytes; hex is lowercase, 2*len chars
    timestamp   t<len>:<rfc3339>     UTC only, exactly YYYY-MM-DDTHH:MM:SS.ffffffZ
    list        l<item>...e
    dict        d<key><value>...e    keys are str, strictly ascending, unique

The decoder rejects anything the encoder would not produce (unsorted keys,
uppercase hex, non-canonical integers, trailing bytes), so decode(encode(v))
is the identity and every value has exactly one encoding.
"""

from __future__ import annotations

from datetime import datetime, timezone
import re

_TIMESTAMP_RE = re.compile(r"^\d{4}-\d{2}-\d{2}T\d{2}:\d{2}:\d{2}\.\d{6}Z$")
_INT_RE = re.compile(r"^(0|-?[1-9][0-9]*)$")
_HEX_RE = re.compile(r"^[0-9a-f]*$")

TIMESTAMP_FORMAT = "%Y-%m-%dT%H:%M:%S.%fZ"


class MalformedInputError(ValueError):
    """Input bytes are not a canonical encoding. Carries the byte offset."""

    def __init__(self, message: str, position: int | None = None):
        self.position = position
        if position is not None:
            message = f"{message} (at byte {position})"
        super().__init__(message)


def format_timestamp(value: datetime) -> str:
    """Render a UTC datetime in the single canonical form."""
    if value.tzinfo is None or value.utcoffset() != timezone.utc.utcoffset(None):
        raise ValueError("timestamps must be timezone-aware UTC")
    return value.strftime(TIMESTAMP_FORMAT)


def parse_timestamp(text: str) -> datetime:
    """Parse the canonical timestamp form, rejecting every other shape."""
    if not _TIMESTAMP_RE.match(text):
        raise ValueError(f"non-canonical timestamp: {text!r}")
    parsed = datetime.strptime(text, TIMESTAMP_FORMAT)
    return parsed.replace(tzinfo=timezone.utc)


# ---------------------------------------------------------------------------
# Encoding
# ---------------------------------------------------------------------------


def encode_value(value) -> bytes:
    """Encode a plain value (no dataclasses; see records.canonical_bytes)."""
    out: list[bytes] = []
    _encode_into(value, out)
    return b"".join(out)


def _encode_into(value, out: list[bytes]) -> None:
    if value is None:
        out.append(b"n")
    elif value is True:
        out.append(b"T")
    elif value is False:
        out.append(b"F")
    elif isinstance(value, int):
        out.append(b"i%de" % value)
    elif isinstance(value, str):
        raw = value.encode("utf-8")
        out.append(b"u%d:" % len(raw))
        out.append(raw)
    elif isinstance(value, (bytes, bytearray)):
        raw = bytes(value)
        out.append(b"x%d:" % len(raw))
        out.append(raw.hex().encode("ascii"))
    elif isinstance(value, datetime):
        text = format_timestamp(value).encode("ascii")
        out.append(b"t%d:" % len(text))
        out.append(text)
    elif isinstance(value, (list, tuple)):
        out.append(b"l")
        for item in value:
            _encode_into(item, out)
        out.append(b"e")
    elif isinstance(value, (set, frozenset)):
        items = sorted(value)
        if not all(isinstance(item, str) for item in items):
            raise TypeError("only sets of strings have a canonical order")
        _encode_into(items, out)
    elif isinstance(value, dict):
        keys = list(value.keys())
        if not all(isinstance(k, str) for k in keys):
            raise TypeError("dict keys must be strings")
        out.append(b"d")
        for key in sorted(keys):
            _encode_into(key, out)
            _encode_into(value[key], out)
        out.append(b"e")
    else:
        raise TypeError(f"value of type {type(value).__name__} has no canonical encoding")


# ---------------------------------------------------------------------------
# Decoding
# ---------------------------------------------------------------------------


class _Decoder:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def fail(self, message: str) -> MalformedInputError:
        return MalformedInputError(message, position=self.pos)

    def peek(self) -> int:
        if self.pos >= len(self.data):
            raise self.fail("unexpected end of input")
        return self.data[self.pos]

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise self.fail("truncated input")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def read_until(self, terminator: int) -> bytes:
        start = self.pos
        idx = self.data.find(bytes([terminator]), start)
        if idx < 0:
            raise self.fail("missing terminator")
        self.pos = idx + 1
        return self.data[start:idx]

    def read_length(self) -> int:
        text = self.read_until(ord(":")).decode("ascii", errors="replace")
        if not _INT_RE.match(text) or text.startswith("-"):
            raise self.fail(f"bad length prefix {text!r}")
        return int(text)

    def decode(self):
        marker = self.peek()
        self.pos += 1
        if marker == ord("n"):
            return None
        if marker == ord("T"):
            return True
        if marker == ord("F"):
            return False
        if marker == ord("i"):
            text = self.read_until(ord("e")).decode("ascii", errors="replace")
            if not _INT_RE.match(text):
                raise self.fail(f"non-canonical integer {text!r}")
            return int(text)
        if marker == ord("u"):
            length = self.read_length()
            raw = self.take(length)
            try:
                return raw.decode("utf-8")
            except UnicodeDecodeError as exc:
                raise self.fail(f"invalid utf-8: {exc}") from exc
        if marker == ord("x"):
            length = self.read_length()
            raw = self.take(2 * length).decode("ascii", errors="replace")
            if not _HEX_RE.match(raw):
                raise self.fail("byte string is not lowercase hex")
            return bytes.fromhex(raw)
        if marker == ord("t"):
            length = self.read_length()
            raw = self.take(length).decode("ascii", errors="replace")
            try:
                return parse_timestamp(raw)
            except ValueError as exc:
                raise self.fail(str(exc)) from exc
        if marker == ord("l"):
            items = []
            while self.peek() != ord("e"):
                items.append(self.decode())
            self.pos += 1
            return items
        if marker == ord("d"):
            result: dict[str, object] = {}
            last_key: str | None = None
            while self.peek() != ord("e"):
                key = self.decode()
                if not isinstance(key, str):
                    raise self.fail("dict key is not a string")
                if last_key is not None and key <= last_key:
                    raise self.fail(f"dict keys not strictly ascending at {key!r}")
                last_key = key
                result[key] = self.decode()
            self.pos += 1
            return result
        raise MalformedInputError(
            f"unknown type marker {chr(marker)!r}", position=self.pos - 1
        )


def decode_value(data: bytes):
    """Decode one canonical value, requiring the whole buffer to be consumed."""
    decoder = _Decoder(bytes(data))
    value = decoder.decode()
    if decoder.pos != len(decoder.data):
        raise MalformedInputError("trailing bytes after value", position=decoder.pos)
    return value
