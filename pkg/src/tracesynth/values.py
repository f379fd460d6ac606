"""Canonical text forms for column values and small shared helpers.

Every file format in this package (catalog, data tables, canonical graph
text, SQL literals) serializes values the same way: integers base-10,
decimals with a '.' separator via shortest round-trip repr, dates as
ISO-8601. Dates are carried as ``datetime.date`` at API boundaries and as
int64 epoch-day arrays inside the simulated executor.
"""

from __future__ import annotations

import datetime

EPOCH = datetime.date(1970, 1, 1)

VALUE_KINDS = ("integer", "decimal", "date", "text")

# Logical uncompressed widths; text widths are per-column.
KIND_BYTES = {"integer": 8, "decimal": 8, "date": 4}


def date_to_days(d: datetime.date) -> int:
    return (d - EPOCH).days


def days_to_date(days: int) -> datetime.date:
    return EPOCH + datetime.timedelta(days=int(days))


def format_value(value, kind: str) -> str:
    """Render a value in its canonical text form."""
    if kind == "integer":
        return str(int(value))
    if kind == "decimal":
        return repr(float(value))
    if kind == "date":
        if isinstance(value, datetime.date):
            return value.isoformat()
        return days_to_date(int(value)).isoformat()
    if kind == "text":
        return str(value)
    raise ValueError(f"unknown value kind: {kind}")


def parse_value(text: str, kind: str):
    """Inverse of format_value."""
    if kind == "integer":
        return int(text)
    if kind == "decimal":
        return float(text)
    if kind == "date":
        return datetime.date.fromisoformat(text)
    if kind == "text":
        return text
    raise ValueError(f"unknown value kind: {kind}")


def infer_literal(text: str):
    """Parse a literal whose kind is not known from context.

    ISO dates, then decimals (contain '.'), then integers.
    """
    if len(text) == 10 and text[4] == "-" and text[7] == "-":
        return datetime.date.fromisoformat(text)
    if "." in text or "e" in text or "E" in text:
        return float(text)
    return int(text)


FNV64_OFFSET = 0xCBF29CE484222325
FNV64_PRIME = 0x100000001B3


def fnv1a64(data: bytes) -> int:
    """FNV-1a 64-bit hash; bit-stable across platforms and runs."""
    h = FNV64_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV64_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h
