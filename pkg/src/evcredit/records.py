"""Line-delimited ``key=value`` records shared by the text file formats.

One record per line, fields separated by whitespace, ``#`` starts a comment
line. Values may not contain whitespace; list values are comma-separated.
"""

from __future__ import annotations

from typing import Iterable, Iterator

from .errors import FormatError


def parse_line(line: str, lineno: int = 0) -> dict[str, str] | None:
    line = line.strip()
    if not line or line.startswith("#"):
        return None
    fields: dict[str, str] = {}
    for token in line.split():
        key, sep, value = token.partition("=")
        if not sep or not key:
            raise FormatError(f"line {lineno}: expected key=value, got {token!r}")
        if key in fields:
            raise FormatError(f"line {lineno}: duplicate field {key!r}")
        fields[key] = value
    return fields


def iter_records(lines: Iterable[str]) -> Iterator[tuple[int, dict[str, str]]]:
    for lineno, line in enumerate(lines, start=1):
        rec = parse_line(line, lineno)
        if rec is not None:
            yield lineno, rec


def format_record(fields: dict[str, object]) -> str:
    parts = []
    for key, value in fields.items():
        text = str(value)
        if not text or any(ch.isspace() for ch in text):
            raise FormatError(f"field {key!r} has empty or whitespace value {text!r}")
        parts.append(f"{key}={text}")
    return " ".join(parts)


def split_ids(text: str) -> tuple[str, ...]:
    ids = tuple(t for t in text.split(",") if t)
    if not ids:
        raise FormatError("empty id list")
    return ids


def parse_sizes(text: str) -> frozenset[int]:
    try:
        return frozenset(int(t) for t in text.split(",") if t)
    except ValueError as exc:
        raise FormatError(f"bad size list {text!r}") from exc


def parse_float(text: str, lineno: int = 0) -> float:
    try:
        return float(text)
    except ValueError as exc:
        raise FormatError(f"line {lineno}: bad number {text!r}") from exc


def fmt_float(x: float) -> str:
    return repr(float(x))
