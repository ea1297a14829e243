"""Append-only, line-delimited event log.

Each line is ``<time_us> <module> <kind> key=value ...``. Field order is the
order the emitter passes them in, which is fixed per event kind, so two runs
with identical inputs produce byte-identical logs. Values never contain
spaces; lists are comma-joined.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Iterable, Iterator


@dataclass(frozen=True)
class LogRecord:
    t: int
    module: str
    kind: str
    fields: dict[str, str]

    def get_int(self, key: str) -> int:
        return int(self.fields[key])


class EventLog:
    def __init__(self) -> None:
        self.lines: list[str] = []

    def emit(self, t: int, module: str, kind: str, /, **fields: object) -> None:
        if fields:
            body = " ".join(f"{k}={_fmt(v)}" for k, v in fields.items())
            self.lines.append(f"{t} {module} {kind} {body}")
        else:
            self.lines.append(f"{t} {module} {kind}")

    def text(self) -> str:
        return "\n".join(self.lines) + ("\n" if self.lines else "")

    def digest(self) -> str:
        h = hashlib.sha256()
        for line in self.lines:
            h.update(line.encode())
            h.update(b"\n")
        return h.hexdigest()

    def records(self) -> Iterator[LogRecord]:
        return parse_lines(self.lines)

    def __len__(self) -> int:
        return len(self.lines)


def _fmt(value: object) -> str:
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, (list, tuple, set, frozenset)):
        return ",".join(str(v) for v in value) or "-"
    if hasattr(value, "value"):
        return str(value.value)
    return str(value)


def parse_line(line: str) -> LogRecord:
    parts = line.split(" ")
    fields = {}
    for token in parts[3:]:
        key, _, val = token.partition("=")
        fields[key] = val
    return LogRecord(int(parts[0]), parts[1], parts[2], fields)


def parse_lines(lines: Iterable[str]) -> Iterator[LogRecord]:
    for line in lines:
        line = line.rstrip("\n")
        if line:
            yield parse_line(line)
