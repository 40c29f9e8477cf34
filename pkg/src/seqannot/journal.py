"""Append-only journal of annotation queue events.

One event per line, tab-separated, same dialect as the record format: a
kind tag followed by fields. Three kinds exist. `journal` is the header
and must come first; it pins the stream digest, the pipeline parameters
and the seed budget so a replay against different inputs is refused.
`enqueue` records a packet entering the queue. `labels` records the
completed labels for an entry, as state indices in packet frame order.

Leases are deliberately not journaled: a restarted service treats every
unfinished entry as pending, which is exactly what lease expiry would
have produced.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path

from .pipeline import AnnotationPacket, PipelineParams
from .providers import RecordStream, serialize_records

JOURNAL_VERSION = "v1"


class JournalError(ValueError):
    """Raised for unreadable journals or journals from different inputs."""


def stream_digest(records: RecordStream) -> str:
    return hashlib.sha256(serialize_records(records).encode()).hexdigest()


@dataclass(frozen=True)
class JournalHeader:
    digest: str
    params: PipelineParams
    seed_frames: int


@dataclass(frozen=True)
class EnqueueEvent:
    sequence: int
    packet_id: int
    segment_id: int
    reason: str
    frames: tuple[int, ...]

    def matches(self, packet: AnnotationPacket) -> bool:
        return (
            self.packet_id == packet.packet_id
            and self.segment_id == packet.segment_id
            and self.reason == packet.reason
            and self.frames == packet.frames
        )


@dataclass(frozen=True)
class JournalState:
    header: JournalHeader
    enqueues: tuple[EnqueueEvent, ...]
    labels: dict[int, tuple[int, ...]]


def read_journal(path: str | Path) -> JournalState:
    """Parse a journal file, validating event order and cross-references."""
    lines = Path(path).read_text().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise JournalError("line 1: empty journal, expected a header")
    header = _parse_header(lines[0])
    enqueues: list[EnqueueEvent] = []
    labels: dict[int, tuple[int, ...]] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        fields = line.split("\t")
        kind = fields[0]
        if kind == "enqueue":
            event = _parse_enqueue(lineno, fields)
            if event.sequence != len(enqueues):
                raise JournalError(
                    f"line {lineno}: enqueue sequence {event.sequence},"
                    f" expected {len(enqueues)}"
                )
            enqueues.append(event)
        elif kind == "labels":
            sequence, states = _parse_labels(lineno, fields)
            if sequence >= len(enqueues):
                raise JournalError(
                    f"line {lineno}: labels for unknown entry {sequence}"
                )
            if sequence in labels:
                raise JournalError(f"line {lineno}: duplicate labels for entry {sequence}")
            if len(states) != len(enqueues[sequence].frames):
                raise JournalError(
                    f"line {lineno}: {len(states)} labels for a"
                    f" {len(enqueues[sequence].frames)}-frame entry"
                )
            labels[sequence] = states
        elif kind == "journal":
            raise JournalError(f"line {lineno}: repeated header")
        else:
            raise JournalError(f"line {lineno}: unknown event kind {kind!r}")
    return JournalState(header=header, enqueues=tuple(enqueues), labels=labels)


def _parse_header(line: str) -> JournalHeader:
    fields = line.split("\t")
    if fields[0] != "journal" or len(fields) != 5:
        raise JournalError("line 1: expected 'journal' header with four fields")
    if fields[1] != JOURNAL_VERSION:
        raise JournalError(f"line 1: unsupported journal version {fields[1]!r}")
    try:
        params = PipelineParams.from_dict(json.loads(fields[3]))
        seed_frames = int(fields[4])
    except (ValueError, TypeError) as err:
        raise JournalError(f"line 1: {err}") from None
    return JournalHeader(digest=fields[2], params=params, seed_frames=seed_frames)


def _parse_enqueue(lineno: int, fields: list[str]) -> EnqueueEvent:
    if len(fields) != 6:
        raise JournalError(f"line {lineno}: enqueue needs five fields")
    try:
        return EnqueueEvent(
            sequence=int(fields[1]),
            packet_id=int(fields[2]),
            segment_id=int(fields[3]),
            reason=fields[4],
            frames=tuple(int(f) for f in fields[5].split(",")),
        )
    except ValueError as err:
        raise JournalError(f"line {lineno}: {err}") from None


def _parse_labels(lineno: int, fields: list[str]) -> tuple[int, tuple[int, ...]]:
    if len(fields) != 3:
        raise JournalError(f"line {lineno}: labels needs two fields")
    try:
        return int(fields[1]), tuple(int(s) for s in fields[2].split(","))
    except ValueError as err:
        raise JournalError(f"line {lineno}: {err}") from None


class JournalWriter:
    """Appends events one fsynced line at a time."""

    def __init__(self, path: str | Path, *, fresh: bool, header: JournalHeader):
        self._file = open(path, "w" if fresh else "a", encoding="utf-8")
        if fresh:
            self._append(
                "journal",
                JOURNAL_VERSION,
                header.digest,
                json.dumps(header.params.to_dict(), sort_keys=True),
                str(header.seed_frames),
            )

    def enqueue(self, sequence: int, packet: AnnotationPacket) -> None:
        self._append(
            "enqueue",
            str(sequence),
            str(packet.packet_id),
            str(packet.segment_id),
            packet.reason,
            ",".join(str(f) for f in packet.frames),
        )

    def labels(self, sequence: int, states: tuple[int, ...]) -> None:
        self._append("labels", str(sequence), ",".join(str(s) for s in states))

    def _append(self, *fields: str) -> None:
        self._file.write("\t".join(fields) + "\n")
        self._file.flush()
        os.fsync(self._file.fileno())

    def close(self) -> None:
        self._file.close()
