"""Annotation queue service: lease-based packet hand-off over HTTP.

The pipeline runs on a background thread; its annotator callback parks
each batch of packets in a FIFO queue and blocks until every entry has
labels. Clients drain the queue with GET /api/queue/next, which leases
the oldest pending entry, and complete it with POST /api/queue/{id}/labels.
An expired lease silently returns the entry to the pending pool.

All mutations happen under one lock, so observers see a total order.
With a journal path configured every enqueue and every completed label
set is persisted; restarting the service on the same journal re-runs the
pipeline and replays the recorded labels, reconstructing the queue state
the previous process had.
"""

from __future__ import annotations

import json
import re
import threading
import time
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from types import SimpleNamespace
from typing import Callable, Mapping
from urllib.parse import parse_qs, urlparse

import numpy as np

from .evaluation import run_metrics
from .journal import JournalError, JournalHeader, JournalWriter, read_journal, stream_digest
from .pipeline import (
    SOURCE_MANUAL,
    AnnotationPacket,
    AnnotationRun,
    LabelRecord,
    PipelineParams,
    run_pipeline,
)
from .providers import RecordStream

STATUS_PENDING = "pending"
STATUS_LEASED = "leased"
STATUS_COMPLETED = "completed"

_IMAGE_TYPES = {
    ".png": "image/png",
    ".jpg": "image/jpeg",
    ".jpeg": "image/jpeg",
    ".pgm": "image/x-portable-graymap",
}


class ServiceError(RuntimeError):
    """Base class for queue operation failures."""


class NotFoundError(ServiceError):
    pass


class ConflictError(ServiceError):
    pass


class RejectedLabelsError(ServiceError):
    """A label submission that does not cover the packet correctly."""

    def __init__(self, message: str, *, missing: tuple[int, ...] = (), extra: tuple[int, ...] = ()):
        super().__init__(message)
        self.missing = missing
        self.extra = extra


@dataclass
class QueueEntry:
    packet: AnnotationPacket
    enqueue_sequence: int
    status: str = STATUS_PENDING
    lease_expiry: float | None = None
    labels: tuple[int, ...] | None = None


class AnnotationService:
    """Owns the queue, the label log and the pipeline thread.

    The pipeline starts lazily on the first queue fetch (or wait_idle),
    so parameters stay editable until then. Construction on a non-empty
    journal enters recovery mode: the journal must match the stream,
    parameters and seed budget, and previously completed entries are
    re-applied without waiting for a client.
    """

    def __init__(
        self,
        records: RecordStream,
        params: PipelineParams,
        *,
        journal_path: str | Path | None = None,
        images_dir: str | Path | None = None,
        seed_frames: int = 20000,
        clock: Callable[[], float] = time.monotonic,
    ):
        self._records = records
        self._params = params
        self._images_dir = Path(images_dir) if images_dir is not None else None
        self._seed_frames = seed_frames
        self._clock = clock
        self._cond = threading.Condition()
        self._entries: list[QueueEntry] = []
        self._manual_frames = 0
        self._model_version = 0
        self._next_retrain = 0
        self._seeded = False
        self._awaiting = False
        self._started = False
        self._stopping = False
        self._thread: threading.Thread | None = None
        self._run: AnnotationRun | None = None
        self._run_error: str | None = None
        self._final: dict | None = None
        self._name_to_state = {name: k for k, name in enumerate(records.states.names)}

        self._journal_path = Path(journal_path) if journal_path is not None else None
        self._journal: JournalWriter | None = None
        self._replay_enqueues = ()
        self._replay_labels: dict[int, tuple[int, ...]] = {}
        self._recovering = False
        if self._journal_path is not None and self._journal_path.exists():
            if self._journal_path.stat().st_size > 0:
                self._load_journal()

    def _load_journal(self) -> None:
        state = read_journal(self._journal_path)
        if state.header.digest != stream_digest(self._records):
            raise JournalError("journal was written for a different record stream")
        if state.header.params != self._params:
            raise JournalError("journal was written with different parameters")
        if state.header.seed_frames != self._seed_frames:
            raise JournalError("journal was written with a different seed budget")
        self._replay_enqueues = state.enqueues
        self._replay_labels = state.labels
        self._recovering = True

    # -- lifecycle -----------------------------------------------------------

    def _ensure_started(self) -> None:
        if self._started:
            return
        self._started = True
        if self._journal_path is not None:
            header = JournalHeader(
                digest=stream_digest(self._records),
                params=self._params,
                seed_frames=self._seed_frames,
            )
            self._journal = JournalWriter(
                self._journal_path, fresh=not self._recovering, header=header
            )
        self._thread = threading.Thread(target=self._pipeline_main, daemon=True)
        self._thread.start()

    def _pipeline_main(self) -> None:
        annotator = SimpleNamespace(annotate_batch=self._annotate_batch)
        try:
            run = run_pipeline(
                self._records, None, self._params, annotator, seed_frames=self._seed_frames
            )
        except Exception as err:
            with self._cond:
                if self._run_error is None:
                    self._run_error = f"{type(err).__name__}: {err}"
                self._cond.notify_all()
            return
        with self._cond:
            self._run = run
            self._model_version = 1 + run.retrain_count
            present = self._records.present
            if np.all(self._records.truth[present] >= 0):
                point = run_metrics(self._records, run)
                self._final = {
                    "total_frames": point.total_frames,
                    "manual_frames": point.manual_frames,
                    "auto_frames": point.auto_frames,
                    "reduction_factor": point.reduction_factor,
                    "accuracy": point.accuracy,
                    "no_manual": point.no_manual,
                }
            else:
                total = len(run)
                manual = run.manual_frames
                self._final = {
                    "total_frames": total,
                    "manual_frames": manual,
                    "auto_frames": total - manual,
                    "reduction_factor": total / manual if manual else float(total),
                    "accuracy": None,
                    "no_manual": manual == 0,
                }
            self._cond.notify_all()

    def stop(self, timeout: float = 5.0) -> None:
        with self._cond:
            self._stopping = True
            self._cond.notify_all()
        if self._thread is not None:
            self._thread.join(timeout)
        with self._cond:
            if self._journal is not None:
                self._journal.close()
                self._journal = None

    def wait_idle(self, timeout: float = 10.0) -> bool:
        """Block until the run finished, failed, or awaits labels."""
        with self._cond:
            self._ensure_started()
            return self._cond.wait_for(self._is_idle, timeout)

    def _is_idle(self) -> bool:
        if self._run is not None or self._run_error is not None:
            return True
        return self._awaiting and any(
            e.status != STATUS_COMPLETED for e in self._entries
        )

    # -- pipeline side -------------------------------------------------------

    def _annotate_batch(self, packets: list[AnnotationPacket]) -> list[list[LabelRecord]]:
        with self._cond:
            batch = [self._enqueue(p) for p in packets]
            for entry in batch:
                replay = self._replay_labels.get(entry.enqueue_sequence)
                if replay is not None:
                    self._complete(entry, replay, journal=False)
            self._awaiting = True
            self._cond.notify_all()
            try:
                self._cond.wait_for(
                    lambda: self._stopping
                    or all(e.status == STATUS_COMPLETED for e in batch)
                )
            finally:
                self._awaiting = False
            if self._stopping:
                raise RuntimeError("service stopped before the queue drained")
            self._account_batch()
            return [
                [
                    LabelRecord(frame, state, SOURCE_MANUAL)
                    for frame, state in zip(e.packet.frames, e.labels)
                ]
                for e in batch
            ]

    def _enqueue(self, packet: AnnotationPacket) -> QueueEntry:
        sequence = len(self._entries)
        entry = QueueEntry(packet=packet, enqueue_sequence=sequence)
        self._entries.append(entry)
        if sequence < len(self._replay_enqueues):
            if not self._replay_enqueues[sequence].matches(packet):
                raise JournalError(
                    f"journal entry {sequence} does not match the re-run pipeline"
                )
        elif self._journal is not None:
            self._journal.enqueue(sequence, packet)
        return entry

    def _complete(self, entry: QueueEntry, states: tuple[int, ...], *, journal: bool) -> None:
        entry.labels = states
        entry.status = STATUS_COMPLETED
        entry.lease_expiry = None
        self._manual_frames += len(states)
        if journal and self._journal is not None:
            sequence = entry.enqueue_sequence
            if sequence >= len(self._replay_enqueues) or sequence not in self._replay_labels:
                self._journal.labels(sequence, states)
        self._cond.notify_all()

    def _account_batch(self) -> None:
        # mirror of the pipeline's retrain cadence, checked at batch close
        interval = self._params.retrain_interval
        if not self._seeded:
            self._seeded = True
            self._model_version = 1
        elif self._manual_frames >= self._next_retrain:
            self._model_version += 1
        else:
            return
        self._next_retrain = (self._manual_frames // interval + 1) * interval

    # -- client side ---------------------------------------------------------

    def next_packet(self, lease_seconds: float = 60.0) -> dict | None:
        if not lease_seconds > 0:
            raise ValueError("lease_seconds must be positive")
        with self._cond:
            if self._run_error is not None:
                raise ServiceError(f"run failed: {self._run_error}")
            self._ensure_started()
            self._revert_expired()
            for entry in self._entries:
                if entry.status == STATUS_PENDING:
                    entry.status = STATUS_LEASED
                    entry.lease_expiry = self._clock() + lease_seconds
                    return self._entry_view(entry)
            return None

    def submit_labels(self, sequence: int, labels: Mapping[int | str, str]) -> dict:
        with self._cond:
            if not 0 <= sequence < len(self._entries):
                raise NotFoundError(f"no queue entry {sequence}")
            entry = self._entries[sequence]
            if entry.status == STATUS_COMPLETED:
                if self._validated_states(entry.packet, labels) == entry.labels:
                    return {"entry": self._entry_view(entry), "duplicate": True}
                raise ConflictError(
                    f"entry {sequence} is already completed with different labels"
                )
            self._revert_expired()
            if entry.status != STATUS_LEASED:
                raise ConflictError(
                    f"entry {sequence} is not leased; fetch it before submitting"
                )
            states = self._validated_states(entry.packet, labels)
            self._complete(entry, states, journal=True)
            return {"entry": self._entry_view(entry), "duplicate": False}

    def _validated_states(
        self, packet: AnnotationPacket, labels: Mapping[int | str, str]
    ) -> tuple[int, ...]:
        by_frame: dict[int, str] = {}
        for key, name in labels.items():
            try:
                frame = int(key)
            except (TypeError, ValueError):
                raise RejectedLabelsError(f"frame key {key!r} is not an integer") from None
            if frame in by_frame:
                raise RejectedLabelsError(f"duplicate label for frame {frame}")
            by_frame[frame] = name
        missing = tuple(f for f in packet.frames if f not in by_frame)
        extra = tuple(sorted(set(by_frame) - set(packet.frames)))
        if missing or extra:
            raise RejectedLabelsError(
                f"labels must cover exactly the packet frames"
                f" (missing {list(missing)}, unexpected {list(extra)})",
                missing=missing,
                extra=extra,
            )
        states = []
        for frame in packet.frames:
            name = by_frame[frame]
            state = self._name_to_state.get(name)
            if state is None:
                raise RejectedLabelsError(f"unknown state name {name!r}")
            states.append(state)
        return tuple(states)

    def _revert_expired(self) -> None:
        now = self._clock()
        for entry in self._entries:
            if entry.status == STATUS_LEASED and entry.lease_expiry <= now:
                entry.status = STATUS_PENDING
                entry.lease_expiry = None

    @property
    def drained(self) -> bool:
        with self._cond:
            return self._run is not None

    def run_result(self) -> AnnotationRun | None:
        with self._cond:
            return self._run

    def progress(self) -> dict:
        with self._cond:
            pending = sum(1 for e in self._entries if e.status != STATUS_COMPLETED)
            if self._run_error is not None:
                state = "failed"
            elif self._run is not None:
                state = "done"
            elif self._started:
                state = "running"
            else:
                state = "idle"
            snapshot = {
                "state": state,
                "drained": self._run is not None,
                "states": list(self._records.states.names),
                "pending_packets": pending,
                "model_version": self._model_version,
                "error": self._run_error,
            }
            if self._final is not None:
                snapshot.update(self._final)
                return snapshot
            total = int(self._records.present.sum())
            manual = self._manual_frames
            snapshot.update(
                {
                    "total_frames": total,
                    "manual_frames": manual,
                    "auto_frames": None,
                    "reduction_factor": total / manual if manual else float(total),
                    "accuracy": None,
                    "no_manual": manual == 0,
                }
            )
            return snapshot

    def queue_snapshot(self) -> list[dict]:
        """Durable queue state: entries with statuses and labels, no leases."""
        with self._cond:
            out = []
            for e in self._entries:
                out.append(
                    {
                        "entry_id": e.enqueue_sequence,
                        "packet_id": e.packet.packet_id,
                        "segment_id": e.packet.segment_id,
                        "reason": e.packet.reason,
                        "frames": list(e.packet.frames),
                        "completed": e.status == STATUS_COMPLETED,
                        "labels": list(e.labels) if e.labels is not None else None,
                    }
                )
            return out

    def params_dict(self) -> dict:
        with self._cond:
            return self._params.to_dict()

    def set_params(self, payload: Mapping) -> dict:
        with self._cond:
            if self._started:
                raise ConflictError("parameters are locked once the run starts")
            if self._recovering:
                raise ConflictError("parameters are pinned by the journal")
            self._params = PipelineParams.from_dict(dict(payload))
            return self._params.to_dict()

    def frame_info(self, frame_index: int) -> dict:
        records = self._records
        try:
            pos = records.position(frame_index)
        except KeyError:
            raise NotFoundError(f"no frame {frame_index}") from None
        present = bool(records.present[pos])
        score = float(records.score[pos])
        truth = int(records.truth[pos])
        info = {
            "frame_index": frame_index,
            "object_present": present,
            "class_probs": [float(p) for p in records.probs[pos]] if present else None,
            "change_score": None if np.isnan(score) else score,
            "ground_truth": records.states.names[truth] if truth >= 0 else None,
            "image": None,
        }
        if self._frame_image_path(frame_index) is not None:
            info["image"] = f"/api/frames/{frame_index}/image"
        return info

    def _frame_image_path(self, frame_index: int) -> Path | None:
        if self._images_dir is None:
            return None
        for ext in _IMAGE_TYPES:
            path = self._images_dir / f"{frame_index}{ext}"
            if path.is_file():
                return path
        return None

    def frame_image(self, frame_index: int) -> tuple[bytes, str]:
        path = self._frame_image_path(frame_index)
        if path is None:
            raise NotFoundError(f"no image for frame {frame_index}")
        return path.read_bytes(), _IMAGE_TYPES[path.suffix]

    def _entry_view(self, entry: QueueEntry) -> dict:
        remaining = None
        if entry.lease_expiry is not None:
            remaining = max(entry.lease_expiry - self._clock(), 0.0)
        return {
            "entry_id": entry.enqueue_sequence,
            "packet_id": entry.packet.packet_id,
            "segment_id": entry.packet.segment_id,
            "reason": entry.packet.reason,
            "frames": list(entry.packet.frames),
            "status": entry.status,
            "lease_seconds_remaining": remaining,
        }


# -- HTTP layer --------------------------------------------------------------

_ROUTES = (
    ("GET", re.compile(r"^/api/queue/next$"), "queue_next"),
    ("POST", re.compile(r"^/api/queue/(\d+)/labels$"), "queue_labels"),
    ("GET", re.compile(r"^/api/progress$"), "progress"),
    ("GET", re.compile(r"^/api/params$"), "params_get"),
    ("PUT", re.compile(r"^/api/params$"), "params_put"),
    ("GET", re.compile(r"^/api/frames/(\d+)$"), "frame_get"),
    ("GET", re.compile(r"^/api/frames/(\d+)/image$"), "frame_image"),
)


class ServiceServer(ThreadingHTTPServer):
    daemon_threads = True

    def __init__(self, address: tuple[str, int], service: AnnotationService):
        super().__init__(address, _Handler)
        self.service = service


class _Handler(BaseHTTPRequestHandler):
    server: ServiceServer
    protocol_version = "HTTP/1.1"

    def log_message(self, format: str, *args) -> None:
        pass

    def do_GET(self) -> None:
        self._route("GET")

    def do_POST(self) -> None:
        self._route("POST")

    def do_PUT(self) -> None:
        self._route("PUT")

    def do_OPTIONS(self) -> None:
        # preflight for the annotator page, which is served from another origin
        self.send_response(204)
        self._send_cors()
        self.send_header("Content-Length", "0")
        self.end_headers()

    def _route(self, method: str) -> None:
        url = urlparse(self.path)
        for verb, pattern, name in _ROUTES:
            match = pattern.match(url.path)
            if match and verb == method:
                try:
                    getattr(self, "_h_" + name)(url, *match.groups())
                except RejectedLabelsError as err:
                    self._send_json(
                        400,
                        {
                            "error": str(err),
                            "missing": list(err.missing),
                            "extra": list(err.extra),
                        },
                    )
                except NotFoundError as err:
                    self._send_json(404, {"error": str(err)})
                except ConflictError as err:
                    self._send_json(409, {"error": str(err)})
                except (ValueError, TypeError) as err:
                    self._send_json(400, {"error": str(err)})
                except ServiceError as err:
                    self._send_json(500, {"error": str(err)})
                return
        self._send_json(404, {"error": f"no route for {method} {url.path}"})

    def _h_queue_next(self, url) -> None:
        query = parse_qs(url.query)
        lease = float(query.get("lease", ["60"])[0])
        service = self.server.service
        entry = service.next_packet(lease)
        self._send_json(200, {"entry": entry, "drained": service.drained})

    def _h_queue_labels(self, url, entry_id: str) -> None:
        body = self._read_json()
        labels = body.get("labels")
        if not isinstance(labels, dict):
            raise ValueError('body must be {"labels": {"<frame>": "<state>"}}')
        ack = self.server.service.submit_labels(int(entry_id), labels)
        self._send_json(200, ack)

    def _h_progress(self, url) -> None:
        self._send_json(200, self.server.service.progress())

    def _h_params_get(self, url) -> None:
        self._send_json(200, self.server.service.params_dict())

    def _h_params_put(self, url) -> None:
        self._send_json(200, self.server.service.set_params(self._read_json()))

    def _h_frame_get(self, url, frame_index: str) -> None:
        self._send_json(200, self.server.service.frame_info(int(frame_index)))

    def _h_frame_image(self, url, frame_index: str) -> None:
        data, content_type = self.server.service.frame_image(int(frame_index))
        self.send_response(200)
        self._send_cors()
        self.send_header("Content-Type", content_type)
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def _read_json(self) -> dict:
        length = int(self.headers.get("Content-Length", 0))
        raw = self.rfile.read(length) if length else b""
        try:
            body = json.loads(raw or b"{}")
        except json.JSONDecodeError as err:
            raise ValueError(f"request body is not valid JSON: {err}") from None
        if not isinstance(body, dict):
            raise ValueError("request body must be a JSON object")
        return body

    def _send_cors(self) -> None:
        self.send_header("Access-Control-Allow-Origin", "*")
        self.send_header("Access-Control-Allow-Methods", "GET, POST, PUT, OPTIONS")
        self.send_header("Access-Control-Allow-Headers", "Content-Type")

    def _send_json(self, status: int, payload: dict) -> None:
        data = json.dumps(payload).encode()
        self.send_response(status)
        self._send_cors()
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)


def make_server(service: AnnotationService, port: int, host: str = "127.0.0.1") -> ServiceServer:
    """Bind the HTTP interface; the caller drives serve_forever()."""
    return ServiceServer((host, port), service)
