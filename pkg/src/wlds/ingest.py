"""TCP ingest service: framed telemetry in, one ack byte out.

Transport framing is [2-byte big-endian length][frame bytes] per record;
every record is answered with a single ack byte (0x00 Accept, 0x01
Duplicate, 0x02 Stale, 0xFF Invalid) only after the accepted reading is
durable in the store and has been offered to alerting.

Admission rules, per node across all sessions:
  - seq at or below the last accepted seq is a Duplicate (gaps are fine;
    field links drop packets, only regressions are rejected)
  - timestamps older than the staleness window are Stale
  - unknown nodes, identity changes mid-session, and undecodable frames
    are Invalid; 10 consecutive Invalids close the session as an abuse
    guard, anything less keeps it open

A session learns its node id from the first decodable frame; if a second
session claims the same node the newer one wins and the older is closed.
Last accepted seqs are seeded from the store at startup, so replaying an
old transcript after a restart stores nothing twice.
"""

from __future__ import annotations

import json
import logging
import socket
import socketserver
import threading
import time
import uuid
from dataclasses import dataclass
from enum import Enum

from .model import DEFAULT_SONIC_SPEED_MPS, NodeId, PipeSpec, TelemetryReading
from .wire import FrameRejected, decode_frame, peek_node_id

logger = logging.getLogger("wlds.ingest")

DEFAULT_STALENESS_WINDOW_MS = 300_000
MAX_INVALID_STREAK = 10

ACK_ACCEPT = 0x00
ACK_DUPLICATE = 0x01
ACK_STALE = 0x02
ACK_INVALID = 0xFF


class AdmissionKind(Enum):
    ACCEPT = "Accept"
    DUPLICATE = "Duplicate"
    STALE = "Stale"
    INVALID = "Invalid"


@dataclass(frozen=True)
class AdmissionResult:
    kind: AdmissionKind
    reason: str = ""

    @classmethod
    def accept(cls) -> "AdmissionResult":
        return cls(AdmissionKind.ACCEPT)

    @classmethod
    def invalid(cls, reason: str) -> "AdmissionResult":
        return cls(AdmissionKind.INVALID, reason)


def ack_code(result: AdmissionResult) -> int:
    return {
        AdmissionKind.ACCEPT: ACK_ACCEPT,
        AdmissionKind.DUPLICATE: ACK_DUPLICATE,
        AdmissionKind.STALE: ACK_STALE,
        AdmissionKind.INVALID: ACK_INVALID,
    }[result.kind]


@dataclass
class SessionState:
    peer: str
    node_id: NodeId | None = None
    last_seq: int = 0
    last_timestamp_ms: int = 0
    accepted: int = 0
    duplicate: int = 0
    stale: int = 0
    invalid: int = 0
    invalid_streak: int = 0

    def count(self, result: AdmissionResult) -> None:
        if result.kind is AdmissionKind.ACCEPT:
            self.accepted += 1
        elif result.kind is AdmissionKind.DUPLICATE:
            self.duplicate += 1
        elif result.kind is AdmissionKind.STALE:
            self.stale += 1
        else:
            self.invalid += 1
        if result.kind is AdmissionKind.INVALID:
            self.invalid_streak += 1
        else:
            self.invalid_streak = 0


class KeyRing:
    """Fleet-wide shared key with optional per-node overrides."""

    def __init__(self, fleet_key: bytes, node_keys: dict[uuid.UUID, bytes] | None = None):
        self.fleet_key = fleet_key
        self.node_keys = dict(node_keys or {})

    def key_for(self, node_id: uuid.UUID | None) -> bytes:
        if node_id is not None and node_id in self.node_keys:
            return self.node_keys[node_id]
        return self.fleet_key


class SpecRegistry:
    """Current per-node pipe specs; threshold edits swap in a new spec."""

    def __init__(self, specs: list[PipeSpec]):
        self._lock = threading.RLock()
        self._specs: dict[NodeId, PipeSpec] = {s.node_id: s for s in specs}

    def get(self, node_id: NodeId) -> PipeSpec | None:
        with self._lock:
            return self._specs.get(node_id)

    def put(self, spec: PipeSpec) -> None:
        with self._lock:
            self._specs[spec.node_id] = spec

    def node_ids(self) -> list[NodeId]:
        with self._lock:
            return sorted(self._specs, key=lambda n: n.hex)


def now_ms() -> int:
    return int(time.time() * 1000)


class Pipeline:
    """Admission, storage, alerting and event publication for one deployment.

    submit() is the single entry point for readings regardless of which
    session carried them; all per-node work happens under that node's lock,
    which is what gives alerting its in-order delivery guarantee.
    """

    def __init__(
        self,
        store,
        specs: SpecRegistry,
        engine=None,
        dispatcher=None,
        bus=None,
        *,
        sonic_speed_mps: float = DEFAULT_SONIC_SPEED_MPS,
        staleness_window_ms: int = DEFAULT_STALENESS_WINDOW_MS,
        clock=now_ms,
    ):
        self.store = store
        self.specs = specs
        self.engine = engine
        self.dispatcher = dispatcher
        self.bus = bus
        self.sonic_speed_mps = sonic_speed_mps
        self.staleness_window_ms = staleness_window_ms
        self.clock = clock
        self._registry_lock = threading.Lock()
        self._node_locks: dict[NodeId, threading.Lock] = {}
        self._last_seq: dict[NodeId, int] = {}
        for node_id in store.nodes():
            latest = store.latest(node_id)
            if latest is not None:
                self._last_seq[node_id] = latest.reading.seq

    def _node_lock(self, node_id: NodeId) -> threading.Lock:
        with self._registry_lock:
            lock = self._node_locks.get(node_id)
            if lock is None:
                lock = self._node_locks[node_id] = threading.Lock()
            return lock

    def last_seq(self, node_id: NodeId) -> int | None:
        with self._registry_lock:
            return self._last_seq.get(node_id)

    def submit(self, reading: TelemetryReading, session: SessionState | None = None) -> AdmissionResult:
        if session is not None and session.node_id is not None and session.node_id != reading.node_id:
            return AdmissionResult.invalid("node identity change")
        with self._node_lock(reading.node_id):
            spec = self.specs.get(reading.node_id)
            if spec is None:
                return AdmissionResult.invalid("unknown node")
            last = self._last_seq.get(reading.node_id)
            if last is not None and reading.seq <= last:
                return AdmissionResult(AdmissionKind.DUPLICATE)
            if reading.timestamp_ms < self.clock() - self.staleness_window_ms:
                return AdmissionResult(AdmissionKind.STALE)
            record = self.store.append(reading, spec, self.sonic_speed_mps)
            self._last_seq[reading.node_id] = reading.seq
            if session is not None:
                session.last_seq = reading.seq
                session.last_timestamp_ms = reading.timestamp_ms
            if self.engine is not None:
                transition = self.engine.process(record)
                if transition is not None:
                    self._publish_transition(transition)
            if self.bus is not None:
                self.bus.publish_snapshot(record, self._alert_state(reading.node_id))
            return AdmissionResult.accept()

    def _alert_state(self, node_id: NodeId) -> str:
        if self.engine is not None and self.engine.node_raised(node_id):
            return "Raised"
        return "Normal"

    def _publish_transition(self, transition) -> None:
        from .alerting import Direction

        if transition.direction is Direction.RAISED and self.dispatcher is not None:
            office = self.engine.office_by_id(transition.dispatched_to)
            if office is not None:
                self.dispatcher.enqueue(transition, office)
        if self.bus is not None:
            self.bus.publish_alert(transition)


def recv_exact(sock: socket.socket, n: int) -> bytes | None:
    """Read exactly n bytes; None on clean EOF before any byte arrives."""
    chunks: list[bytes] = []
    remaining = n
    while remaining > 0:
        chunk = sock.recv(remaining)
        if not chunk:
            return None if not chunks else b""  # b"" marks a mid-record EOF
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


class _SessionHandler(socketserver.BaseRequestHandler):
    def handle(self) -> None:  # noqa: C901 - one loop, explicit branches
        server: IngestServer = self.server  # type: ignore[assignment]
        session = SessionState(peer="%s:%d" % self.client_address[:2])
        closed_reason = "eof"
        self._closing = threading.Event()
        try:
            while not self._closing.is_set():
                header = recv_exact(self.request, 2)
                if header is None:
                    break
                if header == b"":
                    closed_reason = "transport error"
                    break
                frame_len = int.from_bytes(header, "big")
                if frame_len == 0:
                    closed_reason = "malformed length prefix"
                    break
                body = recv_exact(self.request, frame_len)
                if body is None or len(body) < frame_len:
                    closed_reason = "transport error"
                    break
                result = self._admit(server, session, body)
                session.count(result)
                if result.kind is AdmissionKind.INVALID and result.reason == "append failed":
                    closed_reason = "append failure"
                    break  # refuse to ack what we could not persist
                try:
                    self.request.sendall(bytes([ack_code(result)]))
                except OSError:
                    closed_reason = "transport error"
                    break
                if session.invalid_streak >= server.max_invalid_streak:
                    closed_reason = "invalid streak"
                    break
        except (ConnectionError, OSError) as exc:
            closed_reason = f"transport error: {exc}"
        finally:
            if self._closing.is_set():
                closed_reason = "superseded"
            if session.node_id is not None:
                server.release_node(session.node_id, self)
            server.log_session_close(session, closed_reason)

    def _admit(self, server: "IngestServer", session: SessionState, body: bytes) -> AdmissionResult:
        try:
            key = server.keys.key_for(peek_node_id(body))
            reading = decode_frame(body, key)
        except FrameRejected as exc:
            return AdmissionResult.invalid(exc.reason.value)
        if session.node_id is None:
            session.node_id = reading.node_id
            server.claim_node(reading.node_id, self)
        try:
            return server.pipeline.submit(reading, session)
        except Exception as exc:
            logger.error("append failed for node %s: %s", reading.node_id, exc)
            return AdmissionResult.invalid("append failed")

    def shutdown_session(self) -> None:
        self._closing.set()
        try:
            self.request.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass


class IngestServer(socketserver.ThreadingTCPServer):
    """One listening socket, one thread per node session."""

    allow_reuse_address = True
    daemon_threads = True

    def __init__(
        self,
        address: tuple[str, int],
        pipeline: Pipeline,
        keys: KeyRing,
        *,
        max_invalid_streak: int = MAX_INVALID_STREAK,
    ):
        super().__init__(address, _SessionHandler)
        self.pipeline = pipeline
        self.keys = keys
        self.max_invalid_streak = max_invalid_streak
        self._claims_lock = threading.Lock()
        self._claims: dict[NodeId, _SessionHandler] = {}

    @property
    def port(self) -> int:
        return self.server_address[1]

    def claim_node(self, node_id: NodeId, handler: _SessionHandler) -> None:
        with self._claims_lock:
            old = self._claims.get(node_id)
            self._claims[node_id] = handler
        if old is not None and old is not handler:
            logger.info("node %s reconnected; closing older session", node_id)
            old.shutdown_session()

    def release_node(self, node_id: NodeId, handler: _SessionHandler) -> None:
        with self._claims_lock:
            if self._claims.get(node_id) is handler:
                del self._claims[node_id]

    def log_session_close(self, session: SessionState, reason: str) -> None:
        logger.info(
            "session closed %s",
            json.dumps(
                {
                    "event": "session_close",
                    "peer": session.peer,
                    "node_id": str(session.node_id) if session.node_id else None,
                    "accepted": session.accepted,
                    "duplicate": session.duplicate,
                    "stale": session.stale,
                    "invalid": session.invalid,
                    "last_seq": session.last_seq,
                    "reason": reason,
                },
                separators=(",", ":"),
            ),
        )


def start_ingest_server(
    host: str,
    port: int,
    pipeline: Pipeline,
    keys: KeyRing,
    **kwargs,
) -> tuple[IngestServer, threading.Thread]:
    server = IngestServer((host, port), pipeline, keys, **kwargs)
    thread = threading.Thread(
        target=lambda: server.serve_forever(poll_interval=0.1), name="wlds-ingest", daemon=True
    )
    thread.start()
    return server, thread
