"""Operator-facing HTTP gateway: snapshots, history, map, alerts, live feed.

All bodies are JSON; /map is GeoJSON (RFC 7946) with one Point feature per
configured node whose "state" property is RED exactly when that node's
alert is raised. /alerts/stream is a server-sent-events feed carrying
every alert transition and per-reading snapshot delta in commit order,
each with a monotonically increasing event id.

Reconnecting clients present Last-Event-ID; if the requested resume point
is still inside the retention ring (last 10,000 events) the stream resumes
at exactly the next id with no loss, otherwise the first event is a
"resync" instructing the client to refetch its state. Slow consumers whose
buffer overflows are sent the same resync event and disconnected; fan-out
never applies backpressure to ingestion.

Operator writes are deliberately plain requests, not stream messages:
POST /alerts/{id}/ack and PUT /nodes/{id}/thresholds (which affects only
subsequent readings; history is immutable).
"""

from __future__ import annotations

import json
import logging
import mimetypes
import queue
import threading
from collections import deque
from dataclasses import dataclass, replace
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from urllib.parse import parse_qs, urlparse
import uuid

from .alerting import AckOutcome, AlertEngine, AlertTransition
from .ingest import SpecRegistry, now_ms
from .model import NodeId, PipeSpec, validate_pipe_spec
from .store import QueryRange, Store, StoredRecord, record_to_json

logger = logging.getLogger("wlds.gateway")

EVENT_RETENTION = 10_000
SUBSCRIBER_BUFFER = 256
HEARTBEAT_S = 15.0

_RESYNC = object()  # queue sentinel: tell the subscriber to resync and go away


@dataclass(frozen=True)
class BusEvent:
    event_id: int
    kind: str  # "alert" | "snapshot"
    data: str  # pre-serialized JSON


class Subscription:
    def __init__(self, buffer_size: int):
        self.queue: "queue.Queue[object]" = queue.Queue(maxsize=buffer_size)
        self.replay: list[BusEvent] = []
        self.needs_resync = False
        self.dead = False


class EventBus:
    """Commit-ordered fan-out with a bounded retention ring for resumes."""

    def __init__(self, retention: int = EVENT_RETENTION, subscriber_buffer: int = SUBSCRIBER_BUFFER):
        self._lock = threading.Lock()
        self._next_id = 1
        self._ring: deque[BusEvent] = deque(maxlen=retention)
        self._subs: set[Subscription] = set()
        self._subscriber_buffer = subscriber_buffer

    def last_event_id(self) -> int:
        with self._lock:
            return self._next_id - 1

    def publish(self, kind: str, data: dict) -> BusEvent:
        payload = json.dumps(data, separators=(",", ":"))
        with self._lock:
            event = BusEvent(event_id=self._next_id, kind=kind, data=payload)
            self._next_id += 1
            self._ring.append(event)
            for sub in list(self._subs):
                if sub.dead:
                    continue
                try:
                    sub.queue.put_nowait(event)
                except queue.Full:
                    sub.dead = True
                    try:
                        sub.queue.get_nowait()
                        sub.queue.put_nowait(_RESYNC)
                    except (queue.Empty, queue.Full):
                        pass
                    self._subs.discard(sub)
        return event

    def publish_alert(self, transition: AlertTransition) -> BusEvent:
        return self.publish("alert", transition.webhook_body())

    def publish_snapshot(self, record: StoredRecord, alert_state: str) -> BusEvent:
        r = record.reading
        return self.publish(
            "snapshot",
            {
                "node_id": str(r.node_id),
                "seq": r.seq,
                "timestamp_ms": r.timestamp_ms,
                "flow_lpm": r.flow_lpm,
                "garbage_level_cm": record.derived.garbage_level_cm,
                "gas_ppm": r.gas_ppm,
                "anomalous": record.derived.anomalous,
                "evaluation": record.evaluation.state.value,
                "alert_state": alert_state,
            },
        )

    def subscribe(self, last_event_id: int | None) -> Subscription:
        sub = Subscription(self._subscriber_buffer)
        with self._lock:
            published_max = self._next_id - 1
            if last_event_id is not None and last_event_id < published_max:
                replay = [e for e in self._ring if e.event_id > last_event_id]
                if replay and replay[0].event_id == last_event_id + 1:
                    sub.replay = replay
                else:
                    sub.needs_resync = True  # resume point fell off the ring
            elif last_event_id is not None and last_event_id > published_max:
                sub.needs_resync = True  # client remembers a different life
            self._subs.add(sub)
        return sub

    def unsubscribe(self, sub: Subscription) -> None:
        with self._lock:
            sub.dead = True
            self._subs.discard(sub)


class GatewayApp:
    """Shared context behind the HTTP handler."""

    def __init__(
        self,
        store: Store,
        specs: SpecRegistry,
        engine: AlertEngine,
        bus: EventBus,
        *,
        on_ack=None,
        on_threshold_change=None,
        dashboard_dir: str | Path | None = None,
    ):
        self.store = store
        self.specs = specs
        self.engine = engine
        self.bus = bus
        self.on_ack = on_ack
        self.on_threshold_change = on_threshold_change
        self.dashboard_dir = Path(dashboard_dir) if dashboard_dir else None

    # -- views ------------------------------------------------------------

    def node_snapshot(self, node_id: NodeId) -> dict | None:
        spec = self.specs.get(node_id)
        if spec is None:
            return None
        latest = self.store.latest(node_id)
        snapshot = {
            "node_id": str(node_id),
            "spec": {
                "pipe_height_cm": spec.pipe_height_cm,
                "set_limit_flow_lpm": spec.set_limit_flow_lpm,
                "fill_threshold_cm": spec.fill_threshold_cm,
                "gas_threshold_ppm": spec.gas_threshold_ppm,
            },
            "position": {"lat_deg": spec.location.lat_deg, "lon_deg": spec.location.lon_deg},
            "latest": None,
            "alert_state": "Raised" if self.engine.node_raised(node_id) else "Normal",
            "active_alert_id": self.engine.active_alert_id(node_id),
        }
        if latest is not None:
            snapshot["latest"] = {
                "seq": latest.reading.seq,
                "timestamp_ms": latest.reading.timestamp_ms,
                "flow_lpm": latest.reading.flow_lpm,
                "garbage_level_cm": latest.derived.garbage_level_cm,
                "gas_ppm": latest.reading.gas_ppm,
                "anomalous": latest.derived.anomalous,
                "evaluation": latest.evaluation.state.value,
            }
        return snapshot

    def map_document(self) -> dict:
        features = []
        for node_id in self.specs.node_ids():
            spec = self.specs.get(node_id)
            latest = self.store.latest(node_id)
            raised = self.engine.node_raised(node_id)
            features.append(
                {
                    "type": "Feature",
                    "geometry": {
                        "type": "Point",
                        "coordinates": [spec.location.lon_deg, spec.location.lat_deg],
                    },
                    "properties": {
                        "node_id": str(node_id),
                        "state": "RED" if raised else "GREEN",
                        "garbage_level_cm": latest.derived.garbage_level_cm if latest else None,
                    },
                }
            )
        return {"type": "FeatureCollection", "features": features}

    def update_thresholds(self, node_id: NodeId, fields: dict) -> tuple[int, dict]:
        spec = self.specs.get(node_id)
        if spec is None:
            return 404, {"error": "unknown node"}
        allowed = {"set_limit_flow_lpm", "fill_threshold_cm", "gas_threshold_ppm"}
        unknown = set(fields) - allowed
        if unknown:
            return 400, {"error": f"unknown threshold fields: {sorted(unknown)}"}
        try:
            numeric = {k: float(v) for k, v in fields.items()}
        except (TypeError, ValueError):
            return 400, {"error": "threshold values must be numbers"}
        candidate = replace(spec, **numeric)
        violations = validate_pipe_spec(candidate)
        if violations:
            return 400, {"error": "invalid thresholds", "violations": violations}
        self.specs.put(candidate)
        if self.on_threshold_change is not None:
            self.on_threshold_change(candidate)
        return 200, self.node_snapshot(node_id)

    def ack_alert(self, alert_id: str, operator_id: str) -> tuple[int, dict]:
        at = now_ms()
        outcome = self.engine.ack(alert_id, operator_id, at)
        if outcome is AckOutcome.UNKNOWN:
            return 404, {"error": "unknown alert"}
        if outcome is AckOutcome.ALREADY_ACKED:
            return 409, {"error": "alert already acknowledged", "alert": self.engine.get_alert(alert_id).to_json()}
        if outcome is AckOutcome.CLEARED:
            return 409, {"error": "alert already cleared", "alert": self.engine.get_alert(alert_id).to_json()}
        if self.on_ack is not None:
            self.on_ack(alert_id, operator_id, at)
        return 200, self.engine.get_alert(alert_id).to_json()


def _parse_node_id(raw: str) -> NodeId | None:
    try:
        return uuid.UUID(raw)
    except ValueError:
        return None


class GatewayHandler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    server_version = "wlds-gateway"

    # -- plumbing ----------------------------------------------------------

    @property
    def app(self) -> GatewayApp:
        return self.server.app  # type: ignore[attr-defined]

    def log_message(self, fmt, *args):  # route through logging, not stderr
        logger.debug("%s %s", self.address_string(), fmt % args)

    def _send_json(self, code: int, obj, content_type: str = "application/json") -> None:
        body = json.dumps(obj).encode()
        self.send_response(code)
        self.send_header("Content-Type", content_type)
        self.send_header("Content-Length", str(len(body)))
        self.send_header("Access-Control-Allow-Origin", "*")
        self.end_headers()
        self.wfile.write(body)

    def _error(self, code: int, message: str, **extra) -> None:
        self._send_json(code, {"error": message, **extra})

    def _read_body_json(self) -> dict | None:
        try:
            length = int(self.headers.get("Content-Length", "0"))
            raw = self.rfile.read(length) if length else b"{}"
            doc = json.loads(raw.decode("utf-8"))
        except (ValueError, UnicodeDecodeError):
            return None
        return doc if isinstance(doc, dict) else None

    # -- routing -----------------------------------------------------------

    def do_OPTIONS(self) -> None:
        self.send_response(204)
        self.send_header("Access-Control-Allow-Origin", "*")
        self.send_header("Access-Control-Allow-Methods", "GET, POST, PUT, OPTIONS")
        self.send_header("Access-Control-Allow-Headers", "Content-Type, Last-Event-ID")
        self.send_header("Content-Length", "0")
        self.end_headers()

    def do_GET(self) -> None:
        url = urlparse(self.path)
        parts = [p for p in url.path.split("/") if p]
        query = parse_qs(url.query)
        if url.path == "/healthz":
            self._send_json(200, {"ok": True})
        elif url.path == "/nodes":
            self._send_json(200, [self.app.node_snapshot(n) for n in self.app.specs.node_ids()])
        elif len(parts) == 2 and parts[0] == "nodes":
            self._get_node(parts[1])
        elif len(parts) == 3 and parts[0] == "nodes" and parts[2] == "history":
            self._get_history(parts[1], query)
        elif url.path == "/map":
            self._send_json(200, self.app.map_document(), content_type="application/geo+json")
        elif url.path == "/alerts":
            self._get_alerts(query)
        elif url.path == "/alerts/stream":
            self._stream_events(query)
        elif self.app.dashboard_dir is not None:
            self._serve_static(url.path)
        else:
            self._error(404, "not found")

    def do_POST(self) -> None:
        parts = [p for p in urlparse(self.path).path.split("/") if p]
        if len(parts) == 3 and parts[0] == "alerts" and parts[2] == "ack":
            body = self._read_body_json()
            if body is None or not isinstance(body.get("operator_id"), str) or not body["operator_id"]:
                self._error(400, "body must be JSON with a non-empty operator_id")
                return
            code, doc = self.app.ack_alert(parts[1], body["operator_id"])
            self._send_json(code, doc)
        else:
            self._error(404, "not found")

    def do_PUT(self) -> None:
        parts = [p for p in urlparse(self.path).path.split("/") if p]
        if len(parts) == 3 and parts[0] == "nodes" and parts[2] == "thresholds":
            node_id = _parse_node_id(parts[1])
            if node_id is None:
                self._error(404, "unknown node")
                return
            body = self._read_body_json()
            if body is None:
                self._error(400, "body must be a JSON object")
                return
            code, doc = self.app.update_thresholds(node_id, body)
            self._send_json(code, doc)
        else:
            self._error(404, "not found")

    # -- GET endpoints -------------------------------------------------------

    def _get_node(self, raw_id: str) -> None:
        node_id = _parse_node_id(raw_id)
        snapshot = self.app.node_snapshot(node_id) if node_id else None
        if snapshot is None:
            self._error(404, "unknown node")
        else:
            self._send_json(200, snapshot)

    def _get_history(self, raw_id: str, query: dict) -> None:
        node_id = _parse_node_id(raw_id)
        if node_id is None or self.app.specs.get(node_id) is None:
            self._error(404, "unknown node")
            return
        try:
            from_ms = int(query["from"][0])
            to_ms = int(query["to"][0])
        except (KeyError, ValueError, IndexError):
            self._error(400, "history requires integer 'from' and 'to' query parameters")
            return
        try:
            q = QueryRange(node_id=node_id, from_ms=from_ms, to_ms=to_ms)
        except ValueError as exc:
            self._error(400, str(exc))
            return
        self._send_json(200, [record_to_json(r) for r in self.app.store.range(q)])

    def _get_alerts(self, query: dict) -> None:
        active: bool | None = None
        raw = query.get("active", [None])[0]
        if raw is not None:
            if raw not in ("true", "false"):
                self._error(400, "active must be true or false")
                return
            active = raw == "true"
        self._send_json(200, [a.to_json() for a in self.app.engine.alerts(active)])

    # -- SSE ----------------------------------------------------------------

    def _stream_events(self, query: dict) -> None:
        last_id: int | None = None
        header = self.headers.get("Last-Event-ID")
        raw = header if header is not None else query.get("last_event_id", [None])[0]
        if raw is not None:
            try:
                last_id = int(raw)
            except ValueError:
                self._error(400, "Last-Event-ID must be an integer")
                return
        sub = self.app.bus.subscribe(last_id)
        try:
            self.send_response(200)
            self.send_header("Content-Type", "text/event-stream")
            self.send_header("Cache-Control", "no-cache")
            self.send_header("Access-Control-Allow-Origin", "*")
            self.send_header("Connection", "close")
            self.end_headers()
            if sub.needs_resync:
                self._write_resync()
            for event in sub.replay:
                self._write_event(event)
            while not sub.dead:
                try:
                    item = sub.queue.get(timeout=HEARTBEAT_S)
                except queue.Empty:
                    self.wfile.write(b": keep-alive\n\n")
                    self.wfile.flush()
                    continue
                if item is _RESYNC:
                    self._write_resync()
                    break  # slow consumer: resync and disconnect
                self._write_event(item)
        except (BrokenPipeError, ConnectionResetError, OSError):
            pass
        finally:
            self.app.bus.unsubscribe(sub)
            self.close_connection = True

    def _write_event(self, event: BusEvent) -> None:
        frame = f"id: {event.event_id}\nevent: {event.kind}\ndata: {event.data}\n\n"
        self.wfile.write(frame.encode())
        self.wfile.flush()

    def _write_resync(self) -> None:
        data = json.dumps({"reason": "resync required"})
        self.wfile.write(f"event: resync\ndata: {data}\n\n".encode())
        self.wfile.flush()

    # -- static dashboard ----------------------------------------------------

    def _serve_static(self, path: str) -> None:
        root = self.app.dashboard_dir.resolve()
        rel = path.lstrip("/") or "index.html"
        target = (root / rel).resolve()
        if not str(target).startswith(str(root)) or not target.is_file():
            self._error(404, "not found")
            return
        body = target.read_bytes()
        ctype = mimetypes.guess_type(str(target))[0] or "application/octet-stream"
        self.send_response(200)
        self.send_header("Content-Type", ctype)
        self.send_header("Content-Length", str(len(body)))
        self.send_header("Access-Control-Allow-Origin", "*")
        self.end_headers()
        self.wfile.write(body)


class GatewayServer(ThreadingHTTPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, address: tuple[str, int], app: GatewayApp):
        super().__init__(address, GatewayHandler)
        self.app = app

    @property
    def port(self) -> int:
        return self.server_address[1]


def start_gateway(host: str, port: int, app: GatewayApp) -> tuple[GatewayServer, threading.Thread]:
    server = GatewayServer((host, port), app)
    thread = threading.Thread(
        target=lambda: server.serve_forever(poll_interval=0.1), name="wlds-gateway", daemon=True
    )
    thread.start()
    return server, thread
