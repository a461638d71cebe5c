"""Alert state machine and nearest-office dispatch.

Per-reading evaluations are noisy; a maintenance crew should not be paged
for one glitchy sample. The engine therefore debounces: an alert is raised
only after raise_after consecutive Warning evaluations and cleared only
after clear_after consecutive Normal ones (both default 3; set both to 1
for raise-on-first-warning behavior). Per node the emitted transitions
strictly alternate Raised, Cleared, Raised, ...

Raised transitions are routed to the maintenance office nearest the node
by great-circle distance and delivered as a JSON webhook POST with
exponential-backoff retries. Delivery runs on a dedicated worker behind a
bounded queue so a slow or dead webhook can never stall ingestion.

Alert ids are derived from the raising record's node and ingest offset, so
replaying the same stored history always reproduces the same transitions;
that is how alert state survives a server restart.
"""

from __future__ import annotations

import json
import logging
import math
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import httpx

from .model import AlertCause, AlertState, GeoPoint, NodeId, cause_names
from .store import StoredRecord

logger = logging.getLogger("wlds.alerting")

EARTH_RADIUS_KM = 6371.0

# seconds to wait before retry k (scaled by DispatchConfig.backoff_base_s)
BACKOFF_SCHEDULE = (1.0, 2.0, 4.0, 8.0, 16.0)


class RegistryError(Exception):
    pass


@dataclass(frozen=True)
class MaintenanceOffice:
    office_id: str
    name: str
    location: GeoPoint
    webhook_url: str


def haversine_km(a: GeoPoint, b: GeoPoint) -> float:
    """Great-circle distance between two points, Earth radius 6371.0 km."""
    lat1, lon1 = math.radians(a.lat_deg), math.radians(a.lon_deg)
    lat2, lon2 = math.radians(b.lat_deg), math.radians(b.lon_deg)
    dlat = lat2 - lat1
    dlon = lon2 - lon1
    h = math.sin(dlat / 2) ** 2 + math.cos(lat1) * math.cos(lat2) * math.sin(dlon / 2) ** 2
    return 2 * EARTH_RADIUS_KM * math.asin(math.sqrt(h))


def nearest_office(p: GeoPoint, registry: list[MaintenanceOffice]) -> MaintenanceOffice:
    """Office minimizing haversine distance; ties go to the smallest office_id."""
    if not registry:
        raise RegistryError("office registry is empty")
    return min(registry, key=lambda o: (haversine_km(p, o.location), o.office_id))


def load_office_registry(path: str | Path) -> list[MaintenanceOffice]:
    """Load and validate the office registry JSON file."""
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    if not isinstance(raw, list) or not raw:
        raise RegistryError("office registry must be a non-empty JSON array")
    offices: list[MaintenanceOffice] = []
    seen: set[str] = set()
    for i, entry in enumerate(raw):
        try:
            office = MaintenanceOffice(
                office_id=str(entry["office_id"]),
                name=str(entry["name"]),
                location=GeoPoint(float(entry["lat_deg"]), float(entry["lon_deg"])),
                webhook_url=str(entry["webhook_url"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise RegistryError(f"office entry {i} invalid: {exc}") from exc
        if office.office_id in seen:
            raise RegistryError(f"duplicate office_id {office.office_id!r}")
        seen.add(office.office_id)
        offices.append(office)
    return offices


class Direction(Enum):
    RAISED = "Raised"
    CLEARED = "Cleared"


@dataclass(frozen=True)
class AlertTransition:
    alert_id: str
    node_id: NodeId
    direction: Direction
    causes: AlertCause
    garbage_level_cm: float
    at_ms: int
    position: GeoPoint
    dispatched_to: str | None = None  # office_id, Raised only

    def webhook_body(self) -> dict:
        return {
            "alert_id": self.alert_id,
            "node_id": str(self.node_id),
            "direction": self.direction.value,
            "causes": cause_names(self.causes),
            "garbage_level_cm": self.garbage_level_cm,
            "lat_deg": self.position.lat_deg,
            "lon_deg": self.position.lon_deg,
            "at_ms": self.at_ms,
        }


@dataclass(frozen=True)
class DispatchResult:
    delivered: bool
    attempts: int


@dataclass
class Ack:
    operator_id: str
    at_ms: int


@dataclass
class AlertRecord:
    """Bookkeeping for one raised alert across its lifetime."""

    alert_id: str
    node_id: NodeId
    causes: AlertCause
    garbage_level_cm: float
    raised_at_ms: int
    position: GeoPoint
    dispatched_to: str
    dispatch: DispatchResult | None = None
    ack: Ack | None = None
    cleared_at_ms: int | None = None

    @property
    def active(self) -> bool:
        return self.cleared_at_ms is None

    def to_json(self) -> dict:
        return {
            "alert_id": self.alert_id,
            "node_id": str(self.node_id),
            "causes": cause_names(self.causes),
            "garbage_level_cm": self.garbage_level_cm,
            "raised_at_ms": self.raised_at_ms,
            "lat_deg": self.position.lat_deg,
            "lon_deg": self.position.lon_deg,
            "dispatched_to": self.dispatched_to,
            "dispatch": (
                {"delivered": self.dispatch.delivered, "attempts": self.dispatch.attempts}
                if self.dispatch
                else None
            ),
            "ack": (
                {"operator_id": self.ack.operator_id, "at_ms": self.ack.at_ms} if self.ack else None
            ),
            "cleared_at_ms": self.cleared_at_ms,
            "active": self.active,
        }


@dataclass
class DebounceConfig:
    raise_after: int = 3
    clear_after: int = 3

    def __post_init__(self) -> None:
        if self.raise_after < 1 or self.clear_after < 1:
            raise ValueError("raise_after and clear_after must both be >= 1")


class AckOutcome(Enum):
    OK = "ok"
    UNKNOWN = "unknown"
    ALREADY_ACKED = "already_acked"
    CLEARED = "cleared"


@dataclass
class _NodeAlarm:
    raised: bool = False
    warn_streak: int = 0
    normal_streak: int = 0
    active_alert_id: str | None = None


class AlertEngine:
    """Two-state debounced alarm per node, fed records in ingest order."""

    def __init__(self, offices: list[MaintenanceOffice], debounce: DebounceConfig | None = None):
        if not offices:
            raise RegistryError("office registry must be non-empty at startup")
        self.offices = list(offices)
        self.debounce = debounce or DebounceConfig()
        self._lock = threading.RLock()
        self._nodes: dict[NodeId, _NodeAlarm] = {}
        self._alerts: dict[str, AlertRecord] = {}
        self._transitions: list[AlertTransition] = []

    def process(self, record: StoredRecord) -> AlertTransition | None:
        """Advance one node's alarm with one stored record."""
        warning = record.evaluation.state is AlertState.WARNING
        node_id = record.reading.node_id
        with self._lock:
            alarm = self._nodes.setdefault(node_id, _NodeAlarm())
            if warning:
                alarm.warn_streak += 1
                alarm.normal_streak = 0
            else:
                alarm.normal_streak += 1
                alarm.warn_streak = 0

            if not alarm.raised and alarm.warn_streak >= self.debounce.raise_after:
                alarm.raised = True
                alarm.warn_streak = 0
                alert_id = f"{node_id.hex}-{record.ingest_offset}"
                office = nearest_office(record.reading.position, self.offices)
                transition = AlertTransition(
                    alert_id=alert_id,
                    node_id=node_id,
                    direction=Direction.RAISED,
                    causes=record.evaluation.causes,
                    garbage_level_cm=record.evaluation.garbage_level_cm,
                    at_ms=record.reading.timestamp_ms,
                    position=record.reading.position,
                    dispatched_to=office.office_id,
                )
                alarm.active_alert_id = alert_id
                self._alerts[alert_id] = AlertRecord(
                    alert_id=alert_id,
                    node_id=node_id,
                    causes=record.evaluation.causes,
                    garbage_level_cm=record.evaluation.garbage_level_cm,
                    raised_at_ms=record.reading.timestamp_ms,
                    position=record.reading.position,
                    dispatched_to=office.office_id,
                )
                self._transitions.append(transition)
                return transition

            if alarm.raised and alarm.normal_streak >= self.debounce.clear_after:
                alarm.raised = False
                alarm.normal_streak = 0
                alert_id = alarm.active_alert_id or f"{node_id.hex}-{record.ingest_offset}"
                alarm.active_alert_id = None
                transition = AlertTransition(
                    alert_id=alert_id,
                    node_id=node_id,
                    direction=Direction.CLEARED,
                    causes=AlertCause.NONE,
                    garbage_level_cm=record.evaluation.garbage_level_cm,
                    at_ms=record.reading.timestamp_ms,
                    position=record.reading.position,
                )
                existing = self._alerts.get(alert_id)
                if existing is not None:
                    existing.cleared_at_ms = record.reading.timestamp_ms
                self._transitions.append(transition)
                return transition
        return None

    def office_by_id(self, office_id: str) -> MaintenanceOffice | None:
        for office in self.offices:
            if office.office_id == office_id:
                return office
        return None

    def node_raised(self, node_id: NodeId) -> bool:
        with self._lock:
            alarm = self._nodes.get(node_id)
            return bool(alarm and alarm.raised)

    def active_alert_id(self, node_id: NodeId) -> str | None:
        with self._lock:
            alarm = self._nodes.get(node_id)
            return alarm.active_alert_id if alarm else None

    def alerts(self, active: bool | None = None) -> list[AlertRecord]:
        with self._lock:
            records = sorted(self._alerts.values(), key=lambda a: (a.raised_at_ms, a.alert_id))
            if active is None:
                return records
            return [a for a in records if a.active == active]

    def get_alert(self, alert_id: str) -> AlertRecord | None:
        with self._lock:
            return self._alerts.get(alert_id)

    def transitions(self) -> list[AlertTransition]:
        with self._lock:
            return list(self._transitions)

    def ack(self, alert_id: str, operator_id: str, at_ms: int) -> AckOutcome:
        """Acknowledge an active alert; once per alert, never after clearing."""
        with self._lock:
            alert = self._alerts.get(alert_id)
            if alert is None:
                return AckOutcome.UNKNOWN
            if not alert.active:
                return AckOutcome.CLEARED
            if alert.ack is not None:
                return AckOutcome.ALREADY_ACKED
            alert.ack = Ack(operator_id=operator_id, at_ms=at_ms)
            return AckOutcome.OK

    def restore_ack(self, alert_id: str, operator_id: str, at_ms: int) -> None:
        """Reapply a persisted ack during recovery (cleared alerts keep theirs)."""
        with self._lock:
            alert = self._alerts.get(alert_id)
            if alert is not None and alert.ack is None:
                alert.ack = Ack(operator_id=operator_id, at_ms=at_ms)

    def record_dispatch(self, alert_id: str, result: DispatchResult) -> None:
        with self._lock:
            alert = self._alerts.get(alert_id)
            if alert is not None:
                alert.dispatch = result


@dataclass
class DispatchConfig:
    max_attempts: int = 5
    backoff_base_s: float = 1.0  # scales the 1,2,4,8,16 schedule
    queue_size: int = 1024
    request_timeout_s: float = 5.0


def _http_post_transport(url: str, body: dict, timeout_s: float) -> int:
    resp = httpx.post(url, json=body, timeout=timeout_s)
    return resp.status_code


class Dispatcher:
    """Webhook delivery worker behind a bounded drop-oldest queue."""

    def __init__(
        self,
        engine: AlertEngine,
        config: DispatchConfig | None = None,
        transport=None,
        sleeper=None,
    ):
        self.engine = engine
        self.config = config or DispatchConfig()
        self.transport = transport or _http_post_transport
        self._stopping = threading.Event()
        # default sleeper aborts promptly when the dispatcher is stopped
        self.sleeper = sleeper if sleeper is not None else self._stopping.wait
        self._queue: deque[tuple[AlertTransition, MaintenanceOffice]] = deque()
        self._cv = threading.Condition()
        self._stop = False
        self._thread = threading.Thread(target=self._worker, name="wlds-dispatch", daemon=True)
        self._idle = threading.Event()
        self._idle.set()

    def start(self) -> None:
        self._thread.start()

    def stop(self) -> None:
        with self._cv:
            self._stop = True
            self._stopping.set()
            self._cv.notify_all()
        self._thread.join(timeout=10)

    def enqueue(self, transition: AlertTransition, office: MaintenanceOffice) -> None:
        """Queue a Raised transition for delivery; drops the oldest on overflow."""
        if transition.direction is not Direction.RAISED:
            raise ValueError("only Raised transitions are dispatched")
        with self._cv:
            if len(self._queue) >= self.config.queue_size:
                dropped, _ = self._queue.popleft()
                logger.warning("dispatch queue full; dropping pending alert %s", dropped.alert_id)
            self._queue.append((transition, office))
            self._idle.clear()
            self._cv.notify()

    def wait_idle(self, timeout: float | None = None) -> bool:
        """Block until the queue is drained and no delivery is in flight."""
        return self._idle.wait(timeout)

    def _worker(self) -> None:
        while True:
            with self._cv:
                while not self._queue and not self._stop:
                    self._idle.set()
                    self._cv.wait(timeout=0.5)
                if self._stop and not self._queue:
                    self._idle.set()
                    return
                transition, office = self._queue.popleft()
            try:
                result = self._deliver(transition, office)
            except Exception:
                logger.exception("dispatch worker error for alert %s", transition.alert_id)
                result = DispatchResult(delivered=False, attempts=self.config.max_attempts)
            self.engine.record_dispatch(transition.alert_id, result)

    def _deliver(self, transition: AlertTransition, office: MaintenanceOffice) -> DispatchResult:
        body = transition.webhook_body()
        for attempt in range(1, self.config.max_attempts + 1):
            try:
                status = self.transport(office.webhook_url, body, self.config.request_timeout_s)
            except Exception as exc:
                logger.warning(
                    "alert %s attempt %d to %s failed: %s",
                    transition.alert_id, attempt, office.webhook_url, exc,
                )
                status = None
            if status is not None and 200 <= status < 300:
                logger.info(
                    "alert %s delivered to office %s in %d attempt(s)",
                    transition.alert_id, office.office_id, attempt,
                )
                return DispatchResult(delivered=True, attempts=attempt)
            if self._stopping.is_set():
                return DispatchResult(delivered=False, attempts=attempt)
            if attempt < self.config.max_attempts:
                delay = BACKOFF_SCHEDULE[min(attempt - 1, len(BACKOFF_SCHEDULE) - 1)]
                self.sleeper(delay * self.config.backoff_base_s)
        logger.error(
            "alert %s to office %s gave up after %d attempts",
            transition.alert_id, office.office_id, self.config.max_attempts,
        )
        return DispatchResult(delivered=False, attempts=self.config.max_attempts)
