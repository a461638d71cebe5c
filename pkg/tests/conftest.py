"""Shared fixtures: canned nodes, a webhook stub, and wiring helpers."""

from __future__ import annotations

import json
import threading
import uuid
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest

from wlds.model import GeoPoint, PipeSpec, TelemetryReading

NODE_A = uuid.UUID("00112233-4455-6677-8899-aabbccddeeff")
NODE_B = uuid.UUID("11111111-2222-3333-4444-555555555555")

KEY = bytes(range(32))
KEY2 = bytes(range(1, 33))

DHAKA_LAT = 23.8103
DHAKA_LON = 90.4125

T0_MS = 1_700_000_000_000


def make_spec(
    node_id: uuid.UUID = NODE_A,
    *,
    pipe_height_cm: float = 100.0,
    set_limit_flow_lpm: float = 10.0,
    fill_threshold_cm: float = 50.0,
    gas_threshold_ppm: float = 300.0,
    lat: float = DHAKA_LAT,
    lon: float = DHAKA_LON,
) -> PipeSpec:
    return PipeSpec(
        node_id=node_id,
        pipe_height_cm=pipe_height_cm,
        set_limit_flow_lpm=set_limit_flow_lpm,
        fill_threshold_cm=fill_threshold_cm,
        gas_threshold_ppm=gas_threshold_ppm,
        location=GeoPoint(lat, lon),
    )


def echo_for_distance(distance_cm: float, sonic_speed_mps: float = 343.0) -> float:
    """Round-trip microseconds for a crown-to-surface distance in cm."""
    return 2.0e4 * distance_cm / sonic_speed_mps


def make_reading(
    node_id: uuid.UUID = NODE_A,
    *,
    seq: int = 1,
    timestamp_ms: int = T0_MS,
    flow_lpm: float = 15.0,
    distance_cm: float | None = None,
    echo_time_us: float | None = None,
    gas_ppm: float = 90.0,
    lat: float = DHAKA_LAT,
    lon: float = DHAKA_LON,
) -> TelemetryReading:
    if echo_time_us is None:
        echo_time_us = echo_for_distance(80.0 if distance_cm is None else distance_cm)
    return TelemetryReading(
        node_id=node_id,
        seq=seq,
        timestamp_ms=timestamp_ms,
        flow_lpm=flow_lpm,
        echo_time_us=echo_time_us,
        gas_ppm=gas_ppm,
        position=GeoPoint(lat, lon),
    )


class WebhookStub:
    """Local webhook endpoint with a scriptable status-code sequence."""

    def __init__(self, statuses: list[int] | None = None):
        self.statuses = list(statuses or [])
        self.requests: list[dict] = []
        self._lock = threading.Lock()
        stub = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                length = int(self.headers.get("Content-Length", "0"))
                body = json.loads(self.rfile.read(length) or b"{}")
                with stub._lock:
                    stub.requests.append(body)
                    status = stub.statuses.pop(0) if stub.statuses else 200
                self.send_response(status)
                self.send_header("Content-Length", "0")
                self.end_headers()

            def log_message(self, *args):
                pass

        self.server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)

    @property
    def url(self) -> str:
        return f"http://127.0.0.1:{self.server.server_address[1]}/alert"

    def start(self) -> "WebhookStub":
        self.thread.start()
        return self

    def stop(self) -> None:
        self.server.shutdown()
        self.server.server_close()


@pytest.fixture
def webhook():
    stub = WebhookStub().start()
    yield stub
    stub.stop()
