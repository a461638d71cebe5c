"""Acceptance suite: one test per release criterion, each printing a
PASS/FAIL line (run with -s to watch). Oracles are brute force throughout:
hand arithmetic, exhaustive scans, an in-memory reference store, and an
independently coded warning rule.

The end-to-end and durability criteria drive the real stack: simulated
fleet over TCP into a live server (in-process for the scenario, a killed
and restarted subprocess for durability), queried back over HTTP.
"""

import json
import random
import signal
import socket
import subprocess
import sys
import threading
import time
import uuid
from pathlib import Path

import httpx
import pytest

from wlds.alerting import (
    AlertEngine,
    DebounceConfig,
    Dispatcher,
    DispatchConfig,
    Direction,
    MaintenanceOffice,
    haversine_km,
    nearest_office,
)
from wlds.client import SinkError, TcpFleetSink
from wlds.config import config_from_dict
from wlds.gateway import EventBus, GatewayApp, start_gateway
from wlds.ingest import ACK_ACCEPT, KeyRing, Pipeline, SpecRegistry, start_ingest_server
from wlds.model import (
    GeoPoint,
    TelemetryReading,
    cause_names,
    clog_level,
    echo_to_distance,
)
from wlds.sim import ScenarioConfig, build_fleet, load_scenario
from wlds.store import QueryRange, Store
from wlds.wire import FrameRejected, FRAME_LEN, decode_frame, encode_frame

from conftest import KEY, T0_MS, WebhookStub, make_reading, make_spec

REPO = Path(__file__).parent.parent
SCENARIO = REPO / "docs" / "examples" / "scenario.json"
OFFICES = REPO / "docs" / "examples" / "offices.json"


def report(name: str, ok: bool, detail: str = ""):
    line = f"[{'PASS' if ok else 'FAIL'}] {name}"
    if detail:
        line += f" ({detail})"
    print(line)
    assert ok, line


# -- criterion 1: formula fidelity ---------------------------------------------


def test_formula_fidelity():
    echo = echo_to_distance(10_000, 343)
    level = clog_level(100, 60).garbage_level_cm
    ok = (
        abs(echo - 171.5) / 171.5 <= 1e-9
        and abs(level - 40.0) / 40.0 <= 1e-9
    )
    report("formula fidelity", ok, f"echo={echo!r} cm, garbage={level!r} cm")


# -- criterion 2: rule-engine truth table ----------------------------------------


def test_rule_engine_truth_table():
    def brute(flow, distance, gas, setlimit, fill_th, gas_th, ph=100.0):
        fill = ph - distance if distance <= ph else 0.0
        causes = set()
        if flow < setlimit and fill > fill_th:
            causes.add("ClogRule")
        if gas > gas_th:
            causes.add("GasThreshold")
        return causes

    from wlds.model import evaluate_warning

    settings = [(7.5, 33.0, 305.0), (9.5, 47.0, 155.0), (12.5, 61.0, 455.0)]
    agree = total = 0
    started = time.monotonic()
    for setlimit, fill_th, gas_th in settings:
        spec = make_spec(set_limit_flow_lpm=setlimit, fill_threshold_cm=fill_th, gas_threshold_ppm=gas_th)
        for flow in (i * 1.0 for i in range(21)):
            for distance in (i * 6.0 for i in range(21)):
                echo = 2.0e4 * distance / 343.0
                for gas in (i * 30.0 for i in range(21)):
                    ev = evaluate_warning(make_reading(flow_lpm=flow, echo_time_us=echo, gas_ppm=gas), spec)
                    total += 1
                    if set(cause_names(ev.causes)) == brute(flow, distance, gas, setlimit, fill_th, gas_th):
                        agree += 1
    elapsed = time.monotonic() - started
    report(
        "rule-engine truth table",
        agree == total == 3 * 21 ** 3,
        f"{agree}/{total} agree in {elapsed:.2f}s",
    )


# -- criterion 3: codec robustness -----------------------------------------------


def test_codec_robustness():
    rng = random.Random(20260809)
    started = time.monotonic()

    def reading():
        return TelemetryReading(
            node_id=uuid.UUID(int=rng.getrandbits(128) or 1),
            seq=rng.randrange(0, 2**32),
            timestamp_ms=rng.randrange(0, 2**48),
            flow_lpm=rng.uniform(0, 4_000_000),
            echo_time_us=rng.uniform(0, 4e9),
            gas_ppm=rng.uniform(0, 6553.5),
            position=GeoPoint(rng.uniform(-90, 90), rng.uniform(-180, 180)),
        )

    lossless = 0
    n_round = 100_000
    for _ in range(n_round):
        original = reading()
        decoded = decode_frame(encode_frame(original, KEY), KEY)
        if (
            decoded.node_id == original.node_id
            and decoded.seq == original.seq
            and decoded.timestamp_ms == original.timestamp_ms
            and abs(decoded.flow_lpm - original.flow_lpm) <= 0.0005 + 1e-9
            and abs(decoded.echo_time_us - original.echo_time_us) <= 0.5 + 1e-9
            and abs(decoded.gas_ppm - original.gas_ppm) <= 0.05 + 1e-9
            and abs(decoded.position.lat_deg - original.position.lat_deg) <= 5e-8 + 1e-12
            and abs(decoded.position.lon_deg - original.position.lon_deg) <= 5e-8 + 1e-12
        ):
            lossless += 1

    frames = [encode_frame(reading(), KEY) for _ in range(1000)]
    rejected = 0
    n_mut = 100_000
    for i in range(n_mut):
        frame = bytearray(frames[i % len(frames)])
        pos = rng.randrange(FRAME_LEN)
        old = frame[pos]
        new = rng.randrange(256)
        while new == old:
            new = rng.randrange(256)
        frame[pos] = new
        try:
            decode_frame(bytes(frame), KEY)
        except FrameRejected:
            rejected += 1

    golden_ok = True
    for name in ("golden_frame_1", "golden_frame_2"):
        doc = json.loads((Path(__file__).parent / "fixtures" / f"{name}.json").read_text())
        blob = (Path(__file__).parent / "fixtures" / f"{name}.bin").read_bytes()
        decoded = decode_frame(blob, bytes.fromhex(doc["key_hex"]))
        r = doc["reading"]
        golden_ok &= (
            str(decoded.node_id) == r["node_id"]
            and decoded.seq == r["seq"]
            and decoded.timestamp_ms == r["timestamp_ms"]
            and decoded.flow_lpm == r["flow_lpm"]
            and decoded.echo_time_us == r["echo_time_us"]
            and decoded.gas_ppm == r["gas_ppm"]
            and decoded.position.lat_deg == r["lat_deg"]
            and decoded.position.lon_deg == r["lon_deg"]
        )
    elapsed = time.monotonic() - started
    report(
        "codec robustness",
        lossless == n_round and rejected == n_mut and golden_ok,
        f"{lossless}/{n_round} lossless, {rejected}/{n_mut} mutations rejected, "
        f"golden={'ok' if golden_ok else 'BAD'} in {elapsed:.1f}s",
    )


# -- criterion 4: end-to-end scenario --------------------------------------------


def _office_registry(webhook_url):
    return [
        MaintenanceOffice(o["office_id"], o["name"], GeoPoint(o["lat_deg"], o["lon_deg"]), webhook_url)
        for o in json.loads(OFFICES.read_text())
    ]


def _run_scenario_once(tmp_path, run_id, webhook):
    scenario = load_scenario(SCENARIO)
    scenario.start_time_ms = T0_MS
    scenario.time_acceleration = 100.0

    store = Store(tmp_path / f"run{run_id}", sync="never")
    offices = _office_registry(webhook.url)
    engine = AlertEngine(offices, DebounceConfig())
    bus = EventBus()
    dispatcher = Dispatcher(engine, DispatchConfig(backoff_base_s=0.01))
    dispatcher.start()
    specs = SpecRegistry(scenario.nodes)
    pipeline = Pipeline(store, specs, engine, dispatcher, bus, staleness_window_ms=10**15)
    server, _ = start_ingest_server("127.0.0.1", 0, pipeline, KeyRing(KEY))
    try:
        fleet = build_fleet(scenario)
        with TcpFleetSink("127.0.0.1", server.port, KEY) as sink:
            stats = fleet.run(300, sink, pace=True)
        assert not stats.aborted and sink.accepted == 3000
        assert dispatcher.wait_idle(timeout=20)
        stored = sum(store.count(n) for n in store.nodes())
        log = [
            (
                str(t.node_id),
                t.direction.value,
                tuple(cause_names(t.causes)),
                round(t.garbage_level_cm, 9),
                t.at_ms,
                t.dispatched_to,
                t.alert_id,
            )
            for t in engine.transitions()
        ]
        alerts = {a.alert_id: a for a in engine.alerts()}
        return stored, log, alerts, scenario, offices
    finally:
        server.shutdown()
        server.server_close()
        dispatcher.stop()
        store.close()


def test_end_to_end_scenario(tmp_path):
    started = time.monotonic()
    webhook = WebhookStub().start()
    try:
        stored1, log1, alerts1, scenario, offices = _run_scenario_once(tmp_path, 1, webhook)
        stored2, log2, _, _, _ = _run_scenario_once(tmp_path, 2, webhook)
    finally:
        webhook.stop()

    raised = [t for t in log1 if t[1] == "Raised"]
    cleared = [t for t in log1 if t[1] == "Cleared"]
    node3, node7 = str(scenario.nodes[3].node_id), str(scenario.nodes[7].node_id)

    ok = stored1 == 3000 and stored2 == 3000
    ok &= len(raised) == 2 and len(cleared) == 2
    by_node = {t[0]: t for t in raised}
    ok &= set(by_node) == {node3, node7}
    ok &= by_node[node3][2] == ("ClogRule",)
    ok &= by_node[node7][2] == ("GasThreshold",)
    # every raised alert was cleared, and the pair shares an alert id
    ok &= {t[6] for t in raised} == {t[6] for t in cleared}

    # dispatch target must match a brute-force nearest-office scan
    for t in raised:
        node_spec = next(s for s in scenario.nodes if str(s.node_id) == t[0])
        brute_best = min(offices, key=lambda o: (haversine_km(node_spec.location, o.location), o.office_id))
        ok &= t[5] == brute_best.office_id
        ok &= alerts1[t[6]].dispatch is not None and alerts1[t[6]].dispatch.delivered

    ok &= len(webhook.requests) >= 2  # both runs delivered both alerts
    ok &= log1 == log2
    elapsed = time.monotonic() - started
    report(
        "end-to-end scenario",
        ok,
        f"stored={stored1}/{stored2}, transitions={len(log1)}, "
        f"identical_logs={log1 == log2}, {elapsed:.1f}s",
    )


# -- criterion 5: durability across a kill -9 ------------------------------------


def _free_port() -> int:
    with socket.socket() as sock:
        sock.bind(("127.0.0.1", 0))
        return sock.getsockname()[1]


def _wait_http(port, timeout=15.0):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        try:
            if httpx.get(f"http://127.0.0.1:{port}/healthz", timeout=1.0).status_code == 200:
                return True
        except httpx.HTTPError:
            time.sleep(0.1)
    return False


def test_durability_across_kill(tmp_path):
    started = time.monotonic()
    n_nodes = 5
    nodes = [make_spec(uuid.UUID(int=0xA000 + i), lat=23.7 + i * 0.01, lon=90.4) for i in range(n_nodes)]
    offices_path = tmp_path / "offices.json"
    offices_path.write_text(json.dumps([
        {"office_id": "hq", "name": "HQ", "lat_deg": 23.75, "lon_deg": 90.4,
         "webhook_url": "http://127.0.0.1:1/hook"},
    ]))
    ingest_port, http_port = _free_port(), _free_port()
    config = {
        "listen_addr": f"127.0.0.1:{ingest_port}",
        "http_addr": f"127.0.0.1:{http_port}",
        "data_dir": str(tmp_path / "data"),
        "fleet_key_hex": KEY.hex(),
        "office_registry_path": str(offices_path),
        "staleness_window_ms": 10**15,
        "dispatch": {"backoff_base_s": 0.01},
        "sync": "always",
        "nodes": [
            {"node_id": str(s.node_id), "pipe_height_cm": 100.0, "set_limit_flow_lpm": 10.0,
             "fill_threshold_cm": 50.0, "gas_threshold_ppm": 300.0,
             "lat_deg": s.location.lat_deg, "lon_deg": s.location.lon_deg}
            for s in nodes
        ],
    }
    config_path = tmp_path / "config.json"
    config_path.write_text(json.dumps(config))

    def spawn():
        return subprocess.Popen(
            [sys.executable, "-m", "wlds", "serve", "--config", str(config_path)],
            stdout=subprocess.DEVNULL,
            stderr=subprocess.DEVNULL,
        )

    proc = spawn()
    acked: dict = {}
    lock = threading.Lock()
    try:
        assert _wait_http(http_port), "server did not come up"

        def feed(node_index, seqs, warning=False):
            node = nodes[node_index]
            try:
                with TcpFleetSink("127.0.0.1", ingest_port, KEY) as sink:
                    for seq in seqs:
                        reading = make_reading(
                            node.node_id, seq=seq, timestamp_ms=T0_MS + seq * 1000,
                            flow_lpm=2.0 if warning else 15.0,
                            distance_cm=30.0 if warning else 80.0,
                        )
                        if sink(reading) == ACK_ACCEPT:
                            with lock:
                                acked.setdefault(node.node_id, set()).add(seq)
            except SinkError:
                pass  # expected once the server dies

        # node 0 goes into a persistent clog: its alert must survive the kill
        feed(0, range(1, 251), warning=True)
        for i in range(1, 4):
            feed(i, range(1, 251))
        with lock:
            total_acked = sum(len(s) for s in acked.values())
        assert total_acked >= 1000, f"only {total_acked} acks before kill"

        with httpx.Client(base_url=f"http://127.0.0.1:{http_port}", timeout=5) as client:
            active = client.get("/alerts", params={"active": "true"}).json()
        assert len(active) == 1
        alert_id_before = active[0]["alert_id"]

        # keep traffic flowing on node 4 and kill the server mid-run
        feeder = threading.Thread(target=feed, args=(4, range(1, 100_000)))
        feeder.start()
        time.sleep(0.5)
        proc.send_signal(signal.SIGKILL)
        proc.wait(timeout=10)
        feeder.join(timeout=15)
    finally:
        if proc.poll() is None:
            proc.kill()
            proc.wait(timeout=10)

    proc2 = spawn()
    try:
        assert _wait_http(http_port), "server did not restart"
        ok = True
        missing = 0
        with httpx.Client(base_url=f"http://127.0.0.1:{http_port}", timeout=10) as client:
            for node in nodes:
                want = acked.get(node.node_id, set())
                if not want:
                    continue
                history = client.get(
                    f"/nodes/{node.node_id}/history", params={"from": 0, "to": 10**15}
                ).json()
                got = {h["seq"] for h in history}
                missing += len(want - got)
            ok &= missing == 0
            active = client.get("/alerts", params={"active": "true"}).json()
            ok &= len(active) == 1 and active[0]["alert_id"] == alert_id_before
            ok &= active[0]["node_id"] == str(nodes[0].node_id)
            snapshot = client.get(f"/nodes/{nodes[0].node_id}").json()
            ok &= snapshot["alert_state"] == "Raised"
        with lock:
            total_acked = sum(len(s) for s in acked.values())
        elapsed = time.monotonic() - started
        report(
            "durability across kill -9",
            ok,
            f"{total_acked} acked readings all queryable ({missing} missing), "
            f"alert {alert_id_before} resumed, {elapsed:.1f}s",
        )
    finally:
        proc2.send_signal(signal.SIGTERM)
        try:
            proc2.wait(timeout=10)
        except subprocess.TimeoutExpired:
            proc2.kill()


# -- criterion 6: store oracle ----------------------------------------------------


def test_store_oracle(tmp_path):
    started = time.monotonic()
    rng = random.Random(606)
    node = uuid.UUID(int=0xFACE)
    spec = make_spec(node)
    reference = []
    n = 100_000
    with Store(tmp_path, sync="never") as store:
        for i in range(n):
            reading = make_reading(
                node, seq=i + 1,
                timestamp_ms=T0_MS + rng.randrange(0, 50_000_000),
                flow_lpm=rng.uniform(0, 30),
                distance_cm=rng.uniform(0, 120),
                gas_ppm=rng.uniform(0, 600),
            )
            reference.append(store.append(reading, spec))
        mismatches = 0
        for _ in range(100):
            lo = T0_MS + rng.randrange(0, 50_000_000)
            hi = lo + rng.randrange(1, 10_000_000)
            expected = sorted(
                (r for r in reference if lo <= r.reading.timestamp_ms < hi),
                key=lambda r: (r.reading.timestamp_ms, r.ingest_offset),
            )
            if store.range(QueryRange(node, lo, hi)) != expected:
                mismatches += 1
        latest_ok = store.latest(node) == reference[-1]
    elapsed = time.monotonic() - started
    report(
        "store oracle",
        mismatches == 0 and latest_ok,
        f"{n} records, 100 ranges, {mismatches} mismatches in {elapsed:.1f}s",
    )


# -- criterion 7: geospatial oracle -------------------------------------------------


def test_geospatial_oracle():
    started = time.monotonic()
    rng = random.Random(707)
    agree = 0
    trials = 1000
    for trial in range(trials):
        count = rng.randint(1, 50)
        registry = [
            MaintenanceOffice(
                f"o{rng.randrange(10**6):06d}-{i}", f"Office {i}",
                GeoPoint(rng.uniform(-90, 90), rng.uniform(-180, 180)),
                "http://example/hook",
            )
            for i in range(count)
        ]
        p = GeoPoint(rng.uniform(-90, 90), rng.uniform(-180, 180))
        exhaustive = min(registry, key=lambda o: (haversine_km(p, o.location), o.office_id))
        if nearest_office(p, registry) is exhaustive:
            agree += 1

    # constructed ties: mirrored longitudes, resolution by office id
    ties_ok = True
    for i in range(25):
        lat = rng.uniform(-80, 80)
        delta = rng.uniform(0.001, 1.0)
        node = GeoPoint(lat, 0.0)
        a = MaintenanceOffice("aa", "A", GeoPoint(lat, -delta), "http://x/h")
        b = MaintenanceOffice("bb", "B", GeoPoint(lat, delta), "http://x/h")
        ties_ok &= haversine_km(node, a.location) == haversine_km(node, b.location)
        ties_ok &= nearest_office(node, [b, a]).office_id == "aa"
    elapsed = time.monotonic() - started
    report(
        "geospatial oracle",
        agree == trials and ties_ok,
        f"{agree}/{trials} exhaustive-scan agreement, ties ok in {elapsed:.2f}s",
    )


# -- criterion 8: throughput smoke (soft) ---------------------------------------------


def test_throughput_smoke(tmp_path):
    started = time.monotonic()
    n_nodes, seconds = 100, 60
    nodes = [
        make_spec(uuid.UUID(int=0xC000 + i), lat=23.5 + i * 0.002, lon=90.3 + i * 0.002)
        for i in range(n_nodes)
    ]
    scenario_cfg = ScenarioConfig(
        seed=99, nodes=nodes, tick_interval_ms=1000, time_acceleration=1.0, start_time_ms=T0_MS
    )
    store = Store(tmp_path, sync="always")
    offices = [MaintenanceOffice("hq", "HQ", GeoPoint(23.7, 90.4), "http://127.0.0.1:1/h")]
    engine = AlertEngine(offices, DebounceConfig())
    pipeline = Pipeline(store, SpecRegistry(nodes), engine, staleness_window_ms=10**15)
    server, _ = start_ingest_server("127.0.0.1", 0, pipeline, KeyRing(KEY))
    try:
        fleet = build_fleet(scenario_cfg)
        with TcpFleetSink("127.0.0.1", server.port, KEY) as sink:
            stats = fleet.run(seconds, sink, pace=True)  # 1 Hz for 60 s
            accepted = sink.accepted
        stored = sum(store.count(n.node_id) for n in nodes)
        elapsed = time.monotonic() - started
        expected = n_nodes * seconds
        ok = (
            not stats.aborted
            and accepted == expected
            and stored == expected
            and elapsed < seconds + 15
        )
        report(
            "throughput smoke",
            ok,
            f"{accepted}/{expected} accepted, {stored} stored, {elapsed:.1f}s wall",
        )
    finally:
        server.shutdown()
        server.server_close()
        store.close()
