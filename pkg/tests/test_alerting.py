"""Alerting tests: debounce against a brute-force replay, haversine and
nearest-office against hand math and exhaustive scans, dispatch retries."""

import math
import random
import threading
import time
import uuid

import pytest

from wlds.alerting import (
    AckOutcome,
    AlertEngine,
    DebounceConfig,
    Dispatcher,
    DispatchConfig,
    Direction,
    MaintenanceOffice,
    RegistryError,
    haversine_km,
    nearest_office,
)
from wlds.model import GeoPoint
from wlds.store import Store

from conftest import NODE_A, T0_MS, make_reading, make_spec


def office(office_id, lat, lon, url="http://127.0.0.1:1/hook"):
    return MaintenanceOffice(office_id=office_id, name=office_id.upper(), location=GeoPoint(lat, lon), webhook_url=url)


OFFICES = [office("north", 23.85, 90.40), office("south", 23.70, 90.40)]


def feed(engine, store, spec, evaluations, *, start_seq=1):
    """Append one reading per evaluation letter (W/N) and run the engine."""
    transitions = []
    for i, letter in enumerate(evaluations):
        if letter == "W":
            reading = make_reading(seq=start_seq + i, timestamp_ms=T0_MS + i * 1000,
                                   flow_lpm=2.0, distance_cm=30.0)
        else:
            reading = make_reading(seq=start_seq + i, timestamp_ms=T0_MS + i * 1000)
        record = store.append(reading, spec)
        transition = engine.process(record)
        if transition is not None:
            transitions.append((i, transition))
    return transitions


def replay_oracle(evaluations, raise_after, clear_after):
    """Independent scan of the two-state machine definition."""
    out = []
    raised = False
    warn = normal = 0
    for i, letter in enumerate(evaluations):
        if letter == "W":
            warn += 1
            normal = 0
        else:
            normal += 1
            warn = 0
        if not raised and warn >= raise_after:
            raised = True
            warn = 0
            out.append((i, "Raised"))
        elif raised and normal >= clear_after:
            raised = False
            normal = 0
            out.append((i, "Cleared"))
    return out


class TestDebounce:
    def make(self, tmp_path, raise_after=3, clear_after=3):
        store = Store(tmp_path, sync="never")
        engine = AlertEngine(OFFICES, DebounceConfig(raise_after, clear_after))
        return store, engine, make_spec()

    def test_raised_on_third_consecutive_warning(self, tmp_path):
        store, engine, spec = self.make(tmp_path)
        transitions = feed(engine, store, spec, "NNWWW")
        assert [(i, t.direction) for i, t in transitions] == [(4, Direction.RAISED)]

    def test_counter_resets_on_normal(self, tmp_path):
        store, engine, spec = self.make(tmp_path)
        transitions = feed(engine, store, spec, "WWNWWW")
        assert [(i, t.direction) for i, t in transitions] == [(5, Direction.RAISED)]

    def test_raise_after_one_alerts_immediately(self, tmp_path):
        store, engine, spec = self.make(tmp_path, raise_after=1, clear_after=1)
        transitions = feed(engine, store, spec, "W")
        assert [(i, t.direction) for i, t in transitions] == [(0, Direction.RAISED)]

    def test_cleared_after_consecutive_normals(self, tmp_path):
        store, engine, spec = self.make(tmp_path)
        transitions = feed(engine, store, spec, "WWWNNN")
        assert [(i, t.direction) for i, t in transitions] == [
            (2, Direction.RAISED),
            (5, Direction.CLEARED),
        ]

    def test_cleared_carries_prior_alert_id(self, tmp_path):
        store, engine, spec = self.make(tmp_path)
        transitions = feed(engine, store, spec, "WWWNNN")
        raised, cleared = transitions[0][1], transitions[1][1]
        assert cleared.alert_id == raised.alert_id
        assert raised.causes.value != 0 and cleared.causes.value == 0

    def test_config_validation(self):
        with pytest.raises(ValueError):
            DebounceConfig(raise_after=0)
        with pytest.raises(ValueError):
            DebounceConfig(clear_after=0)

    def test_matches_brute_force_replay_on_random_sequences(self, tmp_path):
        rng = random.Random(401)
        for trial in range(40):
            raise_after = rng.randint(1, 4)
            clear_after = rng.randint(1, 4)
            evaluations = "".join(rng.choice("WN") for _ in range(rng.randint(1, 120)))
            store = Store(tmp_path / str(trial), sync="never")
            engine = AlertEngine(OFFICES, DebounceConfig(raise_after, clear_after))
            got = [(i, t.direction.value) for i, t in feed(engine, store, make_spec(), evaluations)]
            assert got == replay_oracle(evaluations, raise_after, clear_after)
            store.close()

    def test_transitions_strictly_alternate(self, tmp_path):
        rng = random.Random(402)
        evaluations = "".join(rng.choice("WN") for _ in range(600))
        store, engine, spec = self.make(tmp_path, raise_after=2, clear_after=2)
        transitions = [t for _, t in feed(engine, store, spec, evaluations)]
        for a, b in zip(transitions, transitions[1:]):
            assert a.direction != b.direction
        if transitions:
            assert transitions[0].direction is Direction.RAISED


class TestHaversine:
    def test_identity(self):
        p = GeoPoint(23.8103, 90.4125)
        assert haversine_km(p, p) == 0.0

    def test_one_degree_longitude_at_equator(self):
        # 6371 * pi / 180
        d = haversine_km(GeoPoint(0, 0), GeoPoint(0, 1))
        assert d == pytest.approx(111.195, abs=0.001)

    def test_equator_to_pole(self):
        # 6371 * pi / 2
        d = haversine_km(GeoPoint(0, 0), GeoPoint(90, 0))
        assert d == pytest.approx(10007.543, abs=0.01)

    def test_symmetry(self):
        rng = random.Random(403)
        for _ in range(200):
            a = GeoPoint(rng.uniform(-90, 90), rng.uniform(-180, 180))
            b = GeoPoint(rng.uniform(-90, 90), rng.uniform(-180, 180))
            assert haversine_km(a, b) == pytest.approx(haversine_km(b, a), rel=1e-12)


class TestNearestOffice:
    def test_single_office(self):
        assert nearest_office(GeoPoint(0, 0), [OFFICES[0]]) is OFFICES[0]

    def test_two_candidates_brute_force(self):
        node = GeoPoint(23.8103, 90.4125)
        a = office("a", 23.81, 90.41)
        b = office("b", 23.70, 90.40)
        assert haversine_km(node, a.location) < haversine_km(node, b.location)
        assert nearest_office(node, [b, a]) is a

    def test_tie_broken_by_office_id(self):
        # mirrored longitudes about the node make the distances exactly equal
        node = GeoPoint(23.81, 0.0)
        east = office("zz-east", 23.81, 0.01)
        west = office("aa-west", 23.81, -0.01)
        assert haversine_km(node, east.location) == haversine_km(node, west.location)
        assert nearest_office(node, [east, west]).office_id == "aa-west"

    def test_empty_registry_rejected(self):
        with pytest.raises(RegistryError):
            nearest_office(GeoPoint(0, 0), [])

    def test_matches_exhaustive_scan(self):
        rng = random.Random(404)
        for _ in range(200):
            registry = [
                office(f"o{i:03d}", rng.uniform(-90, 90), rng.uniform(-180, 180))
                for i in range(rng.randint(1, 50))
            ]
            p = GeoPoint(rng.uniform(-90, 90), rng.uniform(-180, 180))
            best = min(registry, key=lambda o: (haversine_km(p, o.location), o.office_id))
            assert nearest_office(p, registry) is best


class FakeTransport:
    def __init__(self, statuses):
        self.statuses = list(statuses)
        self.calls = []

    def __call__(self, url, body, timeout_s):
        self.calls.append((url, body))
        status = self.statuses.pop(0)
        if isinstance(status, Exception):
            raise status
        return status


def run_dispatch(engine, transition, office_, transport, **cfg):
    sleeps = []
    dispatcher = Dispatcher(
        engine,
        DispatchConfig(backoff_base_s=0.0, **cfg),
        transport=transport,
        sleeper=sleeps.append,
    )
    dispatcher.start()
    dispatcher.enqueue(transition, office_)
    assert dispatcher.wait_idle(timeout=5)
    dispatcher.stop()
    return sleeps


def raised_transition(tmp_path, engine):
    store = Store(tmp_path, sync="never")
    transitions = feed(engine, store, make_spec(), "WWW")
    store.close()
    return transitions[0][1]


class TestDispatcher:
    def test_delivered_first_try(self, tmp_path):
        engine = AlertEngine(OFFICES, DebounceConfig())
        transition = raised_transition(tmp_path, engine)
        transport = FakeTransport([200])
        run_dispatch(engine, transition, OFFICES[0], transport)
        result = engine.get_alert(transition.alert_id).dispatch
        assert result.delivered and result.attempts == 1
        url, body = transport.calls[0]
        assert url == OFFICES[0].webhook_url
        assert body == transition.webhook_body()

    def test_retries_then_delivers(self, tmp_path):
        engine = AlertEngine(OFFICES, DebounceConfig())
        transition = raised_transition(tmp_path, engine)
        transport = FakeTransport([500, 500, 200])
        run_dispatch(engine, transition, OFFICES[0], transport)
        result = engine.get_alert(transition.alert_id).dispatch
        assert result.delivered and result.attempts == 3

    def test_gives_up_after_five_attempts_with_backoff(self, tmp_path):
        engine = AlertEngine(OFFICES, DebounceConfig())
        transition = raised_transition(tmp_path, engine)
        transport = FakeTransport([500, ConnectionError("down"), 503, 404, 500])
        sleeps = []
        dispatcher = Dispatcher(
            engine,
            DispatchConfig(backoff_base_s=2.0),
            transport=transport,
            sleeper=sleeps.append,
        )
        dispatcher.start()
        dispatcher.enqueue(transition, OFFICES[0])
        assert dispatcher.wait_idle(timeout=5)
        dispatcher.stop()
        result = engine.get_alert(transition.alert_id).dispatch
        assert not result.delivered and result.attempts == 5
        # four waits between five attempts, exponential, scaled by the base
        assert sleeps == [2.0, 4.0, 8.0, 16.0]

    def test_webhook_body_schema(self, tmp_path):
        engine = AlertEngine(OFFICES, DebounceConfig())
        transition = raised_transition(tmp_path, engine)
        body = transition.webhook_body()
        assert set(body) == {
            "alert_id", "node_id", "direction", "causes",
            "garbage_level_cm", "lat_deg", "lon_deg", "at_ms",
        }
        assert body["direction"] == "Raised"
        assert body["causes"] == ["ClogRule"]

    def test_overflow_drops_oldest(self, tmp_path):
        engine = AlertEngine(OFFICES, DebounceConfig())
        transition = raised_transition(tmp_path, engine)
        gate = threading.Event()

        def stalling_transport(url, body, timeout_s):
            gate.wait(5)
            return 200

        dispatcher = Dispatcher(engine, DispatchConfig(queue_size=3, backoff_base_s=0.0),
                                transport=stalling_transport)
        dispatcher.start()
        time.sleep(0.05)  # let the worker block on an empty queue first
        for _ in range(6):
            dispatcher.enqueue(transition, OFFICES[0])
        with dispatcher._cv:
            assert len(dispatcher._queue) == 3
        gate.set()
        assert dispatcher.wait_idle(timeout=5)
        dispatcher.stop()

    def test_real_webhook_delivery(self, tmp_path, webhook):
        engine = AlertEngine(OFFICES, DebounceConfig())
        transition = raised_transition(tmp_path, engine)
        target = office("hooked", 23.8, 90.4, url=webhook.url)
        dispatcher = Dispatcher(engine, DispatchConfig(backoff_base_s=0.01))
        dispatcher.start()
        dispatcher.enqueue(transition, target)
        assert dispatcher.wait_idle(timeout=10)
        dispatcher.stop()
        assert engine.get_alert(transition.alert_id).dispatch.delivered
        assert webhook.requests[0]["alert_id"] == transition.alert_id

    def test_only_raised_transitions_dispatched(self, tmp_path):
        engine = AlertEngine(OFFICES, DebounceConfig())
        store = Store(tmp_path, sync="never")
        transitions = [t for _, t in feed(engine, store, make_spec(), "WWWNNN")]
        store.close()
        dispatcher = Dispatcher(engine, DispatchConfig(), transport=FakeTransport([200]))
        with pytest.raises(ValueError):
            dispatcher.enqueue(transitions[1], OFFICES[0])


class TestAck:
    def test_ack_lifecycle(self, tmp_path):
        engine = AlertEngine(OFFICES, DebounceConfig())
        transition = raised_transition(tmp_path, engine)
        assert engine.ack("nope", "op1", 1) is AckOutcome.UNKNOWN
        assert engine.ack(transition.alert_id, "op1", 1) is AckOutcome.OK
        assert engine.ack(transition.alert_id, "op2", 2) is AckOutcome.ALREADY_ACKED
        alert = engine.get_alert(transition.alert_id)
        assert alert.ack.operator_id == "op1"

    def test_ack_after_clear_rejected(self, tmp_path):
        engine = AlertEngine(OFFICES, DebounceConfig())
        store = Store(tmp_path, sync="never")
        transitions = [t for _, t in feed(engine, store, make_spec(), "WWWNNN")]
        store.close()
        assert engine.ack(transitions[0].alert_id, "op1", 1) is AckOutcome.CLEARED

    def test_restore_ack_applies_even_to_cleared(self, tmp_path):
        engine = AlertEngine(OFFICES, DebounceConfig())
        store = Store(tmp_path, sync="never")
        transitions = [t for _, t in feed(engine, store, make_spec(), "WWWNNN")]
        store.close()
        engine.restore_ack(transitions[0].alert_id, "op9", 123)
        assert engine.get_alert(transitions[0].alert_id).ack.operator_id == "op9"
