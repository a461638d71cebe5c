"""Deterministic simulated fleet of drainage sensor nodes.

Each node carries an internal ground truth (flow, fill level, gas) that
starts at a healthy baseline: flow at 1.5x the pipe's set limit, fill at
0.2x the pipe height, gas at 0.3x the gas threshold. Emitted flow and gas
get bounded uniform noise of +/-5% of the baseline, which keeps a quiet
fleet provably on the Normal side of every threshold. Fill level is
emitted exactly, encoded as the ultrasonic echo time that a sensor staring
at that surface would measure.

Scenario events bend the truth:

    ClogOnset   flow decays exponentially toward 0.2x set limit, fill
                ramps linearly toward 0.9x pipe height over the event;
                the clogged state persists after the event ends.
    ClogClear   the reverse ramps, back toward baseline.
    RainSurge   emitted flow is multiplied by the magnitude while active.
    GasSpike    magnitude ppm is added to emitted gas while active.

Everything is driven by a single seeded RNG consumed in a fixed order, so
(seed, config) fully determines the reading stream, byte for byte.
"""

from __future__ import annotations

import json
import logging
import math
import threading
import time
import uuid
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from random import Random

from .model import (
    DEFAULT_SONIC_SPEED_MPS,
    GeoPoint,
    PipeSpec,
    TelemetryReading,
    validate_pipe_spec,
)

logger = logging.getLogger("wlds.sim")

BASE_FLOW_FACTOR = 1.5      # of set_limit_flow_lpm
BASE_FILL_FACTOR = 0.2      # of pipe_height_cm
BASE_GAS_FACTOR = 0.3       # of gas_threshold_ppm
NOISE_FRACTION = 0.05       # of the baseline value, uniform both ways
CLOG_FLOW_FLOOR_FACTOR = 0.2   # of set_limit_flow_lpm
CLOG_FILL_CEILING_FACTOR = 0.9  # of pipe_height_cm
# exponential decay constant: ~99.3% of the way there when the event ends
DECAY_RATE = 5.0


class ScenarioError(ValueError):
    def __init__(self, violations: list[str]):
        self.violations = violations
        super().__init__("; ".join(violations))


class EventKind(Enum):
    RAIN_SURGE = "RainSurge"
    CLOG_ONSET = "ClogOnset"
    CLOG_CLEAR = "ClogClear"
    GAS_SPIKE = "GasSpike"


@dataclass(frozen=True)
class ScenarioEvent:
    kind: EventKind
    node_index: int
    start_tick: int
    duration_ticks: int
    magnitude: float = 1.0

    def active_at(self, tick: int) -> bool:
        return self.start_tick <= tick < self.start_tick + self.duration_ticks


@dataclass
class ScenarioConfig:
    seed: int
    nodes: list[PipeSpec]
    tick_interval_ms: int = 1000
    time_acceleration: float = 1.0
    events: list[ScenarioEvent] = field(default_factory=list)
    # None = wall clock at fleet build; set explicitly for reproducible streams
    start_time_ms: int | None = None
    sonic_speed_mps: float = DEFAULT_SONIC_SPEED_MPS


@dataclass
class NodeState:
    """Simulator-internal ground truth for one node."""

    spec: PipeSpec
    flow_lpm: float
    fill_cm: float
    gas_ppm: float
    seq: int = 0

    @property
    def position(self) -> GeoPoint:
        return self.spec.location


@dataclass
class RunStats:
    ticks_executed: int = 0
    readings_emitted: int = 0
    aborted: bool = False
    error: str | None = None
    final_states: list[NodeState] = field(default_factory=list)


def validate_scenario(config: ScenarioConfig) -> list[str]:
    violations: list[str] = []
    if len(config.nodes) < 1:
        violations.append("node count must be >= 1")
    if config.tick_interval_ms < 1:
        violations.append(f"tick_interval_ms must be >= 1, got {config.tick_interval_ms}")
    if not math.isfinite(config.time_acceleration) or config.time_acceleration < 1:
        violations.append(f"time_acceleration must be >= 1, got {config.time_acceleration}")
    seen_nodes: set[uuid.UUID] = set()
    for i, spec in enumerate(config.nodes):
        for v in validate_pipe_spec(spec):
            violations.append(f"node {i}: {v}")
        if spec.node_id in seen_nodes:
            violations.append(f"node {i}: duplicate node_id {spec.node_id}")
        seen_nodes.add(spec.node_id)
    for i, ev in enumerate(config.events):
        if not 0 <= ev.node_index < len(config.nodes):
            violations.append(f"event {i}: unknown node index {ev.node_index}")
        if ev.duration_ticks < 1:
            violations.append(f"event {i}: duration must be >= 1, got {ev.duration_ticks}")
        if not math.isfinite(ev.magnitude) or ev.magnitude <= 0:
            violations.append(f"event {i}: magnitude must be > 0, got {ev.magnitude}")
        if ev.start_tick < 1:
            violations.append(f"event {i}: start_tick must be >= 1, got {ev.start_tick}")
    return violations


class Fleet:
    """A stepped fleet; build via build_fleet(). Single driver at a time."""

    def __init__(self, config: ScenarioConfig):
        self.config = config
        self._rng = Random(config.seed)
        self._tick = 0
        self.start_time_ms = (
            config.start_time_ms if config.start_time_ms is not None else int(time.time() * 1000)
        )
        self.nodes: list[NodeState] = [
            NodeState(
                spec=spec,
                flow_lpm=BASE_FLOW_FACTOR * spec.set_limit_flow_lpm,
                fill_cm=BASE_FILL_FACTOR * spec.pipe_height_cm,
                gas_ppm=BASE_GAS_FACTOR * spec.gas_threshold_ppm,
            )
            for spec in config.nodes
        ]
        self._events: list[ScenarioEvent] = list(config.events)
        self._injected: list[ScenarioEvent] = []  # applied at the next tick boundary
        self._inject_lock = threading.Lock()

    @property
    def tick(self) -> int:
        return self._tick

    def baseline(self, state: NodeState) -> tuple[float, float, float]:
        spec = state.spec
        return (
            BASE_FLOW_FACTOR * spec.set_limit_flow_lpm,
            BASE_FILL_FACTOR * spec.pipe_height_cm,
            BASE_GAS_FACTOR * spec.gas_threshold_ppm,
        )

    def inject_event(self, event: ScenarioEvent) -> None:
        """Schedule an event to start no earlier than the next tick."""
        if not 0 <= event.node_index < len(self.nodes):
            raise ScenarioError([f"unknown node index {event.node_index}"])
        if event.duration_ticks < 1 or event.magnitude <= 0:
            raise ScenarioError(["duration must be >= 1 and magnitude > 0"])
        with self._inject_lock:
            self._injected.append(event)

    def _absorb_injections(self) -> None:
        with self._inject_lock:
            pending, self._injected = self._injected, []
        for ev in pending:
            start = max(ev.start_tick, self._tick + 1)
            self._events.append(replace(ev, start_tick=start))

    def step(self) -> list[TelemetryReading]:
        """Advance one tick and emit one reading per node, in node order."""
        self._absorb_injections()
        self._tick += 1
        tick = self._tick
        timestamp_ms = self.start_time_ms + tick * self.config.tick_interval_ms
        readings: list[TelemetryReading] = []
        for index, state in enumerate(self.nodes):
            base_flow, base_fill, base_gas = self.baseline(state)
            flow_mult = 1.0
            gas_add = 0.0
            for ev in self._events:
                if ev.node_index != index or not ev.active_at(tick):
                    continue
                if ev.kind is EventKind.CLOG_ONSET:
                    self._ramp(state, ev, tick,
                               flow_target=CLOG_FLOW_FLOOR_FACTOR * state.spec.set_limit_flow_lpm,
                               fill_target=CLOG_FILL_CEILING_FACTOR * state.spec.pipe_height_cm)
                elif ev.kind is EventKind.CLOG_CLEAR:
                    self._ramp(state, ev, tick, flow_target=base_flow, fill_target=base_fill)
                elif ev.kind is EventKind.RAIN_SURGE:
                    flow_mult *= ev.magnitude
                elif ev.kind is EventKind.GAS_SPIKE:
                    gas_add += ev.magnitude

            # two uniform draws per node per tick, always in the same order
            flow_noise = self._rng.uniform(-1.0, 1.0) * NOISE_FRACTION * base_flow
            gas_noise = self._rng.uniform(-1.0, 1.0) * NOISE_FRACTION * base_gas

            flow_out = max(0.0, state.flow_lpm * flow_mult + flow_noise)
            gas_out = max(0.0, state.gas_ppm + gas_add + gas_noise)
            echo_us = self._echo_for_fill(state)
            state.seq += 1
            readings.append(
                TelemetryReading(
                    node_id=state.spec.node_id,
                    seq=state.seq,
                    timestamp_ms=timestamp_ms,
                    flow_lpm=flow_out,
                    echo_time_us=echo_us,
                    gas_ppm=gas_out,
                    position=state.position,
                )
            )
        return readings

    def _ramp(self, state: NodeState, ev: ScenarioEvent, tick: int,
              flow_target: float, fill_target: float) -> None:
        # exponential pull on flow, linear ramp on fill; both finish with the event
        k = 1.0 - math.exp(-DECAY_RATE / ev.duration_ticks)
        state.flow_lpm += (flow_target - state.flow_lpm) * k
        remaining = ev.start_tick + ev.duration_ticks - tick  # >= 1 while active
        state.fill_cm += (fill_target - state.fill_cm) / remaining
        state.fill_cm = min(max(state.fill_cm, 0.0), state.spec.pipe_height_cm)
        state.flow_lpm = max(state.flow_lpm, 0.0)

    def _echo_for_fill(self, state: NodeState) -> float:
        # invert distance = 0.5 * T * C for the crown-to-surface gap
        distance_cm = state.spec.pipe_height_cm - state.fill_cm
        return 2.0e4 * distance_cm / self.config.sonic_speed_mps

    def run(self, n_ticks: int, sink, *, pace: bool | None = None) -> RunStats:
        """Step n_ticks, delivering each reading to sink(reading) in order.

        Pacing sleeps tick_interval_ms / time_acceleration between ticks;
        pass pace=False for tests and batch generation. A sink exception
        aborts the run and is reported in the stats.
        """
        if pace is None:
            pace = True
        stats = RunStats()
        wall_start = time.monotonic()
        interval_s = self.config.tick_interval_ms / 1000.0 / self.config.time_acceleration
        for i in range(n_ticks):
            readings = self.step()
            stats.ticks_executed += 1
            for reading in readings:
                stats.readings_emitted += 1
                try:
                    sink(reading)
                except Exception as exc:
                    logger.warning("sink failed at reading %d: %s", stats.readings_emitted, exc)
                    stats.aborted = True
                    stats.error = str(exc)
                    stats.final_states = [replace(s) for s in self.nodes]
                    return stats
            if pace:
                target = wall_start + (i + 1) * interval_s
                delay = target - time.monotonic()
                if delay > 0:
                    time.sleep(delay)
        stats.final_states = [replace(s) for s in self.nodes]
        return stats


def build_fleet(config: ScenarioConfig) -> Fleet:
    """Validate a scenario and build its fleet at baseline."""
    violations = validate_scenario(config)
    if violations:
        raise ScenarioError(violations)
    return Fleet(config)


# -- scenario files ---------------------------------------------------------


def scenario_from_dict(doc: dict) -> ScenarioConfig:
    """Parse the documented scenario JSON schema (see docs/scenario.md)."""
    try:
        nodes = [
            PipeSpec(
                node_id=uuid.UUID(n["node_id"]),
                pipe_height_cm=float(n["pipe_height_cm"]),
                set_limit_flow_lpm=float(n["set_limit_flow_lpm"]),
                fill_threshold_cm=float(n["fill_threshold_cm"]),
                gas_threshold_ppm=float(n["gas_threshold_ppm"]),
                location=GeoPoint(float(n["lat_deg"]), float(n["lon_deg"])),
            )
            for n in doc["nodes"]
        ]
        events = [
            ScenarioEvent(
                kind=EventKind(e["kind"]),
                node_index=int(e["node_index"]),
                start_tick=int(e["start_tick"]),
                duration_ticks=int(e["duration_ticks"]),
                magnitude=float(e.get("magnitude", 1.0)),
            )
            for e in doc.get("events", [])
        ]
        start = doc.get("start_time_ms")
        return ScenarioConfig(
            seed=int(doc["seed"]),
            nodes=nodes,
            tick_interval_ms=int(doc.get("tick_interval_ms", 1000)),
            time_acceleration=float(doc.get("time_acceleration", 1.0)),
            events=events,
            start_time_ms=int(start) if start is not None else None,
            sonic_speed_mps=float(doc.get("sonic_speed_mps", DEFAULT_SONIC_SPEED_MPS)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ScenarioError):
            raise
        raise ScenarioError([f"bad scenario document: {exc}"]) from exc


def load_scenario(path: str | Path) -> ScenarioConfig:
    with open(path, encoding="utf-8") as fh:
        return scenario_from_dict(json.load(fh))
