"""Domain model for drainage-pipe monitoring.

Pure types and formulas shared by every other layer: the ultrasonic
echo-to-distance conversion, the clog (garbage) level derivation, and the
warning predicate that checks flow, fill level and gas against per-pipe
thresholds. Nothing in this module performs I/O; every function is a pure
function of its arguments and is safe to call from any thread.

Units are fixed throughout the system: centimeters for heights/distances,
liters per minute for flow, microseconds for ultrasonic round trips,
ppm for gas, decimal degrees for coordinates, milliseconds since the Unix
epoch for timestamps.
"""

from __future__ import annotations

import math
import uuid
from dataclasses import dataclass
from enum import Enum, Flag, auto

# Speed of sound in dry air at 20 C. Deployments may override per site.
DEFAULT_SONIC_SPEED_MPS = 343.0

NodeId = uuid.UUID

NIL_NODE_ID = uuid.UUID(int=0)

MAX_SEQ = 2**32 - 1
MAX_TIMESTAMP_MS = 2**64 - 1


def new_node_id() -> NodeId:
    """Mint a fresh non-nil node identifier."""
    return uuid.uuid4()


def _check_finite(name: str, value: float) -> float:
    value = float(value)
    if not math.isfinite(value):
        raise ValueError(f"{name} must be finite, got {value!r}")
    return value


def _check_non_negative(name: str, value: float) -> float:
    value = _check_finite(name, value)
    if value < 0:
        raise ValueError(f"{name} must be >= 0, got {value!r}")
    return value


def check_node_id(node_id: NodeId) -> NodeId:
    """Reject the nil UUID; sensors must carry a real identity."""
    if not isinstance(node_id, uuid.UUID):
        raise ValueError(f"node_id must be a UUID, got {type(node_id).__name__}")
    if node_id == NIL_NODE_ID:
        raise ValueError("node_id must not be the nil UUID")
    return node_id


@dataclass(frozen=True)
class GeoPoint:
    """WGS-84 position in decimal degrees. Ranges enforced at construction."""

    lat_deg: float
    lon_deg: float

    def __post_init__(self) -> None:
        lat = _check_finite("lat_deg", self.lat_deg)
        lon = _check_finite("lon_deg", self.lon_deg)
        if not -90.0 <= lat <= 90.0:
            raise ValueError(f"lat_deg out of range [-90, 90]: {lat}")
        if not -180.0 <= lon <= 180.0:
            raise ValueError(f"lon_deg out of range [-180, 180]: {lon}")
        object.__setattr__(self, "lat_deg", lat)
        object.__setattr__(self, "lon_deg", lon)


@dataclass(frozen=True)
class PipeSpec:
    """Static per-node configuration: pipe geometry and alerting thresholds.

    Deliberately constructible in an invalid state so that operator edits
    can be checked and reported via validate_pipe_spec() instead of blowing
    up mid-flight; only node_id and location are hard-validated here.
    """

    node_id: NodeId
    pipe_height_cm: float
    set_limit_flow_lpm: float
    fill_threshold_cm: float
    gas_threshold_ppm: float
    location: GeoPoint

    def __post_init__(self) -> None:
        check_node_id(self.node_id)
        if not isinstance(self.location, GeoPoint):
            raise ValueError("location must be a GeoPoint")


def validate_pipe_spec(spec: PipeSpec) -> list[str]:
    """Return every violated PipeSpec invariant, or an empty list if ok."""
    violations: list[str] = []
    ph = float(spec.pipe_height_cm)
    if not math.isfinite(ph) or ph <= 0:
        violations.append(f"non-positive pipe_height: {spec.pipe_height_cm!r}")
    if not math.isfinite(float(spec.set_limit_flow_lpm)) or spec.set_limit_flow_lpm <= 0:
        violations.append(f"non-positive setlimit: {spec.set_limit_flow_lpm!r}")
    fill = float(spec.fill_threshold_cm)
    if not math.isfinite(fill) or fill <= 0:
        violations.append(f"non-positive fill_threshold: {spec.fill_threshold_cm!r}")
    elif math.isfinite(ph) and ph > 0 and fill >= ph:
        violations.append(
            f"fill_threshold >= pipe_height ({spec.fill_threshold_cm!r} >= {spec.pipe_height_cm!r})"
        )
    if not math.isfinite(float(spec.gas_threshold_ppm)) or spec.gas_threshold_ppm <= 0:
        violations.append(f"non-positive gas_threshold: {spec.gas_threshold_ppm!r}")
    return violations


@dataclass(frozen=True)
class TelemetryReading:
    """One timestamped sample from one node. Validated at construction."""

    node_id: NodeId
    seq: int
    timestamp_ms: int
    flow_lpm: float
    echo_time_us: float
    gas_ppm: float
    position: GeoPoint

    def __post_init__(self) -> None:
        check_node_id(self.node_id)
        if not isinstance(self.seq, int) or not 0 <= self.seq <= MAX_SEQ:
            raise ValueError(f"seq must be an unsigned 32-bit integer, got {self.seq!r}")
        if not isinstance(self.timestamp_ms, int) or not 0 <= self.timestamp_ms <= MAX_TIMESTAMP_MS:
            raise ValueError(f"timestamp_ms must be an unsigned 64-bit integer, got {self.timestamp_ms!r}")
        object.__setattr__(self, "flow_lpm", _check_non_negative("flow_lpm", self.flow_lpm))
        object.__setattr__(self, "echo_time_us", _check_non_negative("echo_time_us", self.echo_time_us))
        object.__setattr__(self, "gas_ppm", _check_non_negative("gas_ppm", self.gas_ppm))
        if not isinstance(self.position, GeoPoint):
            raise ValueError("position must be a GeoPoint")


@dataclass(frozen=True)
class DerivedDepths:
    """Distances derived from one ultrasonic echo against a pipe height.

    distance_cm is the raw crown-to-surface distance; garbage_level_cm is
    the fill height from the pipe floor. When the sensor reports a distance
    beyond the pipe height (physically impossible), garbage_level_cm clamps
    to 0 and anomalous is set instead of raising.
    """

    distance_cm: float
    garbage_level_cm: float
    anomalous: bool


class AlertState(Enum):
    NORMAL = "Normal"
    WARNING = "Warning"


class AlertCause(Flag):
    NONE = 0
    CLOG_RULE = auto()
    GAS_THRESHOLD = auto()


_CAUSE_NAMES = {
    AlertCause.CLOG_RULE: "ClogRule",
    AlertCause.GAS_THRESHOLD: "GasThreshold",
}


def cause_names(causes: AlertCause) -> list[str]:
    """Stable JSON-facing names for a cause set."""
    return [name for flag, name in _CAUSE_NAMES.items() if flag in causes]


def causes_from_names(names: list[str]) -> AlertCause:
    causes = AlertCause.NONE
    by_name = {v: k for k, v in _CAUSE_NAMES.items()}
    for name in names:
        try:
            causes |= by_name[name]
        except KeyError:
            raise ValueError(f"unknown alert cause {name!r}") from None
    return causes


@dataclass(frozen=True)
class AlertEvaluation:
    """Outcome of the warning predicate for a single reading."""

    state: AlertState
    causes: AlertCause
    garbage_level_cm: float

    def __post_init__(self) -> None:
        # state and causes must agree: Warning iff at least one cause
        warning = self.causes != AlertCause.NONE
        if (self.state is AlertState.WARNING) != warning:
            raise ValueError(f"state {self.state} inconsistent with causes {self.causes}")


def echo_to_distance(echo_time_us: float, sonic_speed_mps: float = DEFAULT_SONIC_SPEED_MPS) -> float:
    """Convert an ultrasonic round-trip time to a one-way distance in cm.

    The echo time covers the go-and-return path, so the one-way distance is
    half of time times sonic speed: 0.5 * T * C, converted to centimeters.
    """
    t_us = _check_non_negative("echo_time_us", echo_time_us)
    c = _check_finite("sonic_speed_mps", sonic_speed_mps)
    if c <= 0:
        raise ValueError(f"sonic_speed_mps must be > 0, got {sonic_speed_mps!r}")
    return 0.5 * (t_us * 1e-6) * c * 100.0


def clog_level(pipe_height_cm: float, distance_cm: float) -> DerivedDepths:
    """Derive the fill (garbage) level from the reported surface distance.

    garbage level = pipe height - reported distance. A distance beyond the
    pipe height would place the surface below the pipe floor; that reading
    is flagged anomalous and the level clamps to 0 so pipelines keep moving.
    """
    ph = _check_finite("pipe_height_cm", pipe_height_cm)
    if ph <= 0:
        raise ValueError(f"pipe_height_cm must be > 0, got {pipe_height_cm!r}")
    d = _check_non_negative("distance_cm", distance_cm)
    if d > ph:
        return DerivedDepths(distance_cm=d, garbage_level_cm=0.0, anomalous=True)
    return DerivedDepths(distance_cm=d, garbage_level_cm=ph - d, anomalous=False)


def evaluate_warning(
    reading: TelemetryReading,
    spec: PipeSpec,
    sonic_speed_mps: float = DEFAULT_SONIC_SPEED_MPS,
) -> AlertEvaluation:
    """Apply the warning rule to one reading against its pipe's thresholds.

    Two independent causes are checked:
      - clog rule: flow strictly below the set limit AND fill level strictly
        above the fill threshold (both must hold; high fill alone is normal
        during heavy inflow).
      - gas: gas strictly above the gas threshold.

    The comparisons are strict by contract; equality never trips a warning.
    """
    if reading.node_id != spec.node_id:
        raise ValueError(
            f"reading node {reading.node_id} does not match spec node {spec.node_id}"
        )
    distance = echo_to_distance(reading.echo_time_us, sonic_speed_mps)
    depths = clog_level(spec.pipe_height_cm, distance)

    causes = AlertCause.NONE
    if reading.flow_lpm < spec.set_limit_flow_lpm and depths.garbage_level_cm > spec.fill_threshold_cm:
        causes |= AlertCause.CLOG_RULE
    if reading.gas_ppm > spec.gas_threshold_ppm:
        causes |= AlertCause.GAS_THRESHOLD

    state = AlertState.WARNING if causes != AlertCause.NONE else AlertState.NORMAL
    return AlertEvaluation(state=state, causes=causes, garbage_level_cm=depths.garbage_level_cm)
