"""Durable append-only time-series store, one partition per node.

Layout on disk: <root>/nodes/<node-hex>/<first-offset>.seg, where each
segment is a sequence of length-prefixed records:

    u32 payload_len | payload | u32 crc32(payload)

The payload reuses the wire codec's 50-byte reading layout followed by an
83-byte extension holding the ingest offset, the derived depths, the
evaluation, the pipe spec archived at append time, and the sonic speed the
evaluation used. Archiving the spec per record is what makes history
immutable: re-running the warning rule on a stored record always uses the
thresholds that were in force when it was written, no matter how they are
edited later.

Readings are quantized onto the wire grid before evaluation and storage,
so a record read back from disk re-evaluates to exactly the stored
evaluation. Crash recovery is a forward scan: the first short or
corrupt record ends the segment, and (unless the store is read-only) the
active segment is truncated back to the last intact record. A record is
durable before append() returns; with sync="always" every append is
fsync'd, with sync="never" it is only flushed to the OS (survives process
kill, not machine crash).

Logical per-sensor "tables" are projections of the stored record (flow,
depth, gas views), not separate physical stores; the dump helpers emit
them as JSON lines.
"""

from __future__ import annotations

import json
import logging
import os
import struct
import threading
import uuid
from dataclasses import dataclass
from pathlib import Path

from .model import (
    DEFAULT_SONIC_SPEED_MPS,
    AlertEvaluation,
    DerivedDepths,
    GeoPoint,
    NodeId,
    PipeSpec,
    TelemetryReading,
    AlertState,
    AlertCause,
    cause_names,
    causes_from_names,
    clog_level,
    echo_to_distance,
    evaluate_warning,
)
from .wire import PAYLOAD_LEN, crc32, decode_payload, encode_payload

logger = logging.getLogger("wlds.store")

STORE_VERSION = 1

# extension behind the 50-byte reading payload:
# ingest_offset, distance_cm, garbage_level_cm, anomalous, state, causes,
# ph, setlimit, fill_threshold, gas_threshold, spec lat, spec lon, sonic speed
_EXT = struct.Struct(">QddBBBddddddd")
_LEN = struct.Struct(">I")
_CRC = struct.Struct(">I")

_PAYLOAD_TOTAL = PAYLOAD_LEN + _EXT.size
_MAX_PAYLOAD = 1 << 20  # sanity bound for the length prefix during scans


class StoreError(Exception):
    pass


@dataclass(frozen=True)
class StoredRecord:
    """One admitted reading plus everything derived from it at append time."""

    reading: TelemetryReading
    derived: DerivedDepths
    evaluation: AlertEvaluation
    spec: PipeSpec
    sonic_speed_mps: float
    ingest_offset: int


@dataclass(frozen=True)
class QueryRange:
    """Half-open time window [from_ms, to_ms) for one node."""

    node_id: NodeId
    from_ms: int
    to_ms: int

    def __post_init__(self) -> None:
        if self.from_ms >= self.to_ms:
            raise ValueError(f"inverted range: from_ms {self.from_ms} >= to_ms {self.to_ms}")


def record_to_json(record: StoredRecord) -> dict:
    """JSON-safe dict for one record; shared by dump, replay and the gateway."""
    r = record.reading
    return {
        "node_id": str(r.node_id),
        "seq": r.seq,
        "timestamp_ms": r.timestamp_ms,
        "flow_lpm": r.flow_lpm,
        "echo_time_us": r.echo_time_us,
        "gas_ppm": r.gas_ppm,
        "lat_deg": r.position.lat_deg,
        "lon_deg": r.position.lon_deg,
        "distance_cm": record.derived.distance_cm,
        "garbage_level_cm": record.derived.garbage_level_cm,
        "anomalous": record.derived.anomalous,
        "state": record.evaluation.state.value,
        "causes": cause_names(record.evaluation.causes),
        "ingest_offset": record.ingest_offset,
        "spec": {
            "pipe_height_cm": record.spec.pipe_height_cm,
            "set_limit_flow_lpm": record.spec.set_limit_flow_lpm,
            "fill_threshold_cm": record.spec.fill_threshold_cm,
            "gas_threshold_ppm": record.spec.gas_threshold_ppm,
            "lat_deg": record.spec.location.lat_deg,
            "lon_deg": record.spec.location.lon_deg,
        },
        "sonic_speed_mps": record.sonic_speed_mps,
    }


def reading_and_spec_from_json(doc: dict) -> tuple[TelemetryReading, PipeSpec, float]:
    """Inverse of record_to_json for the replayable portion of a record."""
    node_id = uuid.UUID(doc["node_id"])
    reading = TelemetryReading(
        node_id=node_id,
        seq=int(doc["seq"]),
        timestamp_ms=int(doc["timestamp_ms"]),
        flow_lpm=float(doc["flow_lpm"]),
        echo_time_us=float(doc["echo_time_us"]),
        gas_ppm=float(doc["gas_ppm"]),
        position=GeoPoint(float(doc["lat_deg"]), float(doc["lon_deg"])),
    )
    s = doc["spec"]
    spec = PipeSpec(
        node_id=node_id,
        pipe_height_cm=float(s["pipe_height_cm"]),
        set_limit_flow_lpm=float(s["set_limit_flow_lpm"]),
        fill_threshold_cm=float(s["fill_threshold_cm"]),
        gas_threshold_ppm=float(s["gas_threshold_ppm"]),
        location=GeoPoint(float(s["lat_deg"]), float(s["lon_deg"])),
    )
    return reading, spec, float(doc.get("sonic_speed_mps", DEFAULT_SONIC_SPEED_MPS))


def _encode_record(record: StoredRecord) -> bytes:
    payload = encode_payload(record.reading) + _EXT.pack(
        record.ingest_offset,
        record.derived.distance_cm,
        record.derived.garbage_level_cm,
        1 if record.derived.anomalous else 0,
        1 if record.evaluation.state is AlertState.WARNING else 0,
        record.evaluation.causes.value,
        record.spec.pipe_height_cm,
        record.spec.set_limit_flow_lpm,
        record.spec.fill_threshold_cm,
        record.spec.gas_threshold_ppm,
        record.spec.location.lat_deg,
        record.spec.location.lon_deg,
        record.sonic_speed_mps,
    )
    return _LEN.pack(len(payload)) + payload + _CRC.pack(crc32(payload))


def _decode_record(payload: bytes) -> StoredRecord:
    reading, _ = decode_payload(payload[:PAYLOAD_LEN])
    (
        offset,
        distance_cm,
        garbage_cm,
        anomalous,
        state,
        causes,
        ph,
        setlimit,
        fill_th,
        gas_th,
        spec_lat,
        spec_lon,
        sonic,
    ) = _EXT.unpack(payload[PAYLOAD_LEN:])
    spec = PipeSpec(
        node_id=reading.node_id,
        pipe_height_cm=ph,
        set_limit_flow_lpm=setlimit,
        fill_threshold_cm=fill_th,
        gas_threshold_ppm=gas_th,
        location=GeoPoint(spec_lat, spec_lon),
    )
    evaluation = AlertEvaluation(
        state=AlertState.WARNING if state else AlertState.NORMAL,
        causes=AlertCause(causes),
        garbage_level_cm=garbage_cm,
    )
    derived = DerivedDepths(distance_cm=distance_cm, garbage_level_cm=garbage_cm, anomalous=bool(anomalous))
    return StoredRecord(
        reading=reading,
        derived=derived,
        evaluation=evaluation,
        spec=spec,
        sonic_speed_mps=sonic,
        ingest_offset=offset,
    )


@dataclass
class _Segment:
    path: Path
    first_offset: int
    count: int = 0
    min_ts: int | None = None
    max_ts: int | None = None


class _NodePartition:
    def __init__(self, node_dir: Path):
        self.dir = node_dir
        self.records: list[StoredRecord] = []  # in offset order
        self.segments: list[_Segment] = []
        self.fh = None  # active segment handle, lazily opened for writers

    @property
    def next_offset(self) -> int:
        return self.records[-1].ingest_offset + 1 if self.records else 1


class Store:
    """Thread-safe store facade over per-node append-only partitions."""

    def __init__(
        self,
        root: str | Path,
        *,
        sync: str = "always",
        segment_records: int = 4096,
        read_only: bool = False,
    ):
        if sync not in ("always", "never"):
            raise ValueError(f"sync must be 'always' or 'never', got {sync!r}")
        self.root = Path(root)
        self.sync = sync
        self.segment_records = segment_records
        self.read_only = read_only
        self._lock = threading.RLock()
        self._parts: dict[NodeId, _NodePartition] = {}
        nodes_dir = self.root / "nodes"
        if not read_only:
            nodes_dir.mkdir(parents=True, exist_ok=True)
        if nodes_dir.is_dir():
            for node_dir in sorted(nodes_dir.iterdir()):
                if node_dir.is_dir():
                    try:
                        node_id = uuid.UUID(hex=node_dir.name)
                    except ValueError:
                        logger.warning("ignoring non-node directory %s", node_dir)
                        continue
                    self._parts[node_id] = self._scan_node(node_dir)

    # -- recovery ---------------------------------------------------------

    def _scan_node(self, node_dir: Path) -> _NodePartition:
        part = _NodePartition(node_dir)
        seg_paths = sorted(node_dir.glob("*.seg"))
        for seg_path in seg_paths:
            seg = _Segment(path=seg_path, first_offset=int(seg_path.stem))
            good_end = self._scan_segment(seg, part)
            part.segments.append(seg)
            size = seg_path.stat().st_size
            if good_end < size:
                if not self.read_only and seg_path == seg_paths[-1]:
                    logger.warning(
                        "truncating segment %s from %d to %d bytes after partial record",
                        seg_path, size, good_end,
                    )
                    with open(seg_path, "r+b") as fh:
                        fh.truncate(good_end)
                else:
                    logger.warning(
                        "segment %s has %d trailing bytes of garbage; ignoring",
                        seg_path, size - good_end,
                    )
                break  # anything after a corrupt tail is unreachable
        return part

    def _scan_segment(self, seg: _Segment, part: _NodePartition) -> int:
        """Read records until EOF or corruption; returns last good byte offset."""
        good_end = 0
        with open(seg.path, "rb") as fh:
            while True:
                header = fh.read(_LEN.size)
                if len(header) < _LEN.size:
                    break
                (plen,) = _LEN.unpack(header)
                if plen == 0 or plen > _MAX_PAYLOAD:
                    break
                blob = fh.read(plen + _CRC.size)
                if len(blob) < plen + _CRC.size:
                    break
                payload, stated = blob[:plen], _CRC.unpack(blob[plen:])[0]
                if crc32(payload) != stated:
                    break
                try:
                    record = _decode_record(payload)
                except Exception:
                    break
                if part.records and record.ingest_offset <= part.records[-1].ingest_offset:
                    logger.warning("non-increasing offset in %s; stopping scan", seg.path)
                    break
                part.records.append(record)
                seg.count += 1
                ts = record.reading.timestamp_ms
                seg.min_ts = ts if seg.min_ts is None else min(seg.min_ts, ts)
                seg.max_ts = ts if seg.max_ts is None else max(seg.max_ts, ts)
                good_end = fh.tell()
        return good_end

    # -- write path -------------------------------------------------------

    def append(
        self,
        reading: TelemetryReading,
        spec: PipeSpec,
        sonic_speed_mps: float = DEFAULT_SONIC_SPEED_MPS,
    ) -> StoredRecord:
        """Evaluate and persist one reading; durable before return."""
        if self.read_only:
            raise StoreError("store opened read-only")
        if reading.node_id != spec.node_id:
            raise StoreError(f"reading node {reading.node_id} does not match spec node {spec.node_id}")
        # quantize first so the stored reading re-evaluates to the stored result
        from .wire import quantize_reading

        reading = quantize_reading(reading)
        distance = echo_to_distance(reading.echo_time_us, sonic_speed_mps)
        derived = clog_level(spec.pipe_height_cm, distance)
        evaluation = evaluate_warning(reading, spec, sonic_speed_mps)
        with self._lock:
            part = self._parts.get(reading.node_id)
            if part is None:
                node_dir = self.root / "nodes" / reading.node_id.hex
                node_dir.mkdir(parents=True, exist_ok=True)
                part = _NodePartition(node_dir)
                self._parts[reading.node_id] = part
            record = StoredRecord(
                reading=reading,
                derived=derived,
                evaluation=evaluation,
                spec=spec,
                sonic_speed_mps=float(sonic_speed_mps),
                ingest_offset=part.next_offset,
            )
            try:
                self._write_record(part, record)
            except OSError as exc:
                raise StoreError(f"append failed: {exc}") from exc
            part.records.append(record)
            return record

    def _write_record(self, part: _NodePartition, record: StoredRecord) -> None:
        seg = part.segments[-1] if part.segments else None
        if seg is None or seg.count >= self.segment_records:
            if part.fh is not None:
                part.fh.close()
                part.fh = None
            seg = _Segment(
                path=part.dir / f"{record.ingest_offset:010d}.seg",
                first_offset=record.ingest_offset,
            )
            part.segments.append(seg)
        if part.fh is None:
            part.fh = open(seg.path, "ab")
        part.fh.write(_encode_record(record))
        part.fh.flush()
        if self.sync == "always":
            os.fsync(part.fh.fileno())
        seg.count += 1
        ts = record.reading.timestamp_ms
        seg.min_ts = ts if seg.min_ts is None else min(seg.min_ts, ts)
        seg.max_ts = ts if seg.max_ts is None else max(seg.max_ts, ts)

    # -- read path --------------------------------------------------------

    def nodes(self) -> list[NodeId]:
        with self._lock:
            return sorted(self._parts, key=lambda n: n.hex)

    def count(self, node_id: NodeId) -> int:
        with self._lock:
            part = self._parts.get(node_id)
            return len(part.records) if part else 0

    def latest(self, node_id: NodeId) -> StoredRecord | None:
        with self._lock:
            part = self._parts.get(node_id)
            if part is None or not part.records:
                return None
            return part.records[-1]

    def range(self, q: QueryRange) -> list[StoredRecord]:
        """Records with from_ms <= timestamp < to_ms, by (timestamp, offset)."""
        with self._lock:
            part = self._parts.get(q.node_id)
            if part is None:
                return []
            hits = [r for r in part.records if q.from_ms <= r.reading.timestamp_ms < q.to_ms]
        hits.sort(key=lambda r: (r.reading.timestamp_ms, r.ingest_offset))
        return hits

    def all_records(self, node_id: NodeId) -> list[StoredRecord]:
        """Every record for a node in ingest order (used for replays)."""
        with self._lock:
            part = self._parts.get(node_id)
            return list(part.records) if part else []

    def dump_lines(self, node_id: NodeId):
        """Yield one compact JSON line per record, in ingest order."""
        for record in self.all_records(node_id):
            yield json.dumps(record_to_json(record), separators=(",", ":"))

    # -- maintenance ------------------------------------------------------

    def prune(self, older_than_ms: int) -> int:
        """Delete whole non-active segments whose newest record is too old."""
        if self.read_only:
            raise StoreError("store opened read-only")
        removed = 0
        with self._lock:
            for node_id, part in self._parts.items():
                victims = [
                    seg
                    for seg in part.segments[:-1]  # never the active segment
                    if seg.max_ts is not None and seg.max_ts < older_than_ms
                ]
                if not victims:
                    continue
                for seg in victims:
                    seg.path.unlink(missing_ok=True)
                    part.segments.remove(seg)
                    removed += 1
                if part.fh is not None:
                    part.fh.close()
                    part.fh = None
                self._parts[node_id] = self._scan_node(part.dir)
        return removed

    def close(self) -> None:
        with self._lock:
            for part in self._parts.values():
                if part.fh is not None:
                    part.fh.flush()
                    os.fsync(part.fh.fileno())
                    part.fh.close()
                    part.fh = None

    def __enter__(self) -> "Store":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
