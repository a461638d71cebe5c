"""Binary telemetry frame codec with integrity and authenticity checks.

One frame carries exactly one reading in a fixed 70-byte layout, big-endian
throughout (see PROTOCOL.md for the normative byte table):

    offset  size  field
    0       2     magic 0x57 0x4C ("WL")
    2       1     version, currently 0x01
    3       1     flags (bit 0 = test frame, remaining bits reserved 0)
    4       16    node_id (UUID bytes)
    20      4     seq, unsigned
    24      8     timestamp_ms, unsigned
    32      4     flow_mlpm = flow_lpm * 1000, rounded half-up
    36      4     echo_time_us, rounded half-up to whole microseconds
    40      2     gas_ppm_x10 = gas_ppm * 10, rounded half-up
    42      4     lat_e7 = lat_deg * 1e7, signed, rounded half away from zero
    46      4     lon_e7 = lon_deg * 1e7, signed, rounded half away from zero
    50      4     crc32 (CRC-32/ISO-HDLC) over bytes [0, 50)
    54      16    auth tag: HMAC-SHA256 over bytes [0, 54), first 16 bytes

Numeric fields are fixed-point so the format is bit-exact across languages.
The tag authenticates everything including the CRC; the CRC is checked
first so that random corruption and deliberate tampering are reported
distinctly. There is no confidentiality layer: the threat addressed here
is spoofed or corrupted telemetry, not secrecy of water levels.
"""

from __future__ import annotations

import hashlib
import hmac
import math
import struct
import uuid
import zlib
from enum import Enum

from .model import GeoPoint, TelemetryReading, check_node_id

MAGIC = b"\x57\x4c"
VERSION = 1
FLAG_TEST_FRAME = 0x01

FRAME_LEN = 70
PAYLOAD_LEN = 50
CRC_LEN = 4
TAG_LEN = 16
KEY_LEN = 32

MAX_FLOW_LPM = 0xFFFFFFFF / 1000.0
MAX_GAS_PPM = 0xFFFF / 10.0
MAX_ECHO_TIME_US = float(0xFFFFFFFF)

_PAYLOAD = struct.Struct(">2sBB16sIQIIHii")
assert _PAYLOAD.size == PAYLOAD_LEN


class RejectReason(Enum):
    BAD_LENGTH = "BadLength"
    BAD_MAGIC = "BadMagic"
    BAD_VERSION = "BadVersion"
    BAD_CRC = "BadCrc"
    BAD_AUTH = "BadAuth"
    BAD_FIELD = "BadField"


class FrameRejected(ValueError):
    """A frame failed verification; reason says which check tripped first."""

    def __init__(self, reason: RejectReason, detail: str = ""):
        self.reason = reason
        self.detail = detail
        super().__init__(f"{reason.value}: {detail}" if detail else reason.value)


class FieldRangeError(ValueError):
    """An encode-side field does not fit its wire width."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(message)


def crc32(data: bytes) -> int:
    """CRC-32/ISO-HDLC (poly 0x04C11DB7 reflected, init/xorout 0xFFFFFFFF)."""
    return zlib.crc32(data) & 0xFFFFFFFF


def auth_tag(data: bytes, key: bytes) -> bytes:
    """First 16 bytes of HMAC-SHA256 over data with a 32-byte key."""
    if len(key) != KEY_LEN:
        raise ValueError(f"key must be exactly {KEY_LEN} bytes, got {len(key)}")
    return hmac.new(key, data, hashlib.sha256).digest()[:TAG_LEN]


def _round_half_up(value: float) -> int:
    # round-half-up for non-negative fixed-point scaling
    return int(math.floor(value + 0.5))


def _round_half_away(value: float) -> int:
    # round-half-away-from-zero for signed fixed-point scaling
    if value >= 0:
        return int(math.floor(value + 0.5))
    return -int(math.floor(-value + 0.5))


def encode_payload(reading: TelemetryReading, flags: int = 0) -> bytes:
    """Pack the 50-byte unauthenticated payload portion of a frame."""
    flow_mlpm = _round_half_up(reading.flow_lpm * 1000.0)
    if flow_mlpm > 0xFFFFFFFF:
        raise FieldRangeError("flow_mlpm", "flow_mlpm overflows 32 bits")
    echo_us = _round_half_up(reading.echo_time_us)
    if echo_us > 0xFFFFFFFF:
        raise FieldRangeError("echo_time_us", "echo_time_us overflows 32 bits")
    gas_x10 = _round_half_up(reading.gas_ppm * 10.0)
    if gas_x10 > 0xFFFF:
        raise FieldRangeError("gas_ppm_x10", "gas_ppm_x10 overflows 16 bits")
    lat_e7 = _round_half_away(reading.position.lat_deg * 1e7)
    lon_e7 = _round_half_away(reading.position.lon_deg * 1e7)
    return _PAYLOAD.pack(
        MAGIC,
        VERSION,
        flags & 0xFF,
        reading.node_id.bytes,
        reading.seq,
        reading.timestamp_ms,
        flow_mlpm,
        echo_us,
        gas_x10,
        lat_e7,
        lon_e7,
    )


def decode_payload(payload: bytes) -> tuple[TelemetryReading, int]:
    """Unpack a 50-byte payload into (reading, flags).

    Assumes magic/version were already verified; field values are still
    range-checked and rejected with BAD_FIELD.
    """
    (_, _, flags, node_bytes, seq, ts_ms, flow_mlpm, echo_us, gas_x10, lat_e7, lon_e7) = _PAYLOAD.unpack(payload)
    node_id = uuid.UUID(bytes=node_bytes)
    try:
        check_node_id(node_id)
        position = GeoPoint(lat_deg=lat_e7 / 1e7, lon_deg=lon_e7 / 1e7)
        reading = TelemetryReading(
            node_id=node_id,
            seq=seq,
            timestamp_ms=ts_ms,
            flow_lpm=flow_mlpm / 1000.0,
            echo_time_us=float(echo_us),
            gas_ppm=gas_x10 / 10.0,
            position=position,
        )
    except ValueError as exc:
        raise FrameRejected(RejectReason.BAD_FIELD, str(exc)) from None
    return reading, flags


def quantize_reading(reading: TelemetryReading) -> TelemetryReading:
    """Round a reading onto the wire grid (idempotent).

    flow to 0.001 L/min, echo to 1 us, gas to 0.1 ppm, lat/lon to 1e-7 deg.
    """
    decoded, _ = decode_payload(encode_payload(reading))
    return decoded


def encode_frame(reading: TelemetryReading, key: bytes, *, test_frame: bool = False) -> bytes:
    """Encode a reading into the 70-byte authenticated wire frame."""
    if len(key) != KEY_LEN:
        raise ValueError(f"key must be exactly {KEY_LEN} bytes, got {len(key)}")
    payload = encode_payload(reading, FLAG_TEST_FRAME if test_frame else 0)
    body = payload + struct.pack(">I", crc32(payload))
    return body + auth_tag(body, key)


def decode_frame(data: bytes, key: bytes) -> TelemetryReading:
    """Verify and decode a frame; the first failed check wins.

    Verification order is fixed: length, magic, version, crc32, auth tag,
    field decode. A frame corrupted in both payload and tag therefore
    reports BadCrc, not BadAuth.
    """
    if len(key) != KEY_LEN:
        raise ValueError(f"key must be exactly {KEY_LEN} bytes, got {len(key)}")
    if len(data) != FRAME_LEN:
        raise FrameRejected(RejectReason.BAD_LENGTH, f"expected {FRAME_LEN} bytes, got {len(data)}")
    if data[0:2] != MAGIC:
        raise FrameRejected(RejectReason.BAD_MAGIC, data[0:2].hex())
    if data[2] != VERSION:
        raise FrameRejected(RejectReason.BAD_VERSION, f"version {data[2]}")
    payload = data[:PAYLOAD_LEN]
    (stated_crc,) = struct.unpack(">I", data[PAYLOAD_LEN : PAYLOAD_LEN + CRC_LEN])
    if crc32(payload) != stated_crc:
        raise FrameRejected(RejectReason.BAD_CRC, f"crc mismatch (stated {stated_crc:#010x})")
    body = data[: PAYLOAD_LEN + CRC_LEN]
    if not hmac.compare_digest(auth_tag(body, key), data[PAYLOAD_LEN + CRC_LEN :]):
        raise FrameRejected(RejectReason.BAD_AUTH, "auth tag mismatch")
    reading, _ = decode_payload(payload)
    return reading


def frame_flags(data: bytes) -> int:
    """Flags byte of a frame (no verification; debugging aid)."""
    if len(data) < 4:
        raise FrameRejected(RejectReason.BAD_LENGTH, "frame shorter than header")
    return data[3]


def peek_node_id(data: bytes) -> uuid.UUID | None:
    """Read the (unverified) node id field, used to select a per-node key."""
    if len(data) < 20:
        return None
    return uuid.UUID(bytes=data[4:20])
