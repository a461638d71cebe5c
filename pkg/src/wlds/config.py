"""Deployment configuration: one JSON document drives serve/simulate/query.

See docs/config.md for the field-by-field schema and docs/examples/ for a
working sample. WLDS_LISTEN_ADDR and WLDS_HTTP_ADDR env vars override the
listen addresses without editing the file.
"""

from __future__ import annotations

import json
import os
import uuid
from dataclasses import dataclass, field
from pathlib import Path

from .alerting import DebounceConfig, DispatchConfig
from .model import DEFAULT_SONIC_SPEED_MPS, GeoPoint, PipeSpec, validate_pipe_spec
from .wire import KEY_LEN


class ConfigError(ValueError):
    pass


def parse_addr(raw: str) -> tuple[str, int]:
    host, sep, port = raw.rpartition(":")
    if not sep or not host:
        raise ConfigError(f"address must be host:port, got {raw!r}")
    try:
        return host, int(port)
    except ValueError:
        raise ConfigError(f"bad port in address {raw!r}") from None


def parse_key_hex(raw: str, what: str = "key") -> bytes:
    try:
        key = bytes.fromhex(raw)
    except ValueError:
        raise ConfigError(f"{what} must be hex") from None
    if len(key) != KEY_LEN:
        raise ConfigError(f"{what} must be {KEY_LEN} bytes ({KEY_LEN * 2} hex chars), got {len(key)}")
    return key


def pipe_spec_from_dict(doc: dict) -> PipeSpec:
    return PipeSpec(
        node_id=uuid.UUID(doc["node_id"]),
        pipe_height_cm=float(doc["pipe_height_cm"]),
        set_limit_flow_lpm=float(doc["set_limit_flow_lpm"]),
        fill_threshold_cm=float(doc["fill_threshold_cm"]),
        gas_threshold_ppm=float(doc["gas_threshold_ppm"]),
        location=GeoPoint(float(doc["lat_deg"]), float(doc["lon_deg"])),
    )


def pipe_spec_to_dict(spec: PipeSpec) -> dict:
    return {
        "node_id": str(spec.node_id),
        "pipe_height_cm": spec.pipe_height_cm,
        "set_limit_flow_lpm": spec.set_limit_flow_lpm,
        "fill_threshold_cm": spec.fill_threshold_cm,
        "gas_threshold_ppm": spec.gas_threshold_ppm,
        "lat_deg": spec.location.lat_deg,
        "lon_deg": spec.location.lon_deg,
    }


@dataclass
class ServerConfig:
    data_dir: Path
    fleet_key: bytes
    nodes: list[PipeSpec]
    office_registry_path: Path
    listen_addr: tuple[str, int] = ("0.0.0.0", 7701)
    http_addr: tuple[str, int] = ("0.0.0.0", 7702)
    node_keys: dict[uuid.UUID, bytes] = field(default_factory=dict)
    staleness_window_ms: int = 300_000
    debounce: DebounceConfig = field(default_factory=DebounceConfig)
    sonic_speed_mps: float = DEFAULT_SONIC_SPEED_MPS
    retention_days: float = 30.0
    dispatch: DispatchConfig = field(default_factory=DispatchConfig)
    sync: str = "always"
    dashboard_dir: Path | None = None


def config_from_dict(doc: dict, base_dir: Path) -> ServerConfig:
    """Build a ServerConfig; relative paths resolve against the config file."""
    try:
        nodes = [pipe_spec_from_dict(n) for n in doc["nodes"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad nodes section: {exc}") from exc
    if not nodes:
        raise ConfigError("nodes must be a non-empty array")
    for i, spec in enumerate(nodes):
        violations = validate_pipe_spec(spec)
        if violations:
            raise ConfigError(f"node {i} ({spec.node_id}): " + "; ".join(violations))

    def _path(raw: str) -> Path:
        p = Path(raw)
        return p if p.is_absolute() else base_dir / p

    try:
        cfg = ServerConfig(
            data_dir=_path(doc["data_dir"]),
            fleet_key=parse_key_hex(doc["fleet_key_hex"], "fleet_key_hex"),
            nodes=nodes,
            office_registry_path=_path(doc["office_registry_path"]),
        )
    except KeyError as exc:
        raise ConfigError(f"missing required config field: {exc}") from None

    if "listen_addr" in doc:
        cfg.listen_addr = parse_addr(doc["listen_addr"])
    if "http_addr" in doc:
        cfg.http_addr = parse_addr(doc["http_addr"])
    for node_hex, key_hex in doc.get("node_keys_hex", {}).items():
        cfg.node_keys[uuid.UUID(node_hex)] = parse_key_hex(key_hex, f"node key {node_hex}")
    if "staleness_window_ms" in doc:
        cfg.staleness_window_ms = int(doc["staleness_window_ms"])
    if "debounce" in doc:
        d = doc["debounce"]
        cfg.debounce = DebounceConfig(
            raise_after=int(d.get("raise_after", 3)),
            clear_after=int(d.get("clear_after", 3)),
        )
    if "sonic_speed_mps" in doc:
        cfg.sonic_speed_mps = float(doc["sonic_speed_mps"])
    if "retention_days" in doc:
        cfg.retention_days = float(doc["retention_days"])
    if "dispatch" in doc:
        d = doc["dispatch"]
        cfg.dispatch = DispatchConfig(
            max_attempts=int(d.get("max_attempts", 5)),
            backoff_base_s=float(d.get("backoff_base_s", 1.0)),
            queue_size=int(d.get("queue_size", 1024)),
            request_timeout_s=float(d.get("request_timeout_s", 5.0)),
        )
    if "sync" in doc:
        if doc["sync"] not in ("always", "never"):
            raise ConfigError(f"sync must be 'always' or 'never', got {doc['sync']!r}")
        cfg.sync = doc["sync"]
    if doc.get("dashboard_dir"):
        cfg.dashboard_dir = _path(doc["dashboard_dir"])

    # env overrides beat the file
    if os.environ.get("WLDS_LISTEN_ADDR"):
        cfg.listen_addr = parse_addr(os.environ["WLDS_LISTEN_ADDR"])
    if os.environ.get("WLDS_HTTP_ADDR"):
        cfg.http_addr = parse_addr(os.environ["WLDS_HTTP_ADDR"])
    return cfg


def load_config(path: str | Path) -> ServerConfig:
    path = Path(path)
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    return config_from_dict(doc, path.resolve().parent)
