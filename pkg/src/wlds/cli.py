"""Command line front end. See README.md for worked examples.

Exit codes: 0 success, 1 runtime error, 2 usage error. With --json,
errors go to stderr as one JSON object instead of prose.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import signal
import sys
import threading
import uuid
from pathlib import Path

from . import __version__
from .alerting import RegistryError, load_office_registry
from .client import SinkError, TcpFleetSink
from .config import ConfigError, load_config, parse_addr, parse_key_hex
from .ingest import ACK_ACCEPT, ACK_DUPLICATE, ACK_INVALID, ACK_STALE
from .model import GeoPoint, TelemetryReading
from .sim import ScenarioError, build_fleet, load_scenario
from .store import QueryRange, Store, reading_and_spec_from_json, record_to_json
from .wire import FrameRejected, decode_frame, encode_frame, frame_flags


class CliError(Exception):
    pass


def _reading_from_dict(doc: dict) -> TelemetryReading:
    return TelemetryReading(
        node_id=uuid.UUID(doc["node_id"]),
        seq=int(doc["seq"]),
        timestamp_ms=int(doc["timestamp_ms"]),
        flow_lpm=float(doc["flow_lpm"]),
        echo_time_us=float(doc["echo_time_us"]),
        gas_ppm=float(doc["gas_ppm"]),
        position=GeoPoint(float(doc["lat_deg"]), float(doc["lon_deg"])),
    )


def _reading_to_dict(reading: TelemetryReading) -> dict:
    return {
        "node_id": str(reading.node_id),
        "seq": reading.seq,
        "timestamp_ms": reading.timestamp_ms,
        "flow_lpm": reading.flow_lpm,
        "echo_time_us": reading.echo_time_us,
        "gas_ppm": reading.gas_ppm,
        "lat_deg": reading.position.lat_deg,
        "lon_deg": reading.position.lon_deg,
    }


# -- subcommands --------------------------------------------------------------


def cmd_serve(args) -> int:
    logging.basicConfig(
        level=logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    from .server import Server

    server = Server(load_config(args.config))
    server.start()
    stop = threading.Event()

    def _handle(signum, _frame):
        logging.getLogger("wlds").info("signal %d, shutting down", signum)
        stop.set()

    signal.signal(signal.SIGINT, _handle)
    signal.signal(signal.SIGTERM, _handle)
    stop.wait()
    server.stop()
    return 0


def cmd_simulate(args) -> int:
    config = load_scenario(args.scenario)
    if args.time_accel is not None:
        config.time_acceleration = args.time_accel
    key_hex = args.key_hex or os.environ.get("WLDS_FLEET_KEY", "")
    if not key_hex:
        raise CliError("provide --key-hex or set WLDS_FLEET_KEY")
    key = parse_key_hex(key_hex, "fleet key")
    host, port = parse_addr(args.target)
    fleet = build_fleet(config)
    with TcpFleetSink(host, port, key) as sink:
        stats = None
        if args.ticks > 0:
            stats = fleet.run(args.ticks, sink, pace=not args.no_pace)
        else:
            try:
                while stats is None or not stats.aborted:
                    stats = fleet.run(1, sink, pace=not args.no_pace)
            except KeyboardInterrupt:
                pass
        summary = {
            "ticks": fleet.tick,
            "accepted": sink.acks.get(ACK_ACCEPT, 0),
            "duplicate": sink.acks.get(ACK_DUPLICATE, 0),
            "stale": sink.acks.get(ACK_STALE, 0),
            "invalid": sink.acks.get(ACK_INVALID, 0),
        }
        print(json.dumps(summary))
        if stats is not None and stats.aborted:
            raise CliError(f"run aborted after {stats.readings_emitted} readings: {stats.error}")
        return 0


def cmd_query(args) -> int:
    store = Store(args.data_dir, read_only=True)
    node_id = uuid.UUID(args.node)
    if args.what == "latest":
        record = store.latest(node_id)
        print(json.dumps(record_to_json(record) if record else None))
    else:
        q = QueryRange(node_id=node_id, from_ms=args.from_ms, to_ms=args.to_ms)
        for record in store.range(q):
            print(json.dumps(record_to_json(record), separators=(",", ":")))
    return 0


def cmd_dump(args) -> int:
    store = Store(args.data_dir, read_only=True)
    out = open(args.out, "w", encoding="utf-8") if args.out else sys.stdout
    try:
        for line in store.dump_lines(uuid.UUID(args.node)):
            out.write(line + "\n")
    finally:
        if out is not sys.stdout:
            out.close()
    return 0


def cmd_replay(args) -> int:
    replayed = 0
    with Store(args.data_dir) as store, open(args.dump, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                reading, spec, sonic = reading_and_spec_from_json(json.loads(line))
            except (ValueError, KeyError) as exc:
                raise CliError(f"{args.dump}:{lineno}: bad record: {exc}") from exc
            store.append(reading, spec, sonic)
            replayed += 1
    print(json.dumps({"replayed": replayed}))
    return 0


def cmd_frame(args) -> int:
    key = parse_key_hex(args.key_hex, "key")
    if args.what == "encode":
        raw = args.reading if args.reading else sys.stdin.read()
        reading = _reading_from_dict(json.loads(raw))
        print(encode_frame(reading, key, test_frame=args.test_frame).hex())
    else:
        raw = args.hex if args.hex else sys.stdin.read()
        data = bytes.fromhex(raw.strip())
        reading = decode_frame(data, key)
        doc = _reading_to_dict(reading)
        doc["test_frame"] = bool(frame_flags(data) & 0x01)
        print(json.dumps(doc))
    return 0


def cmd_offices(args) -> int:
    offices = load_office_registry(args.registry)
    print(json.dumps({"ok": True, "offices": len(offices)}))
    return 0


# -- entry point ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wlds", description=__doc__)
    parser.add_argument("--json", action="store_true", help="machine-readable errors on stderr")
    parser.add_argument("--version", action="version", version=f"wlds {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("serve", help="run ingest + alerting + gateway from one config")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("simulate", help="stream a scenario's fleet at a server")
    p.add_argument("--scenario", required=True)
    p.add_argument("--target", required=True, help="HOST:PORT of the ingest listener")
    p.add_argument("--time-accel", type=float, default=None)
    p.add_argument("--ticks", type=int, default=0, help="tick count; 0 = run until interrupted")
    p.add_argument("--key-hex", default=None, help="fleet key; falls back to WLDS_FLEET_KEY")
    p.add_argument("--no-pace", action="store_true", help="emit as fast as possible")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("query", help="read the store offline")
    qsub = p.add_subparsers(dest="what", required=True)
    q = qsub.add_parser("latest")
    q.add_argument("--data-dir", required=True)
    q.add_argument("--node", required=True)
    q.set_defaults(func=cmd_query)
    q = qsub.add_parser("range")
    q.add_argument("--data-dir", required=True)
    q.add_argument("--node", required=True)
    q.add_argument("--from", dest="from_ms", type=int, required=True)
    q.add_argument("--to", dest="to_ms", type=int, required=True)
    q.set_defaults(func=cmd_query)

    p = sub.add_parser("dump", help="export one node's records as JSON lines")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--node", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_dump)

    p = sub.add_parser("replay", help="re-ingest a JSON-lines dump into a store")
    p.add_argument("--dump", required=True)
    p.add_argument("--data-dir", required=True)
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("frame", help="debug the wire codec (hex in/out)")
    fsub = p.add_subparsers(dest="what", required=True)
    f = fsub.add_parser("encode")
    f.add_argument("--key-hex", required=True)
    f.add_argument("--reading", default=None, help="reading JSON; default stdin")
    f.add_argument("--test-frame", action="store_true")
    f.set_defaults(func=cmd_frame)
    f = fsub.add_parser("decode")
    f.add_argument("--key-hex", required=True)
    f.add_argument("--hex", default=None, help="frame hex; default stdin")
    f.set_defaults(func=cmd_frame)

    p = sub.add_parser("offices", help="office registry tools")
    osub = p.add_subparsers(dest="what", required=True)
    o = osub.add_parser("validate")
    o.add_argument("registry")
    o.set_defaults(func=cmd_offices)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (
        CliError,
        ConfigError,
        ScenarioError,
        RegistryError,
        FrameRejected,
        SinkError,
        ConnectionError,
        OSError,
        ValueError,
    ) as exc:
        if args.json:
            print(json.dumps({"error": str(exc), "type": type(exc).__name__}), file=sys.stderr)
        else:
            print(f"wlds: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
