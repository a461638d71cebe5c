"""Wires one deployment together: store, alerting, ingest, gateway.

Startup order matters: the store is recovered first, then the whole
history is replayed through a fresh alert engine so the alarm state
machine resumes exactly where it left off (alert ids are derived from
stored offsets, so the replay reproduces them). Operator acknowledgements
and threshold edits live in small append-only JSONL sidecars in the data
directory and are reapplied after the replay. Only then do the TCP ingest
listener and the HTTP gateway come up.
"""

from __future__ import annotations

import json
import logging
import threading
import time
from pathlib import Path

from .alerting import AlertEngine, Dispatcher, load_office_registry
from .config import ServerConfig, pipe_spec_from_dict, pipe_spec_to_dict
from .gateway import EventBus, GatewayApp, GatewayServer, start_gateway
from .ingest import IngestServer, KeyRing, Pipeline, SpecRegistry, start_ingest_server

logger = logging.getLogger("wlds.server")


class Server:
    """A running deployment; start() binds sockets, stop() tears down."""

    def __init__(self, config: ServerConfig):
        self.config = config
        self.store = None
        self.engine: AlertEngine | None = None
        self.specs: SpecRegistry | None = None
        self.bus: EventBus | None = None
        self.dispatcher: Dispatcher | None = None
        self.pipeline: Pipeline | None = None
        self.ingest: IngestServer | None = None
        self.gateway: GatewayServer | None = None
        self._threads: list[threading.Thread] = []
        self._ack_lock = threading.Lock()

    # -- sidecar files ------------------------------------------------------

    @property
    def _acks_path(self) -> Path:
        return self.config.data_dir / "acks.jsonl"

    @property
    def _overrides_path(self) -> Path:
        return self.config.data_dir / "spec_overrides.jsonl"

    def _persist_ack(self, alert_id: str, operator_id: str, at_ms: int) -> None:
        line = json.dumps(
            {"alert_id": alert_id, "operator_id": operator_id, "at_ms": at_ms},
            separators=(",", ":"),
        )
        with self._ack_lock, open(self._acks_path, "a", encoding="utf-8") as fh:
            fh.write(line + "\n")
            fh.flush()

    def _persist_threshold_override(self, spec) -> None:
        with self._ack_lock, open(self._overrides_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(pipe_spec_to_dict(spec), separators=(",", ":")) + "\n")
            fh.flush()

    def _replay_sidecars(self) -> None:
        if self._overrides_path.exists():
            with open(self._overrides_path, encoding="utf-8") as fh:
                for line in fh:
                    line = line.strip()
                    if line:
                        self.specs.put(pipe_spec_from_dict(json.loads(line)))
        if self._acks_path.exists():
            with open(self._acks_path, encoding="utf-8") as fh:
                for line in fh:
                    line = line.strip()
                    if not line:
                        continue
                    doc = json.loads(line)
                    self.engine.restore_ack(doc["alert_id"], doc["operator_id"], doc["at_ms"])

    # -- lifecycle ----------------------------------------------------------

    def start(self) -> None:
        cfg = self.config
        cfg.data_dir.mkdir(parents=True, exist_ok=True)

        from .store import Store

        self.store = Store(cfg.data_dir, sync=cfg.sync)
        offices = load_office_registry(cfg.office_registry_path)
        self.engine = AlertEngine(offices, cfg.debounce)

        # resume the alarm state machine by replaying stored history
        replayed = 0
        for node_id in self.store.nodes():
            for record in self.store.all_records(node_id):
                self.engine.process(record)
                replayed += 1
        if replayed:
            logger.info("replayed %d stored records through the alert engine", replayed)

        self.specs = SpecRegistry(cfg.nodes)
        self._replay_sidecars()

        if cfg.retention_days > 0:
            cutoff = int(time.time() * 1000) - int(cfg.retention_days * 86_400_000)
            pruned = self.store.prune(cutoff)
            if pruned:
                logger.info("retention pruned %d segments", pruned)

        self.bus = EventBus()
        self.dispatcher = Dispatcher(self.engine, cfg.dispatch)
        self.dispatcher.start()
        self.pipeline = Pipeline(
            self.store,
            self.specs,
            self.engine,
            self.dispatcher,
            self.bus,
            sonic_speed_mps=cfg.sonic_speed_mps,
            staleness_window_ms=cfg.staleness_window_ms,
        )
        keys = KeyRing(cfg.fleet_key, cfg.node_keys)
        self.ingest, ingest_thread = start_ingest_server(
            cfg.listen_addr[0], cfg.listen_addr[1], self.pipeline, keys
        )
        app = GatewayApp(
            self.store,
            self.specs,
            self.engine,
            self.bus,
            on_ack=self._persist_ack,
            on_threshold_change=self._persist_threshold_override,
            dashboard_dir=cfg.dashboard_dir,
        )
        self.gateway, gateway_thread = start_gateway(cfg.http_addr[0], cfg.http_addr[1], app)
        self._threads = [ingest_thread, gateway_thread]
        logger.info(
            "serving: ingest on %s:%d, gateway on %s:%d, data in %s",
            cfg.listen_addr[0], self.ingest.port,
            cfg.http_addr[0], self.gateway.port,
            cfg.data_dir,
        )

    @property
    def ingest_port(self) -> int:
        return self.ingest.port

    @property
    def http_port(self) -> int:
        return self.gateway.port

    def stop(self) -> None:
        if self.ingest is not None:
            self.ingest.shutdown()
            self.ingest.server_close()
        if self.gateway is not None:
            self.gateway.shutdown()
            self.gateway.server_close()
        if self.dispatcher is not None:
            self.dispatcher.stop()
        if self.store is not None:
            self.store.close()
        for thread in self._threads:
            thread.join(timeout=5)
        self._threads = []
