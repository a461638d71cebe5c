"""Node-side transport: frames readings onto TCP sessions, one per node.

The ingest protocol binds a session to a single node identity, so the
sink keeps one connection per node and routes each reading accordingly.
send() blocks until the server's one-byte ack arrives, which is what makes
"ack received" equal "reading durable" for callers that track delivery.
"""

from __future__ import annotations

import socket
from collections import Counter

from .ingest import ACK_ACCEPT, recv_exact
from .model import NodeId, TelemetryReading
from .wire import encode_frame


class SinkError(ConnectionError):
    pass


class TcpFleetSink:
    """Callable sink for Fleet.run(); also usable frame by frame."""

    def __init__(
        self,
        host: str,
        port: int,
        key: bytes,
        *,
        connect_timeout_s: float = 5.0,
        ack_timeout_s: float = 10.0,
    ):
        self.host = host
        self.port = port
        self.key = key
        self.connect_timeout_s = connect_timeout_s
        self.ack_timeout_s = ack_timeout_s
        self.acks: Counter = Counter()
        self._socks: dict[NodeId, socket.socket] = {}

    def _sock_for(self, node_id: NodeId) -> socket.socket:
        sock = self._socks.get(node_id)
        if sock is None:
            sock = socket.create_connection((self.host, self.port), timeout=self.connect_timeout_s)
            sock.settimeout(self.ack_timeout_s)
            self._socks[node_id] = sock
        return sock

    def send_frame(self, node_id: NodeId, frame: bytes) -> int:
        sock = self._sock_for(node_id)
        try:
            sock.sendall(len(frame).to_bytes(2, "big") + frame)
            ack = recv_exact(sock, 1)
        except OSError as exc:
            raise SinkError(f"session for node {node_id} failed: {exc}") from exc
        if not ack:
            self._socks.pop(node_id, None)
            raise SinkError(f"server closed session for node {node_id}")
        self.acks[ack[0]] += 1
        return ack[0]

    def __call__(self, reading: TelemetryReading) -> int:
        return self.send_frame(reading.node_id, encode_frame(reading, self.key))

    @property
    def accepted(self) -> int:
        return self.acks.get(ACK_ACCEPT, 0)

    def close(self) -> None:
        for sock in self._socks.values():
            try:
                sock.close()
            except OSError:
                pass
        self._socks.clear()

    def __enter__(self) -> "TcpFleetSink":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
