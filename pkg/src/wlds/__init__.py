"""Water-logging detection system for drainage pipes.

Four cooperating layers: a deterministic simulated sensor fleet (wlds.sim),
an authenticated binary wire protocol and TCP ingest service (wlds.wire,
wlds.ingest), a durable append-only time-series store (wlds.store), and an
alerting engine plus operator HTTP gateway (wlds.alerting, wlds.gateway).
The wlds.cli module ties everything together behind one command.
"""

__version__ = "0.1.0"
