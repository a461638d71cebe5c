// Minimal server-sent-events client over fetch streams. Hand-rolled
// instead of EventSource so the same code runs in the browser and in
// node-based tests, and so reconnects can set Last-Event-ID explicitly.

import type { GatewayEvent } from "./types.js";

interface RawFrame {
  id?: number;
  event: string;
  data: string;
}

/** Incremental parser for the EventSource wire format. */
export class SseParser {
  private buffer = "";
  private id: number | undefined;
  private event = "";
  private data: string[] = [];

  push(chunk: string): RawFrame[] {
    this.buffer += chunk;
    const frames: RawFrame[] = [];
    for (;;) {
      const nl = this.buffer.indexOf("\n");
      if (nl < 0) break;
      let line = this.buffer.slice(0, nl);
      this.buffer = this.buffer.slice(nl + 1);
      if (line.endsWith("\r")) line = line.slice(0, -1);
      if (line === "") {
        if (this.event || this.data.length) {
          frames.push({ id: this.id, event: this.event || "message", data: this.data.join("\n") });
        }
        this.id = undefined;
        this.event = "";
        this.data = [];
        continue;
      }
      if (line.startsWith(":")) continue; // heartbeat comment
      const colon = line.indexOf(":");
      const field = colon < 0 ? line : line.slice(0, colon);
      let value = colon < 0 ? "" : line.slice(colon + 1);
      if (value.startsWith(" ")) value = value.slice(1);
      if (field === "id") {
        const parsed = Number(value);
        if (Number.isFinite(parsed)) this.id = parsed;
      } else if (field === "event") {
        this.event = value;
      } else if (field === "data") {
        this.data.push(value);
      }
      // other fields (retry:) are ignored
    }
    return frames;
  }
}

export function toGatewayEvent(frame: RawFrame): GatewayEvent | null {
  if (frame.event !== "alert" && frame.event !== "snapshot" && frame.event !== "resync") {
    return null;
  }
  try {
    return { id: frame.id, event: frame.event, data: JSON.parse(frame.data) };
  } catch {
    return null;
  }
}

export interface StreamCallbacks {
  onEvent(event: GatewayEvent): void;
  onOpen?(): void;
  /** Stream ended or failed; caller decides whether to reconnect. */
  onClose(error?: unknown): void;
}

export interface StreamHandle {
  close(): void;
}

/** Open one SSE connection; resolves immediately with a handle.
 *
 * lastEventId 0 means "replay everything the server still buffers", which
 * lets a fresh client converge even if its REST sync raced new events;
 * pass a negative value for a live-only tail. */
export function openEventStream(
  baseUrl: string,
  lastEventId: number,
  callbacks: StreamCallbacks,
): StreamHandle {
  const controller = new AbortController();
  const headers: Record<string, string> = { Accept: "text/event-stream" };
  if (lastEventId >= 0) headers["Last-Event-ID"] = String(lastEventId);

  (async () => {
    try {
      const resp = await fetch(`${baseUrl}/alerts/stream`, {
        headers,
        signal: controller.signal,
      });
      if (!resp.ok || !resp.body) {
        callbacks.onClose(new Error(`stream HTTP ${resp.status}`));
        return;
      }
      callbacks.onOpen?.();
      const reader = resp.body.getReader();
      const decoder = new TextDecoder();
      const parser = new SseParser();
      for (;;) {
        const { done, value } = await reader.read();
        if (done) break;
        for (const frame of parser.push(decoder.decode(value, { stream: true }))) {
          const event = toGatewayEvent(frame);
          if (event) callbacks.onEvent(event);
        }
      }
      callbacks.onClose();
    } catch (error) {
      if (!controller.signal.aborted) callbacks.onClose(error);
    }
  })();

  return { close: () => controller.abort() };
}
