// EventSource wire-format parser: chunk reassembly, comments, CRLF,
// multi-line data, and mapping into typed gateway events.

import { describe, expect, it } from "vitest";

import { SseParser, toGatewayEvent } from "../src/sse.js";

const STREAM =
  'id: 7\nevent: snapshot\ndata: {"node_id":"n1","alert_state":"Normal"}\n\n' +
  ": keep-alive\n\n" +
  'id: 8\nevent: alert\ndata: {"alert_id":"a1","direction":"Raised"}\n\n' +
  'event: resync\ndata: {"reason":"resync required"}\n\n';

describe("SseParser", () => {
  it("parses whole frames", () => {
    const frames = new SseParser().push(STREAM);
    expect(frames).toHaveLength(3);
    expect(frames[0]).toMatchObject({ id: 7, event: "snapshot" });
    expect(frames[1]).toMatchObject({ id: 8, event: "alert" });
    expect(frames[2]!.id).toBeUndefined();
    expect(frames[2]!.event).toBe("resync");
  });

  it("reassembles frames split at arbitrary chunk boundaries", () => {
    for (const size of [1, 2, 3, 5, 7, 11, 17]) {
      const parser = new SseParser();
      const frames = [];
      for (let i = 0; i < STREAM.length; i += size) {
        frames.push(...parser.push(STREAM.slice(i, i + size)));
      }
      expect(frames).toHaveLength(3);
      expect(frames.map((f) => f.event)).toEqual(["snapshot", "alert", "resync"]);
    }
  });

  it("ignores comment heartbeats", () => {
    expect(new SseParser().push(": ping\n\n: pong\n\n")).toHaveLength(0);
  });

  it("handles CRLF line endings", () => {
    const frames = new SseParser().push('id: 1\r\nevent: snapshot\r\ndata: {"a":1}\r\n\r\n');
    expect(frames).toHaveLength(1);
    expect(frames[0]).toMatchObject({ id: 1, event: "snapshot", data: '{"a":1}' });
  });

  it("joins multi-line data with newlines", () => {
    const frames = new SseParser().push("event: snapshot\ndata: line1\ndata: line2\n\n");
    expect(frames[0]!.data).toBe("line1\nline2");
  });
});

describe("toGatewayEvent", () => {
  it("maps known kinds and parses json", () => {
    const event = toGatewayEvent({ id: 3, event: "alert", data: '{"direction":"Raised"}' });
    expect(event).toMatchObject({ id: 3, event: "alert", data: { direction: "Raised" } });
  });

  it("drops unknown kinds and bad json", () => {
    expect(toGatewayEvent({ event: "message", data: "{}" })).toBeNull();
    expect(toGatewayEvent({ event: "alert", data: "not json" })).toBeNull();
  });
});
