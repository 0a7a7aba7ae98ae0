import { describe, expect, it } from "vitest";

import { Dashboard, SocketLike, TelemetryStream } from "../src/telemetry.js";

class FakeSocket implements SocketLike {
  onmessage: ((ev: { data: string }) => void) | null = null;
  onclose: (() => void) | null = null;
  onerror: (() => void) | null = null;
  closed = false;
  constructor(public url: string) {}
  close(): void {
    this.closed = true;
  }
  push(rec: object): void {
    this.onmessage?.({ data: JSON.stringify(rec) });
  }
  drop(): void {
    this.onclose?.();
  }
}

function makeStream() {
  const sockets: FakeSocket[] = [];
  const pending: (() => void)[] = [];
  const stream = new TelemetryStream(
    (since) => `ws://x/telemetry?since=${since}`,
    (url) => {
      const s = new FakeSocket(url);
      sockets.push(s);
      return s;
    },
    0,
    (fn) => pending.push(fn),
  );
  return { stream, sockets, flush: () => pending.splice(0).forEach((fn) => fn()) };
}

describe("TelemetryStream", () => {
  it("delivers records in order and counts points once", () => {
    const { stream, sockets } = makeStream();
    const seen: number[] = [];
    stream.onRecord((r) => seen.push(r.seq));
    stream.connect();
    for (let i = 0; i < 80; i += 1) sockets[0].push({ seq: i, type: "drag", iter: i, loss: 1 });
    expect(seen).toHaveLength(80);
    expect(seen[79]).toBe(79);
  });

  it("resubscribes after a drop with no duplicate points", () => {
    const { stream, sockets, flush } = makeStream();
    const seen: number[] = [];
    stream.onRecord((r) => seen.push(r.seq));
    stream.connect();
    sockets[0].push({ seq: 0, type: "drag" });
    sockets[0].push({ seq: 1, type: "drag" });
    sockets[0].drop();
    flush();
    expect(sockets).toHaveLength(2);
    expect(sockets[1].url).toContain("since=2");
    // server replays an overlapping record; the stream must dedupe
    sockets[1].push({ seq: 1, type: "drag" });
    sockets[1].push({ seq: 2, type: "drag" });
    expect(seen).toEqual([0, 1, 2]);
    expect(stream.reconnects).toBe(1);
  });

  it("stops reconnecting once closed", () => {
    const { stream, sockets, flush } = makeStream();
    stream.connect();
    stream.close();
    expect(sockets[0].closed).toBe(true);
    sockets[0].drop();
    flush();
    expect(sockets).toHaveLength(1);
  });
});

describe("Dashboard", () => {
  it("plots one point per drag record and tracks handle paths", () => {
    const dash = new Dashboard();
    for (let i = 0; i < 80; i += 1) {
      dash.ingest({
        seq: i,
        type: "drag",
        iter: i,
        loss: 80 - i,
        per_view: [{ handles: [[i, 2 * i]] }, { handles: [[i + 1, i]] }],
      });
    }
    expect(dash.lossPoints).toHaveLength(80);
    expect(dash.handlePaths[0][0]).toHaveLength(80);
    expect(dash.handlePaths[1][0][79]).toEqual([80, 79]);
  });

  it("enables export only after refit finishes", () => {
    const dash = new Dashboard();
    expect(dash.exportEnabled).toBe(false);
    dash.ingest({ seq: 0, type: "job", job: "drag", state: "done" });
    expect(dash.exportEnabled).toBe(false);
    dash.ingest({ seq: 1, type: "job", job: "refit", state: "done" });
    expect(dash.exportEnabled).toBe(true);
  });
});
