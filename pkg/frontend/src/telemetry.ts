/** Telemetry stream: WebSocket with sequence numbers, auto-resubscribe
 * from the last seen record, duplicate-free delivery to listeners. */

export interface TelemetryRecord {
  seq: number;
  type?: string;
  [key: string]: unknown;
}

export interface SocketLike {
  onmessage: ((ev: { data: string }) => void) | null;
  onclose: (() => void) | null;
  onerror: (() => void) | null;
  close(): void;
}

export type SocketFactory = (url: string) => SocketLike;

export class TelemetryStream {
  lastSeq = -1;
  records: TelemetryRecord[] = [];
  private listeners: ((rec: TelemetryRecord) => void)[] = [];
  private socket: SocketLike | null = null;
  private closed = false;
  reconnects = 0;

  constructor(
    private urlFor: (since: number) => string,
    private factory: SocketFactory,
    private reconnectDelayMs = 250,
    private scheduler: (fn: () => void, ms: number) => void = (fn, ms) => setTimeout(fn, ms),
  ) {}

  onRecord(fn: (rec: TelemetryRecord) => void): void {
    this.listeners.push(fn);
  }

  connect(): void {
    if (this.closed) return;
    const sock = this.factory(this.urlFor(this.lastSeq + 1));
    this.socket = sock;
    sock.onmessage = (ev) => {
      const rec = JSON.parse(ev.data) as TelemetryRecord;
      if (rec.seq <= this.lastSeq) return; // duplicate after a racy reconnect
      this.lastSeq = rec.seq;
      this.records.push(rec);
      for (const fn of this.listeners) fn(rec);
    };
    const resub = () => {
      if (this.closed) return;
      this.reconnects += 1;
      this.scheduler(() => this.connect(), this.reconnectDelayMs);
    };
    sock.onclose = resub;
    sock.onerror = resub;
  }

  close(): void {
    this.closed = true;
    this.socket?.close();
  }
}

/** Dashboard aggregation: loss curve plus per-view handle paths. */
export class Dashboard {
  lossPoints: { iter: number; loss: number }[] = [];
  handlePaths: number[][][][] = []; // [view][handle][step] -> [u, v]
  jobDone: Record<string, boolean> = {};

  ingest(rec: TelemetryRecord): void {
    if (rec.type === "drag" && typeof rec.iter === "number" && typeof rec.loss === "number") {
      this.lossPoints.push({ iter: rec.iter, loss: rec.loss });
      const perView = rec.per_view as { handles: number[][] }[] | undefined;
      if (perView) {
        perView.forEach((view, vi) => {
          this.handlePaths[vi] ??= [];
          view.handles.forEach((h, hi) => {
            this.handlePaths[vi][hi] ??= [];
            this.handlePaths[vi][hi].push([h[0], h[1]]);
          });
        });
      }
    }
    if (rec.type === "refit" && typeof rec.iter === "number" && typeof rec.loss === "number") {
      this.lossPoints.push({ iter: rec.iter, loss: rec.loss });
    }
    if (rec.type === "job" && typeof rec.job === "string" && rec.state === "done") {
      this.jobDone[rec.job] = true;
    }
  }

  get exportEnabled(): boolean {
    return this.jobDone["refit"] === true;
  }
}
