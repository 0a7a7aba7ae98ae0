/** Workbench page: viewport + overlays, pick/brush tools, job launch
 * buttons, and the live dashboard. All geometry comes from server
 * responses; this file only places overlays and forwards clicks. */

import { Api, SessionStatus, ViewBuffers } from "./api.js";
import { BrushTool } from "./brush.js";
import { PickRejected, PickSession, pickEnd, pickStart } from "./picking.js";
import { Dashboard, TelemetryStream } from "./telemetry.js";

type Mode = "start" | "end" | "brush" | "erase";

const SCALE = 8; // screen pixels per render pixel

class App {
  api = new Api("");
  sid = "";
  view = 0;
  mode: Mode = "start";
  splatSize = 1.0;
  buffers: ViewBuffers | null = null;
  status: SessionStatus | null = null;
  picks = new PickSession();
  brush: BrushTool | null = null;
  dash = new Dashboard();
  stream: TelemetryStream | null = null;

  canvas = document.getElementById("viewport") as HTMLCanvasElement;
  lossCanvas = document.getElementById("loss") as HTMLCanvasElement;
  statusEl = document.getElementById("status") as HTMLElement;
  hintEl = document.getElementById("hint") as HTMLElement;
  resultsEl = document.getElementById("results") as HTMLElement;

  async init(): Promise<void> {
    const { id } = await this.api.createSession();
    this.sid = id;
    this.brush = new BrushTool(this.api, id);
    this.bindControls();
    this.openStream();
    this.note(`session ${id}: upload a splat PLY to begin`);
  }

  note(text: string): void {
    this.hintEl.textContent = text;
  }

  bindControls(): void {
    (document.getElementById("ply") as HTMLInputElement).addEventListener("change", async (ev) => {
      const file = (ev.target as HTMLInputElement).files?.[0];
      if (!file) return;
      const { count } = await this.api.uploadPly(this.sid, await file.arrayBuffer());
      await this.api.autoCameras(this.sid, 64, 64);
      this.note(`loaded ${count} Gaussians`);
      await this.refresh();
    });
    for (const mode of ["start", "end", "brush", "erase"] as Mode[]) {
      document.getElementById(`mode-${mode}`)!.addEventListener("click", () => {
        this.mode = mode;
        this.note(`${mode} mode`);
      });
    }
    document.getElementById("splat-size")!.addEventListener("change", async (ev) => {
      this.splatSize = Number((ev.target as HTMLInputElement).value);
      await this.refresh();
    });
    for (let v = 0; v < 4; v += 1) {
      document.getElementById(`view-${v}`)!.addEventListener("click", async () => {
        this.view = v;
        await this.refresh();
      });
    }
    document.getElementById("send-picks")!.addEventListener("click", async () => {
      if (!this.picks.complete) {
        this.note("finish the current start/end pair first");
        return;
      }
      const payload = this.picks.asPayload();
      await this.api.setPicks(this.sid, payload.starts, payload.ends);
      this.note(`sent ${payload.starts.length} drag pair(s)`);
      await this.refresh();
    });
    document.getElementById("clear-picks")!.addEventListener("click", () => {
      this.picks.clear();
      void this.refresh();
    });
    for (const job of ["lora", "drag", "refit"] as const) {
      document.getElementById(`job-${job}`)!.addEventListener("click", async () => {
        try {
          await this.api.startJob(this.sid, job);
          this.note(`${job} started`);
        } catch (err) {
          this.note(String(err));
        }
      });
    }
    document.getElementById("export")!.addEventListener("click", () => {
      window.open(this.api.exportUrl(this.sid), "_blank");
    });
    this.canvas.addEventListener("click", (ev) => void this.onClick(ev));
    window.setInterval(() => void this.poll(), 1500);
  }

  openStream(): void {
    this.stream = new TelemetryStream(
      (since) => this.api.telemetrySocketUrl(this.sid, since),
      (url) => new WebSocket(url) as unknown as import("./telemetry.js").SocketLike,
    );
    this.stream.onRecord((rec) => {
      this.dash.ingest(rec);
      this.drawLoss();
      if (rec.type === "job") void this.poll();
    });
    this.stream.connect();
  }

  canvasToImage(ev: MouseEvent): [number, number] {
    const rect = this.canvas.getBoundingClientRect();
    return [(ev.clientX - rect.left) / SCALE, (ev.clientY - rect.top) / SCALE];
  }

  async onClick(ev: MouseEvent): Promise<void> {
    if (!this.buffers || !this.status) return;
    const [u, v] = this.canvasToImage(ev);
    const cam = this.status.cameras[this.view];
    try {
      if (this.mode === "start") {
        this.picks.addStart(pickStart(this.buffers, cam, u, v));
        this.note(`start on Gaussian ${this.picks.starts.at(-1)!.gaussianId}`);
      } else if (this.mode === "end") {
        this.picks.addEnd(pickEnd(this.buffers, cam, u, v, this.picks.pendingStart));
        this.note("end point placed");
      } else {
        const count = await this.brush!.applyStroke({ view: this.view, u, v });
        this.note(`mask: ${count} Gaussians`);
        await this.refreshStatus();
      }
    } catch (err) {
      if (err instanceof PickRejected) this.note(err.message);
      else throw err;
    }
    this.draw();
  }

  async refreshStatus(): Promise<void> {
    this.status = await this.api.status(this.sid);
  }

  async refresh(): Promise<void> {
    await this.refreshStatus();
    if (!this.status?.cameras.length) return;
    if (this.brush && this.mode !== "erase") this.brush.state.mode = "add";
    if (this.brush && this.mode === "erase") this.brush.state.mode = "erase";
    this.buffers = await this.api.buffers(this.sid, this.view);
    this.draw();
  }

  async poll(): Promise<void> {
    if (!this.sid || !this.status) return;
    await this.refreshStatus();
    const jobs = this.status.jobs;
    this.statusEl.textContent = (["lora", "drag", "refit"] as const)
      .map((j) => `${j}: ${jobs[j].state} ${(jobs[j].progress * 100).toFixed(0)}%`)
      .join("  |  ");
    (document.getElementById("export") as HTMLButtonElement).disabled = jobs.refit.state !== "done";
    this.showResults();
  }

  draw(): void {
    if (!this.status?.cameras.length) return;
    const ctx = this.canvas.getContext("2d")!;
    const img = new Image();
    img.onload = () => {
      ctx.imageSmoothingEnabled = false;
      ctx.clearRect(0, 0, this.canvas.width, this.canvas.height);
      ctx.drawImage(img, 0, 0, this.canvas.width, this.canvas.height);
      this.drawOverlays(ctx);
    };
    img.src = this.api.renderUrl(this.sid, this.view, this.splatSize) + `&_=${Date.now()}`;
  }

  drawOverlays(ctx: CanvasRenderingContext2D): void {
    // mask tint from the ID buffer + authoritative index set
    if (this.buffers && this.status && this.status.mask.length) {
      const masked = new Set(this.status.mask);
      ctx.fillStyle = "rgba(80, 180, 255, 0.35)";
      for (let y = 0; y < this.buffers.height; y += 1) {
        for (let x = 0; x < this.buffers.width; x += 1) {
          if (masked.has(this.buffers.ids[y][x])) ctx.fillRect(x * SCALE, y * SCALE, SCALE, SCALE);
        }
      }
    }
    // server-confirmed picks (projected server-side)
    const proj = this.status?.pick_projections?.[this.view];
    if (proj) {
      for (const h of proj.handles) this.dot(ctx, h[0], h[1], "#e33");
      for (const t of proj.targets) this.dot(ctx, t[0], t[1], "#36e");
    }
    // local in-progress picks
    for (const s of this.picks.starts) this.dot(ctx, s.pixel[0], s.pixel[1], "#e33");
    for (const e of this.picks.ends) this.dot(ctx, e.pixel[0], e.pixel[1], "#36e");
    // handle paths from telemetry
    const paths = this.dash.handlePaths[this.view] ?? [];
    ctx.strokeStyle = "#fc0";
    for (const path of paths) {
      ctx.beginPath();
      path.forEach(([u, v], i) => (i ? ctx.lineTo(u * SCALE, v * SCALE) : ctx.moveTo(u * SCALE, v * SCALE)));
      ctx.stroke();
    }
  }

  dot(ctx: CanvasRenderingContext2D, u: number, v: number, color: string): void {
    ctx.fillStyle = color;
    ctx.beginPath();
    ctx.arc(u * SCALE, v * SCALE, 4, 0, 2 * Math.PI);
    ctx.fill();
  }

  drawLoss(): void {
    const ctx = this.lossCanvas.getContext("2d")!;
    const { width, height } = this.lossCanvas;
    ctx.clearRect(0, 0, width, height);
    const pts = this.dash.lossPoints;
    if (pts.length < 2) return;
    const maxLoss = Math.max(...pts.map((p) => p.loss));
    ctx.strokeStyle = "#4af";
    ctx.beginPath();
    pts.forEach((p, i) => {
      const x = (i / (pts.length - 1)) * (width - 8) + 4;
      const y = height - 4 - (p.loss / maxLoss) * (height - 8);
      i ? ctx.lineTo(x, y) : ctx.moveTo(x, y);
    });
    ctx.stroke();
  }

  showResults(): void {
    if (!this.status) return;
    const names = Object.entries(this.status.artifacts).filter(([k]) => k.startsWith("edited_view"));
    if (!names.length) return;
    this.resultsEl.innerHTML = "";
    for (const [kind, name] of names.sort()) {
      const fig = document.createElement("figure");
      const before = document.createElement("img");
      before.src = this.api.renderUrl(this.sid, Number(kind.replace("edited_view", "")), this.splatSize);
      const after = document.createElement("img");
      after.src = this.api.artifactUrl(this.sid, name);
      const cap = document.createElement("figcaption");
      cap.textContent = kind;
      fig.append(before, after, cap);
      this.resultsEl.append(fig);
    }
  }
}

window.addEventListener("DOMContentLoaded", () => {
  void new App().init();
});
