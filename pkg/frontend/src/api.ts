/** Typed client for the /v1 session API. The UI never computes scene
 * geometry itself: every coordinate it displays comes from these calls. */

export interface CameraJson {
  world_to_camera: number[];
  fx: number;
  fy: number;
  cx: number;
  cy: number;
  width: number;
  height: number;
}

export interface ViewBuffers {
  width: number;
  height: number;
  ids: number[][];
  depth: number[][];
  alpha: number[][];
}

export interface PickProjection {
  handles: number[][];
  targets: number[][];
}

export interface JobState {
  state: "pending" | "running" | "done" | "failed";
  progress: number;
  error: string | null;
}

export interface SessionStatus {
  id: string;
  cloud_count: number | null;
  cameras: CameraJson[];
  picks: { starts: number[][]; ends: number[][] } | null;
  mask: number[];
  jobs: Record<"lora" | "drag" | "refit", JobState>;
  artifacts: Record<string, string>;
  pick_projections: PickProjection[];
  telemetry_len: number;
}

export class ApiError extends Error {
  constructor(public status: number, public reason: string) {
    super(`${status}: ${reason}`);
  }
}

export class Api {
  constructor(public base: string, private fetchFn: typeof fetch = fetch) {}

  private async call<T>(path: string, init?: RequestInit): Promise<T> {
    const res = await this.fetchFn(`${this.base}${path}`, init);
    if (!res.ok) {
      let reason = res.statusText;
      try {
        reason = ((await res.json()) as { error?: string }).error ?? reason;
      } catch {
        /* non-JSON error body */
      }
      throw new ApiError(res.status, reason);
    }
    return (await res.json()) as T;
  }

  createSession(): Promise<{ id: string }> {
    return this.call("/v1/sessions", { method: "POST" });
  }

  status(sid: string): Promise<SessionStatus> {
    return this.call(`/v1/sessions/${sid}/status`);
  }

  uploadPly(sid: string, data: ArrayBuffer | Uint8Array): Promise<{ count: number }> {
    return this.call(`/v1/sessions/${sid}/ply`, {
      method: "POST",
      body: data as BodyInit,
      headers: { "content-type": "application/octet-stream" },
    });
  }

  autoCameras(sid: string, width: number, height: number): Promise<{ cameras: CameraJson[] }> {
    return this.call(`/v1/sessions/${sid}/cameras`, {
      method: "POST",
      body: JSON.stringify({ auto: { width, height } }),
      headers: { "content-type": "application/json" },
    });
  }

  setCameras(sid: string, cameras: CameraJson[]): Promise<{ cameras: CameraJson[] }> {
    return this.call(`/v1/sessions/${sid}/cameras`, {
      method: "POST",
      body: JSON.stringify({ cameras }),
      headers: { "content-type": "application/json" },
    });
  }

  renderUrl(sid: string, view: number, splatSize = 1.0): string {
    return `${this.base}/v1/sessions/${sid}/render?view=${view}&splat_size=${splatSize}`;
  }

  buffers(sid: string, view: number): Promise<ViewBuffers> {
    return this.call(`/v1/sessions/${sid}/render?view=${view}&buffers=1`);
  }

  setPicks(
    sid: string,
    starts: number[][],
    ends: number[][],
    snapTol = 1e-3,
  ): Promise<{ picks: { starts: number[][]; ends: number[][] }; projections: PickProjection[] }> {
    return this.call(`/v1/sessions/${sid}/picks`, {
      method: "POST",
      body: JSON.stringify({ starts, ends, snap_tol: snapTol }),
      headers: { "content-type": "application/json" },
    });
  }

  setMaskIndices(sid: string, indices: number[]): Promise<{ count: number; indices: number[] }> {
    return this.call(`/v1/sessions/${sid}/mask`, {
      method: "POST",
      body: JSON.stringify({ indices }),
      headers: { "content-type": "application/json" },
    });
  }

  stroke(
    sid: string,
    view: number,
    u: number,
    v: number,
    radius: number,
    mode: "add" | "erase",
  ): Promise<{ count: number; indices: number[] }> {
    return this.call(`/v1/sessions/${sid}/mask`, {
      method: "POST",
      body: JSON.stringify({ stroke: { view, u, v, radius, mode } }),
      headers: { "content-type": "application/json" },
    });
  }

  startJob(sid: string, job: "lora" | "drag" | "refit"): Promise<{ job: string; state: string }> {
    return this.call(`/v1/sessions/${sid}/jobs/${job}`, { method: "POST" });
  }

  artifactUrl(sid: string, name: string): string {
    return `${this.base}/v1/sessions/${sid}/artifacts/${name}`;
  }

  exportUrl(sid: string): string {
    return `${this.base}/v1/sessions/${sid}/export`;
  }

  telemetrySocketUrl(sid: string, since: number): string {
    const ws = this.base.replace(/^http/, "ws");
    return `${ws}/v1/sessions/${sid}/telemetry?since=${since}`;
  }
}
