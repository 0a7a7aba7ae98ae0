/** Point picking against the server's ID/depth buffer sidecar.
 *
 * Starts must land on a rendered Gaussian (its index is recorded and the
 * server snaps the 3D point to that Gaussian's center). Ends are free 3D
 * points lifted from the depth at the click, falling back to the depth of
 * the pending start so a drag can leave the silhouette.
 */

import type { CameraJson, ViewBuffers } from "./api.js";

export interface PickedStart {
  kind: "start";
  gaussianId: number;
  point: [number, number, number];
  pixel: [number, number];
}

export interface PickedEnd {
  kind: "end";
  point: [number, number, number];
  pixel: [number, number];
}

export class PickRejected extends Error {}

/** Camera-space ray lift: pixel + depth -> world point. */
export function unproject(cam: CameraJson, u: number, v: number, depth: number): [number, number, number] {
  const xc = ((u - cam.cx) / cam.fx) * depth;
  const yc = ((v - cam.cy) / cam.fy) * depth;
  const m = cam.world_to_camera;
  // world = R^T (p_cam - t); world_to_camera rows are the camera axes
  const t = [m[3], m[7], m[11]];
  const d = [xc - t[0], yc - t[1], depth - t[2]];
  return [
    m[0] * d[0] + m[4] * d[1] + m[8] * d[2],
    m[1] * d[0] + m[5] * d[1] + m[9] * d[2],
    m[2] * d[0] + m[6] * d[1] + m[10] * d[2],
  ];
}

/** Forward projection (overlay placement only; pipeline math stays server-side). */
export function projectForOverlay(cam: CameraJson, p: [number, number, number]): [number, number] {
  const m = cam.world_to_camera;
  const x = m[0] * p[0] + m[1] * p[1] + m[2] * p[2] + m[3];
  const y = m[4] * p[0] + m[5] * p[1] + m[6] * p[2] + m[7];
  const z = m[8] * p[0] + m[9] * p[1] + m[10] * p[2] + m[11];
  return [(cam.fx * x) / z + cam.cx, (cam.fy * y) / z + cam.cy];
}

function pixelAt(buffers: ViewBuffers, u: number, v: number): [number, number] {
  const x = Math.min(Math.max(Math.round(u), 0), buffers.width - 1);
  const y = Math.min(Math.max(Math.round(v), 0), buffers.height - 1);
  return [x, y];
}

export function pickStart(buffers: ViewBuffers, cam: CameraJson, u: number, v: number): PickedStart {
  const [x, y] = pixelAt(buffers, u, v);
  const id = buffers.ids[y][x];
  if (id < 0) {
    throw new PickRejected("click a rendered Gaussian to place a start point");
  }
  const depth = buffers.depth[y][x];
  return { kind: "start", gaussianId: id, point: unproject(cam, u, v, depth), pixel: [u, v] };
}

export function pickEnd(
  buffers: ViewBuffers,
  cam: CameraJson,
  u: number,
  v: number,
  pendingStart: PickedStart | null,
): PickedEnd {
  const [x, y] = pixelAt(buffers, u, v);
  let depth = buffers.depth[y][x];
  if (buffers.alpha[y][x] <= 0 || depth <= 0) {
    if (pendingStart === null) {
      throw new PickRejected("pick a start point first; background ends need its depth");
    }
    const sp = pendingStart.pixel;
    const [sx, sy] = pixelAt(buffers, sp[0], sp[1]);
    depth = buffers.depth[sy][sx];
  }
  return { kind: "end", point: unproject(cam, u, v, depth), pixel: [u, v] };
}

/** Pairs a completed pick list: equal starts/ends, in click order. */
export class PickSession {
  starts: PickedStart[] = [];
  ends: PickedEnd[] = [];

  get complete(): boolean {
    return this.starts.length === this.ends.length && this.starts.length > 0;
  }

  get pendingStart(): PickedStart | null {
    return this.starts.length > this.ends.length ? this.starts[this.starts.length - 1] : null;
  }

  addStart(p: PickedStart): void {
    if (this.pendingStart) throw new PickRejected("pick the end point for the previous start first");
    this.starts.push(p);
  }

  addEnd(p: PickedEnd): void {
    if (!this.pendingStart) throw new PickRejected("pick a start point first");
    this.ends.push(p);
  }

  clear(): void {
    this.starts = [];
    this.ends = [];
  }

  asPayload(): { starts: number[][]; ends: number[][] } {
    return { starts: this.starts.map((s) => [...s.point]), ends: this.ends.map((e) => [...e.point]) };
  }
}
