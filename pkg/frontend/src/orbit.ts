/** Orbit camera: spherical parameters around a scene center, converted to
 * the server's world-to-camera JSON. Matches the service's look-at frame
 * (x right, y down, z forward). */

import type { CameraJson } from "./api.js";

export interface OrbitParams {
  center: [number, number, number];
  radius: number;
  azimuthDeg: number;
  elevationDeg: number;
}

function cross(a: number[], b: number[]): number[] {
  return [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]];
}

function norm(a: number[]): number[] {
  const n = Math.hypot(a[0], a[1], a[2]);
  return [a[0] / n, a[1] / n, a[2] / n];
}

export function orbitToCamera(
  p: OrbitParams,
  intrinsics: Pick<CameraJson, "fx" | "fy" | "cx" | "cy" | "width" | "height">,
): CameraJson {
  const az = (p.azimuthDeg * Math.PI) / 180;
  const el = (p.elevationDeg * Math.PI) / 180;
  const eye = [
    p.center[0] + p.radius * Math.cos(el) * Math.cos(az),
    p.center[1] + p.radius * Math.sin(el),
    p.center[2] + p.radius * Math.cos(el) * Math.sin(az),
  ];
  const z = norm([p.center[0] - eye[0], p.center[1] - eye[1], p.center[2] - eye[2]]);
  const down = [0, -1, 0];
  let x = cross(down, z);
  const nx = Math.hypot(x[0], x[1], x[2]);
  x = nx < 1e-9 ? [1, 0, 0] : [x[0] / nx, x[1] / nx, x[2] / nx];
  const y = cross(z, x);
  const r = [x, y, z];
  const t = r.map((row) => -(row[0] * eye[0] + row[1] * eye[1] + row[2] * eye[2]));
  const m = [
    r[0][0], r[0][1], r[0][2], t[0],
    r[1][0], r[1][1], r[1][2], t[1],
    r[2][0], r[2][1], r[2][2], t[2],
    0, 0, 0, 1,
  ];
  return { world_to_camera: m, ...intrinsics };
}

export function orbitStep(p: OrbitParams, dAzimuthDeg: number, dElevationDeg: number): OrbitParams {
  return {
    ...p,
    azimuthDeg: (p.azimuthDeg + dAzimuthDeg) % 360,
    elevationDeg: Math.max(-85, Math.min(85, p.elevationDeg + dElevationDeg)),
  };
}
