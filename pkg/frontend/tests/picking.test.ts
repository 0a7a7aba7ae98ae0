import { describe, expect, it } from "vitest";

import type { CameraJson, ViewBuffers } from "../src/api.js";
import { PickRejected, PickSession, pickEnd, pickStart, projectForOverlay, unproject } from "../src/picking.js";

const cam: CameraJson = {
  world_to_camera: [1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1],
  fx: 100,
  fy: 100,
  cx: 8,
  cy: 8,
  width: 16,
  height: 16,
};

function emptyBuffers(): ViewBuffers {
  return {
    width: 16,
    height: 16,
    ids: Array.from({ length: 16 }, () => Array(16).fill(-1)),
    depth: Array.from({ length: 16 }, () => Array(16).fill(0)),
    alpha: Array.from({ length: 16 }, () => Array(16).fill(0)),
  };
}

describe("unproject/project", () => {
  it("round-trips through the pinhole model", () => {
    const p = unproject(cam, 12.5, 5.25, 4.0);
    const [u, v] = projectForOverlay(cam, p);
    expect(u).toBeCloseTo(12.5, 9);
    expect(v).toBeCloseTo(5.25, 9);
  });

  it("lifts the principal point onto the optical axis", () => {
    const p = unproject(cam, 8, 8, 3.0);
    expect(p[0]).toBeCloseTo(0, 12);
    expect(p[1]).toBeCloseTo(0, 12);
    expect(p[2]).toBeCloseTo(3, 12);
  });

  it("handles a rotated+translated camera", () => {
    // 90 degree azimuth look-at style matrix (x right = -z world, z forward = -x world)
    const rt: CameraJson = {
      ...cam,
      world_to_camera: [0, 0, -1, 0, 0, 1, 0, 0, -1, 0, 0, 5, 0, 0, 0, 1],
    };
    const world = unproject(rt, 10, 6, 2.5);
    const [u, v] = projectForOverlay(rt, world);
    expect(u).toBeCloseTo(10, 9);
    expect(v).toBeCloseTo(6, 9);
  });
});

describe("pickStart", () => {
  it("records the Gaussian id under the cursor", () => {
    const buf = emptyBuffers();
    buf.ids[5][9] = 7;
    buf.depth[5][9] = 4.0;
    buf.alpha[5][9] = 0.9;
    const p = pickStart(buf, cam, 9.2, 4.8);
    expect(p.gaussianId).toBe(7);
    expect(p.point[2]).toBeCloseTo(4.0, 9);
  });

  it("rejects background clicks with a hint", () => {
    expect(() => pickStart(emptyBuffers(), cam, 3, 3)).toThrow(PickRejected);
  });
});

describe("pickEnd", () => {
  it("uses the surface depth when present", () => {
    const buf = emptyBuffers();
    buf.depth[6][6] = 2.0;
    buf.alpha[6][6] = 0.5;
    const e = pickEnd(buf, cam, 6, 6, null);
    expect(e.point[2]).toBeCloseTo(2.0, 9);
  });

  it("falls back to the pending start's depth on background", () => {
    const buf = emptyBuffers();
    buf.ids[5][5] = 1;
    buf.depth[5][5] = 3.5;
    buf.alpha[5][5] = 1;
    const s = pickStart(buf, cam, 5, 5);
    const e = pickEnd(buf, cam, 12, 12, s);
    expect(e.point[2]).toBeCloseTo(3.5, 9);
    expect(() => pickEnd(buf, cam, 12, 12, null)).toThrow(PickRejected);
  });
});

describe("PickSession", () => {
  it("keeps starts and ends paired", () => {
    const buf = emptyBuffers();
    buf.ids[5][5] = 2;
    buf.depth[5][5] = 3;
    buf.alpha[5][5] = 1;
    const s = new PickSession();
    s.addStart(pickStart(buf, cam, 5, 5));
    expect(s.complete).toBe(false);
    expect(() => s.addStart(pickStart(buf, cam, 5, 5))).toThrow(PickRejected);
    s.addEnd(pickEnd(buf, cam, 9, 9, s.pendingStart));
    expect(s.complete).toBe(true);
    expect(s.asPayload().starts).toHaveLength(1);
    expect(() => s.addEnd(pickEnd(buf, cam, 9, 9, null))).toThrow(PickRejected);
    s.clear();
    expect(s.starts).toHaveLength(0);
  });
});
