/** Screen-space mask brush. The client only tracks stroke geometry and the
 * authoritative index set returned by the server; resolution of strokes to
 * Gaussian indices happens server-side. */

import type { Api } from "./api.js";

export type BrushMode = "add" | "erase";

export interface StrokePoint {
  view: number;
  u: number;
  v: number;
}

export class BrushState {
  mode: BrushMode = "add";
  radius = 6;
  indices: Set<number> = new Set();

  setFromServer(indices: number[]): void {
    this.indices = new Set(indices);
  }

  get count(): number {
    return this.indices.size;
  }
}

export class BrushTool {
  constructor(private api: Api, private sid: string, public state: BrushState = new BrushState()) {}

  async applyStroke(p: StrokePoint): Promise<number> {
    if (this.state.radius <= 0) throw new Error("brush radius must be positive");
    const res = await this.api.stroke(this.sid, p.view, p.u, p.v, this.state.radius, this.state.mode);
    const before = this.state.count;
    this.state.setFromServer(res.indices);
    if (this.state.mode === "add" && this.state.count < before) {
      // server is authoritative, but additive strokes must never shrink the set
      throw new Error("additive stroke shrank the mask; server disagreed");
    }
    return res.count;
  }

  async clearAll(): Promise<void> {
    await this.api.setMaskIndices(this.sid, []);
    this.state.setFromServer([]);
  }
}
