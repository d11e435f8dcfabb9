// Keyboard/mouse mapping to control messages.
//
// Tab cycles the primary selection; number keys 1..9 toggle a control point
// in or out of the selected set (at most two at once, oldest evicted) so a
// second hand can drag simultaneously. Arrows/WASD nudge every selected
// control in the camera-facing plane; holding Alt maps the vertical keys to
// the view axis instead. Outgoing messages are rate-capped: deltas
// accumulate and flush at most once per server tick.

import { ControlMessage, dragMessage, simpleMessage } from "./protocol.js";

export interface CameraBasis {
  right: [number, number, number];
  up: [number, number, number];
  forward: [number, number, number];
}

export interface KeyEventLike {
  key: string;
  altKey?: boolean;
  repeat?: boolean;
}

function scaled(v: [number, number, number], s: number): [number, number, number] {
  return [v[0] * s, v[1] * s, v[2] * s];
}

export class InputMapper {
  readonly selected: number[] = [];
  private pending = new Map<number, [number, number, number]>();
  private lastFlush = -Infinity;

  constructor(
    public nCtrl: number,
    public stepSize = 0.01,
    public tickRate = 30,
  ) {
    if (nCtrl > 0) this.selected.push(0);
  }

  /** Immediate messages (reset/pause) or null; movement keys accumulate. */
  handleKey(ev: KeyEventLike, basis: CameraBasis): ControlMessage | null {
    const k = ev.key;
    if (k === "r" || k === "R") return simpleMessage("reset");
    if (k === "p" || k === "P") return simpleMessage("pause");
    if (k === "o" || k === "O") return simpleMessage("resume");
    if (k === "Tab") {
      if (this.nCtrl > 0) {
        const head = this.selected.length ? this.selected[0] : -1;
        this.selected.length = 0;
        this.selected.push((head + 1) % this.nCtrl);
      }
      return null;
    }
    if (k >= "1" && k <= "9") {
      const idx = Number(k) - 1;
      if (idx < this.nCtrl) this.toggleSelection(idx);
      return null;
    }
    const dir = this.keyDirection(k, !!ev.altKey, basis);
    if (dir) {
      for (const idx of this.selected) this.accumulate(idx, scaled(dir, this.stepSize));
    }
    return null;
  }

  toggleSelection(idx: number): void {
    const at = this.selected.indexOf(idx);
    if (at >= 0) {
      this.selected.splice(at, 1);
      return;
    }
    this.selected.push(idx);
    while (this.selected.length > 2) this.selected.shift();
  }

  private keyDirection(key: string, alt: boolean, basis: CameraBasis):
      [number, number, number] | null {
    switch (key) {
      case "ArrowUp":
      case "w":
      case "W":
        return alt ? basis.forward : basis.up;
      case "ArrowDown":
      case "s":
      case "S":
        return alt ? scaled(basis.forward, -1) : scaled(basis.up, -1);
      case "ArrowLeft":
      case "a":
      case "A":
        return scaled(basis.right, -1);
      case "ArrowRight":
      case "d":
      case "D":
        return basis.right;
      default:
        return null;
    }
  }

  /** Mouse drag in screen pixels applied to the primary selection. */
  handleMouseDrag(dxPx: number, dyPx: number, worldPerPixel: number,
                  basis: CameraBasis, depthAxis = false): void {
    if (!this.selected.length) return;
    const idx = this.selected[0];
    if (depthAxis) {
      this.accumulate(idx, scaled(basis.forward, -dyPx * worldPerPixel));
      return;
    }
    const d: [number, number, number] = [
      (basis.right[0] * dxPx - basis.up[0] * dyPx) * worldPerPixel,
      (basis.right[1] * dxPx - basis.up[1] * dyPx) * worldPerPixel,
      (basis.right[2] * dxPx - basis.up[2] * dyPx) * worldPerPixel,
    ];
    this.accumulate(idx, d);
  }

  private accumulate(idx: number, delta: [number, number, number]): void {
    const cur = this.pending.get(idx) ?? [0, 0, 0];
    this.pending.set(idx, [cur[0] + delta[0], cur[1] + delta[1], cur[2] + delta[2]]);
  }

  /** Drain accumulated drags, at most once per server tick. */
  flush(nowSeconds: number): ControlMessage[] {
    if (this.pending.size === 0) return [];
    if (nowSeconds - this.lastFlush < 1 / this.tickRate) return [];
    this.lastFlush = nowSeconds;
    const out: ControlMessage[] = [];
    for (const [idx, delta] of this.pending) {
      out.push(dragMessage(idx, delta));
    }
    this.pending.clear();
    return out;
  }
}
