// Canvas-2D scene drawing: springs as one batched line path, nodes as
// squares, control points as highlighted circles, skin particles (when
// streamed) as colored dots. Batching keeps 2,000 nodes comfortably above
// 30 fps redraw.

import { OrbitCamera } from "./camera.js";
import { Hello, Snapshot } from "./protocol.js";

export class SceneRenderer {
  private fpsWindow: number[] = [];

  constructor(
    private ctx: CanvasRenderingContext2D,
    public camera = new OrbitCamera(),
  ) {}

  get fps(): number {
    if (this.fpsWindow.length < 2) return 0;
    const span = this.fpsWindow[this.fpsWindow.length - 1] - this.fpsWindow[0];
    return span > 0 ? ((this.fpsWindow.length - 1) / span) * 1000 : 0;
  }

  draw(hello: Hello, snap: Snapshot, selected: number[]): void {
    const now = performance.now();
    this.fpsWindow.push(now);
    if (this.fpsWindow.length > 60) this.fpsWindow.shift();

    const ctx = this.ctx;
    const w = ctx.canvas.width;
    const h = ctx.canvas.height;
    ctx.fillStyle = "#10141a";
    ctx.fillRect(0, 0, w, h);

    const n = hello.n_nodes;
    const pos = snap.positions;
    const sx = new Float32Array(n);
    const sy = new Float32Array(n);
    const vis = new Uint8Array(n);
    for (let i = 0; i < n; i++) {
      const p = this.camera.project(pos[3 * i], pos[3 * i + 1], pos[3 * i + 2], w, h);
      sx[i] = p.x;
      sy[i] = p.y;
      vis[i] = p.depth > 0 ? 1 : 0;
    }

    ctx.strokeStyle = "rgba(120, 170, 255, 0.45)";
    ctx.lineWidth = 1;
    ctx.beginPath();
    for (const [i, j] of hello.springs) {
      if (!vis[i] || !vis[j]) continue;
      ctx.moveTo(sx[i], sy[i]);
      ctx.lineTo(sx[j], sy[j]);
    }
    ctx.stroke();

    ctx.fillStyle = "#e8c35a";
    for (let i = 0; i < n; i++) {
      if (vis[i]) ctx.fillRect(sx[i] - 1.5, sy[i] - 1.5, 3, 3);
    }

    if (snap.skinCenters && snap.skinColors) {
      const m = snap.skinCenters.length / 3;
      for (let i = 0; i < m; i++) {
        const p = this.camera.project(
          snap.skinCenters[3 * i], snap.skinCenters[3 * i + 1],
          snap.skinCenters[3 * i + 2], w, h);
        if (p.depth <= 0) continue;
        const r = Math.round(255 * snap.skinColors[3 * i]);
        const g = Math.round(255 * snap.skinColors[3 * i + 1]);
        const b = Math.round(255 * snap.skinColors[3 * i + 2]);
        ctx.fillStyle = `rgb(${r},${g},${b})`;
        ctx.fillRect(p.x - 1, p.y - 1, 2, 2);
      }
    }

    const ctrl = snap.control;
    for (let c = 0; c < hello.n_ctrl; c++) {
      const p = this.camera.project(ctrl[3 * c], ctrl[3 * c + 1], ctrl[3 * c + 2], w, h);
      if (p.depth <= 0) continue;
      ctx.beginPath();
      ctx.arc(p.x, p.y, selected.includes(c) ? 8 : 5, 0, 2 * Math.PI);
      ctx.fillStyle = selected.includes(c) ? "#ff555a" : "#3ddc84";
      ctx.fill();
      ctx.fillStyle = "#ffffff";
      ctx.font = "11px monospace";
      ctx.fillText(String(c + 1), p.x + 9, p.y - 9);
    }
  }

  banner(text: string): void {
    const ctx = this.ctx;
    ctx.fillStyle = "rgba(0,0,0,0.6)";
    ctx.fillRect(0, 0, ctx.canvas.width, 28);
    ctx.fillStyle = "#ffffff";
    ctx.font = "13px monospace";
    ctx.fillText(text, 10, 18);
  }
}
