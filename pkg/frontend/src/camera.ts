// Orbit camera with a simple perspective projection. The renderer and the
// input mapper both consume its orthonormal basis: drags move control points
// in the camera-facing plane (right/up), or along the view axis with a
// modifier key.

export interface Projected {
  x: number;
  y: number;
  depth: number; // distance along the view direction; <= 0 means behind
}

export class OrbitCamera {
  yaw = -Math.PI / 2; // looking along +y by default: screen up is world +z
  pitch = 0.25;
  distance = 2.0;
  target: [number, number, number] = [0, 0, 0.2];
  fov = 60; // degrees, vertical

  get position(): [number, number, number] {
    const cp = Math.cos(this.pitch);
    return [
      this.target[0] + this.distance * cp * Math.cos(this.yaw),
      this.target[1] + this.distance * cp * Math.sin(this.yaw),
      this.target[2] + this.distance * Math.sin(this.pitch),
    ];
  }

  /** View direction (unit) from the camera toward the target. */
  get forward(): [number, number, number] {
    const p = this.position;
    const d: [number, number, number] = [
      this.target[0] - p[0], this.target[1] - p[1], this.target[2] - p[2],
    ];
    const n = Math.hypot(d[0], d[1], d[2]) || 1;
    return [d[0] / n, d[1] / n, d[2] / n];
  }

  /** Screen-right in world space (unit, horizontal). */
  get right(): [number, number, number] {
    const f = this.forward;
    const n = Math.hypot(f[0], f[1]) || 1;
    return [-f[1] / n, f[0] / n, 0];
  }

  /** Screen-up in world space (unit). */
  get up(): [number, number, number] {
    const f = this.forward;
    const r = this.right;
    return [
      r[1] * f[2] - r[2] * f[1],
      r[2] * f[0] - r[0] * f[2],
      r[0] * f[1] - r[1] * f[0],
    ];
  }

  orbit(dYaw: number, dPitch: number): void {
    this.yaw += dYaw;
    this.pitch = Math.max(-1.45, Math.min(1.45, this.pitch + dPitch));
  }

  zoom(factor: number): void {
    this.distance = Math.max(0.1, Math.min(50, this.distance * factor));
  }

  project(px: number, py: number, pz: number, width: number, height: number): Projected {
    const cam = this.position;
    const f = this.forward;
    const r = this.right;
    const u = this.up;
    const dx = px - cam[0];
    const dy = py - cam[1];
    const dz = pz - cam[2];
    const depth = dx * f[0] + dy * f[1] + dz * f[2];
    const sx = dx * r[0] + dy * r[1] + dz * r[2];
    const sy = dx * u[0] + dy * u[1] + dz * u[2];
    const scale = (0.5 * height) / Math.tan((this.fov * Math.PI) / 360);
    const safe = depth > 1e-6 ? depth : 1e-6;
    return {
      x: width / 2 + (scale * sx) / safe,
      y: height / 2 - (scale * sy) / safe,
      depth,
    };
  }

  /** World-units-per-pixel at the target distance (for mouse drags). */
  worldPerPixel(height: number): number {
    const scale = (0.5 * height) / Math.tan((this.fov * Math.PI) / 360);
    return this.distance / scale;
  }
}
