// Top-down site map. Site frame convention: x east (red axis), y north
// (green axis); the canvas y-axis is flipped so north points up.
//
// Everything drawn comes straight from the latest snapshot: no client-side
// extrapolation, a frame always shows exactly one simulation step.

import type { ConsoleViewModel } from "./model.js";
import type { StateSnapshot, TerrainSnapshot } from "./types.js";

// The subset of CanvasRenderingContext2D the renderer touches; tests pass a
// recording stub instead of a real canvas.
export interface Draw2D {
  fillStyle: string | CanvasGradient | CanvasPattern;
  strokeStyle: string | CanvasGradient | CanvasPattern;
  lineWidth: number;
  globalAlpha: number;
  font: string;
  beginPath(): void;
  moveTo(x: number, y: number): void;
  lineTo(x: number, y: number): void;
  arc(x: number, y: number, r: number, a0: number, a1: number): void;
  rect(x: number, y: number, w: number, h: number): void;
  fill(): void;
  stroke(): void;
  fillRect(x: number, y: number, w: number, h: number): void;
  strokeRect(x: number, y: number, w: number, h: number): void;
  fillText(text: string, x: number, y: number): void;
  save(): void;
  restore(): void;
}

export interface MapTheme {
  widthPx: number;
  heightPx: number;
  background: string;
  axisX: string; // east
  axisY: string; // north
}

export const DEFAULT_THEME: MapTheme = {
  widthPx: 880,
  heightPx: 640,
  background: "#1b1e23",
  axisX: "#e04a3a",
  axisY: "#3dbb58",
};

export interface SitePoints {
  [name: string]: [number, number, number];
}

export class MapView {
  constructor(
    readonly theme: MapTheme = DEFAULT_THEME,
    private siteSize: [number, number] = [44, 32],
  ) {}

  toPx(x: number, y: number): [number, number] {
    const sx = this.theme.widthPx / this.siteSize[0];
    const sy = this.theme.heightPx / this.siteSize[1];
    return [x * sx, this.theme.heightPx - y * sy];
  }

  metresToPx(m: number): number {
    return m * (this.theme.widthPx / this.siteSize[0]);
  }

  render(ctx: Draw2D, vm: ConsoleViewModel, points: SitePoints): void {
    const snap = vm.latest;
    ctx.save();
    ctx.fillStyle = this.theme.background;
    ctx.fillRect(0, 0, this.theme.widthPx, this.theme.heightPx);
    if (vm.terrain) this.drawTerrain(ctx, vm.terrain);
    this.drawAxes(ctx);
    this.drawPoints(ctx, points);
    if (vm.activePath.length > 1) this.drawPath(ctx, vm.activePath);
    if (snap) {
      this.drawDump(ctx, snap);
      this.drawExcavator(ctx, snap);
      this.drawEstimate(ctx, snap);
    }
    ctx.restore();
  }

  private drawTerrain(ctx: Draw2D, terrain: TerrainSnapshot): void {
    const res = terrain.resolution;
    const [ox, oy] = terrain.origin;
    for (let row = 0; row < terrain.heights.length; row++) {
      const line = terrain.heights[row];
      for (let col = 0; col < line.length; col++) {
        const h = line[col];
        if (h <= 0.02) continue;
        const [px, py] = this.toPx(ox + col * res, oy + (row + 1) * res);
        const heat = Math.min(1, h / 5.0);
        ctx.fillStyle = heightColor(heat);
        ctx.fillRect(px, py, this.metresToPx(res) + 1, this.metresToPx(res) + 1);
      }
    }
  }

  private drawAxes(ctx: Draw2D): void {
    const [o1, o2] = this.toPx(0.5, 0.5);
    const axis = this.metresToPx(4);
    ctx.lineWidth = 3;
    ctx.strokeStyle = this.theme.axisX;
    ctx.beginPath();
    ctx.moveTo(o1, o2);
    ctx.lineTo(o1 + axis, o2);
    ctx.stroke();
    ctx.strokeStyle = this.theme.axisY;
    ctx.beginPath();
    ctx.moveTo(o1, o2);
    ctx.lineTo(o1, o2 - axis);
    ctx.stroke();
  }

  private drawPoints(ctx: Draw2D, points: SitePoints): void {
    ctx.font = "12px sans-serif";
    for (const [name, [x, y]] of Object.entries(points)) {
      const [px, py] = this.toPx(x, y);
      ctx.strokeStyle = "#8a93a3";
      ctx.lineWidth = 1;
      ctx.beginPath();
      ctx.arc(px, py, 6, 0, Math.PI * 2);
      ctx.stroke();
      ctx.fillStyle = "#aab3c0";
      ctx.fillText(name.replace("point", "P"), px + 8, py - 6);
    }
  }

  private drawPath(ctx: Draw2D, path: [number, number][]): void {
    ctx.strokeStyle = "#58a6ff";
    ctx.lineWidth = 2;
    ctx.beginPath();
    const [x0, y0] = this.toPx(path[0][0], path[0][1]);
    ctx.moveTo(x0, y0);
    for (const [x, y] of path.slice(1)) {
      const [px, py] = this.toPx(x, y);
      ctx.lineTo(px, py);
    }
    ctx.stroke();
  }

  private drawDump(ctx: Draw2D, snap: StateSnapshot): void {
    const d = snap.dump;
    const L = this.metresToPx(3.4);
    const W = this.metresToPx(2.0);
    const [px, py] = this.toPx(d.x, d.y);
    const cos = Math.cos(-d.yaw);
    const sin = Math.sin(-d.yaw);
    const corners: [number, number][] = [
      [L / 2, W / 2], [L / 2, -W / 2], [-L / 2, -W / 2], [-L / 2, W / 2],
    ].map(([cx, cy]) => [px + cx * cos - cy * sin, py + cx * sin + cy * cos]);
    ctx.fillStyle = snap.estopped ? "#7a2f2f" : "#c9a227";
    ctx.beginPath();
    ctx.moveTo(corners[0][0], corners[0][1]);
    for (const [cx, cy] of corners.slice(1)) ctx.lineTo(cx, cy);
    ctx.fill();
    // vessel fill bar above the body
    const fill = d.capacity > 0 ? d.vessel_load / d.capacity : 0;
    ctx.fillStyle = "#333a45";
    ctx.fillRect(px - W, py - W - 10, 2 * W, 6);
    ctx.fillStyle = fill >= 0.9 ? "#3dbb58" : "#58a6ff";
    ctx.fillRect(px - W, py - W - 10, 2 * W * Math.min(1, fill), 6);
  }

  private drawExcavator(ctx: Draw2D, snap: StateSnapshot): void {
    const e = snap.excavator;
    const [bx, by, byaw] = e.base;
    const [swing, boom, arm, bucket] = e.joints;
    // planar chain projected onto the ground: boom/arm/bucket foreshortened
    // by their pitch, rotated by base yaw + swing
    const lengths: [number, number][] = [
      [5.7, boom], [2.9, boom + arm], [1.3, boom + arm + bucket],
    ];
    const heading = byaw + swing;
    let gx = bx;
    let gy = by;
    const [p0x, p0y] = this.toPx(gx, gy);
    ctx.fillStyle = "#954fd0";
    ctx.beginPath();
    ctx.arc(p0x, p0y, this.metresToPx(1.0), 0, Math.PI * 2);
    ctx.fill();
    ctx.strokeStyle = "#c79df0";
    ctx.lineWidth = 3;
    ctx.beginPath();
    ctx.moveTo(p0x, p0y);
    for (const [len, pitch] of lengths) {
      gx += len * Math.cos(pitch) * Math.cos(heading);
      gy += len * Math.cos(pitch) * Math.sin(heading);
      const [px, py] = this.toPx(gx, gy);
      ctx.lineTo(px, py);
    }
    ctx.stroke();
    const loadFrac = Math.min(1, e.bucket_load / 0.8);
    if (loadFrac > 0) {
      const [tipx, tipy] = this.toPx(gx, gy);
      ctx.fillStyle = "#b58852";
      ctx.beginPath();
      ctx.arc(tipx, tipy, 3 + 4 * loadFrac, 0, Math.PI * 2);
      ctx.fill();
    }
  }

  private drawEstimate(ctx: Draw2D, snap: StateSnapshot): void {
    // EKF estimate cross vs true pose dot
    const est = snap.dump.estimate;
    const [px, py] = this.toPx(est.x, est.y);
    ctx.strokeStyle = "#ff7ab3";
    ctx.lineWidth = 1.5;
    ctx.beginPath();
    ctx.moveTo(px - 6, py);
    ctx.lineTo(px + 6, py);
    ctx.moveTo(px, py - 6);
    ctx.lineTo(px, py + 6);
    ctx.stroke();
    const [tx, ty] = this.toPx(snap.dump.x, snap.dump.y);
    ctx.fillStyle = "#ffffff";
    ctx.beginPath();
    ctx.arc(tx, ty, 2.5, 0, Math.PI * 2);
    ctx.fill();
  }
}

export function heightColor(heat: number): string {
  // dark soil to bright sand ramp
  const r = Math.round(90 + 140 * heat);
  const g = Math.round(70 + 110 * heat);
  const b = Math.round(50 + 40 * heat);
  return `rgb(${r},${g},${b})`;
}
