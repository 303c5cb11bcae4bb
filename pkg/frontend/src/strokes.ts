/**
 * Brush-stroke rasterization. A stroke is an ordered list of integer canvas
 * points; pixels along each segment (Bresenham) are stamped with a disc of
 * integer offsets satisfying dx^2 + dy^2 <= r^2. Erase strokes clear instead
 * of set. The algorithm matches the server-side brush stamping exactly so
 * strokes can be replayed bit-for-bit against golden fixtures.
 */

import { MaskRaster, emptyMask } from "./rle.js";

export interface StrokePath {
  points: [number, number][];
  brush_radius: number;
  erase: boolean;
}

export function brushOffsets(radius: number): [number, number][] {
  const out: [number, number][] = [];
  for (let dy = -radius; dy <= radius; dy++) {
    for (let dx = -radius; dx <= radius; dx++) {
      if (dx * dx + dy * dy <= radius * radius) out.push([dx, dy]);
    }
  }
  return out;
}

function bresenham(
  x0: number, y0: number, x1: number, y1: number,
): [number, number][] {
  const pts: [number, number][] = [];
  const dx = Math.abs(x1 - x0);
  const dy = -Math.abs(y1 - y0);
  const sx = x0 < x1 ? 1 : -1;
  const sy = y0 < y1 ? 1 : -1;
  let err = dx + dy;
  let x = x0;
  let y = y0;
  for (;;) {
    pts.push([x, y]);
    if (x === x1 && y === y1) break;
    const e2 = 2 * err;
    if (e2 >= dy) {
      err += dy;
      x += sx;
    }
    if (e2 <= dx) {
      err += dx;
      y += sy;
    }
  }
  return pts;
}

function stampStroke(mask: MaskRaster, stroke: StrokePath): void {
  if (stroke.points.length === 0) {
    throw new Error("stroke must contain at least one point");
  }
  const offsets = brushOffsets(stroke.brush_radius);
  const val = stroke.erase ? 0 : 1;
  const pixels: [number, number][] = [stroke.points[0]];
  for (let i = 1; i < stroke.points.length; i++) {
    const [px, py] = stroke.points[i - 1];
    const [qx, qy] = stroke.points[i];
    pixels.push(...bresenham(px, py, qx, qy));
  }
  for (const [x, y] of pixels) {
    for (const [dx, dy] of offsets) {
      const cx = x + dx;
      const cy = y + dy;
      if (cx >= 0 && cx < mask.width && cy >= 0 && cy < mask.height) {
        mask.data[cy * mask.width + cx] = val;
      }
    }
  }
}

/** Replay strokes in order onto a fresh raster. */
export function rasterizeStrokes(
  strokes: StrokePath[], width: number, height: number,
): MaskRaster {
  const mask = emptyMask(width, height);
  for (const stroke of strokes) stampStroke(mask, stroke);
  return mask;
}
