/**
 * Run-length encoding for binary masks, matching the server wire format:
 * row-major scan, alternating runs of 0s and 1s starting with 0s. If the
 * first pixel is set, the encoding begins with a zero-length 0-run.
 */

export interface MaskRLE {
  w: number;
  h: number;
  runs: number[];
}

/** Binary mask raster: row-major Uint8Array of 0/1 values. */
export interface MaskRaster {
  width: number;
  height: number;
  data: Uint8Array;
}

export function emptyMask(width: number, height: number): MaskRaster {
  return { width, height, data: new Uint8Array(width * height) };
}

export function popcount(m: MaskRaster): number {
  let n = 0;
  for (let i = 0; i < m.data.length; i++) n += m.data[i];
  return n;
}

export function rleEncode(m: MaskRaster): MaskRLE {
  const runs: number[] = [];
  const flat = m.data;
  if (flat.length === 0) return { w: m.width, h: m.height, runs };
  if (flat[0] === 1) runs.push(0);
  let current = flat[0];
  let length = 1;
  for (let i = 1; i < flat.length; i++) {
    if (flat[i] === current) {
      length++;
    } else {
      runs.push(length);
      current = flat[i];
      length = 1;
    }
  }
  runs.push(length);
  return { w: m.width, h: m.height, runs };
}

export class MalformedRLE extends Error {}

export function rleDecode(r: MaskRLE): MaskRaster {
  const total = r.w * r.h;
  let sum = 0;
  for (const run of r.runs) {
    if (!Number.isInteger(run) || run < 0) {
      throw new MalformedRLE("runs must be non-negative integers");
    }
    sum += run;
  }
  if (sum !== total) {
    throw new MalformedRLE("run lengths do not cover width*height");
  }
  const flat = new Uint8Array(total);
  let pos = 0;
  let val = 0;
  for (const run of r.runs) {
    if (val === 1) flat.fill(1, pos, pos + run);
    pos += run;
    val ^= 1;
  }
  return { width: r.w, height: r.h, data: flat };
}
