/**
 * Pure rendering helpers. The model works at a fixed low resolution, so the
 * preview is an honest nearest-neighbor upscale: every model pixel becomes a
 * scale x scale block. Output is a raw RGBA buffer so tests can snapshot it
 * without a DOM canvas.
 */

import { MaskRaster } from "./rle.js";

export interface RgbImage {
  width: number;
  height: number;
  data: Uint8Array; // row-major RGB triples
}

/** Nearest-neighbor upscale to RGBA (alpha 255). */
export function renderUpscaled(img: RgbImage, scale: number): Uint8Array {
  const W = img.width * scale;
  const H = img.height * scale;
  const out = new Uint8Array(W * H * 4);
  for (let y = 0; y < H; y++) {
    const sy = Math.floor(y / scale);
    for (let x = 0; x < W; x++) {
      const sx = Math.floor(x / scale);
      const s = (sy * img.width + sx) * 3;
      const d = (y * W + x) * 4;
      out[d] = img.data[s];
      out[d + 1] = img.data[s + 1];
      out[d + 2] = img.data[s + 2];
      out[d + 3] = 255;
    }
  }
  return out;
}

/** Blend a translucent highlight over masked pixels of an upscaled buffer. */
export function overlayMask(
  rgba: Uint8Array, mask: MaskRaster, scale: number,
  color: [number, number, number] = [255, 64, 64], alpha = 0.45,
): Uint8Array {
  const W = mask.width * scale;
  const out = Uint8Array.from(rgba);
  for (let y = 0; y < mask.height * scale; y++) {
    const sy = Math.floor(y / scale);
    for (let x = 0; x < W; x++) {
      const sx = Math.floor(x / scale);
      if (mask.data[sy * mask.width + sx] === 1) {
        const d = (y * W + x) * 4;
        out[d] = Math.round(out[d] * (1 - alpha) + color[0] * alpha);
        out[d + 1] = Math.round(out[d + 1] * (1 - alpha) + color[1] * alpha);
        out[d + 2] = Math.round(out[d + 2] * (1 - alpha) + color[2] * alpha);
      }
    }
  }
  return out;
}
