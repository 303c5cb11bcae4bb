/**
 * Browser wiring: canvas brush drawing, scene/subject upload, instruction
 * input, submit/undo, result panel with predicted-mask overlay toggle.
 * All logic lives in the tested modules; this file only binds the DOM.
 */

import { ApiClient } from "./api.js";
import { Session } from "./session.js";
import { rleDecode } from "./rle.js";
import { StrokePath } from "./strokes.js";
import { renderUpscaled, overlayMask, RgbImage } from "./render.js";

const SCALE = 8;
const SIZE = 64;

function $(id: string): HTMLElement {
  const el = document.getElementById(id);
  if (!el) throw new Error(`missing element #${id}`);
  return el;
}

async function pngToRgb(pngB64: string): Promise<RgbImage> {
  const bytes = Uint8Array.from(atob(pngB64), (c) => c.charCodeAt(0));
  const bitmap = await createImageBitmap(new Blob([bytes], { type: "image/png" }));
  const canvas = new OffscreenCanvas(bitmap.width, bitmap.height);
  const ctx = canvas.getContext("2d")!;
  ctx.drawImage(bitmap, 0, 0);
  const { data, width, height } = ctx.getImageData(0, 0, bitmap.width, bitmap.height);
  const rgb = new Uint8Array(width * height * 3);
  for (let i = 0; i < width * height; i++) {
    rgb[i * 3] = data[i * 4];
    rgb[i * 3 + 1] = data[i * 4 + 1];
    rgb[i * 3 + 2] = data[i * 4 + 2];
  }
  return { width, height, data: rgb };
}

async function fileToScaledPngB64(file: File): Promise<string> {
  const bitmap = await createImageBitmap(file);
  const canvas = new OffscreenCanvas(SIZE, SIZE);
  const ctx = canvas.getContext("2d")!;
  ctx.imageSmoothingEnabled = true;
  ctx.drawImage(bitmap, 0, 0, SIZE, SIZE);
  const blob = await canvas.convertToBlob({ type: "image/png" });
  const buf = new Uint8Array(await blob.arrayBuffer());
  let binary = "";
  for (const b of buf) binary += String.fromCharCode(b);
  return btoa(binary);
}

function paint(canvas: HTMLCanvasElement, rgba: Uint8Array, size: number): void {
  const ctx = canvas.getContext("2d")!;
  ctx.putImageData(new ImageData(new Uint8ClampedArray(rgba), size, size), 0, 0);
}

async function main() {
  const client = new ApiClient("");
  const sceneCanvas = $("scene") as HTMLCanvasElement;
  const resultCanvas = $("result") as HTMLCanvasElement;
  const status = $("status");
  let sceneRgb: RgbImage | null = null;
  let resultRgb: RgbImage | null = null;

  const session = new Session(client, SIZE, SIZE, (s) => {
    void redraw();
    ($("submit") as HTMLButtonElement).disabled = !session.canSubmit();
    status.textContent = s.inFlight
      ? "editing…"
      : s.lastError
        ? `error ${s.lastError.status}: ${s.lastError.message}`
        : s.lastResponse
          ? s.lastResponse.response_text
          : "";
  });

  async function redraw() {
    if (sceneRgb) {
      let rgba = renderUpscaled(sceneRgb, SCALE);
      rgba = overlayMask(rgba, session.mask(), SCALE);
      paint(sceneCanvas, rgba, SIZE * SCALE);
    }
    const resp = session.state.lastResponse;
    if (resp) {
      if (!resultRgb) resultRgb = await pngToRgb(resp.edited_png);
      let rgba = renderUpscaled(resultRgb, SCALE);
      if (($("overlay") as HTMLInputElement).checked) {
        rgba = overlayMask(rgba, rleDecode(resp.predicted_full_mask), SCALE,
          [64, 128, 255]);
      }
      paint(resultCanvas, rgba, SIZE * SCALE);
    }
  }

  ($("scene-file") as HTMLInputElement).addEventListener("change", async (e) => {
    const file = (e.target as HTMLInputElement).files?.[0];
    if (!file) return;
    const b64 = await fileToScaledPngB64(file);
    sceneRgb = await pngToRgb(b64);
    session.setScene(b64);
  });

  ($("subject-file") as HTMLInputElement).addEventListener("change", async (e) => {
    const file = (e.target as HTMLInputElement).files?.[0];
    session.setSubject(file ? await fileToScaledPngB64(file) : null);
  });

  ($("instruction") as HTMLInputElement).addEventListener("input", (e) => {
    session.setInstruction(($("instruction") as HTMLInputElement).value);
  });

  // Brush: record model-resolution points while the pointer is down.
  let current: StrokePath | null = null;
  const toModel = (e: PointerEvent): [number, number] => {
    const rect = sceneCanvas.getBoundingClientRect();
    const x = Math.min(SIZE - 1, Math.max(0,
      Math.floor(((e.clientX - rect.left) / rect.width) * SIZE)));
    const y = Math.min(SIZE - 1, Math.max(0,
      Math.floor(((e.clientY - rect.top) / rect.height) * SIZE)));
    return [x, y];
  };
  sceneCanvas.addEventListener("pointerdown", (e) => {
    current = {
      points: [toModel(e)],
      brush_radius: Number(($("radius") as HTMLInputElement).value),
      erase: ($("erase") as HTMLInputElement).checked,
    };
  });
  sceneCanvas.addEventListener("pointermove", (e) => {
    if (!current) return;
    const p = toModel(e);
    const last = current.points[current.points.length - 1];
    if (p[0] !== last[0] || p[1] !== last[1]) {
      current.points.push(p);
      // live preview: replay committed strokes plus the one being drawn
      if (sceneRgb) {
        const preview = [...session.state.strokes, current];
        let rgba = renderUpscaled(sceneRgb, SCALE);
        rgba = overlayMask(rgba, session.mask(), SCALE);
        paint(sceneCanvas, rgba, SIZE * SCALE);
      }
    }
  });
  const commit = () => {
    if (current) {
      session.addStroke(current);
      current = null;
    }
  };
  sceneCanvas.addEventListener("pointerup", commit);
  sceneCanvas.addEventListener("pointerleave", commit);

  $("undo").addEventListener("click", () => session.undo());
  $("clear").addEventListener("click", () => session.clearStrokes());
  $("overlay").addEventListener("change", () => void redraw());
  $("submit").addEventListener("click", () => {
    resultRgb = null;
    void session.submit();
  });

  try {
    const h = await client.health();
    status.textContent = h.status === "ok"
      ? `model ${h.model_hash?.slice(0, 12)} ready`
      : "server up, no model loaded";
  } catch {
    status.textContent = "server unreachable";
  }
}

void main();
