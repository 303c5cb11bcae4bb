import { createHash } from "node:crypto";
import { readFileSync } from "node:fs";
import { fileURLToPath } from "node:url";
import { describe, expect, it } from "vitest";
import { ApiClient } from "../src/api.js";
import { renderUpscaled } from "../src/render.js";
import { rleDecode } from "../src/rle.js";
import { Session } from "../src/session.js";
import { decodePng } from "./png.js";

const fixturePath = fileURLToPath(
  new URL("../../tests/fixtures/golden_response.json", import.meta.url),
);
const fix = JSON.parse(readFileSync(fixturePath, "utf-8"));

function mockedClient(): ApiClient {
  return new ApiClient("http://mock", async (url) => {
    if (url.endsWith("/v1/edit")) {
      return new Response(JSON.stringify(fix.response), {
        status: 200,
        headers: { "Content-Type": "application/json" },
      });
    }
    throw new Error(`unexpected url ${url}`);
  });
}

describe("golden response snapshot", () => {
  it("renders the mocked golden response pixel-identically", async () => {
    const s = new Session(mockedClient());
    s.setScene(fix.request.scene_png);
    s.setInstruction(fix.request.instruction);
    s.addStroke({ points: [[32, 32]], brush_radius: 3, erase: false });
    await s.submit(fix.request.steps, fix.request.seed);
    expect(s.state.lastError).toBeNull();
    const resp = s.state.lastResponse!;
    expect(resp.edited_png).toBe(fix.response.edited_png);

    const img = decodePng(
      Uint8Array.from(Buffer.from(resp.edited_png, "base64")),
    );
    expect(img.width).toBe(64);
    expect(img.height).toBe(64);
    const rgba = renderUpscaled(img, fix.scale);
    const digest = createHash("sha256").update(rgba).digest("hex");
    expect(digest).toBe(fix.rendered_sha256);
  });

  it("decodes the predicted full mask from the golden response", () => {
    const mask = rleDecode(fix.response.predicted_full_mask);
    expect(mask.width).toBe(64);
    expect(mask.height).toBe(64);
  });
});
