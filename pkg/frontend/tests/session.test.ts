import { describe, expect, it } from "vitest";
import { ApiClient, FetchLike } from "../src/api.js";
import { Session } from "../src/session.js";

function jsonResponse(status: number, body: unknown): Response {
  return new Response(JSON.stringify(body), {
    status,
    headers: { "Content-Type": "application/json" },
  });
}

const okBody = {
  edited_png: "AAAA",
  response_text: "done",
  predicted_full_mask: { w: 64, h: 64, runs: [64 * 64] },
  model_hash: "abc",
  timings_ms: { decode: 1, edit: 2 },
};

function makeSession(fetchImpl: FetchLike): Session {
  const s = new Session(new ApiClient("http://test", fetchImpl));
  s.setScene("c2NlbmU=");
  s.setInstruction("replace the circle");
  s.addStroke({ points: [[10, 10], [20, 20]], brush_radius: 2, erase: false });
  return s;
}

describe("session", () => {
  it("disables submit until scene, instruction and mask are present", () => {
    const s = new Session(new ApiClient("http://test", async () => jsonResponse(200, okBody)));
    expect(s.canSubmit()).toBe(false);
    s.setScene("c2NlbmU=");
    expect(s.canSubmit()).toBe(false);
    s.setInstruction("add a square");
    expect(s.canSubmit()).toBe(false);
    s.addStroke({ points: [[5, 5]], brush_radius: 1, erase: false });
    expect(s.canSubmit()).toBe(true);
    s.undo();
    expect(s.canSubmit()).toBe(false);
  });

  it("stores the response on success", async () => {
    const s = makeSession(async () => jsonResponse(200, okBody));
    await s.submit();
    expect(s.state.lastResponse?.response_text).toBe("done");
    expect(s.state.lastError).toBeNull();
    expect(s.state.inFlight).toBe(false);
  });

  it("surfaces a 422 as a non-fatal inline error", async () => {
    const s = makeSession(async () => jsonResponse(422, { error: "mask is empty" }));
    await s.submit();
    expect(s.state.lastResponse).toBeNull();
    expect(s.state.lastError).toEqual({ status: 422, message: "mask is empty" });
    expect(s.state.inFlight).toBe(false);
  });

  it("surfaces network failures with status 0", async () => {
    const s = makeSession(async () => {
      throw new TypeError("fetch failed");
    });
    await s.submit();
    expect(s.state.lastError?.status).toBe(0);
  });

  it("discards stale responses superseded by a newer submit", async () => {
    let call = 0;
    const resolvers: ((r: Response) => void)[] = [];
    const s = makeSession(() => {
      call++;
      return new Promise<Response>((resolve) => resolvers.push(resolve));
    });
    const first = s.submit();
    const second = s.submit();
    // resolve in reverse order: the late first response must be ignored
    resolvers[1](jsonResponse(200, { ...okBody, response_text: "second" }));
    await second;
    resolvers[0](jsonResponse(200, { ...okBody, response_text: "first" }));
    await first;
    expect(call).toBe(2);
    expect(s.state.lastResponse?.response_text).toBe("second");
    expect(s.state.inFlight).toBe(false);
  });

  it("sends the rasterized mask, not strokes, on the wire", async () => {
    let sent: any = null;
    const s = makeSession(async (_url, init) => {
      sent = JSON.parse(String(init?.body));
      return jsonResponse(200, okBody);
    });
    await s.submit(7, 3);
    expect(sent.mask_rle.w).toBe(64);
    expect(sent.mask_rle.h).toBe(64);
    expect(sent.strokes).toBeUndefined();
    expect(sent.steps).toBe(7);
    expect(sent.seed).toBe(3);
  });
});
