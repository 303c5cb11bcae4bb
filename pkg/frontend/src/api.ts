/** Typed client for the editing service's two endpoints. */

import { MaskRLE } from "./rle.js";

export interface EditRequest {
  scene_png: string;
  mask_rle: MaskRLE;
  instruction: string;
  subject_png?: string;
  steps?: number;
  seed?: number;
}

export interface EditResponse {
  edited_png: string;
  response_text: string;
  predicted_full_mask: MaskRLE;
  model_hash: string;
  timings_ms: { decode: number; edit: number };
}

export interface HealthResponse {
  status: "ok" | "no_model";
  model_hash: string | null;
  resolution: number;
}

export class ApiError extends Error {
  constructor(public status: number, message: string) {
    super(message);
  }
}

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export class ApiClient {
  constructor(
    private baseUrl: string,
    private fetchImpl: FetchLike = (...a) => fetch(...a),
  ) {}

  async health(): Promise<HealthResponse> {
    const res = await this.fetchImpl(`${this.baseUrl}/v1/health`);
    if (!res.ok) throw new ApiError(res.status, await res.text());
    return res.json();
  }

  async edit(req: EditRequest): Promise<EditResponse> {
    const res = await this.fetchImpl(`${this.baseUrl}/v1/edit`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(req),
    });
    if (!res.ok) {
      let message = `HTTP ${res.status}`;
      try {
        const body = await res.json();
        if (body && typeof body.error === "string") message = body.error;
      } catch {
        /* non-JSON error body; keep the status message */
      }
      throw new ApiError(res.status, message);
    }
    return res.json();
  }
}
