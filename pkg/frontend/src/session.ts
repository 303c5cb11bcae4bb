/**
 * Single-page session state. Strokes are the source of truth for the mask:
 * the raster is always re-derived by replaying the stroke list, which makes
 * undo trivial (drop the last stroke) and keeps the state replayable.
 * At most one edit request is in flight; responses that arrive after a newer
 * submit are discarded by request id.
 */

import { ApiClient, EditRequest, EditResponse, ApiError } from "./api.js";
import { MaskRaster, popcount, rleEncode } from "./rle.js";
import { StrokePath, rasterizeStrokes } from "./strokes.js";

export interface SessionState {
  scenePng: string | null;
  subjectPng: string | null;
  strokes: StrokePath[];
  instruction: string;
  lastResponse: EditResponse | null;
  lastError: { status: number; message: string } | null;
  inFlight: boolean;
}

export function initialState(): SessionState {
  return {
    scenePng: null,
    subjectPng: null,
    strokes: [],
    instruction: "",
    lastResponse: null,
    lastError: null,
    inFlight: false,
  };
}

export class Session {
  state: SessionState = initialState();
  private requestCounter = 0;

  constructor(
    private client: ApiClient,
    public width = 64,
    public height = 64,
    public onChange: (s: SessionState) => void = () => {},
  ) {}

  private emit(): void {
    this.onChange(this.state);
  }

  setScene(png: string): void {
    this.state.scenePng = png;
    this.emit();
  }

  setSubject(png: string | null): void {
    this.state.subjectPng = png;
    this.emit();
  }

  setInstruction(text: string): void {
    this.state.instruction = text;
    this.emit();
  }

  addStroke(stroke: StrokePath): void {
    this.state.strokes = [...this.state.strokes, stroke];
    this.emit();
  }

  /** Undo after k strokes equals a replay of the first k-1 strokes. */
  undo(): void {
    this.state.strokes = this.state.strokes.slice(0, -1);
    this.emit();
  }

  clearStrokes(): void {
    this.state.strokes = [];
    this.emit();
  }

  mask(): MaskRaster {
    return rasterizeStrokes(this.state.strokes, this.width, this.height);
  }

  canSubmit(): boolean {
    return (
      this.state.scenePng !== null &&
      this.state.instruction.trim().length > 0 &&
      popcount(this.mask()) > 0 &&
      !this.state.inFlight
    );
  }

  async submit(steps = 10, seed = 0): Promise<void> {
    if (this.state.scenePng === null) throw new Error("no scene loaded");
    const requestId = ++this.requestCounter;
    const req: EditRequest = {
      scene_png: this.state.scenePng,
      mask_rle: rleEncode(this.mask()),
      instruction: this.state.instruction,
      steps,
      seed,
    };
    if (this.state.subjectPng !== null) req.subject_png = this.state.subjectPng;
    this.state.inFlight = true;
    this.state.lastError = null;
    this.emit();
    try {
      const resp = await this.client.edit(req);
      if (requestId !== this.requestCounter) return; // superseded
      this.state.lastResponse = resp;
    } catch (err) {
      if (requestId !== this.requestCounter) return; // superseded
      if (err instanceof ApiError) {
        this.state.lastError = { status: err.status, message: err.message };
      } else {
        this.state.lastError = { status: 0, message: String(err) };
      }
    } finally {
      if (requestId === this.requestCounter) {
        this.state.inFlight = false;
        this.emit();
      }
    }
  }
}
