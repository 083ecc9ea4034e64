/**
 * Client-side session controller, framework-free so it can run headless.
 *
 * Maintains the marker list mirroring the server's click list, the
 * decoded mask overlay, and a busy flag that serializes requests: only
 * one request is ever in flight, and at most one action is queued
 * behind it. Queued slider moves collapse (latest wins).
 */

import { ApiClient, type Polarity, type ClickBody } from "./api.js";
import { rleDecode } from "./rle.js";

export interface Marker {
  row: number;
  col: number;
  polarity: Polarity;
}

/** Snap a continuous slider value onto the server's granularity bins. */
export function snapToBins(value: number, bins = 11): number {
  const clamped = Math.min(Math.max(value, 0), 1);
  const idx = Math.round(clamped * (bins - 1));
  return idx / (bins - 1);
}

interface QueuedAction {
  kind: "click" | "granularity" | "undo" | "reset";
  run: () => Promise<void>;
}

export class AnnotationSession {
  sessionId: string | null = null;
  h = 0;
  w = 0;
  markers: Marker[] = [];
  sliderValue = 1.0;
  granularity = 1.0; // last snapped value acknowledged by the server
  mask: Uint8Array | null = null;
  busy = false;
  onUpdate: (() => void) | null = null;
  onError: ((code: string, message: string) => void) | null = null;

  private queued: QueuedAction | null = null;

  constructor(private api: ApiClient) {}

  get bins(): number {
    return 11;
  }

  get canUndo(): boolean {
    return this.markers.length > 0 && this.sessionId !== null;
  }

  async start(imageBase64: string): Promise<void> {
    const created = await this.api.createSession(imageBase64);
    this.sessionId = created.session_id;
    this.h = created.h;
    this.w = created.w;
    this.markers = [];
    this.mask = null;
    this.granularity = 1.0;
    this.sliderValue = 1.0;
    this.notify();
  }

  /** Place a click; coordinates outside the canvas are ignored client-side. */
  click(row: number, col: number, polarity: Polarity): Promise<void> {
    if (!this.sessionId) return Promise.resolve();
    if (row < 0 || row >= this.h || col < 0 || col >= this.w) return Promise.resolve();
    const body: ClickBody = { row: Math.floor(row), col: Math.floor(col), polarity };
    return this.enqueue({
      kind: "click",
      run: async () => {
        const resp = await this.api.addClick(this.sessionId!, body);
        this.markers = [...this.markers, body];
        this.mask = rleDecode(resp.mask);
      },
    });
  }

  /** Send a snapped granularity; rapid moves collapse to the latest value. */
  setGranularity(value: number): Promise<void> {
    if (!this.sessionId) return Promise.resolve();
    this.sliderValue = value;
    const snapped = snapToBins(value, this.bins);
    return this.enqueue({
      kind: "granularity",
      run: async () => {
        const resp = await this.api.setGranularity(this.sessionId!, snapped);
        this.granularity = snapped;
        this.mask = rleDecode(resp.mask);
      },
    });
  }

  undo(): Promise<void> {
    if (!this.sessionId || !this.canUndo) return Promise.resolve();
    return this.enqueue({
      kind: "undo",
      run: async () => {
        const resp = await this.api.undo(this.sessionId!);
        this.markers = this.markers.slice(0, -1);
        this.mask = rleDecode(resp.mask);
      },
    });
  }

  reset(): Promise<void> {
    if (!this.sessionId) return Promise.resolve();
    return this.enqueue({
      kind: "reset",
      run: async () => {
        await this.api.reset(this.sessionId!);
        this.markers = [];
        this.mask = null;
      },
    });
  }

  /** Verify the mirror invariant against the server (used by tests). */
  async verifyMirror(): Promise<boolean> {
    if (!this.sessionId) return true;
    const summary = await this.api.getSession(this.sessionId);
    if (summary.clicks.length !== this.markers.length) return false;
    return summary.clicks.every(
      (c, i) =>
        c.row === this.markers[i].row &&
        c.col === this.markers[i].col &&
        c.polarity === this.markers[i].polarity,
    );
  }

  private notify(): void {
    this.onUpdate?.();
  }

  /** Resolves once no request is in flight and nothing is queued. */
  idle(): Promise<void> {
    if (!this.busy && this.queued === null) return Promise.resolve();
    return new Promise((resolve) => {
      const poll = () => {
        if (!this.busy && this.queued === null) resolve();
        else setTimeout(poll, 5);
      };
      poll();
    });
  }

  private enqueue(action: QueuedAction): Promise<void> {
    if (this.busy) {
      // depth-1 queue, latest wins; rapid slider moves collapse here
      this.queued = action;
      return Promise.resolve();
    }
    return this.runNow(action);
  }

  private async runNow(action: QueuedAction): Promise<void> {
    this.busy = true;
    try {
      await action.run();
    } catch (err) {
      const code = (err as { code?: string }).code ?? "network_error";
      this.onError?.(code, (err as Error).message ?? "request failed");
    } finally {
      this.busy = false;
      this.notify();
      const next = this.queued;
      this.queued = null;
      if (next) {
        void this.runNow(next);
      }
    }
  }
}
