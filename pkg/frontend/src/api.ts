/** Typed client for the annotation session HTTP API. */

import type { RleMask } from "./rle.js";

export type Polarity = "positive" | "negative";

export interface ClickBody {
  row: number;
  col: number;
  polarity: Polarity;
}

export interface SessionSummary {
  session_id: string;
  h: number;
  w: number;
  granularity: number;
  clicks: ClickBody[];
  created_at: number;
  updated_at: number;
}

export interface MaskResponse {
  mask: RleMask & { format: "rle" };
}

export class ApiError extends Error {
  constructor(
    public status: number,
    public code: string,
    message: string,
  ) {
    super(message);
  }
}

async function parse<T>(resp: Response): Promise<T> {
  const body = await resp.json().catch(() => ({}));
  if (!resp.ok) {
    const err = (body as { error?: { code?: string; message?: string } }).error ?? {};
    throw new ApiError(resp.status, err.code ?? "unknown_error", err.message ?? resp.statusText);
  }
  return body as T;
}

export class ApiClient {
  constructor(private baseUrl: string) {}

  private url(path: string): string {
    return `${this.baseUrl}${path}`;
  }

  async createSession(imageBase64: string): Promise<{ session_id: string; h: number; w: number }> {
    const resp = await fetch(this.url("/sessions"), {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ image: imageBase64 }),
    });
    return parse(resp);
  }

  async addClick(sessionId: string, click: ClickBody): Promise<MaskResponse> {
    const resp = await fetch(this.url(`/sessions/${sessionId}/clicks?format=rle`), {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(click),
    });
    return parse(resp);
  }

  async setGranularity(sessionId: string, value: number): Promise<MaskResponse> {
    const resp = await fetch(this.url(`/sessions/${sessionId}/granularity?format=rle`), {
      method: "PUT",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ value }),
    });
    return parse(resp);
  }

  async undo(sessionId: string): Promise<MaskResponse> {
    const resp = await fetch(this.url(`/sessions/${sessionId}/undo?format=rle`), {
      method: "POST",
    });
    return parse(resp);
  }

  async reset(sessionId: string): Promise<void> {
    await parse(await fetch(this.url(`/sessions/${sessionId}/reset`), { method: "POST" }));
  }

  async getSession(sessionId: string): Promise<SessionSummary> {
    return parse(await fetch(this.url(`/sessions/${sessionId}`)));
  }

  async deleteSession(sessionId: string): Promise<void> {
    await parse(await fetch(this.url(`/sessions/${sessionId}`), { method: "DELETE" }));
  }
}
