/** Typed client for the inference service's documented HTTP/JSON API. */

import type { Rle } from "./rle.js";

export interface QuerySpec {
  category: string;
  phrases?: string[];
}

export interface SegmentOptions {
  use_background_rule?: boolean;
  fg_categories?: string[];
  background_category?: string;
  phrase_mode?: "word" | "mean";
  mask_threshold?: number;
}

export interface SegmentRequest {
  image: string; // base64 PNG
  queries: QuerySpec[];
  options?: SegmentOptions;
}

export interface LabelMapEntry {
  category: string;
  mask: Rle;
}

export interface PerQueryMask {
  phrase: string;
  category: string;
  mask: Rle;
  score: number;
}

export interface SegmentResponse {
  model_id: string;
  mask_size: [number, number];
  padding: [number, number];
  label_map: LabelMapEntry[];
  per_query: PerQueryMask[];
  timing_ms: number;
}

export interface ProposalInfo {
  index: number;
  mask: Rle;
  best_phrase: string | null;
  best_category: string | null;
  score: number | null;
}

export interface ProposalsResponse {
  model_id: string;
  mask_size: [number, number];
  padding: [number, number];
  proposals: ProposalInfo[];
  timing_ms: number;
}

export interface HealthResponse {
  status: string;
  model_id: string;
}

export class ApiError extends Error {
  constructor(public status: number, detail: string) {
    super(`HTTP ${status}: ${detail}`);
  }
}

async function raiseForStatus(resp: Response): Promise<void> {
  if (resp.ok) return;
  let detail = resp.statusText;
  try {
    const body = (await resp.json()) as { detail?: unknown };
    if (body.detail !== undefined) detail = JSON.stringify(body.detail);
  } catch {
    /* non-JSON error body; keep the status text */
  }
  throw new ApiError(resp.status, detail);
}

export class ApiClient {
  constructor(public baseUrl: string = "",
              private fetchFn: typeof fetch = fetch) {}

  async health(): Promise<HealthResponse> {
    const resp = await this.fetchFn(`${this.baseUrl}/v1/health`);
    await raiseForStatus(resp);
    return (await resp.json()) as HealthResponse;
  }

  async segment(request: SegmentRequest,
                signal?: AbortSignal): Promise<SegmentResponse> {
    const resp = await this.fetchFn(`${this.baseUrl}/v1/segment`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(request),
      signal,
    });
    await raiseForStatus(resp);
    return (await resp.json()) as SegmentResponse;
  }

  async proposals(imageB64: string, queries: string[],
                  signal?: AbortSignal): Promise<ProposalsResponse> {
    const params = new URLSearchParams({ image: imageB64 });
    if (queries.length > 0) params.set("queries", queries.join(","));
    const resp = await this.fetchFn(`${this.baseUrl}/v1/proposals?${params}`,
                                    { signal });
    await raiseForStatus(resp);
    return (await resp.json()) as ProposalsResponse;
  }
}
