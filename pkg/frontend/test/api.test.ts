import { describe, expect, it, vi } from "vitest";

import { ApiClient, ApiError } from "../src/api.js";

function jsonResponse(body: unknown, status = 200): Response {
  return new Response(JSON.stringify(body), {
    status,
    headers: { "Content-Type": "application/json" },
  });
}

describe("api client", () => {
  it("posts the documented segment body shape", async () => {
    const fetchFn = vi.fn(async (url: RequestInfo | URL, init?: RequestInit) => {
      expect(String(url)).toBe("http://svc/v1/segment");
      const body = JSON.parse(String(init?.body));
      expect(body).toEqual({
        image: "QUJD",
        queries: [{ category: "red circle" }],
        options: { phrase_mode: "mean" },
      });
      return jsonResponse({ model_id: "m", mask_size: [2, 2], padding: [0, 0],
                            label_map: [], per_query: [], timing_ms: 1 });
    });
    const client = new ApiClient("http://svc", fetchFn as typeof fetch);
    const resp = await client.segment({
      image: "QUJD",
      queries: [{ category: "red circle" }],
      options: { phrase_mode: "mean" },
    });
    expect(resp.model_id).toBe("m");
    expect(fetchFn).toHaveBeenCalledOnce();
  });

  it("encodes proposals queries into the URL", async () => {
    const fetchFn = vi.fn(async (url: RequestInfo | URL) => {
      const u = new URL(String(url));
      expect(u.pathname).toBe("/v1/proposals");
      expect(u.searchParams.get("queries")).toBe("red circle,background");
      return jsonResponse({ model_id: "m", mask_size: [2, 2], padding: [0, 0],
                            proposals: [], timing_ms: 1 });
    });
    const client = new ApiClient("http://svc", fetchFn as typeof fetch);
    await client.proposals("QUJD", ["red circle", "background"]);
    expect(fetchFn).toHaveBeenCalledOnce();
  });

  it("surfaces HTTP errors with the service detail", async () => {
    const fetchFn = vi.fn(async () =>
      jsonResponse({ detail: "body.image: invalid base64" }, 400));
    const client = new ApiClient("http://svc", fetchFn as typeof fetch);
    await expect(client.health()).rejects.toThrowError(ApiError);
    await expect(client.health()).rejects.toThrow(/invalid base64/);
  });
});
