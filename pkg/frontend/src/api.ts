import type { Decision, ItemView, Stats, VerdictResponse } from "./types.js";

/** Minimal fetch signature so tests can inject an in-memory service. */
export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export class ServiceError extends Error {
  readonly status: number;

  constructor(message: string, status: number) {
    super(message);
    this.name = "ServiceError";
    this.status = status;
  }
}

/** Typed client for the review service; every URL it touches comes from here. */
export class ReviewApi {
  private readonly fetchFn: FetchLike;
  private readonly base: string;

  constructor(fetchFn: FetchLike, baseUrl = "") {
    this.fetchFn = fetchFn;
    this.base = baseUrl.replace(/\/$/, "");
  }

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    const res = await this.fetchFn(this.base + path, init);
    if (!res.ok) {
      let detail = `HTTP ${res.status}`;
      try {
        const body = (await res.json()) as { error?: string };
        if (body && typeof body.error === "string") detail = body.error;
      } catch {
        // non-JSON error body, keep the status line
      }
      throw new ServiceError(detail, res.status);
    }
    return (await res.json()) as T;
  }

  nextItem(annotator: string): Promise<{ item: ItemView | null }> {
    const who = encodeURIComponent(annotator);
    return this.request(`/items/next?annotator=${who}`);
  }

  stats(): Promise<Stats> {
    return this.request("/stats");
  }

  postVerdict(
    sampleId: string,
    decision: Decision,
    annotator: string,
    idempotencyKey: string,
  ): Promise<VerdictResponse> {
    const id = encodeURIComponent(sampleId);
    return this.request(`/items/${id}/verdict`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({
        decision,
        annotator,
        idempotency_key: idempotencyKey,
      }),
    });
  }

  /** Fetch one asset and return a displayable URL for it. */
  async fetchAsset(url: string): Promise<string> {
    const res = await this.fetchFn(this.base + url);
    if (!res.ok) throw new ServiceError(`asset unavailable: ${url}`, res.status);
    const blob = await res.blob();
    if (typeof URL !== "undefined" && typeof URL.createObjectURL === "function") {
      try {
        return URL.createObjectURL(blob);
      } catch {
        // some DOM shims expose the symbol but not the behavior
      }
    }
    return this.base + url;
  }
}
