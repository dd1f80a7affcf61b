import { ServiceError } from "./api.js";
import type { Decision, VerdictResponse } from "./types.js";

export interface QueuedVerdict {
  sampleId: string;
  decision: Decision;
  /** Fixed at enqueue time so retries of the same action dedupe server-side. */
  idempotencyKey: string;
}

type PostFn = (v: QueuedVerdict) => Promise<VerdictResponse>;

interface Pending {
  verdict: QueuedVerdict;
  resolve: (res: VerdictResponse) => void;
  reject: (err: unknown) => void;
}

function delay(ms: number): Promise<void> {
  return new Promise((resolve) => setTimeout(resolve, ms));
}

/**
 * FIFO queue of verdict posts with at most one request in flight.
 *
 * A post that fails to reach the service stays at the head and is retried
 * after a pause, so verdicts always land in the order they were made.  The
 * idempotency key travels with the queued entry, which makes a retry of a
 * request whose response was lost a no-op on the server.  Rejections the
 * service itself produced (4xx) are not retried; they surface to the caller.
 */
export class VerdictQueue {
  private readonly post: PostFn;
  private readonly retryDelayMs: number;
  private readonly onChange: () => void;
  private readonly waiting: Pending[] = [];
  private pumping = false;

  /** True while the most recent attempt could not reach the service. */
  offline = false;

  constructor(post: PostFn, retryDelayMs = 1500, onChange: () => void = () => {}) {
    this.post = post;
    this.retryDelayMs = retryDelayMs;
    this.onChange = onChange;
  }

  get pending(): number {
    return this.waiting.length;
  }

  submit(verdict: QueuedVerdict): Promise<VerdictResponse> {
    return new Promise((resolve, reject) => {
      this.waiting.push({ verdict, resolve, reject });
      void this.pump();
    });
  }

  private async pump(): Promise<void> {
    if (this.pumping) return;
    this.pumping = true;
    try {
      while (this.waiting.length > 0) {
        const head = this.waiting[0];
        try {
          const res = await this.post(head.verdict);
          if (this.offline) {
            this.offline = false;
            this.onChange();
          }
          this.waiting.shift();
          head.resolve(res);
        } catch (err) {
          if (err instanceof ServiceError && err.status < 500) {
            this.waiting.shift();
            head.reject(err);
            continue;
          }
          if (!this.offline) {
            this.offline = true;
            this.onChange();
          }
          await delay(this.retryDelayMs);
        }
      }
    } finally {
      this.pumping = false;
    }
  }
}
