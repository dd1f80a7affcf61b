import { ReviewApi, ServiceError } from "./api.js";
import type { FetchLike } from "./api.js";
import { VerdictQueue } from "./queue.js";
import type { Decision, ItemView } from "./types.js";

export interface AppOptions {
  annotator?: string;
  baseUrl?: string;
  fetchFn?: FetchLike;
  retryDelayMs?: number;
  /** Session nonce folded into idempotency keys; random by default. */
  nonce?: string;
}

function randomNonce(): string {
  return Math.random().toString(36).slice(2, 10) + Date.now().toString(36);
}

/**
 * Keyboard-driven review client.
 *
 * One item on screen at a time: the main pane shows the selected render (or
 * the overlay), thumbnails show the remaining viewpoints.  A accepts,
 * R rejects, O toggles the overlay, arrow keys cycle viewpoints.  A verdict
 * goes through the retry queue and the app only advances once the service
 * confirmed it, so the next-item endpoint never re-serves a decided item.
 * All asset URLs and all counts come from service responses.
 */
export class ReviewApp {
  private readonly api: ReviewApi;
  private readonly annotator: string;
  private readonly nonce: string;
  private readonly retryDelayMs: number;
  private readonly queue: VerdictQueue;
  private readonly root: HTMLElement;
  private readonly doc: Document;

  private item: ItemView | null = null;
  private finished = false;
  private viewIndex = 0;
  private overlayOn = false;
  private busy = false;
  private bannerText = "";
  private statsLine = "";
  /** service URL -> displayable URL, filled before an item is shown. */
  private readonly assetCache = new Map<string, string>();
  private work: Promise<void> = Promise.resolve();

  constructor(root: HTMLElement, opts: AppOptions = {}) {
    this.root = root;
    this.doc = root.ownerDocument;
    this.annotator = opts.annotator ?? "reviewer";
    this.nonce = opts.nonce ?? randomNonce();
    this.retryDelayMs = opts.retryDelayMs ?? 1500;
    const fetchFn: FetchLike = opts.fetchFn ?? ((url, init) => fetch(url, init));
    this.api = new ReviewApi(fetchFn, opts.baseUrl ?? "");
    this.queue = new VerdictQueue(
      (v) => this.api.postVerdict(v.sampleId, v.decision, this.annotator, v.idempotencyKey),
      this.retryDelayMs,
      () => {
        this.bannerText = this.queue.offline
          ? "service unreachable; verdict queued, retrying"
          : "";
        this.paint();
      },
    );
    this.buildSkeleton();
  }

  /** Wire up keyboard input and load the first item; resolves when idle. */
  start(): Promise<void> {
    this.doc.addEventListener("keydown", (ev) => this.onKey(ev as KeyboardEvent));
    this.schedule(async () => {
      await this.refreshStats();
      await this.advance();
    });
    return this.idle();
  }

  /** Resolves once every scheduled action so far has settled. */
  idle(): Promise<void> {
    return this.work;
  }

  get currentItem(): ItemView | null {
    return this.item;
  }

  private schedule(task: () => Promise<void>): void {
    this.work = this.work.then(task).catch((err: unknown) => {
      this.bannerText = err instanceof Error ? err.message : String(err);
      this.paint();
    });
  }

  private onKey(ev: KeyboardEvent): void {
    if (ev.altKey || ev.ctrlKey || ev.metaKey) return;
    switch (ev.key.toLowerCase()) {
      case "a":
        this.review("accept");
        break;
      case "r":
        this.review("reject");
        break;
      case "o":
        this.toggleOverlay();
        break;
      case "arrowright":
      case "arrowdown":
        this.cycleView(1);
        break;
      case "arrowleft":
      case "arrowup":
        this.cycleView(-1);
        break;
      default:
        return;
    }
    ev.preventDefault();
  }

  review(decision: Decision): void {
    if (!this.item || this.busy) return;
    const target = this.item;
    this.busy = true;
    this.paint();
    this.schedule(async () => {
      try {
        await this.queue.submit({
          sampleId: target.sample_id,
          decision,
          idempotencyKey: `${target.sample_id}:${this.nonce}`,
        });
        this.bannerText = "";
      } catch (err) {
        if (err instanceof ServiceError) {
          this.bannerText = `verdict refused: ${err.message}`;
          return;
        }
        throw err;
      } finally {
        this.busy = false;
        this.paint();
      }
      await this.refreshStats();
      await this.advance();
    });
  }

  toggleOverlay(): void {
    if (!this.item) return;
    this.overlayOn = !this.overlayOn;
    this.paint();
  }

  cycleView(step: number): void {
    if (!this.item) return;
    const n = this.item.render_urls.length;
    if (n === 0) return;
    this.viewIndex = (this.viewIndex + step + n) % n;
    this.overlayOn = false;
    this.paint();
  }

  private async advance(): Promise<void> {
    let next: ItemView | null;
    try {
      next = (await this.api.nextItem(this.annotator)).item;
    } catch {
      this.bannerText = "service unreachable; retrying";
      this.paint();
      setTimeout(() => this.schedule(() => this.advance()), this.retryDelayMs);
      return;
    }
    this.bannerText = "";
    this.item = next;
    this.finished = next === null;
    this.viewIndex = 0;
    this.overlayOn = false;
    if (next) await this.loadAssets(next);
    this.paint();
  }

  private async loadAssets(item: ItemView): Promise<void> {
    const urls = [...item.render_urls, item.overlay_url];
    if (item.image_url) urls.push(item.image_url);
    for (const url of urls) {
      if (!this.assetCache.has(url)) {
        this.assetCache.set(url, await this.api.fetchAsset(url));
      }
    }
  }

  private async refreshStats(): Promise<void> {
    try {
      const s = await this.api.stats();
      this.statsLine =
        `accepted ${s.accepted} · rejected ${s.rejected} · ` +
        `unreviewed ${s.unreviewed} · total ${s.total}`;
    } catch {
      // keep the last line the service gave us
    }
  }

  private buildSkeleton(): void {
    this.root.innerHTML = `
      <div class="review-app">
        <div class="banner" data-role="banner" hidden></div>
        <p class="guidance" data-role="guidance"></p>
        <div class="stage">
          <figure class="photo" data-role="photo-pane" hidden>
            <img data-role="photo" alt="source image" />
            <figcaption>image</figcaption>
          </figure>
          <figure class="main">
            <img data-role="main-view" alt="fitted body render" />
            <figcaption data-role="caption"></figcaption>
          </figure>
          <div class="thumbs" data-role="thumbs"></div>
        </div>
        <p class="empty" data-role="empty" hidden>All items reviewed.</p>
        <p class="keys">A accept · R reject · O overlay · ←/→ cycle views</p>
        <footer class="stats" data-role="stats"></footer>
      </div>`;
  }

  private el(role: string): HTMLElement {
    const node = this.root.querySelector(`[data-role="${role}"]`);
    if (!(node instanceof HTMLElement)) throw new Error(`missing pane: ${role}`);
    return node;
  }

  private paint(): void {
    const banner = this.el("banner");
    banner.hidden = this.bannerText === "";
    banner.textContent = this.bannerText;

    const guidance = this.el("guidance");
    guidance.textContent = this.item ? this.item.guidance : "";

    const photoPane = this.el("photo-pane");
    const photo = this.el("photo") as HTMLImageElement;
    if (this.item && this.item.image_url) {
      photoPane.hidden = false;
      photo.src = this.assetCache.get(this.item.image_url) ?? "";
    } else {
      photoPane.hidden = true;
      photo.removeAttribute("src");
    }

    const main = this.el("main-view") as HTMLImageElement;
    const caption = this.el("caption");
    const thumbs = this.el("thumbs");
    if (this.item) {
      const url = this.overlayOn
        ? this.item.overlay_url
        : this.item.render_urls[this.viewIndex];
      main.src = this.assetCache.get(url) ?? "";
      main.dataset.assetUrl = url;
      const total = this.item.energies["total"];
      const badge = total === undefined ? "" : ` · E=${total.toFixed(2)}`;
      caption.textContent =
        `${this.item.sample_id} · ${this.item.status}` +
        badge +
        (this.overlayOn ? " · overlay" : ` · view ${this.viewIndex + 1}`);
      thumbs.innerHTML = "";
      this.item.render_urls.forEach((u, i) => {
        const img = this.doc.createElement("img");
        img.src = this.assetCache.get(u) ?? "";
        img.dataset.assetUrl = u;
        img.className = i === this.viewIndex && !this.overlayOn ? "active" : "";
        img.addEventListener("click", () => {
          this.viewIndex = i;
          this.overlayOn = false;
          this.paint();
        });
        thumbs.appendChild(img);
      });
    } else {
      main.removeAttribute("src");
      delete main.dataset.assetUrl;
      caption.textContent = "";
      thumbs.innerHTML = "";
    }

    this.el("empty").hidden = !this.finished;
    this.el("stats").textContent = this.statsLine;
    this.root.classList.toggle("busy", this.busy);
  }
}
