/** Wire types mirroring the review service JSON payloads. */

export interface ItemView {
  sample_id: string;
  status: string;
  /** Source photograph, when the dataset ships one. */
  image_url: string | null;
  /** Turntable renders of the fitted body, one per viewpoint. */
  render_urls: string[];
  /** Fit rendered over the source image (or over the silhouette). */
  overlay_url: string;
  energies: Record<string, number>;
  /** Reviewer instructions served with every item. */
  guidance: string;
  lease_expires?: number;
}

export interface Stats {
  accepted: number;
  rejected: number;
  unreviewed: number;
  total: number;
}

export type Decision = "accept" | "reject";

export interface VerdictResponse {
  sample_id: string;
  status: string;
  appended: boolean;
  log_entries: number;
}
