/**
 * Typed client over the editing service's HTTP/JSON endpoints.  Every
 * server interaction of the app goes through here.
 */

import type { TransformJson } from "./transform.js";

export interface LossRecord {
  step: number;
  term: string;
  value: number;
  w_remove: number;
  lr: number | null;
}

export interface JobState {
  job_id: string;
  state: "queued" | "editing" | "done" | "failed";
  progress: number;
  error: string | null;
  loss_curves: LossRecord[];
  w_remove: { step: number; w_remove: number }[];
}

export interface JobResult {
  edited: string; // base64 PNG
  baseline: string;
  warp_error: number | null;
  warp_error_input: number | null;
  diagnostics: { attention: { step: number; block: string }[] };
}

export interface PreviewResult {
  warp_overlay: string;
  m_obj_t: string;
  m_disocc: string;
}

export class ApiError extends Error {
  constructor(public status: number, message: string) {
    super(message);
  }
}

export class Api {
  constructor(private base: string = "") {}

  private async call<T>(path: string, init?: RequestInit): Promise<T> {
    const resp = await fetch(this.base + path, {
      headers: { "Content-Type": "application/json" },
      ...init,
    });
    if (!resp.ok) {
      let detail = resp.statusText;
      try {
        const body = await resp.json();
        detail = typeof body.detail === "string" ? body.detail : JSON.stringify(body);
      } catch {
        /* non-JSON error body */
      }
      throw new ApiError(resp.status, detail);
    }
    return (await resp.json()) as T;
  }

  createSession(imageB64: string, maskB64: string, depthB64: string | null,
                steps: number): Promise<{ session_id: string }> {
    return this.call("/sessions", {
      method: "POST",
      body: JSON.stringify({
        image: imageB64,
        mask: maskB64,
        depth: depthB64,
        steps,
      }),
    });
  }

  sessionState(id: string): Promise<{ state: string; error: string | null }> {
    return this.call(`/sessions/${id}`);
  }

  preview(id: string, transform: TransformJson): Promise<PreviewResult> {
    return this.call(`/sessions/${id}/preview`, {
      method: "POST",
      body: JSON.stringify({ transform }),
    });
  }

  submitEdit(id: string, config: Record<string, unknown>): Promise<{ job_id: string }> {
    return this.call(`/sessions/${id}/edits`, {
      method: "POST",
      body: JSON.stringify({ config }),
    });
  }

  jobState(jobId: string): Promise<JobState> {
    return this.call(`/jobs/${jobId}`);
  }

  jobResult(jobId: string): Promise<JobResult> {
    return this.call(`/jobs/${jobId}/result`);
  }

  attentionUrl(jobId: string, step: number, block: string): string {
    return `${this.base}/jobs/${jobId}/attention/${step}/${block}`;
  }
}
