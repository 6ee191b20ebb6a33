/**
 * Job monitor state machine.  One active job per session is enforced here:
 * while a job is queued or editing, further dispatches are refused
 * client-side (matching the server's one-running-edit rule).
 *
 * `tick()` performs one poll; the app drives it on a 1 s interval.
 */

import type { JobState } from "./api.js";

export type MonitorPhase = "idle" | "polling" | "done" | "failed";

export interface MonitorHooks {
  fetchState: (jobId: string) => Promise<JobState>;
  onUpdate?: (state: JobState) => void;
  onTerminal?: (state: JobState) => void;
}

export class JobMonitor {
  phase: MonitorPhase = "idle";
  jobId: string | null = null;
  lastState: JobState | null = null;

  constructor(private hooks: MonitorHooks) {}

  get busy(): boolean {
    return this.phase === "polling";
  }

  /** Returns false (and does nothing) while a job is already in flight. */
  start(jobId: string): boolean {
    if (this.busy) return false;
    this.jobId = jobId;
    this.phase = "polling";
    this.lastState = null;
    return true;
  }

  async tick(): Promise<void> {
    if (this.phase !== "polling" || this.jobId === null) return;
    let state: JobState;
    try {
      state = await this.hooks.fetchState(this.jobId);
    } catch (err) {
      this.phase = "failed";
      this.lastState = {
        job_id: this.jobId,
        state: "failed",
        progress: 0,
        error: err instanceof Error ? err.message : String(err),
        loss_curves: [],
        w_remove: [],
      };
      this.hooks.onTerminal?.(this.lastState);
      return;
    }
    this.lastState = state;
    this.hooks.onUpdate?.(state);
    if (state.state === "done" || state.state === "failed") {
      this.phase = state.state === "done" ? "done" : "failed";
      this.hooks.onTerminal?.(state);
    }
  }

  reset(): void {
    this.phase = "idle";
    this.jobId = null;
    this.lastState = null;
  }
}

/** Group per-term loss records into plottable series, steps ascending. */
export function lossSeries(records: { step: number; term: string; value: number }[]):
    Map<string, { step: number; value: number }[]> {
  const out = new Map<string, { step: number; value: number }[]>();
  for (const r of records) {
    if (!out.has(r.term)) out.set(r.term, []);
    out.get(r.term)!.push({ step: r.step, value: r.value });
  }
  for (const series of out.values()) {
    series.sort((a, b) => a.step - b.step);
  }
  return out;
}
