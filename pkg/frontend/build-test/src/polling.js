/**
 * Job monitor state machine.  One active job per session is enforced here:
 * while a job is queued or editing, further dispatches are refused
 * client-side (matching the server's one-running-edit rule).
 *
 * `tick()` performs one poll; the app drives it on a 1 s interval.
 */
export class JobMonitor {
    constructor(hooks) {
        this.hooks = hooks;
        this.phase = "idle";
        this.jobId = null;
        this.lastState = null;
    }
    get busy() {
        return this.phase === "polling";
    }
    /** Returns false (and does nothing) while a job is already in flight. */
    start(jobId) {
        if (this.busy)
            return false;
        this.jobId = jobId;
        this.phase = "polling";
        this.lastState = null;
        return true;
    }
    async tick() {
        if (this.phase !== "polling" || this.jobId === null)
            return;
        let state;
        try {
            state = await this.hooks.fetchState(this.jobId);
        }
        catch (err) {
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
    reset() {
        this.phase = "idle";
        this.jobId = null;
        this.lastState = null;
    }
}
/** Group per-term loss records into plottable series, steps ascending. */
export function lossSeries(records) {
    const out = new Map();
    for (const r of records) {
        if (!out.has(r.term))
            out.set(r.term, []);
        out.get(r.term).push({ step: r.step, value: r.value });
    }
    for (const series of out.values()) {
        series.sort((a, b) => a.step - b.step);
    }
    return out;
}
