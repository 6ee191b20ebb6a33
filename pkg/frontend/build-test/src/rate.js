/**
 * Trailing-edge rate limiter for preview calls: at most `maxPerSecond`
 * invocations, always ending with the latest arguments.  The clock is
 * injectable so tests can drive it manually.
 */
export const realClock = {
    now: () => Date.now(),
    setTimeout: (fn, ms) => setTimeout(fn, ms),
    clearTimeout: (h) => clearTimeout(h),
};
export class RateLimiter {
    constructor(fn, maxPerSecond, clock = realClock) {
        this.fn = fn;
        this.clock = clock;
        this.lastFire = -Infinity;
        this.pending = null;
        this.handle = null;
        this.calls = 0;
        this.minGapMs = 1000 / maxPerSecond;
    }
    request(...args) {
        const now = this.clock.now();
        const due = this.lastFire + this.minGapMs;
        if (now >= due) {
            this.fire(args, now);
            return;
        }
        this.pending = args;
        if (this.handle === null) {
            this.handle = this.clock.setTimeout(() => {
                this.handle = null;
                if (this.pending) {
                    const p = this.pending;
                    this.pending = null;
                    this.fire(p, this.clock.now());
                }
            }, due - now);
        }
    }
    fire(args, at) {
        this.lastFire = at;
        this.calls++;
        this.fn(...args);
    }
    dispose() {
        if (this.handle !== null)
            this.clock.clearTimeout(this.handle);
        this.handle = null;
        this.pending = null;
    }
}
