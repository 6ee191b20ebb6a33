/**
 * Trailing-edge rate limiter for preview calls: at most `maxPerSecond`
 * invocations, always ending with the latest arguments.  The clock is
 * injectable so tests can drive it manually.
 */

export type Clock = {
  now(): number;
  setTimeout(fn: () => void, ms: number): unknown;
  clearTimeout(handle: unknown): void;
};

export const realClock: Clock = {
  now: () => Date.now(),
  setTimeout: (fn, ms) => setTimeout(fn, ms),
  clearTimeout: (h) => clearTimeout(h as number),
};

export class RateLimiter<A extends unknown[]> {
  private lastFire = -Infinity;
  private pending: A | null = null;
  private handle: unknown = null;
  private readonly minGapMs: number;
  calls = 0;

  constructor(
    private fn: (...args: A) => void,
    maxPerSecond: number,
    private clock: Clock = realClock,
  ) {
    this.minGapMs = 1000 / maxPerSecond;
  }

  request(...args: A): void {
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

  private fire(args: A, at: number): void {
    this.lastFire = at;
    this.calls++;
    this.fn(...args);
  }

  dispose(): void {
    if (this.handle !== null) this.clock.clearTimeout(this.handle);
    this.handle = null;
    this.pending = null;
  }
}
