/**
 * Mask editing on a flat byte buffer, independent of the DOM.
 *
 * The canvas layer stamps circular brush strokes into this model and
 * renders from it; undo snapshots are whole-buffer copies (masks are small).
 */

export class MaskModel {
  readonly width: number;
  readonly height: number;
  data: Uint8Array;
  private undoStack: Uint8Array[] = [];
  private strokeOpen = false;

  constructor(width: number, height: number, initial?: Uint8Array) {
    this.width = width;
    this.height = height;
    this.data = initial ? Uint8Array.from(initial) : new Uint8Array(width * height);
  }

  get(x: number, y: number): number {
    return this.data[y * this.width + x];
  }

  isEmpty(): boolean {
    return !this.data.some((v) => v > 0);
  }

  paintedPixels(): number {
    let n = 0;
    for (const v of this.data) if (v > 0) n++;
    return n;
  }

  /** Start a stroke: snapshot the buffer once so undo restores it whole. */
  beginStroke(): void {
    if (!this.strokeOpen) {
      this.undoStack.push(Uint8Array.from(this.data));
      if (this.undoStack.length > 50) this.undoStack.shift();
      this.strokeOpen = true;
    }
  }

  endStroke(): void {
    this.strokeOpen = false;
  }

  /** Stamp one brush disc; value 1 paints, 0 erases. */
  stamp(cx: number, cy: number, radius: number, value: 0 | 1): void {
    const r2 = radius * radius;
    const x0 = Math.max(0, Math.floor(cx - radius));
    const x1 = Math.min(this.width - 1, Math.ceil(cx + radius));
    const y0 = Math.max(0, Math.floor(cy - radius));
    const y1 = Math.min(this.height - 1, Math.ceil(cy + radius));
    for (let y = y0; y <= y1; y++) {
      for (let x = x0; x <= x1; x++) {
        const ddx = x - cx;
        const ddy = y - cy;
        if (ddx * ddx + ddy * ddy <= r2) {
          this.data[y * this.width + x] = value;
        }
      }
    }
  }

  /** Stamp along the segment from (x0,y0) to (x1,y1) so fast strokes stay solid. */
  stroke(x0: number, y0: number, x1: number, y1: number, radius: number, value: 0 | 1): void {
    const dist = Math.hypot(x1 - x0, y1 - y0);
    const steps = Math.max(1, Math.ceil(dist / Math.max(1, radius / 2)));
    for (let i = 0; i <= steps; i++) {
      const t = i / steps;
      this.stamp(x0 + t * (x1 - x0), y0 + t * (y1 - y0), radius, value);
    }
  }

  fillAll(value: 0 | 1): void {
    this.beginStroke();
    this.data.fill(value);
    this.endStroke();
  }

  undo(): boolean {
    const prev = this.undoStack.pop();
    if (!prev) return false;
    this.data = prev;
    this.strokeOpen = false;
    return true;
  }

  /** Load from an alpha/luminance byte plane: any nonzero becomes mask. */
  loadFromLuminance(bytes: Uint8Array | Uint8ClampedArray): void {
    if (bytes.length !== this.data.length) {
      throw new Error(`mask size mismatch: ${bytes.length} != ${this.data.length}`);
    }
    this.beginStroke();
    for (let i = 0; i < bytes.length; i++) this.data[i] = bytes[i] > 0 ? 1 : 0;
    this.endStroke();
  }
}
