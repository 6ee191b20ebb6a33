/** Tiny canvas line charts for loss curves and schedule traces. */

export interface Series {
  label: string;
  points: { step: number; value: number }[];
  color: string;
}

export const TERM_COLORS: Record<string, string> = {
  bg: "#4c9be8",
  obj: "#e8a33d",
  smooth: "#9b59b6",
  remove: "#e74c3c",
  total: "#2ecc71",
};

export function drawChart(canvas: HTMLCanvasElement, series: Series[],
                          yLabel = ""): void {
  const ctx = canvas.getContext("2d");
  if (!ctx) return;
  const { width: w, height: h } = canvas;
  ctx.clearRect(0, 0, w, h);
  ctx.fillStyle = "#111418";
  ctx.fillRect(0, 0, w, h);
  const pts = series.flatMap((s) => s.points);
  if (!pts.length) {
    ctx.fillStyle = "#888";
    ctx.fillText("no data yet", 10, h / 2);
    return;
  }
  const xs = pts.map((p) => p.step);
  const ys = pts.map((p) => p.value);
  const x0 = Math.min(...xs), x1 = Math.max(...xs, x0 + 1);
  let y0 = Math.min(...ys), y1 = Math.max(...ys);
  if (y0 === y1) { y0 -= 1; y1 += 1; }
  const pad = 28;
  const px = (x: number) => pad + ((x - x0) / (x1 - x0)) * (w - pad - 8);
  const py = (y: number) => h - 18 - ((y - y0) / (y1 - y0)) * (h - 26 - 8);

  ctx.strokeStyle = "#333";
  ctx.strokeRect(pad, 8, w - pad - 8, h - 26);
  ctx.fillStyle = "#aaa";
  ctx.font = "10px sans-serif";
  ctx.fillText(y1.toPrecision(3), 2, 14);
  ctx.fillText(y0.toPrecision(3), 2, h - 18);
  if (yLabel) ctx.fillText(yLabel, pad + 4, 14);

  for (const s of series) {
    ctx.strokeStyle = s.color;
    ctx.lineWidth = 1.5;
    ctx.beginPath();
    s.points.forEach((p, i) => {
      const x = px(p.step), y = py(p.value);
      if (i === 0) ctx.moveTo(x, y);
      else ctx.lineTo(x, y);
    });
    ctx.stroke();
  }
  let lx = pad + 6;
  for (const s of series) {
    ctx.fillStyle = s.color;
    ctx.fillText(s.label, lx, h - 6);
    lx += ctx.measureText(s.label).width + 12;
  }
}
