"""Edit reports: delimited loss curves plus rendered figures.

Every completed edit can be written out as a directory containing the
edited image, the naive-warp baseline, the reconstruction, a CSV of
per-step loss records, and matplotlib figures (loss curves, the schedule
traces, warp previews, attention heatmaps).
"""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path
from typing import Dict, List, Optional

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .raster import save_image

LOSS_CSV_FIELDS = ["step", "term", "value", "w_remove", "lr"]


def write_loss_csv(loss_records: List[dict], path) -> None:
    """Per-term records as delimited output: step,term,value,w_remove,lr."""
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=LOSS_CSV_FIELDS)
        writer.writeheader()
        for rec in loss_records:
            writer.writerow({k: rec.get(k) for k in LOSS_CSV_FIELDS})


def plot_loss_curves(step_records: List[dict], path) -> None:
    """Loss terms, removal weight, and learning rate over the rollout."""
    opt = [r for r in step_records if r.get("terms")]
    fig, axes = plt.subplots(3, 1, figsize=(7, 8), sharex=True)
    if opt:
        steps = [r["step"] for r in opt]
        for term in ("bg", "obj", "smooth", "remove", "total"):
            axes[0].plot(steps, [r["terms"][term] for r in opt], label=term)
        axes[0].legend(fontsize=8)
    axes[0].set_ylabel("loss")
    all_steps = [r["step"] for r in step_records]
    axes[1].plot(all_steps, [r["w_remove"] for r in step_records], color="tab:red")
    axes[1].set_ylabel("removal weight")
    lr_steps = [r["step"] for r in opt]
    axes[2].plot(lr_steps, [r["lr"] for r in opt], marker="o", ms=3, color="tab:green")
    axes[2].set_ylabel("learning rate")
    axes[2].set_xlabel("rollout step")
    for ax in axes:
        ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def plot_edit_summary(input_image: np.ndarray, baseline: np.ndarray,
                      edited: np.ndarray, reconstruction: np.ndarray, path) -> None:
    panels = [("input", input_image), ("reconstruction", reconstruction),
              ("naive warp", baseline), ("edited", edited)]
    fig, axes = plt.subplots(1, 4, figsize=(12, 3.2))
    for ax, (title, img) in zip(axes, panels):
        arr = np.clip(np.asarray(img), 0, 1)
        ax.imshow(arr if arr.ndim == 3 and arr.shape[2] == 3 else arr[:, :, 0],
                  cmap=None if arr.ndim == 3 and arr.shape[2] == 3 else "gray",
                  interpolation="nearest")
        ax.set_title(title, fontsize=10)
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def attention_heatmap_png(grid: np.ndarray, title: str = "") -> bytes:
    """Render one attention summary grid to PNG bytes."""
    fig, ax = plt.subplots(figsize=(3.2, 3.2))
    im = ax.imshow(np.asarray(grid, dtype=np.float64), cmap="magma",
                   interpolation="nearest")
    fig.colorbar(im, ax=ax, fraction=0.046)
    if title:
        ax.set_title(title, fontsize=9)
    ax.axis("off")
    buf = io.BytesIO()
    fig.tight_layout()
    fig.savefig(buf, format="png", dpi=110)
    plt.close(fig)
    return buf.getvalue()


def mask_overlay(image: np.ndarray, mask: np.ndarray,
                 color=(1.0, 0.55, 0.0), alpha: float = 0.5) -> np.ndarray:
    """Blend a colored mask over an image for previews."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.shape[2] == 1:
        img = np.repeat(img, 3, axis=2)
    m = np.asarray(mask, dtype=np.float64)
    if m.ndim == 3:
        m = m[:, :, 0]
    out = img.copy()
    tint = np.array(color)[None, None, :]
    w = (alpha * m)[:, :, None]
    return np.clip(out * (1 - w) + tint * w, 0.0, 1.0)


def write_edit_report(result, input_image: np.ndarray, out_dir,
                      config_json: Optional[dict] = None) -> Dict[str, str]:
    """Write the full report directory for one edit; returns written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}

    def _p(name):
        paths[name] = str(out / name)
        return out / name

    save_image(_p("edited.png"), result.edited)
    save_image(_p("baseline.png"), result.baseline)
    save_image(_p("reconstruction.png"), result.reconstruction)
    save_image(_p("m_obj_t.png"), result.masks.m_obj_t[:, :, None])
    save_image(_p("m_disocc.png"), result.masks.m_disocc[:, :, None])
    save_image(_p("warp_overlay.png"),
               mask_overlay(input_image, result.masks.m_disocc))
    write_loss_csv(result.loss_records, _p("loss_curves.csv"))
    plot_loss_curves(result.step_records, _p("loss_curves.png"))
    plot_edit_summary(input_image, result.baseline, result.edited,
                      result.reconstruction, _p("summary.png"))
    metrics = {
        "warp_error_edited": result.warp_error_edited,
        "warp_error_input": result.warp_error_input,
        "steps": len(result.step_records),
    }
    if config_json is not None:
        metrics["config"] = config_json
    with open(_p("metrics.json"), "w") as f:
        json.dump(metrics, f, indent=2, default=_json_default)
    return paths


def _json_default(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, float) and (x != x):
        return None
    raise TypeError(f"not JSON serializable: {type(x)}")
