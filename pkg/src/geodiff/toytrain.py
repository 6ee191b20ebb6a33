"""Procedural scenes and a small training loop to produce usable checkpoints.

Scenes are single bright squares on dark backgrounds, drawn aligned to the
latent grid so the identity encoder round-trips them exactly.  A few
thousand denoising steps on these is enough for the editing mechanism to
have meaningful attention to share; nothing here is required by the engine
itself, which works (and keeps all its invariants) with any weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
import torch

from .diffnet import DenoiseUNet, ModelConfig, save_model, load_model
from .pipeline import encode_image


@dataclass(frozen=True)
class Scene:
    image: np.ndarray   # (H, W, 3) in [0, 1]
    mask: np.ndarray    # (H, W) binary object mask
    cell: int           # latent cell size in image pixels
    origin: Tuple[int, int]  # square top-left, latent cells
    side: int           # square side, latent cells


def make_scene(rng: np.random.Generator, size: int = 64, latent_size: int = 16,
               margin_cells: int = 0, side_range=(3, 6)) -> Scene:
    """One dark background with one bright axis-aligned square.

    ``margin_cells`` keeps the square away from the border, leaving room to
    translate it without clipping; ``side_range`` bounds the square side in
    latent cells (inclusive).
    """
    cell = size // latent_size
    bg = rng.uniform(0.05, 0.25, size=3)
    fg = rng.uniform(0.70, 1.00, size=3)
    side = int(rng.integers(side_range[0], side_range[1] + 1))
    lo = margin_cells
    hi = latent_size - side - margin_cells
    if hi < lo:
        raise ValueError("square does not fit with the requested margin")
    ox = int(rng.integers(lo, hi + 1))
    oy = int(rng.integers(lo, hi + 1))
    img = np.ones((size, size, 3)) * bg[None, None, :]
    y0, x0 = oy * cell, ox * cell
    img[y0 : y0 + side * cell, x0 : x0 + side * cell, :] = fg[None, None, :]
    mask = np.zeros((size, size))
    mask[y0 : y0 + side * cell, x0 : x0 + side * cell] = 1.0
    return Scene(image=img, mask=mask, cell=cell, origin=(ox, oy), side=side)


def _scene_latents(rng: np.random.Generator, n: int, cfg: ModelConfig,
                   dtype: torch.dtype) -> torch.Tensor:
    zs = []
    for _ in range(n):
        scene = make_scene(rng, size=cfg.latent_size * 4, latent_size=cfg.latent_size)
        zs.append(encode_image(scene.image, cfg.latent_size, cfg.latent_channels))
    return torch.stack(zs).to(dtype)


def train_toy_model(cfg: Optional[ModelConfig] = None, seed: int = 0,
                    n_steps: int = 2000, batch_size: int = 32,
                    lr: float = 2e-3, log_every: int = 0) -> DenoiseUNet:
    """Train a denoiser from scratch on procedural squares (float32, CPU).

    Adam with a cosine-decayed learning rate; the decay matters for the
    inversion quality of the final weights, not just the MSE.
    """
    cfg = cfg or ModelConfig()
    model = DenoiseUNet(cfg, seed=seed, dtype=torch.float32)
    model.train()
    schedule = cfg.schedule()
    sqrt_ab = torch.tensor(np.sqrt(schedule.alpha_bar), dtype=torch.float32)
    sqrt_1mab = torch.tensor(np.sqrt(1.0 - schedule.alpha_bar), dtype=torch.float32)
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    for step in range(n_steps):
        for group in opt.param_groups:
            group["lr"] = 1e-4 + 0.5 * (lr - 1e-4) * (1 + math.cos(math.pi * step / n_steps))
        x0 = _scene_latents(rng, batch_size, cfg, torch.float32)
        t = torch.randint(1, cfg.t_steps + 1, (batch_size,), generator=gen)
        eps = torch.randn(x0.shape, generator=gen, dtype=torch.float32)
        zt = sqrt_ab[t][:, None, None, None] * x0 + sqrt_1mab[t][:, None, None, None] * eps
        pred = model.forward_batch(zt, t, model.null_text)
        loss = torch.mean((pred - eps) ** 2)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if log_every and (step + 1) % log_every == 0:
            print(f"train step {step + 1}/{n_steps}: mse {float(loss.detach()):.4f}")
    model.eval()
    return model


def make_checkpoint(path, cfg: Optional[ModelConfig] = None, seed: int = 0,
                    train_steps: int = 2000, batch_size: int = 32,
                    lr: float = 2e-3, log_every: int = 0) -> None:
    """Create a checkpoint file; ``train_steps=0`` saves seeded random weights."""
    cfg = cfg or ModelConfig()
    if train_steps > 0:
        model = train_toy_model(cfg, seed=seed, n_steps=train_steps,
                                batch_size=batch_size, lr=lr, log_every=log_every)
    else:
        model = DenoiseUNet(cfg, seed=seed, dtype=torch.float32)
        model.eval()
    save_model(path, model, extra_meta={
        "train": {"steps": train_steps, "seed": seed, "batch_size": batch_size, "lr": lr},
    })


def cached_checkpoint(cache_dir, cfg: Optional[ModelConfig] = None, seed: int = 0,
                      train_steps: int = 2000, **kwargs):
    """Train once, reuse afterwards. Returns (model, schedule)."""
    cfg = cfg or ModelConfig()
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    arch = ("pw" if cfg.pointwise_conv else "k3") + ("pos" if cfg.positional_attention else "")
    key = (f"toy_s{cfg.latent_size}c{cfg.latent_channels}b{cfg.base_channels}"
           f"_{arch}_seed{seed}_n{train_steps}")
    path = cache_dir / f"{key}.gdck"
    if not path.exists():
        make_checkpoint(path, cfg, seed=seed, train_steps=train_steps, **kwargs)
    return load_model(path)
