"""End-to-end edit orchestration.

``run_edit`` drives the whole pipeline: encode the image, invert it (or
reuse a cached trajectory), run the reference and edit denoising processes
in lock step with shared attention, optimize the edit latents and null
embedding on the configured steps, decode, and score.  Also home to the
naive splat-and-fill baseline and the warp-error metric.
"""

from __future__ import annotations

from dataclasses import dataclass, field as _dcfield, asdict
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import torch
from scipy import ndimage

from . import geometry
from .diffnet import DTYPE, CaptureBank, DenoiseUNet, NoiseSchedule, attention_map, eps_theta
from .geometry import CameraIntrinsics, EditField, EditTransform, MaskSet
from .guidance import SharedAttentionConfig, SharedAttentionController, build_pyramid
from .losses import (
    LossBreakdown,
    LossWeights,
    OptimState,
    lr_schedule,
    optimize_step,
)
from .sampler import Trajectory, ddim_step, invert, reference_step


class PipelineError(ValueError):
    pass


# --- Latent codec --------------------------------------------------------
# Desk-scale "latent space": area-average down to the latent grid, nearest
# back up.  Block-aligned images round-trip exactly.


def encode_image(image: np.ndarray, latent_size: int, latent_channels: int) -> torch.Tensor:
    from .raster import area_downsample

    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    h, w, c = img.shape
    if c > latent_channels:
        raise PipelineError(f"image has {c} channels but latent holds {latent_channels}")
    small = area_downsample(img, latent_size, latent_size)
    z = np.zeros((latent_channels, latent_size, latent_size), dtype=np.float64)
    for ch in range(c):
        z[ch] = 2.0 * small[:, :, ch] - 1.0
    return torch.as_tensor(z, dtype=DTYPE)


def decode_latent(z: torch.Tensor, out_h: int, out_w: int, channels: int) -> np.ndarray:
    from .raster import nearest_upsample

    arr = z.detach().cpu().numpy()
    img = np.stack([(arr[ch] + 1.0) / 2.0 for ch in range(channels)], axis=2)
    return np.clip(nearest_upsample(img, out_h, out_w), 0.0, 1.0)


# --- Config and job records ----------------------------------------------


@dataclass
class EditConfig:
    transform: EditTransform
    steps: int = 50
    share_until_step: int = 45
    optimize_first_n: int = 32
    optimize_stride: int = 2
    grad_iters: int = 8
    initial_lr: float = 1.5
    weights: LossWeights = _dcfield(default_factory=LossWeights)
    cfg_scale: float = 1.0
    seed: int = 0
    sharing_enabled: bool = True
    optimization_enabled: bool = True
    trajectory_correction: bool = True
    remove_corr: str = "rows"         # "rows" | "bmm"
    remove_cosine: bool = False
    diagnostics: bool = False

    def __post_init__(self):
        if self.share_until_step > self.steps:
            raise PipelineError("share_until_step must be <= steps")
        if self.optimize_first_n > self.steps:
            raise PipelineError("optimize_first_n must be <= steps")
        if self.steps < 1:
            raise PipelineError("steps must be >= 1")
        if self.remove_corr not in ("rows", "bmm"):
            raise PipelineError(f"unknown remove_corr {self.remove_corr!r}")

    def optimized_steps(self) -> List[int]:
        """0-based rollout indices that get a gradient update."""
        if not self.optimization_enabled:
            return []
        return list(range(0, self.optimize_first_n, self.optimize_stride))

    def to_json(self) -> dict:
        d = asdict(self)
        d["transform"] = self.transform.to_json()
        d["weights"] = self.weights.to_json()
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "EditConfig":
        obj = dict(obj)
        transform = EditTransform.from_json(obj.pop("transform"))
        weights = LossWeights.from_json(obj.pop("weights", {}))
        known = {k: v for k, v in obj.items() if k in cls.__dataclass_fields__}
        return cls(transform=transform, weights=weights, **known)


@dataclass
class EditResult:
    edited: np.ndarray
    reconstruction: np.ndarray
    baseline: np.ndarray
    warp_error_edited: float
    warp_error_input: float
    loss_records: List[dict]
    step_records: List[dict]
    field: EditField
    masks: MaskSet
    trajectory: Trajectory
    final_latent: torch.Tensor
    attention_summaries: Dict[Tuple[int, str], np.ndarray]
    guidance_diagnostics: List[dict]


# --- Core pipeline --------------------------------------------------------


def resolve_depth(transform: EditTransform, h: int, w: int,
                  depth: Optional[np.ndarray]) -> Optional[np.ndarray]:
    if not transform.is_3d:
        return None
    if transform.depth_source == "file":
        if depth is None:
            raise PipelineError("transform expects a depth file but none was given")
        return np.asarray(depth, dtype=np.float64)
    const = transform.constant_depth()
    return np.full((h, w), const, dtype=np.float64)


def run_edit(image: np.ndarray, m_obj: np.ndarray, config: EditConfig,
             model: DenoiseUNet, schedule: NoiseSchedule,
             depth: Optional[np.ndarray] = None,
             intrinsics: Optional[CameraIntrinsics] = None,
             trajectory: Optional[Trajectory] = None,
             progress: Optional[Callable[[int, int, dict], None]] = None) -> EditResult:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    h, w, c = img.shape
    mask = np.asarray(m_obj, dtype=np.float64)
    if mask.ndim == 3:
        mask = mask[:, :, 0]
    if mask.shape != (h, w):
        raise PipelineError("mask shape must match image")
    if config.transform.kind != "identity" and not (mask >= 0.5).any():
        raise PipelineError("edit requires a nonempty object mask")

    torch.manual_seed(config.seed)
    depth_map = resolve_depth(config.transform, h, w, depth)
    field = geometry.build_field(config.transform, h, w, depth_map, intrinsics)
    masks = geometry.mask_algebra(mask, field)

    z0 = encode_image(img, model.cfg.latent_size, model.cfg.latent_channels)
    if trajectory is None:
        trajectory = invert(model, schedule, z0, model.null_text.detach(),
                            n_steps=config.steps)
    if trajectory.n_steps != config.steps:
        raise PipelineError(
            f"trajectory has {trajectory.n_steps} steps, config wants {config.steps}")

    pyramid = build_pyramid(field, mask, model.attention_resolutions().values())
    bank = CaptureBank()
    controller = SharedAttentionController(
        bank, pyramid,
        SharedAttentionConfig(
            share_until_step=config.share_until_step if config.sharing_enabled else 0,
            edit_kind=config.transform.kind,
        ),
    )

    remove_active = (config.transform.kind == "remove") or masks.m_disocc.sum() > 0
    opt_steps = set(config.optimized_steps())
    n_events = max(1, len(opt_steps))

    state = OptimState(
        z=trajectory.latents[config.steps].detach().clone(),
        null_text=model.null_text.detach().clone(),
        w_remove=config.weights.w_remove,
    )
    step_records: List[dict] = []
    attn_summaries: Dict[Tuple[int, str], np.ndarray] = {}
    guidance_diag: List[dict] = []

    n = config.steps
    for i, s in enumerate(range(n, 0, -1)):
        t, t_prev = trajectory.timesteps[s], trajectory.timesteps[s - 1]
        hook = bank.capture_hook()
        z_ref_prev, z_ref_integrated = reference_step(model, trajectory, s, hook)

        controller.begin_step(i, t)
        lr = None
        breakdown: Optional[LossBreakdown] = None
        if i in opt_steps:
            lr = lr_schedule(state.opt_event, n_events, config.initial_lr)
            breakdown = optimize_step(
                model, state, t, controller, config.weights, lr,
                remove_active, config.transform.kind,
                grad_iters=config.grad_iters,
                corr=config.remove_corr, cosine=config.remove_cosine,
            )
            state.opt_event += 1

        controller.begin_step(i, t)
        with torch.no_grad():
            eps = eps_theta(model, state.z, t, state.null_text, controller.hook)
            z_step = ddim_step(state.z, t, t_prev, eps, schedule)
            if config.trajectory_correction:
                # anchored step: inversion error cancels, and an untouched
                # edit branch replays the stored trajectory exactly
                z_prev = z_ref_prev + (z_step - z_ref_integrated)
            else:
                z_prev = z_step
        state.z = z_prev.detach()

        if config.diagnostics and controller.records:
            guidance_diag.append({"step": i, "blocks": controller.diagnostics()})
            for r in controller.records:
                am = attention_map(r.q_e.detach(), r.k_r if r.kind == "self" else r.k_e.detach())
                grid = am.mean(dim=0 if r.kind == "self" else 1)
                side = r.resolution
                if grid.numel() == side[0] * side[1]:
                    attn_summaries[(i, r.block)] = (
                        grid.reshape(side).cpu().numpy().astype(np.float32))

        rec = {
            "step": i,
            "timestep": t,
            "shared": controller.sharing_active,
            "optimized": i in opt_steps,
            "lr": lr,
            "w_remove": state.w_remove,
        }
        if breakdown is not None:
            rec["terms"] = {
                "bg": breakdown.bg, "obj": breakdown.obj,
                "smooth": breakdown.smooth, "remove": breakdown.remove,
                "total": breakdown.total,
            }
        step_records.append(rec)
        if progress is not None:
            progress(i + 1, n, rec)

    edited = decode_latent(state.z, h, w, c)
    reconstruction = decode_latent(trajectory.latents[0], h, w, c)
    base = naive_warp_baseline(img, mask, field)
    return EditResult(
        edited=edited,
        reconstruction=reconstruction,
        baseline=base,
        warp_error_edited=warp_error(img, edited, mask, field),
        warp_error_input=warp_error(img, img, mask, field),
        loss_records=flatten_loss_records(step_records),
        step_records=step_records,
        field=field,
        masks=masks,
        trajectory=trajectory,
        final_latent=state.z,
        attention_summaries=attn_summaries,
        guidance_diagnostics=guidance_diag,
    )


def flatten_loss_records(step_records: List[dict]) -> List[dict]:
    """Per-term records {step, term, value, w_remove, lr} for streaming."""
    out = []
    for rec in step_records:
        terms = rec.get("terms")
        if not terms:
            continue
        for term, value in terms.items():
            out.append({
                "step": rec["step"],
                "term": term,
                "value": value,
                "w_remove": rec["w_remove"],
                "lr": rec["lr"],
            })
    return out


# --- Baseline and metric ---------------------------------------------------


def naive_warp_baseline(image: np.ndarray, m_obj: np.ndarray,
                        field: EditField) -> np.ndarray:
    """Splat the foreground along the field; fill the vacated pixels with the
    nearest background color.  No generative model involved."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    mask = np.asarray(m_obj, dtype=np.float64)
    if mask.ndim == 3:
        mask = mask[:, :, 0]
    warped, covered = geometry.splat_with_coverage(img, field, source_mask=mask)
    out = img.copy()
    out[covered] = warped[covered]
    holes = (mask >= 0.5) & ~covered
    if holes.any():
        bg = mask < 0.5
        if not bg.any():
            return out
        _, (iy, ix) = ndimage.distance_transform_edt(~bg, return_indices=True)
        out[holes] = img[iy[holes], ix[holes]]
    return out


def warp_error(image: np.ndarray, edited: np.ndarray, m_obj: np.ndarray,
               field: EditField) -> float:
    """Mean absolute difference between the forward-warped foreground and the
    edited image over the pixels the warped foreground actually covers.
    Returns NaN when the transformed foreground is empty."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    ed = np.asarray(edited, dtype=np.float64)
    if ed.ndim == 2:
        ed = ed[:, :, None]
    if ed.shape != img.shape:
        raise PipelineError("image and edited image must have the same shape")
    mask = np.asarray(m_obj, dtype=np.float64)
    if mask.ndim == 3:
        mask = mask[:, :, 0]
    warped, covered = geometry.splat_with_coverage(img, field, source_mask=mask)
    if not covered.any():
        return float("nan")
    return float(np.abs(warped[covered] - ed[covered]).mean())
