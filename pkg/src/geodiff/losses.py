"""Edit losses over shared-attention records and the latent optimization step.

Four terms steer the edit branch:

- background: masked L1 between edit guidance and the plain reference output
  over the non-editable region;
- object: masked L1 between edit and reference guidance over the transformed
  object region (skipped for removal edits);
- removal: pushes disoccluded tokens to correlate with nearby background
  rather than with the object, via the product of edit and reference
  attention maps;
- smoothness: mean absolute forward difference of the edit guidance over the
  token grid.

The removal weight adapts itself: it doubles while the removal loss sits
above the upper threshold and halves when it drops below the lower one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as _dcfield, asdict
from typing import List, Optional, Tuple

import torch

from .diffnet import DenoiseUNet, attention_map, eps_theta, gradient
from .guidance import GuidanceRecord, SharedAttentionController

UPPER_THRESH = -1.8
LOWER_THRESH = -6.0


class LossError(ValueError):
    pass


class OptimizationError(RuntimeError):
    """Non-finite loss or gradient; carries the offending step."""

    def __init__(self, msg: str, step_index: int):
        super().__init__(f"{msg} (step {step_index})")
        self.step_index = step_index


@dataclass
class LossWeights:
    """Term weights.  The defaults are calibrated to this engine's scale:
    the masked-mean L1 terms are orders of magnitude smaller than at
    production scale, so bg/obj carry weight 15 for the fixed learning-rate
    schedule to bite, and the adaptive removal weight is capped low enough
    that inpainting pressure cannot overpower placement."""

    w_bg: float = 15.0
    w_obj: float = 15.0
    w_smooth: float = 0.1
    w_remove: float = 1.0
    upper_thresh: float = UPPER_THRESH
    lower_thresh: float = LOWER_THRESH
    adapt_factor: float = 2.0
    w_remove_min: float = 0.1
    w_remove_max: float = 4.0

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "LossWeights":
        return cls(**{k: v for k, v in obj.items() if k in cls.__dataclass_fields__})


def _masked_l1_mean(y_a: torch.Tensor, y_b: torch.Tensor, mask_flat: torch.Tensor) -> torch.Tensor:
    """Mean over all tokens and channels of mask * |y_a - y_b|."""
    if y_a.shape != y_b.shape:
        raise LossError(f"operand shapes differ: {tuple(y_a.shape)} vs {tuple(y_b.shape)}")
    if mask_flat.numel() != y_a.shape[0]:
        raise LossError("mask length must equal token count")
    m = mask_flat.reshape(-1, 1).to(y_a.dtype)
    return (m * (y_a - y_b).abs()).mean()


def loss_bg(y_edit_g: torch.Tensor, y_ref: torch.Tensor, m_ne: torch.Tensor) -> torch.Tensor:
    return _masked_l1_mean(y_edit_g, y_ref, m_ne)


def loss_obj(y_edit_g: torch.Tensor, y_ref_g: torch.Tensor, m_obj_t: torch.Tensor) -> torch.Tensor:
    return _masked_l1_mean(y_edit_g, y_ref_g, m_obj_t)


def loss_smooth(y_edit_g: torch.Tensor, resolution: Tuple[int, int]) -> torch.Tensor:
    """Mean absolute forward difference over both token-grid axes."""
    h, w = resolution
    if y_edit_g.shape[0] != h * w:
        raise LossError("token count does not match grid")
    g = y_edit_g.reshape(h, w, -1)
    dx = (g[:, 1:, :] - g[:, :-1, :]).abs()
    dy = (g[1:, :, :] - g[:-1, :, :]).abs()
    n = dx.numel() + dy.numel()
    if n == 0:
        return torch.zeros((), dtype=y_edit_g.dtype)
    return (dx.sum() + dy.sum()) / n


def _token_coords(h: int, w: int) -> torch.Tensor:
    ys, xs = torch.meshgrid(torch.arange(h, dtype=torch.float64),
                            torch.arange(w, dtype=torch.float64), indexing="ij")
    return torch.stack([xs.reshape(-1), ys.reshape(-1)], dim=1)


def removal_from_maps(a_edit: torch.Tensor, a_ref: torch.Tensor,
                      m_obj: torch.Tensor, m_bg: torch.Tensor,
                      resolution: Tuple[int, int],
                      rows: Optional[torch.Tensor] = None,
                      corr: str = "rows") -> torch.Tensor:
    """Removal loss from already-computed attention maps.

    Per foreground row of the correlation of the two maps, take the
    strongest background column (and where it sits) and the strongest
    object column; reward nearby background correlation, penalize object
    correlation.
    """
    if corr == "rows":
        c = a_edit @ a_ref.T
    elif corr == "bmm":
        if a_edit.shape[1] != a_ref.shape[0]:
            raise LossError("bmm correlation needs square self-attention maps")
        c = a_edit @ a_ref
    else:
        raise LossError(f"unknown correlation mode {corr!r}")

    m_obj = m_obj.reshape(-1).to(c.dtype)
    m_bg = m_bg.reshape(-1).to(c.dtype)
    if m_bg.sum() == 0:
        raise LossError("removal loss needs a nonempty background mask")
    fg_rows = (m_obj if rows is None else rows.reshape(-1)).to(c.dtype)
    fg_idx = torch.nonzero(fg_rows >= 0.5).reshape(-1)
    if fg_idx.numel() == 0:
        return torch.zeros((), dtype=c.dtype)

    c_fg = c[fg_idx]
    rho_ob, u_bg = (c_fg * m_bg[None, :]).max(dim=1)
    rho_oo, _ = (c_fg * m_obj[None, :]).max(dim=1)
    rho_ob = rho_ob.clamp_min(1e-12)
    rho_oo = rho_oo.clamp_min(1e-12)

    h, w = resolution
    coords = _token_coords(h, w)
    diag = math.hypot(h - 1, w - 1)
    if diag == 0:
        d_ob = torch.zeros(fg_idx.numel(), dtype=c.dtype)
    else:
        d_ob = (coords[fg_idx] - coords[u_bg]).norm(dim=1) / diag
    return (torch.exp(-d_ob) * (torch.log(rho_oo) - torch.log(rho_ob))).mean()


def loss_remove(q_r: torch.Tensor, k_r: torch.Tensor, q_e: torch.Tensor,
                k_e: torch.Tensor, kind: str, m_obj: torch.Tensor,
                m_bg: torch.Tensor, resolution: Tuple[int, int],
                rows: Optional[torch.Tensor] = None,
                corr: str = "rows", cosine: bool = False) -> torch.Tensor:
    """Disocclusion inpainting loss from attention operands.

    Self blocks correlate the shared map AM(Q_e, K_r) against AM(Q_r, K_r);
    cross blocks use AM(Q_e, K_e).  ``corr="rows"`` correlates row against
    row (product with the transpose, handles both block kinds);
    ``corr="bmm"`` is the plain matrix product and only applies to square
    self-attention maps.  Empty foreground yields 0; empty background is an
    error.
    """
    a_edit = attention_map(q_e, k_r if kind == "self" else k_e)
    a_ref = attention_map(q_r, k_r)
    if cosine:
        a_edit = a_edit / a_edit.norm(dim=1, keepdim=True).clamp_min(1e-12)
        a_ref = a_ref / a_ref.norm(dim=1, keepdim=True).clamp_min(1e-12)
    return removal_from_maps(a_edit, a_ref, m_obj, m_bg, resolution,
                             rows=rows, corr=corr)


@dataclass
class LossBreakdown:
    total: float
    bg: float
    obj: float
    smooth: float
    remove: float


def total_loss(records: List[GuidanceRecord], weights: LossWeights,
               edit_kind: str, remove_active: bool,
               corr: str = "rows", cosine: bool = False
               ) -> Tuple[torch.Tensor, LossBreakdown]:
    """Weighted mean across shared blocks of all active terms."""
    if not records:
        raise LossError("no shared attention records captured this step")
    use_obj = edit_kind != "remove"
    bg_terms, obj_terms, s_terms, rem_terms = [], [], [], []
    for r in records:
        masks = r.level.masks
        m_ne = torch.as_tensor(masks.m_ne.reshape(-1))
        bg_terms.append(loss_bg(r.y_edit_g, r.y_ref, m_ne))
        if use_obj:
            m_t = torch.as_tensor(masks.m_obj_t.reshape(-1))
            obj_terms.append(loss_obj(r.y_edit_g, r.y_ref_g, m_t))
        s_terms.append(loss_smooth(r.y_edit_g, r.resolution))
        if remove_active:
            rem_terms.append(loss_remove(
                r.q_r, r.k_r, r.q_e, r.k_e, r.kind,
                torch.as_tensor(masks.m_obj.reshape(-1)),
                torch.as_tensor(masks.m_bg.reshape(-1)),
                r.resolution,
                rows=torch.as_tensor(masks.m_disocc.reshape(-1)),
                corr=corr, cosine=cosine,
            ))
    n = len(records)
    bg = torch.stack(bg_terms).mean()
    obj = torch.stack(obj_terms).mean() if obj_terms else torch.zeros((), dtype=bg.dtype)
    sm = torch.stack(s_terms).mean()
    rem = torch.stack(rem_terms).mean() if rem_terms else torch.zeros((), dtype=bg.dtype)
    total = weights.w_bg * bg + weights.w_obj * obj + weights.w_smooth * sm
    if rem_terms:
        total = total + weights.w_remove * rem
    return total, LossBreakdown(
        total=float(total.detach()), bg=float(bg.detach()), obj=float(obj.detach()),
        smooth=float(sm.detach()), remove=float(rem.detach()),
    )


def adapt_remove_weight(current_loss: float, w: float, weights: LossWeights) -> float:
    """Double above the upper threshold, halve below the lower one, clamp."""
    if current_loss > weights.upper_thresh:
        return min(w * weights.adapt_factor, weights.w_remove_max)
    if current_loss < weights.lower_thresh:
        return max(w / weights.adapt_factor, weights.w_remove_min)
    return w


def lr_schedule(event_index: int, n_events: int, initial: float = 1.5) -> float:
    """Affine decay from ``initial`` at the first optimized step to 0 at the last."""
    if n_events <= 0:
        raise LossError("schedule needs at least one optimization event")
    if n_events == 1:
        return initial
    if not 0 <= event_index < n_events:
        raise LossError(f"event index {event_index} outside schedule of {n_events}")
    return initial * (1.0 - event_index / (n_events - 1))


@dataclass
class OptimState:
    """Mutable optimization state threaded through the edit rollout."""

    z: torch.Tensor
    null_text: torch.Tensor
    w_remove: float
    opt_event: int = 0
    loss_records: List[dict] = _dcfield(default_factory=list)


def optimize_step(model: DenoiseUNet, state: OptimState, t: int,
                  controller: SharedAttentionController, weights: LossWeights,
                  lr: float, remove_active: bool, edit_kind: str,
                  grad_iters: int = 1, corr: str = "rows",
                  cosine: bool = False) -> LossBreakdown:
    """One gradient-descent update of the edit latent and null embedding.

    Runs the hooked denoiser to build the loss graph, steps both parameters
    by -lr * grad, then adapts the removal weight from this step's removal
    loss.  The caller re-runs the denoising step with the updated state.
    """
    weights_now = LossWeights(**{**weights.to_json(), "w_remove": state.w_remove})
    breakdown: Optional[LossBreakdown] = None
    for _ in range(max(1, grad_iters)):
        z_leaf = state.z.detach().clone().requires_grad_(True)
        ne_leaf = state.null_text.detach().clone().requires_grad_(True)
        controller.begin_step(controller.step_index, t)
        eps_theta(model, z_leaf, t, ne_leaf, controller.hook)
        total, breakdown = total_loss(controller.records, weights_now,
                                      edit_kind, remove_active,
                                      corr=corr, cosine=cosine)
        if not math.isfinite(breakdown.total):
            raise OptimizationError("non-finite loss", controller.step_index)
        grads, _unused = gradient(total, {"z": z_leaf, "null": ne_leaf})
        if not (torch.isfinite(grads["z"]).all() and torch.isfinite(grads["null"]).all()):
            raise OptimizationError("non-finite gradient", controller.step_index)
        state.z = (z_leaf - lr * grads["z"]).detach()
        state.null_text = (ne_leaf - lr * grads["null"]).detach()
    if remove_active:
        state.w_remove = adapt_remove_weight(breakdown.remove, state.w_remove, weights)
    return breakdown
