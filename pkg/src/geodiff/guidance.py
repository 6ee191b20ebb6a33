"""Geometry-aware shared attention between the reference and edit branches.

For every attention block the reference branch has already captured
(Q_r, K_r, V_r).  The edit branch's block output is replaced by a blend of

- reference guidance: attention over reference operands with the queries
  forward-warped through the edit field at the block's token resolution, and
- edit guidance: the edit queries attending into reference keys/values
  (self-attention) or into reference values under edit keys (cross),

mixed token-wise by the soft transformed object mask.  Blocks keep their
plain behavior once the configured sharing horizon has passed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch

from .diffnet import DTYPE, AttentionCapture, CaptureBank, DiffnetError, attention
from .geometry import EditField, MaskSet, mask_algebra, resample_field, resample_mask, splat_with_coverage


@dataclass
class PyramidLevel:
    """Edit field and mask algebra at one attention resolution."""

    field: EditField
    masks: MaskSet

    @property
    def resolution(self) -> Tuple[int, int]:
        return self.field.valid.shape


def build_pyramid(field: EditField, m_obj: np.ndarray,
                  resolutions) -> Dict[Tuple[int, int], PyramidLevel]:
    """Resample the full-resolution field and object mask to each attention
    grid and redo the mask algebra there, so blend masks match where the
    queries actually land at that resolution."""
    levels: Dict[Tuple[int, int], PyramidLevel] = {}
    for h, w in set(resolutions):
        f = resample_field(field, h, w)
        m = resample_mask(m_obj, h, w)
        levels[(h, w)] = PyramidLevel(field=f, masks=mask_algebra(m, f))
    return levels


def warp_queries(q: torch.Tensor, field: EditField) -> torch.Tensor:
    """Forward-splat query rows over the token grid of the block.

    Tokens that no source reaches (or for removal edits, every token) keep
    their original query row: a background query should stay a background
    query rather than collapse to a uniform one.
    """
    h, w = field.valid.shape
    if q.shape[0] != h * w:
        raise DiffnetError(f"query rows {q.shape[0]} != token grid {h}x{w}")
    q_np = q.detach().cpu().numpy().reshape(h, w, q.shape[1])
    warped, covered = splat_with_coverage(q_np, field)
    out = np.where(covered[:, :, None], warped, q_np)
    return torch.as_tensor(out.reshape(h * w, q.shape[1]), dtype=q.dtype)


def ref_guidance(q_r: torch.Tensor, k_r: torch.Tensor, v_r: torch.Tensor,
                 field: EditField) -> torch.Tensor:
    """Attention over reference operands with warped reference queries."""
    return attention(warp_queries(q_r, field), k_r, v_r)


def edit_guidance(q_e: torch.Tensor, k_e: torch.Tensor, v_e: torch.Tensor,
                  k_r: torch.Tensor, v_r: torch.Tensor, kind: str) -> torch.Tensor:
    """Edit queries over reference keys/values (self) or edit keys with
    reference values (cross)."""
    if kind == "self":
        return attention(q_e, k_r, v_r)
    if kind == "cross":
        return attention(q_e, k_e, v_r)
    raise DiffnetError(f"unknown attention kind {kind!r}")


def blend(y_ref_g: torch.Tensor, y_edit_g: torch.Tensor,
          mask_per_token: torch.Tensor) -> torch.Tensor:
    """Token-wise convex mix: mask picks reference guidance, rest edit guidance."""
    if mask_per_token.numel() != y_ref_g.shape[0]:
        raise DiffnetError("blend mask length must equal token count")
    m = mask_per_token.reshape(-1, 1).to(y_ref_g.dtype)
    return m * y_ref_g + (1.0 - m) * y_edit_g


@dataclass
class GuidanceRecord:
    """Everything the loss terms need from one shared block evaluation.

    Edit-side tensors stay attached to the autograd graph; reference-side
    tensors are constants.
    """

    block: str
    kind: str
    resolution: Tuple[int, int]
    q_e: torch.Tensor
    k_e: torch.Tensor
    q_r: torch.Tensor
    k_r: torch.Tensor
    y_edit_g: torch.Tensor
    y_ref_g: torch.Tensor
    y_ref: torch.Tensor
    level: PyramidLevel


@dataclass
class SharedAttentionConfig:
    share_until_step: int = 45
    blocks: Optional[set] = None      # None = all blocks
    edit_kind: str = "identity"


class SharedAttentionController:
    """Builds the edit-branch attention hook for one editing job.

    ``begin_step(i, t)`` must be called before each edit-branch model
    evaluation; the hook then substitutes shared attention while sharing is
    active and collects :class:`GuidanceRecord`s for the loss terms.
    """

    def __init__(self, bank: CaptureBank, pyramid: Dict[Tuple[int, int], PyramidLevel],
                 config: SharedAttentionConfig):
        self.bank = bank
        self.pyramid = pyramid
        self.config = config
        self.step_index = 0
        self.sharing_active = True
        self.records: List[GuidanceRecord] = []
        self._warped_q_cache: Dict[Tuple[int, str], torch.Tensor] = {}

    def begin_step(self, step_index: int, t: int) -> None:
        self.step_index = step_index
        self.sharing_active = step_index < self.config.share_until_step
        self.records = []
        self._t = t

    def level_for(self, n_tokens: int) -> PyramidLevel:
        for (h, w), level in self.pyramid.items():
            if h * w == n_tokens:
                return level
        raise DiffnetError(f"no pyramid level with {n_tokens} tokens")

    def hook(self, t: int, block: str, kind: str, q_e, k_e, v_e):
        if not self.sharing_active:
            return None
        if self.config.blocks is not None and block not in self.config.blocks:
            return None
        cap: AttentionCapture = self.bank.get(t, block)
        level = self.level_for(q_e.shape[0])
        key = (t, block)
        y_ref_g_cached = self._warped_q_cache.get(key)
        if y_ref_g_cached is None:
            y_ref_g_cached = ref_guidance(cap.q, cap.k, cap.v, level.field)
            self._warped_q_cache[key] = y_ref_g_cached
        y_edit_g = edit_guidance(q_e, k_e, v_e, cap.k, cap.v, kind)
        m_soft = torch.as_tensor(level.masks.m_obj_t_soft.reshape(-1), dtype=DTYPE)
        out = blend(y_ref_g_cached, y_edit_g, m_soft)
        self.records.append(GuidanceRecord(
            block=block, kind=kind, resolution=level.resolution,
            q_e=q_e, k_e=k_e, q_r=cap.q, k_r=cap.k,
            y_edit_g=y_edit_g, y_ref_g=y_ref_g_cached, y_ref=cap.y, level=level,
        ))
        return out

    def diagnostics(self) -> List[dict]:
        """Guidance norms per recorded block, for the job's diagnostic stream."""
        out = []
        for r in self.records:
            out.append({
                "block": r.block,
                "kind": r.kind,
                "y_ref_norm": float(torch.linalg.norm(r.y_ref)),
                "y_ref_g_norm": float(torch.linalg.norm(r.y_ref_g)),
                "y_edit_g_norm": float(torch.linalg.norm(r.y_edit_g.detach())),
            })
        return out
