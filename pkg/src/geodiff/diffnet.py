"""A small latent-diffusion denoiser with interceptable attention.

The network is a 2-level UNet over an h x w x c latent grid.  Every level
carries one self-attention and one text cross-attention block; all of them
route their (Q, K, V) through an optional hook that may replace the
attention output, which is how reference attention is captured and shared
attention injected from outside.  Single attention head, deterministic on
CPU.

The "text" condition is an embedding matrix directly; the empty prompt is a
learned matrix stored with the weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict
from typing import Callable, Dict, Optional, Set, Tuple

import numpy as np
import torch
import torch.nn as nn

from .checkpoint import load_tensors, save_tensors

# Hook contract: hook(t, block_id, kind, Q, K, V) may return
#   None                -> block computes attention normally,
#   a tensor (N x d)    -> replacement attention OUTPUT,
#   a pair (K', V')     -> replacement operands, attention recomputed.
AttentionHook = Callable[[int, str, str, torch.Tensor, torch.Tensor, torch.Tensor],
                         object]

DTYPE = torch.float64


class DiffnetError(ValueError):
    pass


# --- Schedule ------------------------------------------------------------


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear-beta schedule; alpha_bar[t] for t = 0..T with alpha_bar[0] = 1."""

    betas: np.ndarray
    alphas: np.ndarray
    alpha_bar: np.ndarray

    @classmethod
    def linear(cls, t_steps: int = 1000, beta_start: float = 1e-4,
               beta_end: float = 0.02) -> "NoiseSchedule":
        betas = np.linspace(beta_start, beta_end, t_steps, dtype=np.float64)
        alphas = 1.0 - betas
        abar = np.concatenate([[1.0], np.cumprod(alphas)])
        return cls(betas=betas, alphas=alphas, alpha_bar=abar)

    @property
    def t_steps(self) -> int:
        return len(self.betas)

    def abar(self, t: int) -> float:
        if not 0 <= t <= self.t_steps:
            raise DiffnetError(f"timestep {t} outside [0, {self.t_steps}]")
        return float(self.alpha_bar[t])

    def ddim_timesteps(self, n_steps: int) -> list:
        """Evenly spaced timesteps 0..T inclusive, n_steps hops."""
        if n_steps < 1 or self.t_steps % n_steps != 0:
            raise DiffnetError(f"{n_steps} DDIM steps must divide T={self.t_steps}")
        stride = self.t_steps // n_steps
        return [s * stride for s in range(n_steps + 1)]

    def params(self) -> dict:
        return {"kind": "linear", "t_steps": self.t_steps,
                "beta_start": float(self.betas[0]), "beta_end": float(self.betas[-1])}

    @classmethod
    def from_params(cls, p: dict) -> "NoiseSchedule":
        return cls.linear(p["t_steps"], p["beta_start"], p["beta_end"])


def forward_noise(x0: torch.Tensor, t: int, eps: torch.Tensor,
                  schedule: NoiseSchedule) -> torch.Tensor:
    """Closed-form noising: sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    if eps.shape != x0.shape:
        raise DiffnetError("eps shape must match x0")
    ab = schedule.abar(t)
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


# --- Attention primitives ------------------------------------------------


def attention_map(q: torch.Tensor, k: torch.Tensor, d: Optional[int] = None) -> torch.Tensor:
    """Row-wise softmax of Q K^T / sqrt(d). Rows sum to one."""
    if q.ndim != 2 or k.ndim != 2 or q.shape[1] != k.shape[1]:
        raise DiffnetError(f"bad attention shapes {tuple(q.shape)} x {tuple(k.shape)}")
    d = q.shape[1] if d is None else d
    if d <= 0:
        raise DiffnetError("embedding dimension must be positive")
    logits = q @ k.T / math.sqrt(d)
    return torch.softmax(logits, dim=1)


def attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Attention output AM(Q, K) V; rows are convex combinations of V rows."""
    if k.shape[0] != v.shape[0]:
        raise DiffnetError("K and V must have the same number of rows")
    return attention_map(q, k) @ v


@dataclass
class AttentionCapture:
    """One attention block's operands plus its computed output."""

    q: torch.Tensor
    k: torch.Tensor
    v: torch.Tensor
    y: torch.Tensor          # attention output AM(Q,K) V
    kind: str                # "self" | "cross"
    resolution: Tuple[int, int]
    _am: Optional[torch.Tensor] = None

    @property
    def am(self) -> torch.Tensor:
        if self._am is None:
            self._am = attention_map(self.q, self.k)
        return self._am

    @property
    def n_tokens(self) -> int:
        return self.resolution[0] * self.resolution[1]


class CaptureBank:
    """Per-(timestep, block) store of reference attention captures."""

    def __init__(self):
        self.records: Dict[Tuple[int, str], AttentionCapture] = {}

    def capture_hook(self) -> AttentionHook:
        def hook(t, block, kind, q, k, v):
            y = attention(q, k, v)
            h_a = int(round(math.sqrt(q.shape[0])))
            self.records[(t, block)] = AttentionCapture(
                q=q.detach(), k=k.detach(), v=v.detach(), y=y.detach(),
                kind=kind, resolution=(h_a, q.shape[0] // h_a),
            )
            return y
        return hook

    def get(self, t: int, block: str) -> AttentionCapture:
        try:
            return self.records[(t, block)]
        except KeyError:
            raise DiffnetError(f"no reference capture for step {t}, block {block!r}")


# --- UNet ----------------------------------------------------------------


@dataclass(frozen=True)
class ModelConfig:
    latent_size: int = 16
    latent_channels: int = 4
    base_channels: int = 32
    attn_dim: int = 32
    text_len: int = 4
    text_dim: int = 32
    t_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    # pointwise_conv=True shrinks every convolution to 1x1 so attention is
    # the only spatial mixer; positional_attention feeds fixed sinusoidal
    # position codes into Q/K so attention can address tokens by location.
    pointwise_conv: bool = False
    positional_attention: bool = True

    def schedule(self) -> NoiseSchedule:
        return NoiseSchedule.linear(self.t_steps, self.beta_start, self.beta_end)


def _timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """(B,) timesteps -> (B, dim) sinusoidal features."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0)
                      * torch.arange(half, dtype=t.dtype) / half)
    ang = t[:, None] * freqs[None, :]
    return torch.cat([torch.cos(ang), torch.sin(ang)], dim=1)


class _ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, t_dim: int, kernel: int = 1):
        super().__init__()
        pad = kernel // 2
        self.norm1 = nn.GroupNorm(min(8, c_in), c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, kernel, padding=pad)
        self.t_proj = nn.Linear(t_dim, c_out)
        self.norm2 = nn.GroupNorm(min(8, c_out), c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, kernel, padding=pad)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()
        self.act = nn.SiLU()

    def forward(self, x, t_emb):
        h = self.conv1(self.act(self.norm1(x)))
        h = h + self.t_proj(t_emb)[:, :, None, None]
        h = self.conv2(self.act(self.norm2(h)))
        return h + self.skip(x)


def _sincos_positions(h: int, w: int, c: int, dtype) -> torch.Tensor:
    """Fixed 2D sin/cos position codes, one c-vector per token (row-major)."""
    quarter = max(c // 4, 1)
    freqs = torch.exp(-math.log(100.0)
                      * torch.arange(quarter, dtype=dtype) / max(quarter - 1, 1))
    ys, xs = torch.meshgrid(torch.arange(h, dtype=dtype),
                            torch.arange(w, dtype=dtype), indexing="ij")
    ax = xs.reshape(-1, 1) * freqs[None, :]
    ay = ys.reshape(-1, 1) * freqs[None, :]
    pe = torch.cat([torch.sin(ax), torch.cos(ax), torch.sin(ay), torch.cos(ay)], dim=1)
    if pe.shape[1] < c:
        pe = torch.cat([pe, torch.zeros(h * w, c - pe.shape[1], dtype=dtype)], dim=1)
    return pe[:, :c]


class _AttnPair(nn.Module):
    """Self-attention followed by text cross-attention, both hookable."""

    def __init__(self, block_id: str, channels: int, cfg: ModelConfig):
        super().__init__()
        self.block_id = block_id
        self.positional = cfg.positional_attention
        d = cfg.attn_dim
        self.norm_s = nn.GroupNorm(min(8, channels), channels)
        self.sq = nn.Linear(channels, d, bias=False)
        self.sk = nn.Linear(channels, d, bias=False)
        self.sv = nn.Linear(channels, d, bias=False)
        self.s_out = nn.Linear(d, channels)
        self.norm_c = nn.GroupNorm(min(8, channels), channels)
        self.cq = nn.Linear(channels, d, bias=False)
        self.ck = nn.Linear(cfg.text_dim, d, bias=False)
        self.cv = nn.Linear(cfg.text_dim, d, bias=False)
        self.c_out = nn.Linear(d, channels)
        self._pe_cache = {}

    def _pos(self, h, w, c, dtype):
        key = (h, w, c, dtype)
        if key not in self._pe_cache:
            self._pe_cache[key] = _sincos_positions(h, w, c, dtype)
        return self._pe_cache[key]

    def _run(self, x, text, t, hook, kind):
        b, c, h, w = x.shape
        norm = self.norm_s if kind == "self" else self.norm_c
        tokens = norm(x).permute(0, 2, 3, 1).reshape(b, h * w, c)
        # position codes go into queries and keys only; values carry content
        addressed = tokens
        if self.positional:
            addressed = tokens + self._pos(h, w, c, x.dtype)[None]
        if kind == "self":
            q = self.sq(addressed)
            k, v = self.sk(addressed), self.sv(tokens)
            out_proj = self.s_out
        else:
            q = self.cq(addressed)
            k = self.ck(text)[None].expand(b, -1, -1)
            v = self.cv(text)[None].expand(b, -1, -1)
            out_proj = self.c_out
        y = None
        if hook is not None and b == 1:
            replacement = hook(t, f"{self.block_id}.{kind}", kind, q[0], k[0], v[0])
            if isinstance(replacement, tuple):
                k_new, v_new = replacement
                if k_new.shape[1] != q.shape[2] or k_new.shape[0] != v_new.shape[0]:
                    raise DiffnetError(
                        f"hook operand shapes {tuple(k_new.shape)}/{tuple(v_new.shape)} "
                        f"do not conform at {self.block_id}.{kind}")
                y = attention(q[0], k_new, v_new)[None]
            elif replacement is not None:
                y = replacement
                if y.shape != (q.shape[1], v.shape[2]):
                    raise DiffnetError(
                        f"hook replacement shape {tuple(y.shape)} != "
                        f"{(q.shape[1], v.shape[2])} at {self.block_id}.{kind}")
                y = y[None]
        if y is None:
            if b == 1:
                # same kernel as hook replacements, so hooked and plain runs
                # of identical operands match bit for bit
                y = attention(q[0], k[0], v[0])[None]
            else:
                am = torch.softmax(q @ k.transpose(1, 2) / math.sqrt(q.shape[-1]), dim=-1)
                y = am @ v
        out = out_proj(y).reshape(b, h, w, c).permute(0, 3, 1, 2)
        return x + out

    def forward(self, x, text, t, hook):
        x = self._run(x, text, t, hook, "self")
        x = self._run(x, text, t, hook, "cross")
        return x


class DenoiseUNet(nn.Module):
    """epsilon-prediction UNet; attention at the base and half resolutions."""

    # Block ids in forward order, each contributing ".self" and ".cross".
    ATTN_BLOCKS = ("down0", "down1", "up1", "up0")

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype: torch.dtype = DTYPE):
        super().__init__()
        self.cfg = cfg
        torch.manual_seed(seed)
        c0 = cfg.base_channels
        c1 = c0 * 2
        t_dim = c0 * 2
        kio = 1 if cfg.pointwise_conv else 3
        kres = 1 if cfg.pointwise_conv else 3
        self.t_mlp = nn.Sequential(nn.Linear(c0, t_dim), nn.SiLU(), nn.Linear(t_dim, t_dim))
        self.conv_in = nn.Conv2d(cfg.latent_channels, c0, kio, padding=kio // 2)
        self.res_d0 = _ResBlock(c0, c0, t_dim, kres)
        self.attn_d0 = _AttnPair("down0", c0, cfg)
        if cfg.pointwise_conv:
            self.down = nn.Conv2d(c0, c1, 2, stride=2)
        else:
            self.down = nn.Conv2d(c0, c1, 3, stride=2, padding=1)
        self.res_d1 = _ResBlock(c1, c1, t_dim, kres)
        self.attn_d1 = _AttnPair("down1", c1, cfg)
        self.res_mid = _ResBlock(c1, c1, t_dim, kres)
        self.res_u1 = _ResBlock(c1 + c1, c1, t_dim, kres)
        self.attn_u1 = _AttnPair("up1", c1, cfg)
        self.up = nn.Conv2d(c1, c0, kio, padding=kio // 2)
        self.res_u0 = _ResBlock(c0 + c0, c0, t_dim, kres)
        self.attn_u0 = _AttnPair("up0", c0, cfg)
        self.norm_out = nn.GroupNorm(min(8, c0), c0)
        self.conv_out = nn.Conv2d(c0, cfg.latent_channels, kio, padding=kio // 2)
        self.act = nn.SiLU()
        self.null_text = nn.Parameter(0.1 * torch.randn(cfg.text_len, cfg.text_dim))
        self.to(dtype)
        self._dtype = dtype

    def attention_resolutions(self) -> Dict[str, Tuple[int, int]]:
        s = self.cfg.latent_size
        out = {}
        for b in self.ATTN_BLOCKS:
            r = s if b in ("down0", "up0") else s // 2
            for kind in ("self", "cross"):
                out[f"{b}.{kind}"] = (r, r)
        return out

    def _backbone(self, x, t_emb, text, t, hook):
        h0 = self.conv_in(x)
        h0 = self.res_d0(h0, t_emb)
        h0 = self.attn_d0(h0, text, t, hook)
        h1 = self.down(h0)
        h1 = self.res_d1(h1, t_emb)
        h1 = self.attn_d1(h1, text, t, hook)
        m = self.res_mid(h1, t_emb)
        u1 = self.res_u1(torch.cat([m, h1], dim=1), t_emb)
        u1 = self.attn_u1(u1, text, t, hook)
        u1 = self.up(torch.nn.functional.interpolate(u1, scale_factor=2, mode="nearest"))
        u0 = self.res_u0(torch.cat([u1, h0], dim=1), t_emb)
        u0 = self.attn_u0(u0, text, t, hook)
        return self.conv_out(self.act(self.norm_out(u0)))

    def forward(self, z: torch.Tensor, t: int, text: torch.Tensor,
                hook: Optional[AttentionHook] = None) -> torch.Tensor:
        """Predicted noise for one (C, H, W) latent at integer timestep t."""
        if z.ndim != 3 or z.shape[0] != self.cfg.latent_channels:
            raise DiffnetError(
                f"latent must be (C={self.cfg.latent_channels}, H, W), got {tuple(z.shape)}")
        if not torch.isfinite(z).all():
            raise DiffnetError("latent contains non-finite values")
        if not 1 <= t <= self.cfg.t_steps:
            raise DiffnetError(f"timestep {t} outside [1, {self.cfg.t_steps}]")
        if text.ndim != 2 or text.shape[1] != self.cfg.text_dim:
            raise DiffnetError("text embedding must be (n, text_dim)")
        ts = torch.tensor([float(t)], dtype=z.dtype)
        t_emb = self.t_mlp(_timestep_embedding(ts, self.cfg.base_channels))
        return self._backbone(z[None], t_emb, text, t, hook)[0]

    def forward_batch(self, zb: torch.Tensor, tb: torch.Tensor,
                      text: torch.Tensor) -> torch.Tensor:
        """Batched prediction for training; no hooks on this path."""
        t_emb = self.t_mlp(_timestep_embedding(tb.to(zb.dtype), self.cfg.base_channels))
        return self._backbone(zb, t_emb, text, 0, None)


def eps_theta(model: DenoiseUNet, z: torch.Tensor, t: int, text: torch.Tensor,
              hook: Optional[AttentionHook] = None) -> torch.Tensor:
    """Predicted noise for latent z at timestep t under the given condition."""
    return model(z, t, text, hook)


def cfg_eps(model: DenoiseUNet, z: torch.Tensor, t: int,
            text_cond: torch.Tensor, text_null: torch.Tensor,
            scale: float) -> torch.Tensor:
    """Classifier-free guidance: eps_null + scale * (eps_cond - eps_null)."""
    if scale < 0:
        raise DiffnetError("guidance scale must be >= 0")
    if text_cond is text_null or torch.equal(text_cond, text_null):
        return model(z, t, text_null)
    if scale == 1.0:
        return model(z, t, text_cond)
    e_null = model(z, t, text_null)
    if scale == 0.0:
        return e_null
    e_cond = model(z, t, text_cond)
    return e_null + scale * (e_cond - e_null)


def gradient(loss: torch.Tensor, params: Dict[str, torch.Tensor]):
    """Reverse-mode gradients of a scalar loss for each named parameter.

    Parameters not on the computation path get zero gradients and are listed
    in the returned ``unused`` set.
    """
    if loss.ndim != 0:
        raise DiffnetError("loss must be scalar")
    names = list(params)
    if not loss.requires_grad:
        # constant loss: every parameter is off the computation path
        return ({n: torch.zeros_like(params[n]) for n in names}, set(names))
    grads = torch.autograd.grad(loss, [params[n] for n in names],
                                allow_unused=True, retain_graph=False)
    out: Dict[str, torch.Tensor] = {}
    unused: Set[str] = set()
    for n, g in zip(names, grads):
        if g is None:
            out[n] = torch.zeros_like(params[n])
            unused.add(n)
        else:
            out[n] = g
    return out, unused


# --- Checkpoint ----------------------------------------------------------


def save_model(path, model: DenoiseUNet, extra_meta: dict | None = None) -> None:
    tensors = {name: p.detach().cpu().numpy() for name, p in model.named_parameters()}
    meta = {"model_config": asdict(model.cfg),
            "schedule": model.cfg.schedule().params()}
    if extra_meta:
        meta.update(extra_meta)
    save_tensors(path, tensors, meta=meta, dtype="f4")


def load_model(path) -> Tuple[DenoiseUNet, NoiseSchedule]:
    tensors, meta = load_tensors(path)
    cfg = ModelConfig(**meta["model_config"])
    model = DenoiseUNet(cfg)
    state = {k: torch.as_tensor(v, dtype=DTYPE) for k, v in tensors.items()}
    missing = set(dict(model.named_parameters())) - set(state)
    if missing:
        raise DiffnetError(f"checkpoint missing tensors: {sorted(missing)}")
    model.load_state_dict(state, strict=True)
    model.eval()
    return model, NoiseSchedule.from_params(meta["schedule"])
