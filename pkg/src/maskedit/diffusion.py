"""Tiny latent diffusion: invertible space-to-depth codec, DDPM forward
process, a small UNet with scene-latent concatenation and adapter
conditioning, and a deterministic sampler.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange

from .errors import DimensionMismatch, StepOutOfRange
from .mea import ConditionBundle, MaskEnhancedAdapter

__all__ = [
    "NoiseSchedule",
    "UNetConfig",
    "UNet",
    "encode_latent",
    "decode_latent",
    "add_noise",
    "diffusion_loss_terms",
    "sample",
]

LATENT_FACTOR = 4


def encode_latent(x: torch.Tensor, s: int = LATENT_FACTOR) -> torch.Tensor:
    """(..., H, W, 3) image -> (..., 3*s*s, H/s, W/s) latent; pure permutation."""
    if x.shape[-3] % s or x.shape[-2] % s:
        raise DimensionMismatch(f"spatial dims must be divisible by {s}")
    return rearrange(x, "... (hh s1) (ww s2) c -> ... (c s1 s2) hh ww", s1=s, s2=s)


def decode_latent(z: torch.Tensor, s: int = LATENT_FACTOR) -> torch.Tensor:
    """Exact inverse of encode_latent."""
    return rearrange(z, "... (c s1 s2) hh ww -> ... (hh s1) (ww s2) c", s1=s, s2=s)


class NoiseSchedule:
    """Linear-beta DDPM forward process; alpha_bar[0] == 1 by convention."""

    def __init__(self, T: int = 200, beta_start: float = 2e-3, beta_end: float = 0.05):
        self.T = T
        self.betas = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
        alpha_bar = torch.cumprod(1.0 - self.betas, dim=0)
        self.alpha_bar = torch.cat([torch.ones(1, dtype=torch.float64), alpha_bar])

    def sqrt_terms(self, t: torch.Tensor, dtype, device=None):
        ab = self.alpha_bar.to(device=device)[t]
        return torch.sqrt(ab).to(dtype), torch.sqrt(1.0 - ab).to(dtype)


def add_noise(schedule: NoiseSchedule, z: torch.Tensor, t, eps: torch.Tensor) -> torch.Tensor:
    """z_t = sqrt(alpha_bar_t) * z + sqrt(1 - alpha_bar_t) * eps."""
    t = torch.as_tensor(t)
    if (t < 0).any() or (t > schedule.T).any():
        raise StepOutOfRange(f"t must lie in [0, {schedule.T}]")
    if eps.shape != z.shape:
        raise DimensionMismatch("noise shape must match latent shape")
    sa, sb = schedule.sqrt_terms(t, z.dtype, z.device)
    shape = (-1,) + (1,) * (z.ndim - 1) if t.ndim else ()
    if t.ndim:
        sa, sb = sa.view(shape), sb.view(shape)
    return sa * z + sb * eps


def timestep_embedding(t: torch.Tensor, dim: int, dtype) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.double().unsqueeze(-1) * freqs
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1).to(dtype)


@dataclass
class UNetConfig:
    latent_channels: int = 48
    base_channels: int = 64
    channel_mults: tuple = (1, 2)
    attention_levels: tuple = (1,)
    time_dim: int = 64
    d_e: int = 128

    @property
    def in_channels(self) -> int:
        return 2 * self.latent_channels

    def attention_site_channels(self) -> list[int]:
        """Channel width of every conditioning site, in forward order."""
        chans = [self.base_channels * m for m in self.channel_mults]
        sites = [chans[lv] for lv in self.attention_levels if lv < len(chans)]
        mid = [chans[-1]]
        return sites + mid + sites[::-1]

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["channel_mults"] = list(self.channel_mults)
        d["attention_levels"] = list(self.attention_levels)
        return d


class ResBlock(nn.Module):
    """GroupNorm/SiLU conv block with time-conditioned scale and shift."""

    def __init__(self, c_in: int, c_out: int, time_dim: int):
        super().__init__()
        groups = 8 if c_out % 8 == 0 else 1
        self.norm1 = nn.GroupNorm(groups, c_in) if c_in % groups == 0 else nn.GroupNorm(1, c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.time_mlp = nn.Linear(time_dim, 2 * c_out)
        self.norm2 = nn.GroupNorm(groups, c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, t_emb):
        h = self.conv1(F.silu(self.norm1(x)))
        scale, shift = self.time_mlp(F.silu(t_emb)).chunk(2, dim=-1)
        h = self.norm2(h) * (1 + scale[:, :, None, None]) + shift[:, :, None, None]
        h = self.conv2(F.silu(h))
        return h + self.skip(x)


class UNet(nn.Module):
    """Noise predictor over concat[z_t, scene latent], conditioned through the
    adapter's cross-attention sites."""

    def __init__(self, cfg: UNetConfig, adapter: MaskEnhancedAdapter):
        super().__init__()
        self.cfg = cfg
        self.adapter = adapter
        expected = cfg.attention_site_channels()
        if [s.to_q.in_features for s in adapter.dca] != expected:
            raise DimensionMismatch(
                f"adapter sites {[s.to_q.in_features for s in adapter.dca]} "
                f"!= expected {expected}"
            )
        td = cfg.time_dim
        self.time_mlp = nn.Sequential(nn.Linear(td, td), nn.SiLU(), nn.Linear(td, td))
        chans = [cfg.base_channels * m for m in cfg.channel_mults]
        self.stem = nn.Conv2d(cfg.in_channels, chans[0], 3, padding=1)

        self.down_blocks = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        for lv, c in enumerate(chans):
            c_in = chans[lv - 1] if lv else chans[0]
            self.down_blocks.append(nn.ModuleList([
                ResBlock(c_in, c, td), ResBlock(c, c, td),
            ]))
            self.downsamples.append(
                nn.Conv2d(c, c, 3, stride=2, padding=1) if lv < len(chans) - 1 else nn.Identity()
            )
        self.mid1 = ResBlock(chans[-1], chans[-1], td)
        self.mid2 = ResBlock(chans[-1], chans[-1], td)

        self.up_blocks = nn.ModuleList()
        self.upsamples = nn.ModuleList()
        for lv in reversed(range(len(chans))):
            c = chans[lv]
            c_below = chans[min(lv + 1, len(chans) - 1)]
            self.up_blocks.append(nn.ModuleList([
                ResBlock(c_below + c, c, td), ResBlock(c, c, td),
            ]))
            self.upsamples.append(
                nn.Upsample(scale_factor=2, mode="nearest") if lv < len(chans) - 1
                else nn.Identity()
            )
        self.head_norm = nn.GroupNorm(8, chans[0])
        self.head = nn.Conv2d(chans[0], cfg.latent_channels, 3, padding=1)
        self._attn_levels = set(cfg.attention_levels)

    def _condition(self, h, site_idx, bundle):
        site = self.adapter.dca[site_idx]
        b, c, hh, ww = h.shape
        z = h.flatten(2).transpose(1, 2)
        out = site(z, bundle)
        return h + out.transpose(1, 2).view(b, c, hh, ww)

    def forward(self, t: torch.Tensor, z_t: torch.Tensor, z_scene: torch.Tensor,
                bundle: ConditionBundle) -> torch.Tensor:
        if z_t.shape != z_scene.shape:
            raise DimensionMismatch("z_t and scene latent must have equal shapes")
        if z_t.shape[1] != self.cfg.latent_channels:
            raise DimensionMismatch(
                f"latent channels {z_t.shape[1]} != {self.cfg.latent_channels}"
            )
        t = torch.as_tensor(t, device=z_t.device)
        if t.ndim == 0:
            t = t.expand(z_t.shape[0])
        t_emb = self.time_mlp(timestep_embedding(t, self.cfg.time_dim, z_t.dtype))

        h = self.stem(torch.cat([z_t, z_scene], dim=1))
        site = 0
        skips = []
        n_levels = len(self.down_blocks)
        for lv in range(n_levels):
            for block in self.down_blocks[lv]:
                h = block(h, t_emb)
            if lv in self._attn_levels:
                h = self._condition(h, site, bundle)
                site += 1
            skips.append(h)
            h = self.downsamples[lv](h)
        h = self.mid1(h, t_emb)
        h = self._condition(h, site, bundle)
        site += 1
        h = self.mid2(h, t_emb)
        for i, lv in enumerate(reversed(range(n_levels))):
            h = self.upsamples[i](h)
            h = torch.cat([h, skips[lv]], dim=1)
            for block in self.up_blocks[i]:
                h = block(h, t_emb)
            if lv in self._attn_levels:
                h = self._condition(h, site, bundle)
                site += 1
        return self.head(F.silu(self.head_norm(h)))


def predict_clean(model: UNet, t, z_t, z_scene, bundle) -> torch.Tensor:
    """Estimated clean latent. The network output is a residual on top of the
    scene latent, so an untouched image is the zero-output fixed point."""
    return z_scene + model(t, z_t, z_scene, bundle)


def predict_noise(model: UNet, schedule: NoiseSchedule, t, z_t, z_scene,
                  bundle) -> torch.Tensor:
    """Noise estimate implied by the clean-latent prediction (t >= 1)."""
    t = torch.as_tensor(t)
    x0 = predict_clean(model, t, z_t, z_scene, bundle)
    sa, sb = schedule.sqrt_terms(t, z_t.dtype, z_t.device)
    if t.ndim:
        shape = (-1,) + (1,) * (z_t.ndim - 1)
        sa, sb = sa.view(shape), sb.view(shape)
    return (z_t - sa * x0) / sb


def _draw_noised(schedule: NoiseSchedule, z_target: torch.Tensor,
                 generator: Optional[torch.Generator]):
    b = z_target.shape[0]
    t = torch.randint(1, schedule.T + 1, (b,), generator=generator)
    eps = torch.randn(z_target.shape, generator=generator, dtype=z_target.dtype)
    return t, eps, add_noise(schedule, z_target, t, eps)


def diffusion_loss_terms(model: UNet, schedule: NoiseSchedule,
                         z_target: torch.Tensor, z_scene: torch.Tensor,
                         bundle: ConditionBundle,
                         generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """Mean squared error between drawn and predicted noise at a random step."""
    t, eps, z_t = _draw_noised(schedule, z_target, generator)
    pred = predict_noise(model, schedule, t, z_t, z_scene, bundle)
    return F.mse_loss(pred, eps)


def diffusion_training_loss(model: UNet, schedule: NoiseSchedule,
                            z_target: torch.Tensor, z_scene: torch.Tensor,
                            bundle: ConditionBundle,
                            generator: Optional[torch.Generator] = None,
                            edit_weight: float = 8.0,
                            change_threshold: float = 0.02,
                            focus: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Clean-latent reconstruction MSE at a random step.

    Same objective family as the noise MSE, reweighted by 1/SNR(t) so every
    step contributes equally in latent space; this keeps the optimization
    stable where the plain noise loss is dominated by low-noise steps.

    Latent pixels where the target departs from the scene are upweighted
    (edit_weight): the edited region covers only a few percent of the image,
    so under a uniform average the degenerate "copy the scene" output is a
    strong local minimum. `focus` (a {0,1} map broadcastable to (B,1,h,w),
    typically the user's mask downsampled to latent resolution) receives the
    same upweighting: inside the region the user asked about, keeping
    unchanged pixels untouched matters as much as painting changed ones."""
    t, eps, z_t = _draw_noised(schedule, z_target, generator)
    x0_hat = predict_clean(model, t, z_t, z_scene, bundle)
    changed = ((z_target - z_scene).abs().amax(dim=-3, keepdim=True)
               > change_threshold).to(z_target.dtype)
    w = 1.0 + edit_weight * changed
    if focus is not None:
        w = w + edit_weight * focus.to(z_target.dtype)
    return ((x0_hat - z_target) ** 2 * w).mean() / w.mean()


@torch.no_grad()
def sample(model: UNet, schedule: NoiseSchedule, z_scene: torch.Tensor,
           bundle: ConditionBundle, steps: int = 20, seed: int = 0) -> torch.Tensor:
    """Deterministic DDIM descent; returns images in [0,1].

    The descent starts from the scene latent noised to t=T rather than pure
    noise: training only ever sees noised targets, which even at t=T retain a
    sqrt(alpha_bar_T) trace of the clean image, and the trajectory is unstable
    without that trace. Since the target equals the scene outside the edited
    region, noising the scene is the faithful way to enter the learned
    distribution."""
    gen = torch.Generator().manual_seed(seed)
    s = int(math.isqrt(z_scene.shape[-3] // 3))
    if 3 * s * s != z_scene.shape[-3]:
        raise DimensionMismatch("latent channel count must be 3 * s^2")
    eps0 = torch.randn(z_scene.shape, generator=gen, dtype=z_scene.dtype)
    sa_T, sb_T = schedule.sqrt_terms(torch.tensor(schedule.T), z_scene.dtype)
    z = sa_T * z_scene + sb_T * eps0
    ts = torch.linspace(schedule.T, 0, steps + 1).round().long()
    for i in range(steps):
        t_cur, t_next = int(ts[i]), int(ts[i + 1])
        x0 = predict_clean(model, torch.tensor(t_cur), z, z_scene, bundle)
        sa_cur, sb_cur = schedule.sqrt_terms(torch.tensor(t_cur), z.dtype)
        eps_hat = (z - sa_cur * x0) / sb_cur
        sa_next, sb_next = schedule.sqrt_terms(torch.tensor(t_next), z.dtype)
        z = sa_next * x0 + sb_next * eps_hat
    return decode_latent(z, s=s).clamp(0.0, 1.0)
