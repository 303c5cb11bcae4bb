"""Mask-enhanced adapter: fuses edit embeddings with scene/subject features
and conditions the UNet through decoupled cross-attention.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import math
import torch
import torch.nn as nn

from .encoder import TwoTowerEncoder
from .errors import DimensionMismatch

__all__ = ["MEAConfig", "ConditionBundle", "MaskEnhancedAdapter", "DecoupledCrossAttention"]


@dataclass
class MEAConfig:
    d_e: int = 128
    lambda_multi: float = 1.0
    eq6_residual: bool = True   # add e back onto the scene attention output
    share_branch_kv: bool = False
    ablation: str = "full"      # full | no_ca | no_dca

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class ConditionBundle:
    """f1: (B, K, d_e) scene-fused features; f2: (B, P, d_e) subject features
    (all-zero in single-image mode); lam: (B,) per-sample branch weight."""

    f1: torch.Tensor
    f2: torch.Tensor
    lam: torch.Tensor


def _attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    scores = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
    return torch.softmax(scores, dim=-1) @ v


class DecoupledCrossAttention(nn.Module):
    """Two parallel single-head attention branches over f1 and f2, summed with
    weight lam. Branch-2 projections start as copies of branch-1 (or are
    literally shared when share_kv is set)."""

    def __init__(self, d_query: int, d_e: int, share_kv: bool = False):
        super().__init__()
        self.to_q = nn.Linear(d_query, d_e, bias=False)
        self.to_k1 = nn.Linear(d_e, d_e, bias=False)
        self.to_v1 = nn.Linear(d_e, d_e, bias=False)
        if share_kv:
            self.to_k2, self.to_v2 = self.to_k1, self.to_v1
        else:
            self.to_k2 = nn.Linear(d_e, d_e, bias=False)
            self.to_v2 = nn.Linear(d_e, d_e, bias=False)
        self.to_out = nn.Linear(d_e, d_query, bias=False)
        self.share_kv = share_kv

    def copy_branch2_from_branch1(self):
        if not self.share_kv:
            with torch.no_grad():
                self.to_k2.weight.copy_(self.to_k1.weight)
                self.to_v2.weight.copy_(self.to_v1.weight)

    def forward(self, z: torch.Tensor, bundle: ConditionBundle) -> torch.Tensor:
        """z: (B, L, d_query) -> (B, L, d_query)."""
        q = self.to_q(z)
        branch1 = _attention(q, self.to_k1(bundle.f1), self.to_v1(bundle.f1))
        branch2 = _attention(q, self.to_k2(bundle.f2), self.to_v2(bundle.f2))
        lam = bundle.lam.view(-1, 1, 1).to(branch2.dtype)
        return self.to_out(branch1 + lam * branch2)


class ConcatCrossAttention(nn.Module):
    """Ablation replacement: one attention over the concatenated rows [f1; f2]."""

    def __init__(self, d_query: int, d_e: int):
        super().__init__()
        self.to_q = nn.Linear(d_query, d_e, bias=False)
        self.to_k = nn.Linear(d_e, d_e, bias=False)
        self.to_v = nn.Linear(d_e, d_e, bias=False)
        self.to_out = nn.Linear(d_e, d_query, bias=False)

    def forward(self, z: torch.Tensor, bundle: ConditionBundle) -> torch.Tensor:
        kv = torch.cat([bundle.f1, bundle.f2], dim=1)
        q = self.to_q(z)
        return self.to_out(_attention(q, self.to_k(kv), self.to_v(kv)))


class MaskEnhancedAdapter(nn.Module):
    def __init__(self, cfg: MEAConfig, n_attention_sites: int,
                 unet_channels: list[int]):
        super().__init__()
        if len(unet_channels) != n_attention_sites:
            raise ValueError("one channel width per attention site")
        d = cfg.d_e
        self.cfg = cfg
        self.w_q1 = nn.Linear(d, d, bias=False)
        self.w_k1 = nn.Linear(d, d, bias=False)
        self.w_v1 = nn.Linear(d, d, bias=False)
        self.subject_proj = nn.Linear(d, d, bias=True)
        if cfg.ablation == "no_dca":
            self.dca = nn.ModuleList(
                ConcatCrossAttention(c, d) for c in unet_channels
            )
        else:
            self.dca = nn.ModuleList(
                DecoupledCrossAttention(c, d, cfg.share_branch_kv) for c in unet_channels
            )

    def init_branch2(self):
        """IP-adapter style: branch-2 K/V start as copies of branch-1."""
        for site in self.dca:
            if isinstance(site, DecoupledCrossAttention):
                site.copy_branch2_from_branch1()

    def scene_cross_attention(self, e: torch.Tensor, scene_feats: torch.Tensor) -> torch.Tensor:
        """e: (B, K, d_e), scene_feats: (B, P, d_e) -> f1: (B, K, d_e)."""
        if e.shape[-1] != self.cfg.d_e or scene_feats.shape[-1] != self.cfg.d_e:
            raise DimensionMismatch("embedding width mismatch")
        if self.cfg.ablation == "no_ca":
            return e
        attn = _attention(self.w_q1(e), self.w_k1(scene_feats), self.w_v1(scene_feats))
        return e + attn if self.cfg.eq6_residual else attn

    def subject_project(self, subject_feats: Optional[torch.Tensor],
                        like: torch.Tensor) -> torch.Tensor:
        """Per-row affine map to d_e; all-zero rows when the subject is absent."""
        if subject_feats is None:
            b = like.shape[0]
            p = like.shape[1]
            return torch.zeros(b, p, self.cfg.d_e, dtype=like.dtype, device=like.device)
        return self.subject_proj(subject_feats)

    def condition(self, x1: torch.Tensor, x2: Optional[torch.Tensor],
                  e: torch.Tensor, embedder: TwoTowerEncoder,
                  lam: Optional[torch.Tensor] = None) -> ConditionBundle:
        """Full adapter pass for a batch; x2 may be None (single-image mode).

        When x2 is a batch with per-sample presence, pass a (B,) lam instead.
        """
        if e.ndim == 2:
            e = e.unsqueeze(0)
        scene_feats = embedder.image_feature_rows(x1).to(e.dtype)
        f1 = self.scene_cross_attention(e, scene_feats)
        if x2 is None:
            f2 = self.subject_project(None, scene_feats[:, :1])
            lam_out = torch.zeros(e.shape[0], dtype=e.dtype, device=e.device)
        else:
            # The subject enters as its pooled contrastive embedding (a single
            # key/value row): the identity of the subject is a global property
            # and the pooled embedding is far easier for the denoiser's
            # cross-attention to read than a grid of spatial rows. A second,
            # all-zero row acts as an attention sink: softmax between the
            # subject row and the null row gives every query a learned,
            # position-dependent gate on how much subject signal it takes,
            # which a single row (weight identically 1) cannot provide.
            subject_feats = embedder.encode_image(x2).unsqueeze(1).to(e.dtype)
            row = self.subject_project(subject_feats, scene_feats[:, :1])
            f2 = torch.cat([row, torch.zeros_like(row)], dim=1)
            lam_out = torch.full((e.shape[0],), self.cfg.lambda_multi,
                                 dtype=e.dtype, device=e.device)
        if lam is not None:
            lam_out = lam.to(e.dtype)
            # single-image rows carry no subject signal
            f2 = f2 * (lam_out.view(-1, 1, 1) != 0)
        return ConditionBundle(f1=f1, f2=f2, lam=lam_out)
