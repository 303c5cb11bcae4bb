"""Frozen two-tower encoder: the package's stand-in for CLIP/DINO features.

One conv trunk serves three consumers: contrastive image/text similarity
(metric surrogates), perceptual distance (intermediate activations), and the
adapter's image feature rows. It is trained once, then frozen and hash-pinned.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import Tokenizer

__all__ = ["EncoderConfig", "ConvTrunk", "TwoTowerEncoder"]


@dataclass
class EncoderConfig:
    d_e: int = 128
    vocab_size: int = 0  # filled from the tokenizer
    resolution: int = 64
    temperature: float = 0.1

    def to_dict(self) -> dict:
        return dict(self.__dict__)


class ConvTrunk(nn.Module):
    """3-stage strided conv encoder; final map is (d_e, res/8, res/8)."""

    def __init__(self, d_e: int = 128):
        super().__init__()
        chans = (32, 64, d_e)
        self.stages = nn.ModuleList()
        c_in = 3
        for c_out in chans:
            self.stages.append(
                nn.Sequential(
                    nn.Conv2d(c_in, c_out, 3, stride=2, padding=1),
                    nn.GroupNorm(4, c_out),
                    nn.SiLU(),
                )
            )
            c_in = c_out

    def features(self, x: torch.Tensor) -> list[torch.Tensor]:
        """Per-stage activations for x of shape (B, 3, H, W)."""
        feats = []
        h = x
        for stage in self.stages:
            h = stage(h)
            feats.append(h)
        return feats

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.features(x)[-1]


def _to_bchw(img: torch.Tensor) -> torch.Tensor:
    if img.ndim == 3:
        img = img.unsqueeze(0)
    return img.permute(0, 3, 1, 2)


class TwoTowerEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig, tokenizer: Tokenizer):
        super().__init__()
        if cfg.vocab_size == 0:
            cfg.vocab_size = tokenizer.vocab_size
        self.cfg = cfg
        self.tokenizer = tokenizer
        self.trunk = ConvTrunk(cfg.d_e)
        self.img_proj = nn.Linear(cfg.d_e, cfg.d_e)
        self.word_emb = nn.Parameter(torch.empty(cfg.vocab_size, cfg.d_e))
        self.text_proj = nn.Linear(cfg.d_e, cfg.d_e)
        self.log_temp = nn.Parameter(torch.tensor(float(torch.log(torch.tensor(cfg.temperature)))))

    def encode_image(self, img: torch.Tensor) -> torch.Tensor:
        """img: (B, H, W, 3) or (H, W, 3) in [0,1] -> unit-norm (B, d_e)."""
        fmap = self.trunk(_to_bchw(img))
        pooled = fmap.mean(dim=(2, 3))
        z = self.img_proj(pooled)
        return F.normalize(z, dim=-1, eps=1e-8)

    def encode_text(self, texts: list[str]) -> torch.Tensor:
        embs = []
        for text in texts:
            ids = torch.tensor(self.tokenizer.tokenize(text).ids, dtype=torch.long)
            if len(ids) == 0:
                embs.append(torch.zeros(self.cfg.d_e, dtype=self.word_emb.dtype))
            else:
                embs.append(self.word_emb[ids].mean(dim=0))
        z = self.text_proj(torch.stack(embs))
        return F.normalize(z, dim=-1, eps=1e-8)

    def image_feature_rows(self, img: torch.Tensor) -> torch.Tensor:
        """Adapter-facing features: final trunk map as (B, P, d_e) rows."""
        fmap = self.trunk(_to_bchw(img))
        return fmap.flatten(2).transpose(1, 2)

    def perceptual_features(self, img: torch.Tensor) -> list[torch.Tensor]:
        """Unit-normalized per-layer activations for the perceptual distance."""
        feats = self.trunk.features(_to_bchw(img))
        return [F.normalize(f, dim=1, eps=1e-8) for f in feats]

    def contrastive_loss(self, images: torch.Tensor, labels: list[str]) -> torch.Tensor:
        zi = self.encode_image(images)
        zt = self.encode_text(labels)
        logits = zi @ zt.T / torch.exp(self.log_temp)
        targets = torch.arange(len(labels))
        return 0.5 * (F.cross_entropy(logits, targets) + F.cross_entropy(logits.T, targets))

    def freeze(self) -> "TwoTowerEncoder":
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        return self
