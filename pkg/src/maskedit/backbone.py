"""Token-augmented causal transformer over scene, subject, mask and text.

The base weights play the role of a frozen pretrained model; only LoRA
deltas, the image-token embeddings, and the mask patch projection (a new
input modality with no pretrained counterpart) are trainable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import Tokenizer
from .errors import AlignmentError, DimensionMismatch, NonFiniteActivation

__all__ = ["BackboneConfig", "LoRALinear", "ToyVLLM", "deterministic_init"]


@dataclass
class BackboneConfig:
    vocab_size: int
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    n_image_tokens: int = 8
    patch_size: int = 8
    resolution: int = 64
    lora_rank: int = 4
    lora_alpha: float = 8.0
    max_seq_len: int = 320

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.n_image_tokens < 1 or self.lora_rank < 1:
            raise ValueError("n_image_tokens and lora_rank must be >= 1")
        if self.resolution % self.patch_size:
            raise ValueError("patch_size must divide resolution")

    @property
    def n_patches(self) -> int:
        return (self.resolution // self.patch_size) ** 2

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def deterministic_init(model: nn.Module, seed: int) -> None:
    """Fill parameters from a PCG64 stream, in sorted name order.

    Keeps initialization identical across platforms and torch versions.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    for name, p in sorted(model.named_parameters(), key=lambda kv: kv[0]):
        with torch.no_grad():
            if "lora_a" in name:
                p.zero_()
            elif p.ndim >= 2:
                fan_in = p.shape[-1]
                std = 1.0 / math.sqrt(fan_in)
                if "emb" in name or "queries" in name:
                    std = 0.1
                vals = rng.standard_normal(tuple(p.shape)) * std
                p.copy_(torch.as_tensor(vals, dtype=p.dtype))
            elif "weight" in name:  # layer norms
                p.fill_(1.0)
            else:
                p.zero_()


class LoRALinear(nn.Module):
    """Frozen linear plus trainable low-rank delta W + (alpha/rank) * B @ A.

    A is zero-initialized, so a freshly wrapped layer computes exactly the
    base mapping.
    """

    def __init__(self, in_features: int, out_features: int, rank: int, alpha: float,
                 bias: bool = True):
        super().__init__()
        if rank >= in_features:
            raise ValueError("lora rank must be < in_features")
        self.base = nn.Linear(in_features, out_features, bias=bias)
        self.base.weight.requires_grad_(False)
        if bias:
            self.base.bias.requires_grad_(False)
        self.lora_a = nn.Parameter(torch.zeros(rank, in_features))
        self.lora_b = nn.Parameter(torch.empty(out_features, rank))
        self.scaling = alpha / rank

    def forward(self, x):
        return self.base(x) + self.scaling * F.linear(F.linear(x, self.lora_a), self.lora_b)

    def effective_weight(self) -> torch.Tensor:
        return self.base.weight + self.scaling * self.lora_b @ self.lora_a


class CausalSelfAttention(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        d, r, a = cfg.d_model, cfg.lora_rank, cfg.lora_alpha
        self.n_heads = cfg.n_heads
        self.head_dim = d // cfg.n_heads
        self.q = LoRALinear(d, d, r, a)
        self.k = LoRALinear(d, d, r, a)
        self.v = LoRALinear(d, d, r, a)
        self.o = LoRALinear(d, d, r, a)

    def forward(self, x, pad_mask: Optional[torch.Tensor] = None):
        b, t, d = x.shape
        def split(z):
            return z.view(b, t, self.n_heads, self.head_dim).transpose(1, 2)
        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        causal = torch.triu(torch.ones(t, t, dtype=torch.bool, device=x.device), 1)
        scores = scores.masked_fill(causal, float("-inf"))
        if pad_mask is not None:
            scores = scores.masked_fill(~pad_mask[:, None, None, :], float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, t, d)
        return self.o(out)


class Block(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        d = cfg.d_model
        self.ln1 = nn.LayerNorm(d)
        self.attn = CausalSelfAttention(cfg)
        self.ln2 = nn.LayerNorm(d)
        self.mlp = nn.Sequential(nn.Linear(d, 2 * d), nn.GELU(), nn.Linear(2 * d, d))
        for p in self.mlp.parameters():
            p.requires_grad_(False)
        for p in self.ln1.parameters():
            p.requires_grad_(False)
        for p in self.ln2.parameters():
            p.requires_grad_(False)

    def forward(self, x, pad_mask=None):
        x = x + self.attn(self.ln1(x), pad_mask)
        return x + self.mlp(self.ln2(x))


# Stream type indices for additive stream embeddings.
STREAM_SCENE, STREAM_SUBJECT, STREAM_MASK, STREAM_TEXT = 0, 1, 2, 3


class ToyVLLM(nn.Module):
    def __init__(self, cfg: BackboneConfig, tokenizer: Tokenizer, seed: int = 0):
        super().__init__()
        if tokenizer.vocab_size != cfg.vocab_size:
            raise ValueError("config vocab_size disagrees with tokenizer")
        self.cfg = cfg
        self.tokenizer = tokenizer
        d, p = cfg.d_model, cfg.patch_size
        self.base_vocab = cfg.vocab_size - cfg.n_image_tokens

        self.patch_proj = nn.Linear(3 * p * p, d)
        self.mask_proj = nn.Linear(p * p, d)
        self.tok_emb = nn.Parameter(torch.empty(self.base_vocab, d))
        self.new_tok_emb = nn.Parameter(torch.empty(cfg.n_image_tokens, d))
        self.stream_emb = nn.Parameter(torch.empty(4, d))
        self.tag_emb = nn.Parameter(torch.empty(3, d))  # scene / subject / mask tags
        self.pos_emb = nn.Parameter(torch.empty(cfg.max_seq_len, d))
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers))
        self.ln_f = nn.LayerNorm(d)
        self.lm_head = nn.Linear(d, cfg.vocab_size, bias=False)

        deterministic_init(self, seed)
        # Frozen backbone: everything except LoRA deltas, the image-token
        # embeddings, and the (new-modality) mask patch projection.
        for name, param in self.named_parameters():
            trainable = (
                "lora_" in name or name == "new_tok_emb" or name.startswith("mask_proj")
            )
            param.requires_grad_(trainable)

    # -- embedding ---------------------------------------------------------

    def _patches(self, img: torch.Tensor, channels: int) -> torch.Tensor:
        from einops import rearrange

        p = self.cfg.patch_size
        return rearrange(img, "... (hh p1) (ww p2) c -> ... (hh ww) (p1 p2 c)", p1=p, p2=p)

    def embed_tokens(self, ids: torch.Tensor) -> torch.Tensor:
        ids = ids.long()
        emb = torch.empty(*ids.shape, self.cfg.d_model, dtype=self.tok_emb.dtype,
                          device=ids.device)
        is_new = ids >= self.base_vocab
        emb[~is_new] = self.tok_emb[ids[~is_new]]
        if is_new.any():
            emb[is_new] = self.new_tok_emb[ids[is_new] - self.base_vocab]
        return emb

    def embed_inputs(self, x1: torch.Tensor, x2: Optional[torch.Tensor],
                     m: torch.Tensor, tau_ids: torch.Tensor) -> torch.Tensor:
        """Prompt embedding sequence: [tag+scene][tag+subject?][tag+mask][text]."""
        res = self.cfg.resolution
        if x1.shape != (res, res, 3) or m.shape != (res, res):
            raise DimensionMismatch(
                f"expected scene ({res},{res},3) and mask ({res},{res}), "
                f"got {tuple(x1.shape)} and {tuple(m.shape)}"
            )
        dtype = self.tok_emb.dtype
        parts = []

        scene = self.patch_proj(self._patches(x1.to(dtype), 3)) + self.stream_emb[STREAM_SCENE]
        parts.append(torch.cat([self.tag_emb[0:1] + self.stream_emb[STREAM_SCENE], scene]))
        if x2 is not None:
            if x2.shape != (res, res, 3):
                raise DimensionMismatch(f"bad subject shape {tuple(x2.shape)}")
            subj = self.patch_proj(self._patches(x2.to(dtype), 3)) + self.stream_emb[STREAM_SUBJECT]
            parts.append(torch.cat([self.tag_emb[1:2] + self.stream_emb[STREAM_SUBJECT], subj]))
        mask = self.mask_proj(self._patches(m.to(dtype).unsqueeze(-1), 1))
        mask = mask + self.stream_emb[STREAM_MASK]
        parts.append(torch.cat([self.tag_emb[2:3] + self.stream_emb[STREAM_MASK], mask]))
        parts.append(self.embed_tokens(tau_ids) + self.stream_emb[STREAM_TEXT])
        return torch.cat(parts, dim=0)

    # -- transformer -------------------------------------------------------

    def forward(self, seq: torch.Tensor, pad_mask: Optional[torch.Tensor] = None):
        """seq: (B, L, d) or (L, d). Returns (logits, final hidden states)."""
        squeeze = seq.ndim == 2
        if squeeze:
            seq = seq.unsqueeze(0)
        if seq.shape[1] == 0:
            raise DimensionMismatch("empty sequence")
        if seq.shape[1] > self.cfg.max_seq_len:
            raise DimensionMismatch(
                f"sequence length {seq.shape[1]} exceeds max {self.cfg.max_seq_len}"
            )
        h = seq + self.pos_emb[: seq.shape[1]]
        for block in self.blocks:
            h = block(h, pad_mask)
        h = self.ln_f(h)
        logits = self.lm_head(h)
        if not torch.isfinite(logits).all():
            raise NonFiniteActivation("non-finite logits in backbone forward")
        if squeeze:
            return logits.squeeze(0), h.squeeze(0)
        return logits, h

    # -- losses / generation ------------------------------------------------

    def vllm_loss(self, logits: torch.Tensor, response_ids: torch.Tensor,
                  response_start: int) -> torch.Tensor:
        """Mean next-token NLL of the response span.

        logits: (L, V); response occupies positions
        [response_start, response_start + len(response_ids)).
        """
        n = response_ids.shape[0]
        if response_start < 1 or response_start + n > logits.shape[0] + 1:
            raise AlignmentError("response span does not fit the sequence")
        pred = logits[response_start - 1 : response_start - 1 + n]
        return F.cross_entropy(pred, response_ids.long())

    def sequence_for_training(self, x1, x2, m, tau_ids, response_ids):
        """(embeddings, response_start) with the response teacher-forced."""
        prompt = self.embed_inputs(x1, x2, m, tau_ids)
        resp = self.embed_tokens(response_ids) + self.stream_emb[STREAM_TEXT]
        return torch.cat([prompt, resp], dim=0), prompt.shape[0]

    @torch.no_grad()
    def generate_response(self, x1, x2, m, tau_ids, max_len: int = 16):
        """Greedy decode, then force-append the N image tokens.

        Returns (generated text ids without EOS, HiddenStates (N, d)).
        """
        prompt = self.embed_inputs(x1, x2, m, tau_ids)
        seq = prompt
        text_ids: list[int] = []
        eos = self.tokenizer.eos_id
        image_ids = torch.tensor(self.tokenizer.image_token_ids)
        for _ in range(max_len):
            logits, _ = self.forward(seq)
            # Image tokens are force-appended afterwards; never sample them.
            nxt_logits = logits[-1].clone()
            nxt_logits[self.base_vocab :] = float("-inf")
            nxt = int(torch.argmax(nxt_logits))
            seq = torch.cat([seq, self.embed_tokens(torch.tensor([nxt]))
                             + self.stream_emb[STREAM_TEXT]], dim=0)
            if nxt == eos:
                break
            text_ids.append(nxt)
        seq = torch.cat(
            [seq, self.embed_tokens(image_ids) + self.stream_emb[STREAM_TEXT]], dim=0
        )
        _, hidden = self.forward(seq)
        H = hidden[-self.cfg.n_image_tokens :]
        return text_ids, H

    def hidden_states_at(self, hidden: torch.Tensor, response_start: int,
                         response_len: int) -> torch.Tensor:
        """Final-layer activations at the N trailing image-token input positions."""
        end = response_start + response_len
        return hidden[end - self.cfg.n_image_tokens : end]
