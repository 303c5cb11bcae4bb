"""Query bridge: refine backbone hidden states into diffusion-side embeddings."""

from __future__ import annotations

from dataclasses import dataclass

import math
import torch
import torch.nn as nn

from .errors import DimensionMismatch

__all__ = ["BridgeConfig", "QueryBridge"]


@dataclass
class BridgeConfig:
    n_queries: int = 8
    d_e: int = 128
    n_blocks: int = 2
    n_heads: int = 4
    n_inputs: int = 8  # rows of the hidden-state matrix it attends over

    def to_dict(self) -> dict:
        return dict(self.__dict__)


class CrossAttention(nn.Module):
    def __init__(self, d: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = d // n_heads
        self.to_q = nn.Linear(d, d)
        self.to_k = nn.Linear(d, d)
        self.to_v = nn.Linear(d, d)
        self.to_out = nn.Linear(d, d)

    def forward(self, q_in: torch.Tensor, kv_in: torch.Tensor) -> torch.Tensor:
        nq, d = q_in.shape
        nk = kv_in.shape[0]
        def split(z, n):
            return z.view(n, self.n_heads, self.head_dim).transpose(0, 1)
        q = split(self.to_q(q_in), nq)
        k = split(self.to_k(kv_in), nk)
        v = split(self.to_v(kv_in), nk)
        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(self.head_dim), dim=-1)
        out = (attn @ v).transpose(0, 1).reshape(nq, d)
        return self.to_out(out)


class BridgeBlock(nn.Module):
    def __init__(self, cfg: BridgeConfig):
        super().__init__()
        d = cfg.d_e
        self.attn = CrossAttention(d, cfg.n_heads)
        self.ln1 = nn.LayerNorm(d)
        self.ff = nn.Sequential(nn.Linear(d, 2 * d), nn.GELU(), nn.Linear(2 * d, d))
        self.ln2 = nn.LayerNorm(d)

    def forward(self, q, kv):
        q = self.ln1(q + self.attn(q, kv))
        return self.ln2(q + self.ff(q))


class QueryBridge(nn.Module):
    """A bank of learned queries cross-attending to the hidden-state rows.

    Input rows get positional encodings before attention so row order
    survives the bridge.
    """

    def __init__(self, cfg: BridgeConfig):
        super().__init__()
        self.cfg = cfg
        self.queries = nn.Parameter(torch.empty(cfg.n_queries, cfg.d_e))
        self.input_pos = nn.Parameter(torch.empty(cfg.n_inputs, cfg.d_e))
        self.blocks = nn.ModuleList(BridgeBlock(cfg) for _ in range(cfg.n_blocks))

    def forward(self, hidden: torch.Tensor) -> torch.Tensor:
        if hidden.ndim != 2 or hidden.shape[1] != self.cfg.d_e:
            raise DimensionMismatch(f"expected (N, {self.cfg.d_e}), got {tuple(hidden.shape)}")
        if hidden.shape[0] > self.cfg.n_inputs:
            raise DimensionMismatch(
                f"{hidden.shape[0]} hidden rows > configured {self.cfg.n_inputs}"
            )
        kv = hidden + self.input_pos[: hidden.shape[0]]
        q = self.queries
        for block in self.blocks:
            q = block(q, kv)
        return q

    bridge = forward
