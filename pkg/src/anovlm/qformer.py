"""Query transformer: a fixed set of queries cross-attends to a longer
key/value sequence and compresses it into the query count.

Block 1 is cross-attention only; block 2 adds self-attention among the
queries before its cross-attention. Queries arrive in the feature width d and
are projected up to the working width (the LM embedding width); a learned
per-query-index embedding keeps the query slots distinguishable.
"""
from __future__ import annotations

import torch
import torch.nn as nn


class QFormerBlock(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: int, with_self_attn: bool):
        super().__init__()
        self.with_self_attn = with_self_attn
        if with_self_attn:
            self.self_norm = nn.LayerNorm(dim)
            self.self_attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.cross_norm = nn.LayerNorm(dim)
        self.cross_attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.mlp_norm = nn.LayerNorm(dim)
        hidden = dim * mlp_ratio
        self.mlp = nn.Sequential(
            nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, q, kv):
        if self.with_self_attn:
            h = self.self_norm(q)
            q = q + self.self_attn(h, h, h, need_weights=False)[0]
        q = q + self.cross_attn(self.cross_norm(q), kv, kv, need_weights=False)[0]
        return q + self.mlp(self.mlp_norm(q))


class QFormer(nn.Module):
    def __init__(self, dim: int, heads: int, n_blocks: int, mlp_ratio: int,
                 n_queries: int, query_in_dim: int):
        super().__init__()
        self.in_proj = nn.Linear(query_in_dim, dim)
        self.query_pos = nn.Parameter(torch.randn(n_queries, dim) * 0.02)
        self.blocks = nn.ModuleList(
            QFormerBlock(dim, heads, mlp_ratio, with_self_attn=(b > 0))
            for b in range(n_blocks))
        self.out_norm = nn.LayerNorm(dim)

    def forward(self, queries: torch.Tensor, kv: torch.Tensor) -> torch.Tensor:
        """queries [B, n, query_in_dim], kv [B, L, dim] -> [B, n, dim]."""
        q = self.in_proj(queries) + self.query_pos
        for block in self.blocks:
            q = block(q, kv)
        return self.out_norm(q)
