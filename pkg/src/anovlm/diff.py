"""Temporal contrast: pooled feature differences -> `<Diff>` tokens.

Diff queries are the adaptive p x p pooling of (modulated_2 - modulated_1),
so identical inputs give exactly zero queries and swapping the pair negates
them. The query transformer attends over the concatenation of both images'
projected tokens, tagged with a learned 2-way image embedding so keys are
attributable to their source image.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .anomaly import pool_grid
from .config import ModelConfig
from .qformer import QFormer


@dataclass
class DiffOut:
    queries: torch.Tensor  # [B, p*p, d], antisymmetric in the pair order
    tokens: torch.Tensor  # [B, p*p, d_lm]


class DiffProcessor(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.pool = cfg.pool_size
        self.image_embed = nn.Parameter(torch.randn(2, cfg.d_lm) * 0.02)
        self.qformer = QFormer(cfg.d_lm, cfg.qformer_heads, cfg.qformer_blocks,
                               cfg.qformer_mlp_ratio, cfg.pool_size ** 2,
                               cfg.d_model)
        self.out_mlp = nn.Sequential(
            nn.Linear(cfg.d_lm, 2 * cfg.d_lm), nn.GELU(),
            nn.Linear(2 * cfg.d_lm, cfg.d_lm))
        with torch.no_grad():
            self.out_mlp[2].weight.normal_(0, 1e-3)
            self.out_mlp[2].bias.zero_()

    def forward(self, mod1: torch.Tensor, mod2: torch.Tensor,
                proj1: torch.Tensor, proj2: torch.Tensor) -> DiffOut:
        if mod1.shape != mod2.shape:
            raise ValueError(f"grid shapes differ: {mod1.shape} vs {mod2.shape}")
        queries = pool_grid(mod2 - mod1, self.pool)
        kv = torch.cat([proj1 + self.image_embed[0], proj2 + self.image_embed[1]],
                       dim=1)
        tokens = self.out_mlp(self.qformer(queries, kv))
        assert torch.isfinite(tokens).all()
        return DiffOut(queries, tokens)
