"""Anomaly scoring, feature modulation, and `<Ano>` token production.

A learnable abnormal/normal token pair scores every patch of the tapped
feature grids through a shared key projection with a sigmoid on the scaled
dot product. The per-patch anomaly map is the mean over tapped layers of
(abnormal score - normal score), so it lives in (-1, 1). Final-layer features
are rescaled by (1 + map) (config-switchable to raw multiplication), pooled
to p x p anomaly queries, and compressed against the projected visual tokens
by a query transformer plus a 2-layer MLP into p*p `<Ano>` tokens.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig
from .qformer import QFormer


@dataclass
class AnoOut:
    per_layer: list  # [(abnormal [B,G,G], normal [B,G,G]) ...] per scored layer
    map: torch.Tensor  # [B, G, G] in (-1, 1)
    modulated: torch.Tensor  # [B, G, G, d]
    queries: torch.Tensor  # [B, p*p, d]
    tokens: torch.Tensor  # [B, p*p, d_lm]


def pool_grid(grid: torch.Tensor, p: int) -> torch.Tensor:
    """Adaptive average pooling [B, G, G, d] -> [B, p*p, d], row-major."""
    x = grid.permute(0, 3, 1, 2)
    x = F.adaptive_avg_pool2d(x, p)
    return x.flatten(2).transpose(1, 2)


class AnomalyProcessor(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.d_model
        self.cfg = cfg
        self.pool = cfg.pool_size
        self.abnormal_token = nn.Parameter(torch.randn(d) * 0.02)
        self.normal_token = nn.Parameter(torch.randn(d) * 0.02)
        # near-identity start keeps raw features as the scoring basis
        self.key_proj = nn.Linear(d, d, bias=False)
        with torch.no_grad():
            self.key_proj.weight.copy_(torch.eye(d) + torch.randn(d, d) * 0.02)
        self.qformer = QFormer(cfg.d_lm, cfg.qformer_heads, cfg.qformer_blocks,
                               cfg.qformer_mlp_ratio, cfg.pool_size ** 2, d)
        self.out_mlp = nn.Sequential(
            nn.Linear(cfg.d_lm, 2 * cfg.d_lm), nn.GELU(),
            nn.Linear(2 * cfg.d_lm, cfg.d_lm))
        with torch.no_grad():
            self.out_mlp[2].weight.normal_(0, 1e-3)
            self.out_mlp[2].bias.zero_()
        self.scale = 1.0 / math.sqrt(d)

    def set_system_tokens(self, direction: torch.Tensor, scale: float = 1.0):
        """Symmetry-breaking init: abnormal = +s*dir, normal = -s*dir."""
        direction = direction / (direction.norm() + 1e-8)
        with torch.no_grad():
            self.abnormal_token.copy_(direction * scale)
            self.normal_token.copy_(-direction * scale)

    def scored_layers(self, features) -> list:
        if self.cfg.last_layer_only:
            return [features.final]
        return list(features.intermediate)

    def score_patches(self, features) -> list:
        """Per scored layer: (abnormal, normal) sigmoid grids, values in (0,1)."""
        keys_w = self.key_proj.weight
        out = []
        for grid in self.scored_layers(features):
            keys = grid @ keys_w.T  # [B, G, G, d]
            abn = torch.sigmoid((keys @ self.abnormal_token) * self.scale)
            nor = torch.sigmoid((keys @ self.normal_token) * self.scale)
            out.append((abn, nor))
        return out

    @staticmethod
    def build_map(scores: list) -> torch.Tensor:
        diffs = [abn - nor for abn, nor in scores]
        return torch.stack(diffs, dim=0).mean(dim=0)

    def modulate(self, final_grid: torch.Tensor, amap: torch.Tensor) -> torch.Tensor:
        if self.cfg.modulation == "shifted":
            return final_grid * (1.0 + amap).unsqueeze(-1)
        if self.cfg.modulation == "raw":
            return final_grid * amap.unsqueeze(-1)
        raise ValueError(f"unknown modulation mode {self.cfg.modulation!r}")

    def make_tokens(self, modulated: torch.Tensor, proj_tokens: torch.Tensor
                    ) -> tuple[torch.Tensor, torch.Tensor]:
        if self.pool > modulated.shape[1]:
            raise ValueError(f"pool size {self.pool} exceeds grid {modulated.shape[1]}")
        queries = pool_grid(modulated, self.pool)
        tokens = self.out_mlp(self.qformer(queries, proj_tokens))
        return queries, tokens

    def forward(self, features, projector) -> tuple[AnoOut, torch.Tensor]:
        """Returns (AnoOut, projected tokens of the modulated grid)."""
        scores = self.score_patches(features)
        amap = self.build_map(scores)
        assert amap.abs().max() < 1.0, "anomaly map left (-1, 1)"
        modulated = self.modulate(features.final, amap)
        proj = projector(modulated)
        queries, tokens = self.make_tokens(modulated, proj)
        assert torch.isfinite(tokens).all()
        return AnoOut(scores, amap, modulated, queries, tokens), proj
