"""Patch-transformer encoder with multi-layer taps and visual soft prompts.

6 pre-norm blocks at width 64. Feature grids are tapped from layers 2..5
(1-indexed) plus the final layer, giving 5 grids of [G, G, d]. Soft prompts
are prepended to the token sequence of each tapped layer only, join attention
there, and are stripped again after the block, so returned grids always hold
exactly G*G patch positions. The encoder is trained once on an image-level
normal/abnormal objective and frozen for all later stages.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .config import ModelConfig


@dataclass
class PatchFeatureSet:
    layers: list  # 5 tensors [B, G, G, d]
    layer_indices: tuple  # 1-indexed encoder layers, strictly increasing
    grid_size: int
    dim: int

    def __post_init__(self):
        assert len(self.layers) == 5
        assert all(a < b for a, b in zip(self.layer_indices, self.layer_indices[1:]))

    @property
    def intermediate(self):
        return self.layers[:-1]

    @property
    def final(self):
        return self.layers[-1]


class EncoderBlock(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_hidden: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, mlp_hidden), nn.GELU(), nn.Linear(mlp_hidden, dim))

    def forward(self, x):
        h = self.norm1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        return x + self.mlp(self.norm2(x))


class SoftPromptBank(nn.Module):
    """n_p learnable vectors per tapped layer; n_p = 0 disables injection."""

    def __init__(self, n_layers: int, n_prompts: int, dim: int):
        super().__init__()
        self.n_prompts = n_prompts
        self.prompts = nn.Parameter(torch.randn(n_layers, max(n_prompts, 1), dim) * 0.02)

    def layer_prompts(self, slot: int, batch: int) -> torch.Tensor | None:
        if self.n_prompts == 0:
            return None
        return self.prompts[slot, :self.n_prompts].unsqueeze(0).expand(batch, -1, -1)


class PatchEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig, image_size: int, patch_size: int):
        super().__init__()
        self.cfg = cfg
        self.grid = image_size // patch_size
        self.patch_embed = nn.Conv2d(1, cfg.d_model, patch_size, stride=patch_size)
        self.pos_embed = nn.Parameter(torch.randn(self.grid ** 2, cfg.d_model) * 0.02)
        self.blocks = nn.ModuleList(
            EncoderBlock(cfg.d_model, cfg.n_heads, cfg.mlp_hidden)
            for _ in range(cfg.n_layers))
        self.final_norm = nn.LayerNorm(cfg.d_model)
        self.cls_head = nn.Linear(cfg.d_model, 1)  # pretraining head only
        self.tap_layers = tuple(cfg.tap_layers)

    def encode(self, images: torch.Tensor,
               prompts: SoftPromptBank | None = None) -> PatchFeatureSet:
        """images [B, H, W] in [0,1] -> 5 tapped grids [B, G, G, d]."""
        if images.dim() == 2:
            images = images.unsqueeze(0)
        if images.min() < 0 or images.max() > 1:
            raise ValueError("image values must lie in [0, 1]")
        B = images.shape[0]
        x = self.patch_embed(images.unsqueeze(1))  # [B, d, G, G]
        x = x.flatten(2).transpose(1, 2) + self.pos_embed  # [B, G*G, d]
        taps = []
        for i, block in enumerate(self.blocks, start=1):
            p = None
            if prompts is not None and i in self.tap_layers:
                p = prompts.layer_prompts(self.tap_layers.index(i), B)
            if p is not None:
                x = block(torch.cat([p, x], dim=1))[:, p.shape[1]:]
            else:
                x = block(x)
            if i in self.tap_layers:
                taps.append(x)
        final = self.final_norm(x)
        grids = [t.reshape(B, self.grid, self.grid, -1) for t in taps + [final]]
        indices = self.tap_layers + (len(self.blocks),)
        return PatchFeatureSet(grids, indices, self.grid, self.cfg.d_model)

    def classify(self, features: PatchFeatureSet) -> torch.Tensor:
        """Image-level abnormality logit from the mean-pooled final grid."""
        pooled = features.final.flatten(1, 2).mean(dim=1)
        return self.cls_head(pooled).squeeze(-1)

    def freeze(self):
        self.requires_grad_(False)
        for p in self.parameters():
            p.grad = None
        self.eval()
        return self
