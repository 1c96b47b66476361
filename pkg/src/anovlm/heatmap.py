"""Grounding decoder: fuse `<Ano>` tokens into the tapped feature grids and
decode a full-resolution evidence heatmap.

Fusion: each intermediate grid's spatial positions cross-attend to the p*p
`<Ano>` tokens (keys/values in the LM width) with a residual connection. The
fused grids are concatenated channel-wise and decoded by ConvNeXt-style
blocks with stepwise 2x upsampling; logits are predicted at half resolution
and bilinearly upsampled the final 2x before the sigmoid. All convolutions
use replicate padding, so a spatially constant input stays constant through
the head (a zero fused input yields a flat heatmap at sigmoid(bias)).
"""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig


class GRN(nn.Module):
    """Global response normalization over spatial positions (channels-last)."""

    def __init__(self, dim: int):
        super().__init__()
        self.gamma = nn.Parameter(torch.zeros(1, 1, 1, dim))
        self.beta = nn.Parameter(torch.zeros(1, 1, 1, dim))

    def forward(self, x):
        gx = torch.norm(x, p=2, dim=(1, 2), keepdim=True)
        nx = gx / (gx.mean(dim=-1, keepdim=True) + 1e-6)
        return self.gamma * (x * nx) + self.beta + x


class ConvNeXtBlock(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.dwconv = nn.Conv2d(dim, dim, 7, padding=3, groups=dim,
                                padding_mode="replicate")
        self.norm = nn.LayerNorm(dim, eps=1e-6)
        self.pwconv1 = nn.Linear(dim, 4 * dim)
        self.act = nn.GELU()
        self.grn = GRN(4 * dim)
        self.pwconv2 = nn.Linear(4 * dim, dim)

    def forward(self, x):  # [B, C, H, W]
        shortcut = x
        x = self.dwconv(x).permute(0, 2, 3, 1)  # channels-last
        x = self.pwconv2(self.grn(self.act(self.pwconv1(self.norm(x)))))
        return shortcut + x.permute(0, 3, 1, 2)


class FusionBlock(nn.Module):
    """Grid positions query the `<Ano>` tokens; one attention per tapped layer."""

    def __init__(self, cfg: ModelConfig, n_layers: int = 4):
        super().__init__()
        self.norms = nn.ModuleList(nn.LayerNorm(cfg.d_model) for _ in range(n_layers))
        self.attns = nn.ModuleList(
            nn.MultiheadAttention(cfg.d_model, cfg.qformer_heads,
                                  kdim=cfg.d_lm, vdim=cfg.d_lm, batch_first=True)
            for _ in range(n_layers))

    def forward(self, grids: list, ano_tokens: torch.Tensor) -> torch.Tensor:
        """grids: n tensors [B, G, G, d]; returns [B, n*d, G, G]."""
        fused = []
        for grid, norm, attn in zip(grids, self.norms, self.attns):
            B, G, _, d = grid.shape
            q = grid.reshape(B, G * G, d)
            out = q + attn(norm(q), ano_tokens, ano_tokens, need_weights=False)[0]
            fused.append(out.reshape(B, G, G, d))
        return torch.cat(fused, dim=-1).permute(0, 3, 1, 2)


class HeatmapDecoder(nn.Module):
    def __init__(self, cfg: ModelConfig, image_size: int, grid_size: int):
        super().__init__()
        self.image_size = image_size
        self.fusion = FusionBlock(cfg)
        c0 = 4 * cfg.d_model
        self.stem = nn.Conv2d(c0, 128, 1)
        self.blocks8 = nn.Sequential(ConvNeXtBlock(128), ConvNeXtBlock(128))
        self.reduce16 = nn.Conv2d(128, 48, 1)
        self.block16 = ConvNeXtBlock(48)
        self.reduce32 = nn.Conv2d(48, 16, 1)
        self.conv32 = nn.Conv2d(16, 16, 3, padding=1, padding_mode="replicate")
        self.out_conv = nn.Conv2d(16, 1, 1)
        with torch.no_grad():
            self.out_conv.bias.fill_(-2.0)  # start near-empty maps

    def head(self, fused: torch.Tensor) -> torch.Tensor:
        """[B, 4d, G, G] -> logits [B, H, W]."""
        x = self.blocks8(self.stem(fused))
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        x = self.block16(self.reduce16(x))
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        x = F.gelu(self.conv32(self.reduce32(x)))
        logits = self.out_conv(x)
        logits = F.interpolate(logits, size=self.image_size, mode="bilinear",
                               align_corners=False)
        return logits.squeeze(1)

    def forward(self, features, ano_tokens: torch.Tensor) -> torch.Tensor:
        """Returns logits [B, H, W]; sigmoid gives the heatmap."""
        fused = self.fusion(features.intermediate, ano_tokens)
        return self.head(fused)

    def decode(self, features, ano_tokens: torch.Tensor) -> torch.Tensor:
        heatmap = torch.sigmoid(self.forward(features, ano_tokens))
        assert heatmap.min() >= 0 and heatmap.max() <= 1
        return heatmap


# --- losses ---------------------------------------------------------------

def _check_mask(mask: torch.Tensor):
    if not torch.all((mask == 0) | (mask == 1)):
        raise ValueError("mask must be {0,1}-valued")


def dice_loss(pred: torch.Tensor, mask: torch.Tensor, eps: float = 1.0) -> torch.Tensor:
    """Soft Dice on probabilities; smoothing eps keeps empty masks finite."""
    _check_mask(mask)
    pred = pred.flatten(-2)
    mask = mask.flatten(-2).to(pred.dtype)
    inter = (pred * mask).sum(-1)
    denom = pred.sum(-1) + mask.sum(-1)
    return (1.0 - (2.0 * inter + eps) / (denom + eps)).mean()


def bce_loss(pred: torch.Tensor, mask: torch.Tensor, eps: float = 1e-7) -> torch.Tensor:
    _check_mask(mask)
    pred = pred.clamp(eps, 1.0 - eps)
    mask = mask.to(pred.dtype)
    return -(mask * pred.log() + (1 - mask) * (1 - pred).log()).mean()


def dice_ce_loss(pred: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Equal-weight mean of soft-Dice and pixel BCE; pred holds probabilities."""
    return 0.5 * (dice_loss(pred, mask) + bce_loss(pred, mask))


def dice_ce_from_logits(logits: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Training form: BCE straight from logits for numerical stability."""
    _check_mask(mask)
    mask = mask.to(logits.dtype)
    bce = F.binary_cross_entropy_with_logits(logits, mask)
    return 0.5 * (dice_loss(torch.sigmoid(logits), mask) + bce)
