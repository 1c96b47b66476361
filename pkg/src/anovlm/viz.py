"""PNG/CSV dumps for maps and overlays."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def to_u8(values: np.ndarray, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
    arr = (np.clip((values - lo) / (hi - lo), 0.0, 1.0) * 255.0).round()
    return arr.astype(np.uint8)


def save_gray_png(values: np.ndarray, path: str | Path, upscale: int = 1,
                  lo: float = 0.0, hi: float = 1.0) -> None:
    img = Image.fromarray(to_u8(values, lo, hi), mode="L")
    if upscale > 1:
        img = img.resize((img.width * upscale, img.height * upscale),
                         Image.NEAREST)
    img.save(path)


def save_overlay_png(image: np.ndarray, heatmap: np.ndarray,
                     path: str | Path, alpha: float = 0.5) -> None:
    """Composites the heatmap in red over the grayscale source image."""
    base = to_u8(image).astype(np.float64)
    heat = np.clip(heatmap, 0.0, 1.0)
    rgb = np.stack([base, base, base], axis=-1)
    rgb[..., 0] = rgb[..., 0] * (1 - alpha * heat) + 255.0 * alpha * heat
    rgb[..., 1] *= 1 - alpha * heat
    rgb[..., 2] *= 1 - alpha * heat
    Image.fromarray(rgb.round().astype(np.uint8), mode="RGB").save(path)


def save_grid_csv(values: np.ndarray, path: str | Path) -> None:
    np.savetxt(path, values, delimiter=",", fmt="%.6f")


def save_float32_sidecar(values: np.ndarray, path: str | Path) -> None:
    values.astype(np.float32).tofile(path)
