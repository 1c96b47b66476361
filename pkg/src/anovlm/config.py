"""Run configuration: layered defaults -> YAML file -> CLI overrides.

Every run resolves to a single RunConfig; `dump` writes the fully resolved
config (seed included) into the output directory so results can be reproduced
from the artifact alone.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml


@dataclass
class DataConfig:
    image_size: int = 64
    patch_size: int = 8
    abnormal_prob: float = 0.5
    min_contrast: float = 0.45
    max_contrast: float = 0.70
    min_radius: float = 4.5
    max_radius: float = 7.0
    max_blobs: int = 3
    edge_softness: float = 0.7
    brightness_jitter: float = 0.10
    translate_px: int = 2
    worsen_range: tuple = (1.3, 2.0)
    improve_range: tuple = (0.4, 0.8)
    # sample counts per split
    n_backbone: int = 2000
    n_warmup: int = 4000
    n_stage1: int = 6000
    n_stage2: int = 3000
    n_stage3: int = 1000
    n_test_single: int = 1000
    n_test_pair: int = 600


@dataclass
class ModelConfig:
    d_model: int = 64
    n_layers: int = 6
    n_heads: int = 4
    mlp_hidden: int = 256
    tap_layers: tuple = (2, 3, 4, 5)
    n_prompts: int = 10
    pool_size: int = 4
    qformer_blocks: int = 2
    qformer_heads: int = 4
    qformer_mlp_ratio: int = 2
    d_lm: int = 128
    lm_layers: int = 4
    lm_heads: int = 4
    lm_mlp_hidden: int = 256
    lm_context: int = 256
    modulation: str = "shifted"  # {"shifted": (1+map)*x, "raw": map*x}
    projector_adapter: bool = True
    use_ano_tokens: bool = True  # ablation switch: drop <Ano> from sequences
    last_layer_only: bool = False  # ablation: single-tap anomaly scoring


@dataclass
class TrainConfig:
    seed: int = 0
    batch_size: int = 16
    seg_batch_size: int = 32
    lr_stage12: float = 1.0e-4
    lr_stage2: float = 3.0e-4
    lr_stage3: float = 1.0e-3
    weight_decay: float = 0.01
    warmup_frac: float = 0.03
    epochs_backbone: int = 3
    epochs_warmup: int = 3
    epochs_stage1: int = 3
    epochs_stage2: int = 16
    # temporal pairs are order-augmented: swapping the two images maps
    # worsened <-> improved and keeps no_change, so every pair supervises
    # both directions and the nuisance side carries no label information
    pair_swap_prob: float = 0.5
    # nuisance-only pairs sit closest to the decision boundary and lose
    # out under a uniform loss, so their rows are upweighted
    no_change_weight: float = 2.0
    epochs_stage3: int = 100
    grad_clip: float = 1.0
    log_every: int = 50


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    @property
    def grid_size(self) -> int:
        return self.data.image_size // self.data.patch_size

    def split_seed(self, split: str) -> int:
        """Disjoint per-split seeds derived from the base seed.

        Sample seeds are formed as split_seed * 2**20 + index, so distinct
        split seeds give non-overlapping sample seed ranges.
        """
        offsets = {
            "backbone": 101,
            "warmup": 201,
            "stage1": 301,
            "stage2": 401,
            "stage3": 501,
            "test_single": 601,
            "test_pair": 701,
        }
        if split not in offsets:
            raise KeyError(f"unknown split {split!r}")
        return self.train.seed * 1000 + offsets[split]


def _apply_overrides(obj, overrides: dict, path: str = ""):
    for key, value in overrides.items():
        if not hasattr(obj, key):
            raise KeyError(f"unknown config key {path + key!r}")
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current):
            if not isinstance(value, dict):
                raise TypeError(f"{path + key!r} expects a mapping")
            _apply_overrides(current, value, path + key + ".")
        else:
            if isinstance(current, tuple) and isinstance(value, list):
                value = tuple(value)
            setattr(obj, key, value)


def load_config(path: str | Path | None = None, seed: int | None = None) -> RunConfig:
    """Defaults, then YAML overrides from `path`, then explicit seed."""
    cfg = RunConfig()
    if path is not None:
        with open(path) as fh:
            raw = yaml.safe_load(fh) or {}
        if not isinstance(raw, dict):
            raise TypeError(f"config root of {path} must be a mapping")
        _apply_overrides(cfg, raw)
    if seed is not None:
        cfg.train.seed = seed
    return cfg


def dump_config(cfg: RunConfig, path: str | Path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(dataclasses.asdict(cfg), fh, sort_keys=True)
