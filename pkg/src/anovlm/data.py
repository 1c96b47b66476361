"""Synthetic grayscale corpus: single images and longitudinal pairs.

Images are 64x64 float32 in [0,1], quantized to a 1/255 grid at generation
time so the uint8 storage in corpus containers round-trips bit-exactly.
Abnormal images carry 1..3 bright elliptical blobs; the ground-truth mask is
exactly the rasterized blob support. Pairs share the same background and blob
geometry up to an area scaling (worsened grows, improved shrinks) and a
nuisance transform on the second image (global brightness scale plus a small
cyclic translation) that must never flip the progression label.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .config import DataConfig
from .container import CORPUS_MAGIC, read_container, write_container

PAIR_LABELS = ("no_change", "improved", "worsened")

SINGLE_QUESTION = "Is there any abnormality in this image?"
PAIR_QUESTION = (
    "What is the condition of the lesion region across the two images? "
    "A: No significant change, B: Improved, C: Worsened."
)

LOCATIONS = ("upper left", "upper right", "lower left", "lower right", "central")

NORMAL_ANSWER = "No, the image appears normal."
PAIR_ANSWERS = {
    "no_change": "A: No significant change.",
    "improved": "B: Improved.",
    "worsened": "C: Worsened.",
}


def abnormal_answer(loc: str) -> str:
    return f"Yes, there is an abnormality in the {loc} region."


@dataclass
class Blob:
    cy: float
    cx: float
    ry: float  # semi-axis along y
    rx: float
    theta: float
    contrast: float
    softness: float = 0.5  # width of the boundary ramp in normalized r^2


@dataclass
class SingleSample:
    image: np.ndarray  # [H, W] float32, values on the k/255 grid
    mask: np.ndarray  # [H, W] uint8 in {0, 1}
    label: int  # 1 abnormal, 0 normal
    question: str
    answer: str
    location: str | None
    seed: int


@dataclass
class PairSample:
    image1: np.ndarray
    image2: np.ndarray
    mask1: np.ndarray
    mask2: np.ndarray
    label: str  # one of PAIR_LABELS
    question: str
    answer: str
    brightness: float  # multiplicative factor applied to image2
    shift: tuple[int, int]  # (dy, dx) cyclic translation of image2
    seed: int


def _quantize(img: np.ndarray) -> np.ndarray:
    return (np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    sigma = rng.uniform(2.0, 4.0)
    base = gaussian_filter(rng.standard_normal((size, size)), sigma)
    base = base / (base.std() + 1e-8) * rng.uniform(0.03, 0.07)
    return base + rng.uniform(0.35, 0.50)

def _blob_fields(blob: Blob, size: int) -> tuple[np.ndarray, np.ndarray]:
    """Returns (mask bool, additive intensity) for one ellipse."""
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = ys - blob.cy, xs - blob.cx
    ct, st = np.cos(blob.theta), np.sin(blob.theta)
    u = (ct * dy + st * dx) / blob.ry
    v = (-st * dy + ct * dx) / blob.rx
    r2 = u * u + v * v
    mask = r2 <= 1.0
    # full contrast on the plateau, linear ramp to zero at the boundary; a
    # soft edge keeps translation dipoles weaker than area-change rings
    profile = np.clip((1.0 - r2) / blob.softness, 0.0, 1.0)
    return mask, blob.contrast * profile


def _sample_blobs(rng: np.random.Generator, cfg: DataConfig) -> list[Blob]:
    n = int(rng.integers(1, cfg.max_blobs + 1))
    # keep blobs clear of the border even after worst-case growth + translation
    grow = float(np.sqrt(max(cfg.worsen_range)))
    margin = cfg.max_radius * grow + cfg.translate_px + 2.0
    lo, hi = margin, cfg.image_size - margin
    blobs = []
    for _ in range(n):
        blobs.append(Blob(
            cy=rng.uniform(lo, hi),
            cx=rng.uniform(lo, hi),
            ry=rng.uniform(cfg.min_radius, cfg.max_radius),
            rx=rng.uniform(cfg.min_radius, cfg.max_radius),
            theta=rng.uniform(0.0, np.pi),
            contrast=rng.uniform(cfg.min_contrast, cfg.max_contrast),
            softness=cfg.edge_softness,
        ))
    return blobs


def _render(background: np.ndarray, blobs: list[Blob], scale: float = 1.0
            ) -> tuple[np.ndarray, np.ndarray]:
    size = background.shape[0]
    img = background.copy()
    mask = np.zeros((size, size), dtype=bool)
    for blob in blobs:
        scaled = Blob(blob.cy, blob.cx, blob.ry * scale, blob.rx * scale,
                      blob.theta, blob.contrast, blob.softness)
        bm, bump = _blob_fields(scaled, size)
        img += bump
        mask |= bm
    return img, mask


def mask_location(mask: np.ndarray) -> str:
    """Coarse region name from the mask centroid (thirds of the frame)."""
    ys, xs = np.nonzero(mask)
    size = mask.shape[0]
    cy, cx = ys.mean() / size, xs.mean() / size
    if 1 / 3 <= cy <= 2 / 3 and 1 / 3 <= cx <= 2 / 3:
        return "central"
    vert = "upper" if cy < 0.5 else "lower"
    horiz = "left" if cx < 0.5 else "right"
    return f"{vert} {horiz}"


def gen_single(seed: int, cfg: DataConfig) -> SingleSample:
    rng = np.random.default_rng(seed)
    background = _background(rng, cfg.image_size)
    abnormal = bool(rng.random() < cfg.abnormal_prob)
    if abnormal:
        blobs = _sample_blobs(rng, cfg)
        img, mask = _render(background, blobs)
        loc = mask_location(mask)
        answer = abnormal_answer(loc)
    else:
        img, mask = background, np.zeros_like(background, dtype=bool)
        loc, answer = None, NORMAL_ANSWER
    img = _quantize(img)
    assert (mask.any() != 0) == abnormal
    return SingleSample(image=img, mask=mask.astype(np.uint8), label=int(abnormal),
                        question=SINGLE_QUESTION, answer=answer, location=loc,
                        seed=seed)


def _nuisance(rng: np.random.Generator, img: np.ndarray, mask: np.ndarray,
              cfg: DataConfig) -> tuple[np.ndarray, np.ndarray, float, tuple[int, int]]:
    factor = 1.0 + rng.uniform(-cfg.brightness_jitter, cfg.brightness_jitter)
    dy = int(rng.integers(-cfg.translate_px, cfg.translate_px + 1))
    dx = int(rng.integers(-cfg.translate_px, cfg.translate_px + 1))
    out = np.roll(img * factor, (dy, dx), axis=(0, 1))
    out_mask = np.roll(mask, (dy, dx), axis=(0, 1))
    return out, out_mask, factor, (dy, dx)


def gen_pair(seed: int, cfg: DataConfig, progression: str) -> PairSample:
    if progression not in PAIR_LABELS:
        raise ValueError(f"unknown progression {progression!r}")
    rng = np.random.default_rng(seed)
    background = _background(rng, cfg.image_size)
    label = progression

    if label == "no_change":
        # half the no-change pairs are normal/normal, half keep a stable lesion
        blobs = _sample_blobs(rng, cfg) if rng.random() < 0.5 else []
        img1, mask1 = _render(background, blobs)
        img2, mask2 = img1.copy(), mask1.copy()
    else:
        blobs = _sample_blobs(rng, cfg)
        img1, mask1 = _render(background, blobs)
        lo, hi = cfg.worsen_range if label == "worsened" else cfg.improve_range
        factor = rng.uniform(lo, hi)
        for _ in range(20):
            img2, mask2 = _render(background, blobs, scale=float(np.sqrt(factor)))
            a1, a2 = int(mask1.sum()), int(mask2.sum())
            if label == "worsened" and a2 > a1:
                break
            if label == "improved" and 0 < a2 < a1:
                break
            factor = factor * (1.07 if label == "worsened" else 0.93)
        else:
            raise RuntimeError(f"could not realize {label} pair for seed {seed}")

    img2, mask2, factor_b, shift = _nuisance(rng, img2, mask2, cfg)
    img1, img2 = _quantize(img1), _quantize(img2)
    if label == "worsened":
        assert mask2.sum() > mask1.sum()
    elif label == "improved":
        assert 0 < mask2.sum() < mask1.sum()
    else:
        assert mask2.sum() == np.roll(mask1, shift, axis=(0, 1)).sum()
    return PairSample(image1=img1, image2=img2,
                      mask1=mask1.astype(np.uint8), mask2=mask2.astype(np.uint8),
                      label=label, question=PAIR_QUESTION,
                      answer=PAIR_ANSWERS[label], brightness=factor_b,
                      shift=shift, seed=seed)


def sample_seed(split_seed: int, index: int) -> int:
    """Disjoint across splits as long as split seeds differ (index < 2**20)."""
    assert 0 <= index < 1 << 20
    return split_seed * (1 << 20) + index


def gen_split(split_seed: int, count: int, kind: str, cfg: DataConfig) -> list:
    if kind == "single":
        return [gen_single(sample_seed(split_seed, i), cfg) for i in range(count)]
    # round-robin over progression classes: any count divisible by 3 is
    # exactly balanced, so 3000 pairs land at 1000 per class
    return [gen_pair(sample_seed(split_seed, i), cfg, PAIR_LABELS[i % 3])
            for i in range(count)]


# --- corpus containers ----------------------------------------------------

def write_split(path: str | Path, kind: str, samples: list, split_seed: int,
                cfg: DataConfig) -> str:
    """Writes one split to a corpus container; returns its SHA-256 hex digest."""
    arrays: dict[str, np.ndarray] = {}
    records = []
    for i, s in enumerate(samples):
        key = f"{i:06d}"
        if kind == "single":
            arrays[f"{key}/image"] = np.round(s.image * 255).astype(np.uint8)
            arrays[f"{key}/mask"] = s.mask
            records.append({"label": s.label, "question": s.question,
                            "answer": s.answer, "location": s.location,
                            "seed": s.seed})
        else:
            arrays[f"{key}/image1"] = np.round(s.image1 * 255).astype(np.uint8)
            arrays[f"{key}/image2"] = np.round(s.image2 * 255).astype(np.uint8)
            arrays[f"{key}/mask1"] = s.mask1
            arrays[f"{key}/mask2"] = s.mask2
            records.append({"label": s.label, "question": s.question,
                            "answer": s.answer, "brightness": s.brightness,
                            "shift": list(s.shift), "seed": s.seed})
    meta = {"kind": kind, "split_seed": split_seed, "count": len(samples),
            "records": records,
            "data_config": {k: list(v) if isinstance(v, tuple) else v
                            for k, v in vars(cfg).items()}}
    write_container(path, CORPUS_MAGIC, arrays, meta)
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def read_split(path: str | Path) -> tuple[str, list]:
    meta, arrays = read_container(path, expect_magic=CORPUS_MAGIC)
    kind = meta["kind"]
    out = []
    for i, rec in enumerate(meta["records"]):
        key = f"{i:06d}"
        if kind == "single":
            out.append(SingleSample(
                image=(arrays[f"{key}/image"].astype(np.float32) / 255.0),
                mask=arrays[f"{key}/mask"], label=rec["label"],
                question=rec["question"], answer=rec["answer"],
                location=rec["location"], seed=rec["seed"]))
        else:
            out.append(PairSample(
                image1=(arrays[f"{key}/image1"].astype(np.float32) / 255.0),
                image2=(arrays[f"{key}/image2"].astype(np.float32) / 255.0),
                mask1=arrays[f"{key}/mask1"], mask2=arrays[f"{key}/mask2"],
                label=rec["label"], question=rec["question"],
                answer=rec["answer"], brightness=rec["brightness"],
                shift=tuple(rec["shift"]), seed=rec["seed"]))
    return kind, out


SPLIT_KINDS = {
    "backbone": "single",
    "warmup": "single",  # text side only; images unused by the warmup step
    "stage1": "single",
    "stage2": "pair",
    "stage3": "single",
    "test_single": "single",
    "test_pair": "pair",
}


def build_corpus(out_dir: str | Path, cfg: DataConfig, split_seeds: dict[str, int],
                 counts: dict[str, int] | None = None) -> dict:
    """Generates every split, writes containers plus a manifest.json."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if counts is None:
        counts = {
            "backbone": cfg.n_backbone,
            "warmup": cfg.n_warmup,
            "stage1": cfg.n_stage1,
            "stage2": cfg.n_stage2,
            "stage3": cfg.n_stage3,
            "test_single": cfg.n_test_single,
            "test_pair": cfg.n_test_pair,
        }
    manifest = {"splits": {}, "data_config": {
        k: list(v) if isinstance(v, tuple) else v for k, v in vars(cfg).items()}}
    for split, kind in SPLIT_KINDS.items():
        if split not in counts:
            continue
        seed = split_seeds[split]
        samples = gen_split(seed, counts[split], kind, cfg)
        path = out_dir / f"{split}.corpus"
        digest = write_split(path, kind, samples, seed, cfg)
        labels: dict = {}
        for s in samples:
            key = s.label if isinstance(s.label, str) else str(s.label)
            labels[key] = labels.get(key, 0) + 1
        manifest["splits"][split] = {
            "file": path.name, "kind": kind, "count": counts[split],
            "split_seed": seed, "sha256": digest, "labels": labels,
        }
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest
