"""Answer parsing, metric kernels, evaluation harnesses, and ablation sweeps.

Parsing policy (documented): binary answers are matched case-insensitively on
the first standalone yes/no token; anything without one is unparseable. An
unparseable answer counts as a miss (FN) when the gold label is abnormal and
as a TN when the gold label is normal, and is tallied separately. Choice
answers match a standalone A/B/C option letter first, then fall back to the
keywords change/unchanged/stable (no change), improved, worsened.
"""
from __future__ import annotations

import dataclasses
import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.stats import rankdata

from .data import PAIR_LABELS, PAIR_QUESTION, SINGLE_QUESTION
from .pipeline import (Bundle, decode_heatmaps, pair_sequences,
                       single_sequences)

_WORD = re.compile(r"[A-Za-z]+")


def parse_binary(text: str) -> str | None:
    for word in _WORD.findall(text):
        lw = word.lower()
        if lw == "yes":
            return "yes"
        if lw == "no":
            return "no"
    return None


_CHOICE_KEYWORDS = (("worsened", "worsened"), ("improved", "improved"),
                    ("unchanged", "no_change"), ("stable", "no_change"),
                    ("change", "no_change"))


def parse_choice(text: str) -> str | None:
    for word in _WORD.findall(text):
        if word in ("A", "B", "C"):
            return {"A": "no_change", "B": "improved", "C": "worsened"}[word]
    lowered = text.lower()
    for key, label in _CHOICE_KEYWORDS:
        if key in lowered:
            return label
    return None


# --- reports --------------------------------------------------------------

@dataclass
class DetectionReport:
    tp: int
    fp: int
    fn: int
    tn: int
    unparseable: int
    precision: float
    recall: float
    f1: float
    n: int


@dataclass
class ProgressionReport:
    per_class: dict
    overall: float
    macro: float
    unparseable: int
    n: int


@dataclass
class GroundingReport:
    auc: float
    miou: float
    auc_skipped: int
    n: int


def score_detection(preds: list, golds: list) -> DetectionReport:
    """preds: 'yes'/'no'/None per sample; golds: 1 abnormal / 0 normal."""
    if len(preds) != len(golds):
        raise ValueError("preds and golds must be aligned")
    tp = fp = fn = tn = unparseable = 0
    for p, g in zip(preds, golds):
        if p is None:
            unparseable += 1
            if g == 1:
                fn += 1
            else:
                tn += 1
        elif p == "yes":
            tp, fp = tp + (g == 1), fp + (g == 0)
        else:
            tn, fn = tn + (g == 0), fn + (g == 1)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = (2 * precision * recall / (precision + recall)
          if precision + recall else 0.0)
    return DetectionReport(tp, fp, fn, tn, unparseable, precision, recall, f1,
                           len(golds))


def score_progression(preds: list, golds: list,
                      average: str = "micro") -> ProgressionReport:
    """3-class accuracy; overall is per-sample (micro) unless average='macro'."""
    correct_by = {c: 0 for c in PAIR_LABELS}
    count_by = {c: 0 for c in PAIR_LABELS}
    unparseable = 0
    hits = 0
    for p, g in zip(preds, golds):
        count_by[g] += 1
        if p is None:
            unparseable += 1
            continue
        if p == g:
            correct_by[g] += 1
            hits += 1
    per_class = {c: (correct_by[c] / count_by[c] if count_by[c] else 0.0)
                 for c in PAIR_LABELS}
    micro = hits / len(golds) if golds else 0.0
    macro = float(np.mean([per_class[c] for c in PAIR_LABELS if count_by[c]]))
    overall = micro if average == "micro" else macro
    return ProgressionReport(per_class, overall, macro, unparseable, len(golds))


def auc_rank(scores: np.ndarray, labels: np.ndarray) -> float:
    """Rank-based ROC AUC with midrank tie handling."""
    labels = labels.astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC undefined without both classes")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2)
                 / (n_pos * n_neg))


def iou(pred_bin: np.ndarray, mask: np.ndarray) -> float:
    inter = np.logical_and(pred_bin, mask).sum()
    union = np.logical_or(pred_bin, mask).sum()
    return float(inter / union) if union else 1.0


def score_grounding(heatmaps: np.ndarray, masks: np.ndarray,
                    threshold: float = 0.5) -> GroundingReport:
    """Per-image pixel AUC (degenerate single-class images skipped, counted)
    and mean IoU of the thresholded heatmap."""
    if heatmaps.shape != masks.shape:
        raise ValueError("heatmap/mask shapes differ")
    aucs, ious, skipped = [], [], 0
    for hm, mk in zip(heatmaps, masks):
        mk = mk > 0
        ious.append(iou(hm >= threshold, mk))
        if mk.any() and not mk.all():
            aucs.append(auc_rank(hm.ravel(), mk.ravel()))
        else:
            skipped += 1
    mean_auc = float(np.mean(aucs)) if aucs else 0.0
    return GroundingReport(mean_auc, float(np.mean(ious)), skipped,
                           len(heatmaps))


def write_report(report, path_base: str | Path, title: str) -> None:
    """Deterministic JSON + Markdown dumps of a report dataclass."""
    base = Path(path_base)
    base.parent.mkdir(parents=True, exist_ok=True)
    payload = dataclasses.asdict(report)
    with open(base.with_suffix(".json"), "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
    lines = [f"# {title}", "", "| metric | value |", "| --- | --- |"]
    for key in sorted(payload):
        value = payload[key]
        if isinstance(value, float):
            value = f"{value:.4f}"
        lines.append(f"| {key} | {value} |")
    base.with_suffix(".md").write_text("\n".join(lines) + "\n")


# --- harnesses ------------------------------------------------------------

@torch.no_grad()
def eval_detection(bundle: Bundle, samples, batch: int = 64,
                   with_ano: bool | None = None) -> tuple[DetectionReport, list]:
    preds = []
    for start in range(0, len(samples), batch):
        chunk = samples[start:start + batch]
        images = torch.from_numpy(np.stack([s.image for s in chunk]))
        seq = single_sequences(bundle, images, SINGLE_QUESTION, with_ano)
        gens = bundle.lm.generate(seq.embeddings, bundle.vocab.eos_id)
        preds.extend(parse_binary(bundle.vocab.decode(g)) for g in gens)
    golds = [s.label for s in samples]
    return score_detection(preds, golds), preds


@torch.no_grad()
def eval_progression(bundle: Bundle, pairs, batch: int = 32,
                     with_ano: bool | None = None
                     ) -> tuple[ProgressionReport, list]:
    preds = []
    for start in range(0, len(pairs), batch):
        chunk = pairs[start:start + batch]
        im1 = torch.from_numpy(np.stack([s.image1 for s in chunk]))
        im2 = torch.from_numpy(np.stack([s.image2 for s in chunk]))
        seq = pair_sequences(bundle, im1, im2, PAIR_QUESTION, with_ano)
        gens = bundle.lm.generate(seq.embeddings, bundle.vocab.eos_id)
        preds.extend(parse_choice(bundle.vocab.decode(g)) for g in gens)
    golds = [s.label for s in pairs]
    return score_progression(preds, golds), preds


@torch.no_grad()
def eval_grounding(bundle: Bundle, samples, batch: int = 32
                   ) -> tuple[GroundingReport, np.ndarray]:
    maps = []
    for start in range(0, len(samples), batch):
        chunk = samples[start:start + batch]
        images = torch.from_numpy(np.stack([s.image for s in chunk]))
        maps.append(decode_heatmaps(bundle, images).numpy())
    heatmaps = np.concatenate(maps)
    masks = np.stack([s.mask for s in samples])
    return score_grounding(heatmaps, masks), heatmaps
