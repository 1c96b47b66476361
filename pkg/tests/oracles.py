"""Brute-force reference implementations, written straight from the metric
definitions and kept loop-based on purpose so they share no code (and no
vectorization mistakes) with the kernels under test."""
import math

import numpy as np


def f1_counts(preds, golds):
    """preds: 'yes'/'no'/None, golds: 1/0. Returns (tp, fp, fn, tn, f1)."""
    tp = fp = fn = tn = 0
    for p, g in zip(preds, golds):
        if p == "yes":
            if g == 1:
                tp += 1
            else:
                fp += 1
        else:  # 'no' or unparseable both predict the negative class
            if g == 1:
                fn += 1
            else:
                tn += 1
    prec = tp / (tp + fp) if tp + fp else 0.0
    rec = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
    return tp, fp, fn, tn, f1


def accuracy(preds, golds):
    hits = sum(1 for p, g in zip(preds, golds) if p == g)
    return hits / len(golds)


def auc_pairwise(scores, labels):
    """Probability a positive outranks a negative; ties count half."""
    pos = [s for s, l in zip(scores, labels) if l]
    neg = [s for s, l in zip(scores, labels) if not l]
    total = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                total += 1.0
            elif p == n:
                total += 0.5
    return total / (len(pos) * len(neg))


def iou_sets(pred_bin, mask):
    a = {tuple(ix) for ix in np.argwhere(pred_bin)}
    b = {tuple(ix) for ix in np.argwhere(mask)}
    union = a | b
    if not union:
        return 1.0
    return len(a & b) / len(union)


def dice_ce(pred, mask, eps=1.0, clamp=1e-7):
    """0.5 * (soft dice + pixelwise BCE), computed per image then averaged."""
    dices = []
    for pr, mk in zip(pred, mask):
        inter = ssum = msum = 0.0
        for p, m in zip(pr.ravel().tolist(), mk.ravel().tolist()):
            inter += p * m
            ssum += p
            msum += m
        dices.append(1.0 - (2.0 * inter + eps) / (ssum + msum + eps))
    bce_terms = []
    for p, m in zip(pred.ravel().tolist(), mask.ravel().tolist()):
        p = min(max(p, clamp), 1.0 - clamp)
        bce_terms.append(-(m * math.log(p) + (1 - m) * math.log(1 - p)))
    return 0.5 * (sum(dices) / len(dices) + sum(bce_terms) / len(bce_terms))
