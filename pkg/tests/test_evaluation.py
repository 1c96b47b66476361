import json

import numpy as np
import pytest
import torch

import oracles
from anovlm.data import PAIR_LABELS
from anovlm.evaluation import (DetectionReport, auc_rank, iou, parse_binary,
                               parse_choice, score_detection, score_grounding,
                               score_progression, write_report)
from anovlm.heatmap import dice_ce_loss


@pytest.mark.parametrize("text,want", [
    ("Yes, there is an abnormality in the central region.", "yes"),
    ("No, the image appears normal.", "no"),
    ("yes", "yes"),
    ("NO obviously", "no"),
    ("the image appears normal", None),
    ("abnormality present", None),
    ("", None),
])
def test_parse_binary(text, want):
    assert parse_binary(text) == want


@pytest.mark.parametrize("text,want", [
    ("A: No significant change.", "no_change"),
    ("B: Improved.", "improved"),
    ("C: Worsened.", "worsened"),
    ("the lesion worsened over time", "worsened"),
    ("it improved", "improved"),
    ("stable appearance", "no_change"),
    ("no significant change", "no_change"),
    ("a b c", None),
    ("", None),
])
def test_parse_choice(text, want):
    assert parse_choice(text) == want


def test_score_detection_counts_and_unparseable_policy():
    preds = ["yes", "no", None, None, "yes", "no"]
    golds = [1, 0, 1, 0, 0, 1]
    r = score_detection(preds, golds)
    # unparseable with abnormal gold is a miss; with normal gold a TN
    assert (r.tp, r.fp, r.fn, r.tn) == (1, 1, 2, 2)
    assert r.unparseable == 2
    assert r.n == 6
    with pytest.raises(ValueError):
        score_detection(["yes"], [1, 0])


def test_score_detection_against_oracle_random():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(5, 60))
        golds = rng.integers(0, 2, n).tolist()
        preds = [("yes", "no", None)[i] for i in rng.integers(0, 3, n)]
        r = score_detection(preds, golds)
        tp, fp, fn, tn, f1 = oracles.f1_counts(preds, golds)
        assert (r.tp, r.fp, r.fn, r.tn) == (tp, fp, fn, tn)
        assert r.f1 == pytest.approx(f1, abs=1e-12)


def test_score_progression_against_oracle_random():
    rng = np.random.default_rng(1)
    labels = list(PAIR_LABELS)
    for _ in range(100):
        n = int(rng.integers(6, 50))
        golds = [labels[i] for i in rng.integers(0, 3, n)]
        preds = [([*labels, None])[i] for i in rng.integers(0, 4, n)]
        r = score_progression(preds, golds)
        assert r.overall == pytest.approx(oracles.accuracy(preds, golds),
                                          abs=1e-12)
        for c in labels:
            members = [(p, g) for p, g in zip(preds, golds) if g == c]
            if members:
                want = sum(p == g for p, g in members) / len(members)
                assert r.per_class[c] == pytest.approx(want, abs=1e-12)
        assert r.unparseable == sum(p is None for p in preds)


def test_auc_matches_pairwise_oracle_with_ties():
    rng = np.random.default_rng(2)
    for _ in range(100):
        n = int(rng.integers(8, 80))
        scores = np.round(rng.random(n), 2)  # coarse grid forces ties
        labels = rng.integers(0, 2, n)
        if labels.sum() in (0, n):
            labels[0], labels[-1] = 0, 1
        mine = auc_rank(scores, labels)
        want = oracles.auc_pairwise(scores.tolist(), labels.tolist())
        assert mine == pytest.approx(want, abs=1e-9)


def test_auc_rejects_single_class():
    with pytest.raises(ValueError):
        auc_rank(np.array([0.1, 0.2]), np.array([1, 1]))


def test_iou_against_set_oracle():
    rng = np.random.default_rng(3)
    for _ in range(100):
        pred = rng.random((6, 6)) > 0.6
        mask = rng.random((6, 6)) > 0.6
        assert iou(pred, mask) == pytest.approx(
            oracles.iou_sets(pred, mask), abs=1e-12)
    assert iou(np.zeros((4, 4), bool), np.zeros((4, 4), bool)) == 1.0


def test_dice_ce_against_loop_oracle():
    rng = np.random.default_rng(4)
    for _ in range(100):
        pred = rng.random((2, 5, 5)).astype(np.float64)
        mask = (rng.random((2, 5, 5)) > 0.5).astype(np.float64)
        mine = float(dice_ce_loss(torch.from_numpy(pred), torch.from_numpy(mask)))
        assert mine == pytest.approx(oracles.dice_ce(pred, mask), abs=1e-6)


def test_score_grounding_skips_degenerate_images():
    heat = np.zeros((3, 4, 4), dtype=np.float32)
    masks = np.zeros((3, 4, 4), dtype=np.uint8)
    masks[0, 1:3, 1:3] = 1
    heat[0, 1:3, 1:3] = 0.9
    r = score_grounding(heat, masks)
    assert r.auc_skipped == 2  # two all-normal masks have no pixel AUC
    assert r.auc == pytest.approx(1.0)
    assert r.n == 3
    with pytest.raises(ValueError):
        score_grounding(heat, masks[:2])


def test_score_grounding_miou_thresholds_at_half():
    heat = np.array([[[0.51, 0.49], [0.51, 0.49]]], dtype=np.float32)
    masks = np.array([[[1, 0], [0, 0]]], dtype=np.uint8)
    r = score_grounding(heat, masks)
    assert r.miou == pytest.approx(0.5)  # predicted column vs one true pixel


def test_write_report_outputs(tmp_path):
    r = DetectionReport(tp=5, fp=1, fn=2, tn=8, unparseable=0,
                        precision=5 / 6, recall=5 / 7, f1=10 / 13, n=16)
    write_report(r, tmp_path / "det", "Detection")
    payload = json.loads((tmp_path / "det.json").read_text())
    assert payload["tp"] == 5 and payload["n"] == 16
    md = (tmp_path / "det.md").read_text()
    assert "| f1 | 0.7692 |" in md
    assert md.startswith("# Detection")
