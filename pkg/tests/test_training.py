import dataclasses
import json

import pytest
import torch

from anovlm.config import load_config
from anovlm.pipeline import GROUPS, STAGE_TRAINABLE, load_bundle
from anovlm.training import (StagePlan, TrainingError, cosine_lr, make_plan,
                             run_stage, warmup_text_items)


def tiny_config():
    cfg = load_config(None, 0)
    d = cfg.data
    d.n_backbone, d.n_warmup, d.n_stage1 = 48, 48, 48
    d.n_stage2, d.n_stage3 = 24, 24
    d.n_test_single, d.n_test_pair = 16, 12
    t = cfg.train
    t.epochs_backbone = t.epochs_warmup = 1
    t.epochs_stage1 = t.epochs_stage2 = 1
    t.epochs_stage3 = 3
    t.log_every = 2
    return cfg


def test_cosine_lr_schedule_shape():
    # no warmup: starts exactly at the initial LR, decays to ~0
    assert cosine_lr(0, 100, 1e-3, 0.0) == pytest.approx(1e-3)
    assert cosine_lr(99, 100, 1e-3, 0.0) < 1e-5
    # 3% warmup over 100 steps = 3 ramp steps
    assert cosine_lr(0, 100, 1e-3, 0.03) == pytest.approx(1e-3 / 3)
    assert cosine_lr(2, 100, 1e-3, 0.03) == pytest.approx(1e-3)
    peak = cosine_lr(3, 100, 1e-3, 0.03)
    assert peak <= 1e-3
    mid = cosine_lr(51, 100, 1e-3, 0.03)
    assert 0.3e-3 < mid < 0.7e-3
    # monotone decay after warmup
    values = [cosine_lr(s, 100, 1e-3, 0.03) for s in range(3, 100)]
    assert all(a >= b for a, b in zip(values, values[1:]))


def test_make_plan_table(cfg):
    p1 = make_plan("1", cfg)
    assert p1.trainable == ("soft_prompts", "anomaly", "projector_adapter")
    assert p1.loss_kind == "cross_entropy"
    assert p1.lr == cfg.train.lr_stage12
    assert p1.batch_size == cfg.train.batch_size
    p2 = make_plan("2", cfg)
    assert p2.trainable == ("diff",)
    assert p2.lr == cfg.train.lr_stage2
    p3 = make_plan("3", cfg)
    assert p3.trainable == ("heatmap",)
    assert p3.loss_kind == "dice_ce"
    assert p3.lr == cfg.train.lr_stage3
    joint = make_plan("joint", cfg)
    assert set(joint.trainable) == {"soft_prompts", "anomaly",
                                    "projector_adapter", "diff"}
    with pytest.raises(ValueError):
        make_plan("5", cfg)


def test_stage_plan_rejects_overlap():
    with pytest.raises(ValueError):
        StagePlan("1", ("anomaly",), ("anomaly", "lm"), "cross_entropy",
                  1e-4, 16, 1)


def test_warmup_items_cover_formats(cfg):
    class _S:
        question = "Is there any abnormality in this image?"
        answer = "No, the image appears normal."

    items = warmup_text_items(cfg, [_S()] * 8)
    assert len(items) == 8 + 4 + 2
    lengths = {len(p) for p, _ in items[8:12]}
    assert len(lengths) == 2  # junk-padded and plain pair prompts


def test_pair_swap_batch_relabels_and_reorders(cfg):
    import numpy as np

    from anovlm.data import PAIR_ANSWERS, gen_pair
    from anovlm.pipeline import build_bundle
    from anovlm.training import _swapped_pair_batch

    vocab = build_bundle(cfg).vocab
    batch = [gen_pair(7, cfg.data, "worsened"),
             gen_pair(8, cfg.data, "improved"),
             gen_pair(9, cfg.data, "no_change")]
    rng = np.random.default_rng(0)
    im1, im2, answers = _swapped_pair_batch(batch, rng, 1.0, vocab)
    assert torch.equal(im1[0], torch.from_numpy(batch[0].image2))
    assert torch.equal(im2[0], torch.from_numpy(batch[0].image1))
    assert answers[0] == vocab.encode(PAIR_ANSWERS["improved"])
    assert answers[1] == vocab.encode(PAIR_ANSWERS["worsened"])
    assert answers[2] == vocab.encode(PAIR_ANSWERS["no_change"])
    im1, im2, answers = _swapped_pair_batch(batch, rng, 0.0, vocab)
    assert torch.equal(im1[1], torch.from_numpy(batch[1].image1))
    assert answers[0] == vocab.encode(batch[0].answer)


def test_run_stage_rejects_unknown_and_missing_prereq(tmp_path):
    cfg = tiny_config()
    with pytest.raises(ValueError):
        run_stage(cfg, "7", tmp_path)
    with pytest.raises(TrainingError, match="stage0"):
        run_stage(cfg, "1", tmp_path)


@pytest.mark.slow
def test_tiny_pipeline_mechanics(tmp_path):
    """Small-corpus run of every stage: checkpoints, digests, logs, and the
    freeze invariants, without any quality expectation."""
    cfg = tiny_config()
    for stage in ("0", "1", "2", "3", "joint"):
        run_stage(cfg, stage, tmp_path)
        name = "joint" if stage == "joint" else f"stage{stage}"
        assert (tmp_path / "checkpoints" / f"{name}.avw").exists()
        assert (tmp_path / "digests" / f"{name}.json").exists()

    digests = {}
    for name in ("stage0", "stage1", "stage2", "stage3", "joint"):
        digests[name] = json.loads(
            (tmp_path / "digests" / f"{name}.json").read_text())

    # each stage changes exactly its trainable groups
    for prev, cur, stage in (("stage0", "stage1", "1"),
                             ("stage1", "stage2", "2"),
                             ("stage2", "stage3", "3")):
        trainable = set(STAGE_TRAINABLE[stage])
        for group in GROUPS:
            same = digests[prev][group] == digests[cur][group]
            if group in trainable:
                assert not same, f"{stage}: {group} did not train"
            else:
                assert same, f"{stage}: frozen {group} changed"

    # joint branched from stage0 and kept backbone/lm frozen
    for group in ("backbone", "lm", "projector_base"):
        assert digests["joint"][group] == digests["stage0"][group]

    # frozen-parameter gradient norms are exactly zero at every logged step
    for stage in ("0", "1", "2", "3"):
        records = [json.loads(line) for line in
                   (tmp_path / "logs" / f"stage{stage}.jsonl").read_text().splitlines()]
        norms = [r["frozen_grad_norm"] for r in records
                 if "frozen_grad_norm" in r]
        assert norms and all(v == 0.0 for v in norms)

    # checkpoints reload bit-identically
    cfg2 = tiny_config()
    bundle, _ = load_bundle(tmp_path / "checkpoints" / "stage3.avw", cfg2)
    from anovlm.pipeline import checksum_report
    assert checksum_report(bundle) == digests["stage3"]
