"""Stage-wise curriculum.

Stage 0 pretrains the backbone (image-level abnormality objective) and warms
up the language model on text-only QA, then freezes both. Stage 1 trains
{soft prompts, anomaly processor, projector adapter} with the LM
cross-entropy; Stage 2 trains {diff processor}; Stage 3 trains {heatmap
decoder} with DiceCE on cached frozen features. The joint baseline trains the
Stage-1 and Stage-2 sets simultaneously on the same total sample budget.

Frozen parameters carry requires_grad=False, so their gradient norm is
exactly zero; the loop asserts and logs that at every logged step.
"""
from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .config import RunConfig
from .data import (PAIR_ANSWERS, PAIR_QUESTION, SINGLE_QUESTION, build_corpus,
                   read_split)
from .heatmap import dice_ce_from_logits
from .pipeline import (Bundle, STAGE_TRAINABLE, build_bundle, checksum_report,
                       encode_images, freeze_for_stage, load_bundle,
                       pair_sequences, save_bundle, single_sequences)
from .sequence import FILLER_QA, text_token_ids

STAGES = ("0", "1", "2", "3", "joint")


class TrainingError(RuntimeError):
    pass


@dataclass
class StagePlan:
    stage: str
    trainable: tuple
    frozen: tuple
    loss_kind: str  # cross_entropy | dice_ce
    lr: float
    batch_size: int
    epochs: int

    def __post_init__(self):
        overlap = set(self.trainable) & set(self.frozen)
        if overlap:
            raise ValueError(f"trainable/frozen overlap: {overlap}")


def make_plan(stage: str, cfg: RunConfig) -> StagePlan:
    from .pipeline import GROUPS

    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}")
    t = cfg.train
    trainable = STAGE_TRAINABLE[stage]
    frozen = tuple(g for g in GROUPS if g not in trainable)
    table = {
        "0": ("cross_entropy", 1e-3, t.seg_batch_size, t.epochs_warmup),
        "1": ("cross_entropy", t.lr_stage12, t.batch_size, t.epochs_stage1),
        "2": ("cross_entropy", t.lr_stage2, t.batch_size, t.epochs_stage2),
        "3": ("dice_ce", t.lr_stage3, t.seg_batch_size, t.epochs_stage3),
        "joint": ("cross_entropy", t.lr_stage12, t.batch_size, t.epochs_stage1),
    }
    kind, lr, bs, ep = table[stage]
    return StagePlan(stage, trainable, frozen, kind, lr, bs, ep)


def cosine_lr(step: int, total: int, init: float, warmup_frac: float) -> float:
    """Linear warmup to the initial LR, then cosine decay toward zero.

    With warmup_frac == 0 the first step uses exactly the initial LR.
    """
    warmup = int(math.ceil(warmup_frac * total))
    if step < warmup:
        return init * (step + 1) / warmup
    span = max(total - warmup, 1)
    return init * 0.5 * (1.0 + math.cos(math.pi * (step - warmup) / span))


class JsonlLogger:
    def __init__(self, path: Path | None):
        self.path = path
        self.records: list[dict] = []
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(path, "w")
        else:
            self._fh = None

    def log(self, **record):
        self.records.append(record)
        if self._fh is not None:
            self._fh.write(json.dumps(record, sort_keys=True) + "\n")
            self._fh.flush()

    def close(self):
        if self._fh is not None:
            self._fh.close()


def frozen_grad_norm(bundle: Bundle) -> float:
    total = 0.0
    for _, mod in bundle.modules_by_name():
        for p in mod.parameters():
            if not p.requires_grad and p.grad is not None:
                total += float(p.grad.pow(2).sum())
    return math.sqrt(total)


def _check_finite(loss: torch.Tensor, ckpt: Path | None):
    if not torch.isfinite(loss):
        hint = f"; last good checkpoint: {ckpt}" if ckpt else ""
        raise TrainingError(f"loss diverged to {loss.item()}{hint}")


def _optim(params, lr: float, cfg: RunConfig):
    return torch.optim.AdamW(params, lr=lr, weight_decay=cfg.train.weight_decay)


def _set_lr(opt, lr: float):
    for group in opt.param_groups:
        group["lr"] = lr


def _images_tensor(samples, attr="image") -> torch.Tensor:
    return torch.from_numpy(np.stack([getattr(s, attr) for s in samples]))


# --- stage 0: backbone pretrain + LM text warmup --------------------------

def _backbone_pretrain(bundle: Bundle, samples, cfg: RunConfig,
                       logger: JsonlLogger, ckpt: Path | None):
    plan = make_plan("0", cfg)
    opt = _optim(bundle.encoder.parameters(), plan.lr, cfg)
    rng = np.random.default_rng(cfg.train.seed * 7 + 1)
    n = len(samples)
    steps_per = math.ceil(n / plan.batch_size)
    total = cfg.train.epochs_backbone * steps_per
    step = 0
    for epoch in range(cfg.train.epochs_backbone):
        order = rng.permutation(n)
        losses = []
        for b in range(steps_per):
            batch = [samples[i] for i in order[b * plan.batch_size:(b + 1) * plan.batch_size]]
            images = _images_tensor(batch)
            labels = torch.tensor([float(s.label) for s in batch])
            feats = bundle.encoder.encode(images, prompts=None)
            logits = bundle.encoder.classify(feats)
            loss = F.binary_cross_entropy_with_logits(logits, labels)
            _check_finite(loss, ckpt)
            opt.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(bundle.encoder.parameters(),
                                           cfg.train.grad_clip)
            _set_lr(opt, cosine_lr(step, total, plan.lr, cfg.train.warmup_frac))
            opt.step()
            losses.append(float(loss.detach()))
            if step % cfg.train.log_every == 0:
                fnorm = frozen_grad_norm(bundle)
                assert fnorm == 0.0
                logger.log(stage="0", phase="backbone", epoch=epoch, step=step,
                           loss=float(loss.detach()), lr=opt.param_groups[0]["lr"],
                           frozen_grad_norm=fnorm)
            step += 1
        logger.log(stage="0", phase="backbone_epoch", epoch=epoch,
                   mean_loss=float(np.mean(losses)))
    bundle.encoder.freeze()


def warmup_text_items(cfg: RunConfig, samples) -> list:
    """(prompt token ids, answer token ids) pairs for the LM warmup.

    Mixes the single-image QA text of the warmup split, pair-format QA with
    uniformly drawn answers, and the filler paraphrase bank. Half the
    pair-format items interpose a run of junk tokens between the prompt and
    the answer, teaching the LM to answer across non-text positions.
    """
    from .sequence import Vocab

    vocab = Vocab.load()
    rng = np.random.default_rng(cfg.train.seed * 7 + 2)
    items = []
    for s in samples:
        items.append((text_token_ids(vocab, "single", s.question),
                      vocab.encode(s.answer)))
    pair_text = text_token_ids(vocab, "pair", PAIR_QUESTION)
    answers = [vocab.encode(a) for a in PAIR_ANSWERS.values()]
    for i in range(len(samples) // 2):
        ans = answers[int(rng.integers(0, 3))]
        prompt = list(pair_text)
        if i % 2 == 1:
            prompt = prompt + [vocab.unk_id] * (cfg.model.pool_size ** 2)
        items.append((prompt, ans))
    filler = [(vocab.encode(q) + [vocab.index["<|assistant|>"]], vocab.encode(a))
              for q, a in FILLER_QA]
    for i in range(len(samples) // 4):
        items.append(filler[i % len(filler)])
    return items


def _lm_warmup(bundle: Bundle, samples, cfg: RunConfig, logger: JsonlLogger,
               ckpt: Path | None):
    plan = make_plan("0", cfg)
    opt = _optim(bundle.lm.parameters(), plan.lr, cfg)
    rng = np.random.default_rng(cfg.train.seed * 7 + 3)
    items = warmup_text_items(cfg, samples)
    n = len(items)
    steps_per = math.ceil(n / plan.batch_size)
    total = plan.epochs * steps_per
    vocab = bundle.vocab
    step = 0
    for epoch in range(plan.epochs):
        order = rng.permutation(n)
        losses = []
        for b in range(steps_per):
            batch = [items[i] for i in order[b * plan.batch_size:(b + 1) * plan.batch_size]]
            pmax = max(len(p) for p, _ in batch)
            prompt = torch.full((len(batch), pmax), vocab.pad_id, dtype=torch.long)
            for i, (p, _) in enumerate(batch):
                prompt[i, pmax - len(p):] = torch.tensor(p)  # left-pad
            emb = bundle.lm.embed_tokens(prompt)
            amax = max(len(a) for _, a in batch)
            offset = int(rng.integers(0, cfg.model.lm_context - pmax - amax - 2))
            loss = bundle.lm.answer_loss(emb, [a for _, a in batch],
                                         vocab.eos_id, vocab.pad_id, offset)
            _check_finite(loss, ckpt)
            opt.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(bundle.lm.parameters(),
                                           cfg.train.grad_clip)
            _set_lr(opt, cosine_lr(step, total, plan.lr, cfg.train.warmup_frac))
            opt.step()
            losses.append(float(loss.detach()))
            if step % cfg.train.log_every == 0:
                fnorm = frozen_grad_norm(bundle)
                assert fnorm == 0.0
                logger.log(stage="0", phase="warmup", epoch=epoch, step=step,
                           loss=float(loss.detach()), lr=opt.param_groups[0]["lr"],
                           frozen_grad_norm=fnorm)
            step += 1
        logger.log(stage="0", phase="warmup_epoch", epoch=epoch,
                   mean_loss=float(np.mean(losses)))
    bundle.lm.freeze()


# --- stages 1/2/3 and the joint baseline ----------------------------------

def init_system_tokens_from_data(bundle: Bundle, samples, max_images: int = 1024,
                                 scale: float = 1.0):
    """Symmetry-breaking direction: mean intermediate-layer patch feature of
    abnormal images minus that of normal images (image-level labels only)."""
    abn, nor = [], []
    with torch.no_grad():
        for start in range(0, min(len(samples), max_images), 64):
            batch = samples[start:start + 64]
            feats = bundle.encoder.encode(_images_tensor(batch), prompts=None)
            per_img = torch.stack(
                [g.flatten(1, 2).mean(1) for g in feats.intermediate]).mean(0)
            for vec, s in zip(per_img, batch):
                (abn if s.label else nor).append(vec)
    if not abn or not nor:
        return
    direction = torch.stack(abn).mean(0) - torch.stack(nor).mean(0)
    bundle.anomaly.set_system_tokens(direction, scale)


def _answer_ids(vocab, samples) -> list[list[int]]:
    return [vocab.encode(s.answer) for s in samples]


def _grad_step(bundle: Bundle, opt, loss, step, total, plan, cfg, logger,
               epoch, ckpt):
    _check_finite(loss, ckpt)
    opt.zero_grad()
    loss.backward()
    params = [p for g in opt.param_groups for p in g["params"]]
    torch.nn.utils.clip_grad_norm_(params, cfg.train.grad_clip)
    _set_lr(opt, cosine_lr(step, total, plan.lr, cfg.train.warmup_frac))
    opt.step()
    if step % cfg.train.log_every == 0:
        fnorm = frozen_grad_norm(bundle)
        assert fnorm == 0.0, f"frozen parameters received gradient: {fnorm}"
        logger.log(stage=plan.stage, phase="train", epoch=epoch, step=step,
                   loss=float(loss.detach()), lr=opt.param_groups[0]["lr"],
                   frozen_grad_norm=fnorm)


_SWAPPED_LABEL = {"worsened": "improved", "improved": "worsened",
                  "no_change": "no_change"}


def _swapped_pair_batch(batch, rng, swap_prob: float, vocab):
    """Per-sample order augmentation for temporal pairs."""
    flips = rng.random(len(batch)) < swap_prob
    im1 = np.stack([s.image2 if f else s.image1 for s, f in zip(batch, flips)])
    im2 = np.stack([s.image1 if f else s.image2 for s, f in zip(batch, flips)])
    answers = [vocab.encode(PAIR_ANSWERS[_SWAPPED_LABEL[s.label]] if f
                            else s.answer) for s, f in zip(batch, flips)]
    return torch.from_numpy(im1), torch.from_numpy(im2), answers


def _run_lm_stage(bundle: Bundle, plan: StagePlan, singles, pairs,
                  cfg: RunConfig, logger: JsonlLogger, ckpt: Path | None):
    """Shared loop for stages 1, 2 and the joint baseline; batches of
    ("single", idx) / ("pair", idx) are interleaved deterministically."""
    opt = _optim([p for p in bundle.trainable_parameters()], plan.lr, cfg)
    rng = np.random.default_rng(cfg.train.seed * 7 + 4 + len(plan.trainable))
    vocab = bundle.vocab
    swap_prob = cfg.train.pair_swap_prob if plan.stage in ("2", "joint") else 0.0
    bs = plan.batch_size
    single_batches = math.ceil(len(singles) / bs) if singles else 0
    pair_batches = math.ceil(len(pairs) / bs) if pairs else 0
    total = plan.epochs * (single_batches + pair_batches)
    step = 0
    for epoch in range(plan.epochs):
        sched = [("single", i) for i in range(single_batches)]
        sched += [("pair", i) for i in range(pair_batches)]
        sched = [sched[i] for i in rng.permutation(len(sched))]
        s_order = rng.permutation(len(singles)) if singles else []
        p_order = rng.permutation(len(pairs)) if pairs else []
        losses = []
        for kind, b in sched:
            weights = None
            if kind == "single":
                batch = [singles[i] for i in s_order[b * bs:(b + 1) * bs]]
                seq = single_sequences(bundle, _images_tensor(batch),
                                       SINGLE_QUESTION)
                answers = _answer_ids(vocab, batch)
            else:
                batch = [pairs[i] for i in p_order[b * bs:(b + 1) * bs]]
                im1, im2, answers = _swapped_pair_batch(
                    batch, rng, swap_prob, vocab)
                seq = pair_sequences(bundle, im1, im2, PAIR_QUESTION)
                if cfg.train.no_change_weight != 1.0:
                    weights = torch.tensor(
                        [cfg.train.no_change_weight
                         if s.label == "no_change" else 1.0 for s in batch])
            loss = bundle.lm.answer_loss(seq.embeddings, answers,
                                         vocab.eos_id, vocab.pad_id,
                                         weights=weights)
            _grad_step(bundle, opt, loss, step, total, plan, cfg, logger,
                       epoch, ckpt)
            losses.append(float(loss.detach()))
            step += 1
        logger.log(stage=plan.stage, phase="epoch", epoch=epoch,
                   mean_loss=float(np.mean(losses)))


def _run_stage3(bundle: Bundle, plan: StagePlan, samples, cfg: RunConfig,
                logger: JsonlLogger, ckpt: Path | None):
    """Decoder training over cached frozen features and `<Ano>` tokens."""
    grids_cache, ano_cache = [], []
    with torch.no_grad():
        for start in range(0, len(samples), 64):
            batch = samples[start:start + 64]
            feats = encode_images(bundle, _images_tensor(batch))
            ano_out, _ = bundle.anomaly(feats, bundle.projector)
            grids_cache.append(torch.stack(feats.intermediate, 1))  # [B,4,G,G,d]
            ano_cache.append(ano_out.tokens)
    grids = torch.cat(grids_cache)
    ano = torch.cat(ano_cache)
    masks = torch.from_numpy(np.stack([s.mask for s in samples])).float()
    opt = _optim(bundle.heatmap.parameters(), plan.lr, cfg)
    rng = np.random.default_rng(cfg.train.seed * 7 + 6)
    n = len(samples)
    steps_per = math.ceil(n / plan.batch_size)
    total = plan.epochs * steps_per
    step = 0
    for epoch in range(plan.epochs):
        order = rng.permutation(n)
        losses = []
        for b in range(steps_per):
            idx = torch.from_numpy(order[b * plan.batch_size:(b + 1) * plan.batch_size].copy())
            layer_grids = [grids[idx][:, i] for i in range(grids.shape[1])]
            fused = bundle.heatmap.fusion(layer_grids, ano[idx])
            logits = bundle.heatmap.head(fused)
            loss = dice_ce_from_logits(logits, masks[idx])
            _grad_step(bundle, opt, loss, step, total, plan, cfg, logger,
                       epoch, ckpt)
            losses.append(float(loss.detach()))
            step += 1
        if epoch % 10 == 0 or epoch == plan.epochs - 1:
            logger.log(stage="3", phase="epoch", epoch=epoch,
                       mean_loss=float(np.mean(losses)))
    return


def ensure_corpus(cfg: RunConfig, out_dir: Path) -> Path:
    corpus_dir = Path(out_dir) / "corpus"
    if not (corpus_dir / "manifest.json").exists():
        seeds = {split: cfg.split_seed(split) for split in
                 ("backbone", "warmup", "stage1", "stage2", "stage3",
                  "test_single", "test_pair")}
        build_corpus(corpus_dir, cfg.data, seeds)
    return corpus_dir


def load_corpus_split(corpus_dir: Path, split: str):
    _, samples = read_split(Path(corpus_dir) / f"{split}.corpus")
    return samples


def run_stage(cfg: RunConfig, stage: str, out_dir: str | Path,
              bundle: Bundle | None = None) -> Bundle:
    """Runs one curriculum stage, reading/writing checkpoints under out_dir.

    Prerequisite checkpoints must exist for stages after 0; raises
    TrainingError naming the missing stage otherwise.
    """
    out_dir = Path(out_dir)
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}")
    corpus_dir = ensure_corpus(cfg, out_dir)
    ckpt_dir = out_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    prereq = {"0": None, "1": "stage0", "2": "stage1", "3": "stage2",
              "joint": "stage0"}[stage]
    if bundle is None:
        if prereq is None:
            bundle = build_bundle(cfg)
        else:
            path = ckpt_dir / f"{prereq}.avw"
            if not path.exists():
                raise TrainingError(
                    f"stage {stage} requires the {prereq.replace('stage', 'stage ')} "
                    f"checkpoint at {path}; run --stage {prereq[-1]} first")
            bundle, _ = load_bundle(path, cfg)
    torch.manual_seed(cfg.train.seed * 7 + {"0": 10, "1": 11, "2": 12,
                                            "3": 13, "joint": 14}[stage])
    plan = make_plan(stage, cfg)
    freeze_for_stage(bundle, stage)
    logger = JsonlLogger(out_dir / "logs" / f"stage{stage}.jsonl")
    name = f"stage{stage}" if stage != "joint" else "joint"
    ckpt_path = ckpt_dir / f"{name}.avw"
    started = time.time()
    try:
        if stage == "0":
            _backbone_pretrain(bundle, load_corpus_split(corpus_dir, "backbone"),
                               cfg, logger, None)
            _lm_warmup(bundle, load_corpus_split(corpus_dir, "warmup"),
                       cfg, logger, None)
        elif stage == "1":
            singles = load_corpus_split(corpus_dir, "stage1")
            init_system_tokens_from_data(bundle, singles)
            _run_lm_stage(bundle, plan, singles, [], cfg, logger, ckpt_path)
        elif stage == "2":
            pairs = load_corpus_split(corpus_dir, "stage2")
            _run_lm_stage(bundle, plan, [], pairs, cfg, logger, ckpt_path)
        elif stage == "3":
            _run_stage3(bundle, plan, load_corpus_split(corpus_dir, "stage3"),
                        cfg, logger, ckpt_path)
        else:  # joint: same data budget as stages 1+2 combined
            singles = load_corpus_split(corpus_dir, "stage1")
            pairs = load_corpus_split(corpus_dir, "stage2")
            init_system_tokens_from_data(bundle, singles)
            _run_lm_stage(bundle, plan, singles, pairs, cfg, logger, ckpt_path)
        logger.log(stage=stage, phase="done", seconds=time.time() - started)
    finally:
        logger.close()
    save_bundle(ckpt_path, bundle, meta={"stage": stage, "seed": cfg.train.seed})
    digest_dir = out_dir / "digests"
    digest_dir.mkdir(exist_ok=True)
    with open(digest_dir / f"{name}.json", "w") as fh:
        json.dump(checksum_report(bundle), fh, indent=2, sort_keys=True)
    return bundle


def run_pipeline(cfg: RunConfig, out_dir: str | Path,
                 stages=("0", "1", "2", "3")) -> Bundle:
    bundle = None
    for stage in stages:
        bundle = run_stage(cfg, stage, out_dir, bundle)
    return bundle
