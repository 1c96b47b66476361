"""Composition of all modules into one model bundle.

The bundle owns the named parameter groups that the stage curriculum freezes
and thaws; group checksums back the freeze invariants. Forward helpers here
are batched and shared between training, evaluation, and the CLI.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
import torch

from .anomaly import AnomalyProcessor, AnoOut
from .backbone import PatchEncoder, PatchFeatureSet, SoftPromptBank
from .config import RunConfig
from .container import load_state_dict, save_state_dict
from .diff import DiffProcessor
from .heatmap import HeatmapDecoder
from .lm import Projector, ToyLM
from .sequence import (MultimodalSequence, Vocab, assemble_pair,
                       assemble_single, text_token_ids)

GROUPS = ("backbone", "soft_prompts", "projector_base", "projector_adapter",
          "anomaly", "diff", "heatmap", "lm")

STAGE_TRAINABLE = {
    "0": ("backbone", "lm"),
    "1": ("soft_prompts", "anomaly", "projector_adapter"),
    "2": ("diff",),
    "3": ("heatmap",),
    "joint": ("soft_prompts", "anomaly", "projector_adapter", "diff"),
}


@dataclass
class Bundle:
    cfg: RunConfig
    vocab: Vocab
    encoder: PatchEncoder
    prompts: SoftPromptBank
    projector: Projector
    anomaly: AnomalyProcessor
    diff: DiffProcessor
    heatmap: HeatmapDecoder
    lm: ToyLM

    def group_modules(self) -> dict:
        return {
            "backbone": self.encoder,
            "soft_prompts": self.prompts,
            "projector_base": self.projector.base,
            "projector_adapter": self.projector.adapter,
            "anomaly": self.anomaly,
            "diff": self.diff,
            "heatmap": self.heatmap,
            "lm": self.lm,
        }

    def group_parameters(self, group: str):
        return list(self.group_modules()[group].parameters())

    def trainable_parameters(self):
        return [p for m in self.group_modules().values()
                for p in m.parameters() if p.requires_grad]

    def modules_by_name(self) -> list:
        return [("encoder", self.encoder), ("prompts", self.prompts),
                ("projector", self.projector), ("anomaly", self.anomaly),
                ("diff", self.diff), ("heatmap", self.heatmap), ("lm", self.lm)]

    def eval(self):
        for _, mod in self.modules_by_name():
            mod.eval()
        return self


def build_bundle(cfg: RunConfig) -> Bundle:
    """Deterministic construction: init RNG is fixed by the run seed."""
    torch.manual_seed(cfg.train.seed)
    vocab = Vocab.load()
    m = cfg.model
    encoder = PatchEncoder(m, cfg.data.image_size, cfg.data.patch_size)
    prompts = SoftPromptBank(len(m.tap_layers), m.n_prompts, m.d_model)
    projector = Projector(m)
    bundle = Bundle(cfg=cfg, vocab=vocab, encoder=encoder, prompts=prompts,
                    projector=projector, anomaly=AnomalyProcessor(m),
                    diff=DiffProcessor(m), heatmap=HeatmapDecoder(
                        m, cfg.data.image_size, cfg.grid_size),
                    lm=ToyLM(m, len(vocab)))
    bundle.eval()
    return bundle


def freeze_for_stage(bundle: Bundle, stage: str) -> None:
    trainable = STAGE_TRAINABLE[stage]
    for name, mod in bundle.group_modules().items():
        mod.requires_grad_(name in trainable and name != "projector_base")
    if not bundle.cfg.model.projector_adapter:
        bundle.projector.adapter.requires_grad_(False)
    # drop gradients accumulated while a now-frozen group was trainable, so a
    # zero frozen-gradient norm is a real invariant rather than an accident of
    # which stages shared a process
    for _, mod in bundle.modules_by_name():
        for p in mod.parameters():
            if not p.requires_grad:
                p.grad = None


def group_checksum(bundle: Bundle, group: str) -> str:
    h = hashlib.sha256()
    state = bundle.group_modules()[group].state_dict()
    for name in sorted(state):
        h.update(name.encode())
        h.update(np.ascontiguousarray(state[name].detach().cpu().numpy()).tobytes())
    return h.hexdigest()


def checksum_report(bundle: Bundle) -> dict[str, str]:
    return {g: group_checksum(bundle, g) for g in GROUPS}


def save_bundle(path, bundle: Bundle, meta: dict | None = None) -> None:
    state = {}
    for mname, mod in bundle.modules_by_name():
        for key, val in mod.state_dict().items():
            state[f"{mname}.{key}"] = val
    save_state_dict(path, state, meta)


def load_bundle(path, cfg: RunConfig) -> tuple[Bundle, dict]:
    meta, tensors = load_state_dict(path)
    bundle = build_bundle(cfg)
    for mname, mod in bundle.modules_by_name():
        sub = {k[len(mname) + 1:]: v for k, v in tensors.items()
               if k.startswith(mname + ".")}
        mod.load_state_dict(sub)
    bundle.eval()
    return bundle, meta


# --- forward paths --------------------------------------------------------

def encode_images(bundle: Bundle, images: torch.Tensor,
                  use_prompts: bool = True) -> PatchFeatureSet:
    prompts = bundle.prompts if use_prompts and bundle.cfg.model.n_prompts > 0 else None
    return bundle.encoder.encode(images, prompts)


def single_forward(bundle: Bundle, images: torch.Tensor,
                   with_ano: bool | None = None
                   ) -> tuple[PatchFeatureSet, AnoOut | None, torch.Tensor]:
    """Returns (features, ano_out, projected tokens for the VIS segment)."""
    if with_ano is None:
        with_ano = bundle.cfg.model.use_ano_tokens
    features = encode_images(bundle, images)
    if with_ano:
        ano_out, proj = bundle.anomaly(features, bundle.projector)
    else:
        ano_out, proj = None, bundle.projector(features.final)
    return features, ano_out, proj


def pair_forward(bundle: Bundle, images1: torch.Tensor, images2: torch.Tensor,
                 with_ano: bool | None = None):
    """Returns (parts1, parts2, diff_out); with the ano pathway ablated, the
    diff queries come from the raw final-layer grids."""
    if with_ano is None:
        with_ano = bundle.cfg.model.use_ano_tokens
    f1, a1, p1 = single_forward(bundle, images1, with_ano)
    f2, a2, p2 = single_forward(bundle, images2, with_ano)
    if with_ano:
        diff_out = bundle.diff(a1.modulated, a2.modulated, p1, p2)
    else:
        diff_out = bundle.diff(f1.final, f2.final, p1, p2)
    return (f1, a1, p1), (f2, a2, p2), diff_out


def _text_embeddings(bundle: Bundle, mode: str, question: str, batch: int
                     ) -> tuple[torch.Tensor, list[int]]:
    ids = text_token_ids(bundle.vocab, mode, question)
    emb = bundle.lm.embed_tokens(torch.tensor(ids, dtype=torch.long))
    return emb.unsqueeze(0).expand(batch, -1, -1), ids


def single_sequences(bundle: Bundle, images: torch.Tensor, question: str,
                     with_ano: bool | None = None) -> MultimodalSequence:
    features, ano_out, proj = single_forward(bundle, images, with_ano)
    text_emb, _ = _text_embeddings(bundle, "single", question, images.shape[0])
    ano_tokens = ano_out.tokens if ano_out is not None else None
    return assemble_single(proj, ano_tokens, text_emb)


def pair_sequences(bundle: Bundle, images1: torch.Tensor, images2: torch.Tensor,
                   question: str, with_ano: bool | None = None
                   ) -> MultimodalSequence:
    (f1, a1, p1), (f2, a2, p2), diff_out = pair_forward(
        bundle, images1, images2, with_ano)
    text_emb, _ = _text_embeddings(bundle, "pair", question, images1.shape[0])
    if a1 is not None:
        return assemble_pair(p1, a1.tokens, p2, a2.tokens, text_emb,
                             diff_out.tokens)
    return assemble_pair(p1, None, p2, None, text_emb, diff_out.tokens)


def decode_heatmaps(bundle: Bundle, images: torch.Tensor) -> torch.Tensor:
    """Full grounding path: encode, `<Ano>` tokens, fused decode; returns
    probabilities [B, H, W]."""
    features, ano_out, _ = single_forward(bundle, images, with_ano=True)
    return bundle.heatmap.decode(features, ano_out.tokens)


@torch.no_grad()
def text_probe(bundle: Bundle, prompts_text: list[str], offset: int = 0,
               max_new: int = 16) -> tuple[torch.Tensor, list[str]]:
    """Text-only probe for the forgetting guard: returns the stacked final
    logits and greedy continuations for each prompt string."""
    logits_rows, answers = [], []
    for text in prompts_text:
        ids = torch.tensor(bundle.vocab.encode(text), dtype=torch.long)
        emb = bundle.lm.embed_tokens(ids).unsqueeze(0)
        logits = bundle.lm.forward_embeddings(emb, offset)
        logits_rows.append(logits[0, -1])
        gen = bundle.lm.generate(emb, bundle.vocab.eos_id, max_new, offset)
        answers.append(bundle.vocab.decode(gen[0]))
    return torch.stack(logits_rows), answers
