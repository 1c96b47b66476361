"""Decoder-only transformer over mixed visual/text embeddings.

The model is pretrained on text-only question/answer pairs placed at random
position offsets (so the frozen weights later tolerate text appearing after
visual segments), then frozen. Losses are computed over answer positions
only; decoding is greedy and deterministic.
"""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig


class CausalBlock(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_hidden: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, mlp_hidden), nn.GELU(), nn.Linear(mlp_hidden, dim))

    def forward(self, x, attn_mask):
        h = self.norm1(x)
        x = x + self.attn(h, h, h, attn_mask=attn_mask, need_weights=False)[0]
        return x + self.mlp(self.norm2(x))


class ToyLM(nn.Module):
    def __init__(self, cfg: ModelConfig, vocab_size: int):
        super().__init__()
        self.cfg = cfg
        self.vocab_size = vocab_size
        self.tok_embed = nn.Embedding(vocab_size, cfg.d_lm)
        self.pos_embed = nn.Embedding(cfg.lm_context, cfg.d_lm)
        nn.init.normal_(self.tok_embed.weight, std=0.02)
        nn.init.normal_(self.pos_embed.weight, std=0.02)
        self.blocks = nn.ModuleList(
            CausalBlock(cfg.d_lm, cfg.lm_heads, cfg.lm_mlp_hidden)
            for _ in range(cfg.lm_layers))
        self.final_norm = nn.LayerNorm(cfg.d_lm)
        self.head = nn.Linear(cfg.d_lm, vocab_size, bias=False)

    def embed_tokens(self, ids: torch.Tensor) -> torch.Tensor:
        return self.tok_embed(ids)

    def forward_embeddings(self, emb: torch.Tensor, offset: int = 0) -> torch.Tensor:
        """emb [B, L, d_lm] -> logits [B, L, vocab]."""
        B, L, _ = emb.shape
        if offset + L > self.cfg.lm_context:
            raise ValueError(
                f"sequence of {L} at offset {offset} exceeds context "
                f"{self.cfg.lm_context}")
        positions = torch.arange(offset, offset + L, device=emb.device)
        x = emb + self.pos_embed(positions)
        mask = torch.triu(torch.ones(L, L, dtype=torch.bool, device=emb.device), 1)
        for block in self.blocks:
            x = block(x, mask)
        return self.head(self.final_norm(x))

    def answer_loss(self, seq_emb: torch.Tensor, answers: list[list[int]],
                    eos_id: int, pad_id: int, offset: int = 0,
                    weights: torch.Tensor | None = None) -> torch.Tensor:
        """Mean next-token CE over answer tokens (+eos) only.

        seq_emb [B, L, d_lm] is the prompt; answers are per-row token ids
        without eos. Prompt positions never enter the loss. weights, if given,
        rescales each row's contribution (normalized by total token weight).
        """
        B, L, _ = seq_emb.shape
        amax = max(len(a) for a in answers) + 1
        targets = torch.full((B, amax), pad_id, dtype=torch.long,
                             device=seq_emb.device)
        for i, ans in enumerate(answers):
            targets[i, :len(ans)] = torch.tensor(ans, device=seq_emb.device)
            targets[i, len(ans)] = eos_id
        teacher = self.embed_tokens(targets[:, :-1])
        logits = self.forward_embeddings(
            torch.cat([seq_emb, teacher], dim=1), offset)
        ans_logits = logits[:, L - 1:, :]  # position L-1+j predicts targets[:, j]
        if weights is None:
            return F.cross_entropy(ans_logits.reshape(-1, self.vocab_size),
                                   targets.reshape(-1), ignore_index=pad_id)
        per_token = F.cross_entropy(ans_logits.reshape(-1, self.vocab_size),
                                    targets.reshape(-1), ignore_index=pad_id,
                                    reduction="none").reshape(B, amax)
        w = weights.unsqueeze(1) * (targets != pad_id).to(per_token.dtype)
        return (per_token * w).sum() / w.sum()

    @torch.no_grad()
    def generate(self, seq_emb: torch.Tensor, eos_id: int, max_new: int = 16,
                 offset: int = 0) -> list[list[int]]:
        """Greedy decode; stops each row at eos. Returns ids without eos."""
        B = seq_emb.shape[0]
        emb = seq_emb
        out = [[] for _ in range(B)]
        done = torch.zeros(B, dtype=torch.bool, device=seq_emb.device)
        for _ in range(max_new):
            logits = self.forward_embeddings(emb, offset)[:, -1, :]
            nxt = logits.argmax(dim=-1)
            for i in range(B):
                if not done[i]:
                    if int(nxt[i]) == eos_id:
                        done[i] = True
                    else:
                        out[i].append(int(nxt[i]))
            if bool(done.all()):
                break
            emb = torch.cat([emb, self.embed_tokens(nxt).unsqueeze(1)], dim=1)
        return out

    def freeze(self):
        self.requires_grad_(False)
        for p in self.parameters():
            p.grad = None
        self.eval()
        return self


class Projector(nn.Module):
    """Visual-to-LM projection: frozen random linear base plus an optional
    trainable adapter initialized at identity."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.base = nn.Linear(cfg.d_model, cfg.d_lm)
        nn.init.normal_(self.base.weight, std=cfg.d_model ** -0.5)
        nn.init.zeros_(self.base.bias)
        self.base.requires_grad_(False)
        self.use_adapter = cfg.projector_adapter
        self.adapter = nn.Linear(cfg.d_lm, cfg.d_lm)
        with torch.no_grad():
            self.adapter.weight.copy_(torch.eye(cfg.d_lm))
            self.adapter.bias.zero_()

    def forward(self, grid: torch.Tensor) -> torch.Tensor:
        """[B, G, G, d] (or [B, N, d]) -> [B, G*G, d_lm], row-major order."""
        if grid.dim() == 4:
            B, G, _, d = grid.shape
            grid = grid.reshape(B, G * G, d)
        out = self.base(grid)
        if self.use_adapter:
            out = self.adapter(out)
        return out
