"""Tokenizer, chat templates, and multimodal sequence assembly.

The vocabulary is closed: every question/answer the corpus can emit is built
from a fixed lexicon plus special markers. Marker tokens in a rendered
template are expanded into embedding blocks at assembly time:

    <image> -> G*G projected visual embeddings   (VIS1 / VIS2)
    <Ano>   -> p*p anomaly token embeddings      (ANO1 / ANO2)
    <Diff>  -> p*p difference token embeddings   (DIFF)

Assembled layouts (segment label runs, in order):
    single: [VIS1, ANO1, TEXT]
    pair:   [VIS1, ANO1, VIS2, ANO2, TEXT, DIFF]
The answer is generated after the final segment.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import torch

from .data import (LOCATIONS, NORMAL_ANSWER, PAIR_ANSWERS, PAIR_QUESTION,
                   SINGLE_QUESTION, abnormal_answer)

PAD, UNK, BOS, EOS = "<pad>", "<unk>", "<bos>", "<eos>"
IMAGE_MARKER, ANO_MARKER, DIFF_MARKER = "<image>", "<Ano>", "<Diff>"
ASSISTANT, NEWLINE = "<|assistant|>", "<nl>"

SPECIALS = (PAD, UNK, BOS, EOS, IMAGE_MARKER, ANO_MARKER, DIFF_MARKER,
            ASSISTANT, NEWLINE)

_PUNCT = ".,:;?!()"

# Text-only warmup bank: deterministic paraphrase QA that widens the lexicon
# the language model sees before it is frozen. None of these reach evaluation.
FILLER_QA = (
    ("Describe the overall appearance of the scan.",
     "The field shows soft gray tissue with smooth borders and an even texture."),
    ("Are the lung zones clear?",
     "Both lung zones look clear without any focal opacity or consolidation."),
    ("Comment on the heart size.",
     "The cardiac silhouette is within normal limits and the margins are sharp."),
    ("Is there a visible fracture?",
     "No fracture line or cortical break is seen along the visible bones."),
    ("What about the bright spot near the border?",
     "The bright spot is a small dense nodule with a round, well defined margin."),
    ("Does the shadow look worrisome?",
     "The shadow is faint and diffuse, most consistent with benign overlap."),
    ("Summarize the follow up study.",
     "Compared with the prior exam, the finding is stable and unchanged in size."),
    ("Has the lesion grown?",
     "The lesion has grown larger and now covers a wider area than before."),
    ("Has the opacity resolved?",
     "The opacity has nearly resolved, leaving only a thin residual streak."),
    ("Any fluid collection present?",
     "There is no layering fluid and no pocket of air in the soft tissue."),
    ("Is the spine aligned?",
     "Vertebral alignment is preserved and the disc spaces are maintained."),
    ("Rate the severity of the finding.",
     "The finding is mild, far from the severe end of the scale."),
    ("Could this be an acute process?",
     "The pattern favors a chronic slow process rather than an acute event."),
    ("Where is the mass located?",
     "The mass sits near the central portion, slightly toward the right side."),
    ("Is the texture uniform?",
     "The texture is mostly uniform apart from one patch of coarse grain."),
    ("What does the dark band represent?",
     "The dark band is a normal fold, not a true defect in the tissue."),
    ("Should we order another view?",
     "A second view would help confirm whether the density is real or overlap."),
    ("Is the margin calcified?",
     "A rim of calcified material outlines part of the margin."),
    ("How bright is the lesion core?",
     "The core is markedly bright, well above the surrounding background."),
    ("Any swelling in the soft tissue?",
     "Mild swelling is present with slight blurring of the fat planes."),
    ("Did the treatment help?",
     "Yes, the treated region improved and the swelling went down."),
    ("Is this scan technically adequate?",
     "The exposure and positioning are adequate for a confident reading."),
    ("Name the most likely cause.",
     "A small healed scar is the most likely cause of this appearance."),
    ("Does anything need urgent attention?",
     "Nothing here needs urgent attention; routine follow up is enough."),
)


def tokenize_words(text: str) -> list[str]:
    """Whitespace split; punctuation peeled into separate tokens; newlines kept."""
    out: list[str] = []
    first_line = True
    for line in text.split("\n"):
        if not first_line:
            out.append(NEWLINE)
        first_line = False
        for word in line.split():
            if word in SPECIALS:
                out.append(word)
                continue
            tail: list[str] = []
            while word and word[-1] in _PUNCT:
                tail.append(word[-1])
                word = word[:-1]
            while word and word[0] in _PUNCT:
                out.append(word[0])
                word = word[1:]
            if word:
                out.append(word)
            out.extend(reversed(tail))
    return out


def lexicon_sentences() -> list[str]:
    """Every sentence the corpus or warmup bank can produce."""
    out = [SINGLE_QUESTION, PAIR_QUESTION, NORMAL_ANSWER]
    out.extend(abnormal_answer(loc) for loc in LOCATIONS)
    out.extend(PAIR_ANSWERS.values())
    for q, a in FILLER_QA:
        out.extend((q, a))
    return out


def build_vocab() -> list[str]:
    words = set()
    for sentence in lexicon_sentences():
        words.update(tokenize_words(sentence))
    words -= set(SPECIALS)
    return list(SPECIALS) + sorted(words)


class Vocab:
    def __init__(self, tokens: list[str]):
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.pad_id = self.index[PAD]
        self.unk_id = self.index[UNK]
        self.eos_id = self.index[EOS]

    def __len__(self):
        return len(self.tokens)

    def encode(self, text: str) -> list[int]:
        return [self.index.get(t, self.unk_id) for t in tokenize_words(text)]

    def decode(self, ids) -> str:
        words = [self.tokens[int(i)] for i in ids]
        words = [w for w in words if w not in (PAD, BOS, EOS)]
        out = ""
        for w in words:
            if w == NEWLINE:
                out += "\n"
            elif w in _PUNCT:
                out += w
            else:
                out += (" " if out and not out.endswith("\n") else "") + w
        return out

    @classmethod
    def load(cls, path: str | Path | None = None) -> "Vocab":
        if path is None:
            path = Path(__file__).parent / "vocab.txt"
        lines = Path(path).read_text().splitlines()
        return cls([ln for ln in lines if ln])

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n")


# --- chat templates -------------------------------------------------------

def render_template(mode: str, question: str) -> str:
    """Deterministic prompt string; byte-stable against the golden files."""
    if not question:
        raise ValueError("question must be non-empty")
    if mode == "single":
        return f"{IMAGE_MARKER} {ANO_MARKER}\n{question} {ASSISTANT}"
    if mode == "pair":
        return (f"{IMAGE_MARKER} {ANO_MARKER} {IMAGE_MARKER} {ANO_MARKER}\n"
                f"{question} {ASSISTANT} {DIFF_MARKER}")
    raise ValueError(f"unknown template mode {mode!r}")


def template_dir() -> Path:
    return Path(__file__).parent / "templates"


def text_token_ids(vocab: Vocab, mode: str, question: str) -> list[int]:
    """Token ids of the TEXT segment: everything in the rendered template
    that is not an expandable marker."""
    rendered = render_template(mode, question)
    ids = []
    for tok in tokenize_words(rendered):
        if tok in (IMAGE_MARKER, ANO_MARKER, DIFF_MARKER):
            continue
        ids.append(vocab.index.get(tok, vocab.unk_id))
    return ids


# --- sequence assembly ----------------------------------------------------

@dataclass
class Segment:
    name: str
    start: int
    end: int  # exclusive

    @property
    def length(self):
        return self.end - self.start


@dataclass
class MultimodalSequence:
    embeddings: torch.Tensor  # [B, L, d_lm] (B may be 1)
    segments: list[Segment]
    mode: str


def _concat(parts: list[tuple[str, torch.Tensor]], mode: str) -> MultimodalSequence:
    segments, chunks, cursor = [], [], 0
    for name, tensor in parts:
        if tensor.dim() == 2:
            tensor = tensor.unsqueeze(0)
        segments.append(Segment(name, cursor, cursor + tensor.shape[1]))
        chunks.append(tensor)
        cursor += tensor.shape[1]
    return MultimodalSequence(torch.cat(chunks, dim=1), segments, mode)


def assemble_single(proj: torch.Tensor, ano: torch.Tensor | None,
                    text_emb: torch.Tensor) -> MultimodalSequence:
    """[VIS1; ANO1; TEXT]; with ano=None the layout degenerates to [VIS1; TEXT]."""
    parts = [("VIS1", proj)]
    if ano is not None:
        parts.append(("ANO1", ano))
    parts.append(("TEXT", text_emb))
    return _concat(parts, "single")


def assemble_pair(proj1: torch.Tensor, ano1: torch.Tensor | None,
                  proj2: torch.Tensor, ano2: torch.Tensor | None,
                  text_emb: torch.Tensor, diff: torch.Tensor) -> MultimodalSequence:
    """[VIS1; ANO1; VIS2; ANO2; TEXT; DIFF]; ANO blocks drop out under the
    ano-pathway ablation."""
    if diff is None:
        raise ValueError("pair layout requires diff tokens")
    if (ano1 is None) != (ano2 is None):
        raise ValueError("ano tokens must be present for both images or neither")
    parts = [("VIS1", proj1)]
    if ano1 is not None:
        parts.append(("ANO1", ano1))
    parts.append(("VIS2", proj2))
    if ano2 is not None:
        parts.append(("ANO2", ano2))
    parts.extend([("TEXT", text_emb), ("DIFF", diff)])
    return _concat(parts, "pair")


def validate_layout(seq: MultimodalSequence, grid: int, pool: int,
                    text_len: int, with_ano: bool = True) -> None:
    """Asserts the exact segment order and lengths for the active layout."""
    if seq.mode == "single":
        want = [("VIS1", grid * grid)] + ([("ANO1", pool * pool)] if with_ano else [])
        want += [("TEXT", text_len)]
    else:
        want = [("VIS1", grid * grid)]
        if with_ano:
            want.append(("ANO1", pool * pool))
        want.append(("VIS2", grid * grid))
        if with_ano:
            want.append(("ANO2", pool * pool))
        want += [("TEXT", text_len), ("DIFF", pool * pool)]
    got = [(s.name, s.length) for s in seq.segments]
    if got != want:
        raise AssertionError(f"layout mismatch: got {got}, want {want}")
    total = sum(n for _, n in want)
    if seq.embeddings.shape[1] != total:
        raise AssertionError(
            f"length mismatch: {seq.embeddings.shape[1]} != {total}")
