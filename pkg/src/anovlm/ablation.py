"""Ablation sweeps: pooling size, soft-prompt count, `<Ano>` pathway,
last-layer-only scoring, and stage-wise vs joint training.

Each grid cell trains a fresh variant from a shared stage-0 checkpoint
(backbone and LM are architecture-identical across cells, so their
pretrained weights transfer), then evaluates on slices of the test splits.
Directional findings are written into the reports as observations, never
asserted. A failed cell is recorded as absent rather than aborting the grid.
"""
from __future__ import annotations

import copy
import json
import traceback
from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .config import RunConfig
from .container import load_state_dict
from .evaluation import eval_detection, eval_progression
from .pipeline import build_bundle, freeze_for_stage
from .training import (JsonlLogger, init_system_tokens_from_data,
                       load_corpus_split, make_plan, _run_lm_stage)

plt.rcParams["svg.hashsalt"] = "anovlm"

POOLING_GRID = (1, 2, 4, 8)
PROMPT_GRID = (0, 5, 10, 20)


@dataclass
class AblationBudget:
    n_stage1: int
    n_stage2: int
    epochs: int
    n_eval_single: int
    n_eval_pair: int

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "AblationBudget":
        d = cfg.data
        return cls(d.n_stage1, d.n_stage2, cfg.train.epochs_stage1,
                   d.n_test_single, d.n_test_pair)

    @classmethod
    def smoke(cls) -> "AblationBudget":
        return cls(n_stage1=480, n_stage2=240, epochs=1,
                   n_eval_single=160, n_eval_pair=120)


def _variant_config(cfg: RunConfig, **model_overrides) -> RunConfig:
    out = copy.deepcopy(cfg)
    for key, value in model_overrides.items():
        setattr(out.model, key, value)
    return out


def _load_pretrained(bundle, stage0_ckpt):
    _, tensors = load_state_dict(stage0_ckpt)
    for mname, mod in bundle.modules_by_name():
        if mname not in ("encoder", "lm", "projector"):
            continue
        sub = {k[len(mname) + 1:]: v for k, v in tensors.items()
               if k.startswith(mname + ".")}
        mod.load_state_dict(sub)
    bundle.encoder.freeze()
    bundle.lm.freeze()


def _train_variant(cfg: RunConfig, stage0_ckpt, corpus_dir, budget,
                   joint: bool = False, with_stage2: bool = True) -> dict:
    singles = load_corpus_split(corpus_dir, "stage1")[:budget.n_stage1]
    pairs = load_corpus_split(corpus_dir, "stage2")[:budget.n_stage2]
    bundle = build_bundle(cfg)
    _load_pretrained(bundle, stage0_ckpt)
    logger = JsonlLogger(None)
    if joint:
        plan = make_plan("joint", cfg)
        plan.epochs = budget.epochs
        freeze_for_stage(bundle, "joint")
        init_system_tokens_from_data(bundle, singles)
        _run_lm_stage(bundle, plan, singles, pairs, cfg, logger, None)
    else:
        plan = make_plan("1", cfg)
        plan.epochs = budget.epochs
        freeze_for_stage(bundle, "1")
        init_system_tokens_from_data(bundle, singles)
        _run_lm_stage(bundle, plan, singles, [], cfg, logger, None)
        if with_stage2:
            plan2 = make_plan("2", cfg)
            plan2.epochs = budget.epochs
            freeze_for_stage(bundle, "2")
            _run_lm_stage(bundle, plan2, [], pairs, cfg, logger, None)
    test_single = load_corpus_split(corpus_dir, "test_single")[:budget.n_eval_single]
    det, _ = eval_detection(bundle, test_single)
    metrics = {"detection_f1": det.f1, "detection_precision": det.precision,
               "detection_recall": det.recall}
    if with_stage2 or joint:
        test_pair = load_corpus_split(corpus_dir, "test_pair")[:budget.n_eval_pair]
        prog, _ = eval_progression(bundle, test_pair)
        metrics.update(progression_overall=prog.overall,
                       progression_no_change=prog.per_class["no_change"])
    return metrics


def _sweep_plot(path: Path, xs, ys, xlabel: str, ylabel: str, title: str):
    fig, ax = plt.subplots(figsize=(4, 3))
    shown = [(x, y) for x, y in zip(xs, ys) if y is not None]
    if shown:
        ax.plot([x for x, _ in shown], [y for _, y in shown], marker="o")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.set_xticks(list(xs))
    fig.tight_layout()
    fig.savefig(path, metadata={"Date": None})
    plt.close(fig)


def _md_table(rows: list[dict], columns: list[str], key: str) -> str:
    lines = ["| " + key + " | " + " | ".join(columns) + " |",
             "| " + " | ".join(["---"] * (len(columns) + 1)) + " |"]
    for row in rows:
        cells = []
        for col in columns:
            val = row.get(col)
            cells.append("absent" if val is None else f"{val:.4f}")
        lines.append(f"| {row[key]} | " + " | ".join(cells) + " |")
    return "\n".join(lines)


def run_ablations(cfg: RunConfig, out_dir: str | Path, stage0_ckpt,
                  corpus_dir, budget: AblationBudget | None = None) -> dict:
    """Executes the full grid and writes tables (JSON + Markdown) and sweep
    plots (SVG) under out_dir. Returns the collected results."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if budget is None:
        budget = AblationBudget.from_config(cfg)

    def attempt(name: str, variant_cfg: RunConfig, **kw):
        try:
            return _train_variant(variant_cfg, stage0_ckpt, corpus_dir,
                                  budget, **kw)
        except Exception:
            (out_dir / f"{name}.error.txt").write_text(traceback.format_exc())
            return None

    results: dict = {"pooling": {}, "prompts": {}, "tokens": {}, "training": {}}
    # the default configuration backs one cell of every table
    default = attempt("default", cfg, with_stage2=True)

    for p in POOLING_GRID:
        if p == cfg.model.pool_size:
            results["pooling"][p] = default
        else:
            results["pooling"][p] = attempt(
                f"pool{p}", _variant_config(cfg, pool_size=p), with_stage2=False)
    for n in PROMPT_GRID:
        if n == cfg.model.n_prompts:
            results["prompts"][n] = default
        else:
            results["prompts"][n] = attempt(
                f"prompts{n}", _variant_config(cfg, n_prompts=n),
                with_stage2=False)
    results["tokens"]["full"] = default
    results["tokens"]["no_ano"] = attempt(
        "no_ano", _variant_config(cfg, use_ano_tokens=False))
    results["tokens"]["last_layer"] = attempt(
        "last_layer", _variant_config(cfg, last_layer_only=True))
    results["training"]["stage_wise"] = default
    results["training"]["joint"] = attempt("joint", cfg, joint=True)

    with open(out_dir / "ablations.json", "w") as fh:
        json.dump(results, fh, indent=2, sort_keys=True, default=str)

    def get(cell, metric):
        return None if cell is None else cell.get(metric)

    pool_rows = [{"pooling_size": p,
                  "detection_f1": get(results["pooling"][p], "detection_f1")}
                 for p in POOLING_GRID]
    prompt_rows = [{"prompt_count": n,
                    "detection_f1": get(results["prompts"][n], "detection_f1")}
                   for n in PROMPT_GRID]
    token_rows = [{"variant": name,
                   "detection_f1": get(cell, "detection_f1"),
                   "progression_overall": get(cell, "progression_overall")}
                  for name, cell in results["tokens"].items()]
    train_rows = [{"regime": name,
                   "detection_f1": get(cell, "detection_f1"),
                   "progression_overall": get(cell, "progression_overall")}
                  for name, cell in results["training"].items()]

    md = ["# Ablation sweeps", "",
          "## Pooling size", "",
          _md_table(pool_rows, ["detection_f1"], "pooling_size"), "",
          "## Soft prompt count", "",
          _md_table(prompt_rows, ["detection_f1"], "prompt_count"), "",
          "## Token pathways", "",
          _md_table(token_rows, ["detection_f1", "progression_overall"],
                    "variant"), "",
          "## Training regime", "",
          _md_table(train_rows, ["detection_f1", "progression_overall"],
                    "regime"), ""]
    sw, jt = results["training"]["stage_wise"], results["training"]["joint"]
    if sw and jt and sw.get("progression_overall") is not None \
            and jt.get("progression_overall") is not None:
        delta = sw["progression_overall"] - jt["progression_overall"]
        md.append(f"Observed stage-wise minus joint progression delta: "
                  f"{delta:+.4f} (reported, not asserted).")
        md.append("")
    (out_dir / "ablations.md").write_text("\n".join(md))

    _sweep_plot(out_dir / "pooling.svg", POOLING_GRID,
                [r["detection_f1"] for r in pool_rows],
                "pooling size p", "detection F1", "Pooling sweep")
    _sweep_plot(out_dir / "prompts.svg", PROMPT_GRID,
                [r["detection_f1"] for r in prompt_rows],
                "soft prompt count", "detection F1", "Prompt sweep")
    return results
