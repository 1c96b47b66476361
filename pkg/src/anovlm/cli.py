"""Command-line entry point.

Subcommands: gen-data, train, eval, inspect. Every command resolves one
RunConfig (defaults <- --config YAML <- --seed) and writes it next to its
outputs. Exit codes: 0 success, 1 user error (bad arguments, missing
prerequisites, existing outputs without --overwrite), 2 internal error.
The output root defaults to $ANOVLM_OUT or ./runs.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import traceback
from pathlib import Path

import numpy as np
import torch


class UserError(RuntimeError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2
        raise UserError(message)


def _add_common(p: _Parser):
    p.add_argument("--config", default=None, help="YAML config overrides")
    p.add_argument("--seed", type=int, default=None, help="base run seed")
    p.add_argument("--out", default=None,
                   help="output root (default $ANOVLM_OUT or ./runs)")
    p.add_argument("--overwrite", action="store_true",
                   help="replace existing outputs instead of failing")


def build_parser() -> _Parser:
    parser = _Parser(prog="anovlm", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[], help="generate the corpus")
    _add_common(p)
    p.add_argument("--count", type=int, default=None,
                   help="override the stage-1 split size")
    p.add_argument("--splits", default=None,
                   help="per-split seed overrides, e.g. stage1=301,stage2=401")

    p = sub.add_parser("train", help="run one curriculum stage")
    _add_common(p)
    p.add_argument("--stage", required=True,
                   choices=["0", "1", "2", "3", "joint"])

    p = sub.add_parser("eval", help="evaluate a trained run")
    _add_common(p)
    p.add_argument("--task", required=True,
                   choices=["detect", "progress", "ground", "ablate"])
    p.add_argument("--budget", default="full", choices=["full", "smoke"],
                   help="ablate only: smoke shrinks every grid cell's "
                        "training and eval slices")

    p = sub.add_parser("inspect", help="dump visual artifacts for one sample")
    _add_common(p)
    p.add_argument("--sample", type=int, required=True, help="test split index")
    p.add_argument("--pair", action="store_true",
                   help="inspect a test pair instead of a single image")
    return parser


def _resolve_out(args) -> Path:
    root = args.out or os.environ.get("ANOVLM_OUT", "runs")
    return Path(root)


def _load_cfg(args):
    import yaml

    from .config import load_config

    try:
        return load_config(args.config, args.seed)
    except (OSError, KeyError, TypeError, yaml.YAMLError) as exc:
        raise UserError(f"bad config: {exc}") from exc


def _guard_exists(path: Path, overwrite: bool, what: str):
    if path.exists() and not overwrite:
        raise UserError(f"{what} already exists at {path}; pass --overwrite "
                        f"to replace it")


def cmd_gen_data(args) -> int:
    from .config import dump_config
    from .data import build_corpus

    cfg = _load_cfg(args)
    if args.count is not None:
        cfg.data.n_stage1 = args.count
    out = _resolve_out(args)
    corpus_dir = out / "corpus"
    _guard_exists(corpus_dir / "manifest.json", args.overwrite, "corpus")
    seeds = {split: cfg.split_seed(split) for split in
             ("backbone", "warmup", "stage1", "stage2", "stage3",
              "test_single", "test_pair")}
    if args.splits:
        for item in args.splits.split(","):
            name, _, value = item.partition("=")
            if name not in seeds:
                raise UserError(f"unknown split {name!r} in --splits")
            if not value.isdigit():
                raise UserError(f"--splits entry {item!r} needs name=integer")
            seeds[name] = int(value)
    if len(set(seeds.values())) != len(seeds):
        dupes = sorted({s for s in seeds.values()
                        if list(seeds.values()).count(s) > 1})
        raise UserError(f"split seeds must be disjoint; duplicated: {dupes}")
    manifest = build_corpus(corpus_dir, cfg.data, seeds)
    dump_config(cfg, corpus_dir / "config.yaml")
    print(json.dumps({s: m["sha256"][:12] for s, m in manifest["splits"].items()},
                     indent=2, sort_keys=True))
    return 0


def cmd_train(args) -> int:
    from .config import dump_config
    from .training import TrainingError, run_stage

    cfg = _load_cfg(args)
    out = _resolve_out(args)
    name = f"stage{args.stage}" if args.stage != "joint" else "joint"
    _guard_exists(out / "checkpoints" / f"{name}.avw", args.overwrite,
                  f"checkpoint for stage {args.stage}")
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.yaml")
    try:
        run_stage(cfg, args.stage, out)
    except TrainingError as exc:
        raise UserError(str(exc)) from exc
    print(f"stage {args.stage} complete; checkpoint at "
          f"{out / 'checkpoints' / (name + '.avw')}")
    return 0


def _load_run_bundle(cfg, out: Path, need: str):
    from .pipeline import load_bundle

    path = out / "checkpoints" / f"{need}.avw"
    if not path.exists():
        raise UserError(f"missing checkpoint {path}; train --stage {need[-1]} "
                        f"first")
    bundle, _ = load_bundle(path, cfg)
    return bundle


def cmd_eval(args) -> int:
    from .config import dump_config
    from .training import ensure_corpus, load_corpus_split

    cfg = _load_cfg(args)
    out = _resolve_out(args)
    report_dir = out / "reports" / args.task
    corpus_dir = ensure_corpus(cfg, out)

    if args.task == "ablate":
        from .ablation import AblationBudget, run_ablations

        _guard_exists(report_dir / "ablations.json", args.overwrite,
                      "ablation report")
        stage0 = out / "checkpoints" / "stage0.avw"
        if not stage0.exists():
            raise UserError(f"missing checkpoint {stage0}; train --stage 0 first")
        report_dir.mkdir(parents=True, exist_ok=True)
        dump_config(cfg, report_dir / "config.yaml")
        budget = AblationBudget.smoke() if args.budget == "smoke" else None
        run_ablations(cfg, report_dir, stage0, corpus_dir, budget)
        print(f"ablation tables and plots written to {report_dir}")
        return 0

    from .evaluation import (eval_detection, eval_grounding, eval_progression,
                             write_report)

    need = {"detect": "stage1", "progress": "stage2", "ground": "stage3"}[args.task]
    bundle = _load_run_bundle(cfg, out, need)
    _guard_exists(report_dir / f"{args.task}.json", args.overwrite,
                  f"{args.task} report")
    report_dir.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, report_dir / "config.yaml")
    if args.task == "detect":
        report, _ = eval_detection(bundle, load_corpus_split(corpus_dir,
                                                             "test_single"))
        write_report(report, report_dir / "detect", "Detection")
    elif args.task == "progress":
        report, _ = eval_progression(bundle, load_corpus_split(corpus_dir,
                                                               "test_pair"))
        write_report(report, report_dir / "progress", "Progression")
    else:
        from .viz import save_float32_sidecar, save_gray_png, save_overlay_png

        samples = load_corpus_split(corpus_dir, "test_single")
        report, heatmaps = eval_grounding(bundle, samples)
        write_report(report, report_dir / "ground", "Grounding")
        save_float32_sidecar(heatmaps, report_dir / "heatmaps.f32")
        for i, (s, hm) in enumerate(zip(samples[:8], heatmaps[:8])):
            save_gray_png(hm, report_dir / f"heatmap{i:03d}.png")
            save_overlay_png(s.image, hm, report_dir / f"overlay{i:03d}.png")
    print(f"{args.task} report written to {report_dir}")
    return 0


def cmd_inspect(args) -> int:
    from .config import dump_config
    from .data import PAIR_QUESTION, SINGLE_QUESTION
    from .pipeline import pair_forward, single_forward
    from .sequence import render_template
    from .training import ensure_corpus, load_corpus_split
    from .viz import save_grid_csv, save_gray_png, save_overlay_png

    cfg = _load_cfg(args)
    out = _resolve_out(args)
    ckpt_dir = out / "checkpoints"
    bundle = None
    for name in ("stage3", "stage2", "stage1", "stage0"):
        if (ckpt_dir / f"{name}.avw").exists():
            bundle = _load_run_bundle(cfg, out, name)
            break
    if bundle is None:
        raise UserError(f"no checkpoints under {ckpt_dir}; train first")
    corpus_dir = ensure_corpus(cfg, out)
    split = "test_pair" if args.pair else "test_single"
    samples = load_corpus_split(corpus_dir, split)
    if not 0 <= args.sample < len(samples):
        raise UserError(f"sample index {args.sample} outside 0..{len(samples)-1} "
                        f"of {split}")
    sample = samples[args.sample]
    dest = out / "inspect" / f"{split}{args.sample:05d}"
    _guard_exists(dest, args.overwrite, "inspect dump")
    dest.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, dest / "config.yaml")
    with torch.no_grad():
        if args.pair:
            im1 = torch.from_numpy(sample.image1).unsqueeze(0)
            im2 = torch.from_numpy(sample.image2).unsqueeze(0)
            (_, a1, _), (_, a2, _), diff_out = pair_forward(bundle, im1, im2)
            for tag, ano in (("1", a1), ("2", a2)):
                if ano is not None:
                    amap = ano.map[0].numpy()
                    save_gray_png(amap, dest / f"anomaly_map{tag}.png",
                                  upscale=16, lo=-1.0, hi=1.0)
                    save_grid_csv(amap, dest / f"anomaly_map{tag}.csv")
            p = bundle.cfg.model.pool_size
            qnorm = diff_out.queries[0].norm(dim=-1).reshape(p, p).numpy()
            save_grid_csv(qnorm, dest / "diff_query_norms.csv")
            (dest / "template.txt").write_text(
                render_template("pair", PAIR_QUESTION))
            summary = {"label": sample.label, "answer": sample.answer,
                       "map1_mean": float(a1.map.mean()) if a1 else None,
                       "map2_mean": float(a2.map.mean()) if a2 else None}
        else:
            images = torch.from_numpy(sample.image).unsqueeze(0)
            features, ano_out, _ = single_forward(bundle, images, with_ano=True)
            amap = ano_out.map[0].numpy()
            save_gray_png(amap, dest / "anomaly_map.png", upscale=16,
                          lo=-1.0, hi=1.0)
            save_grid_csv(amap, dest / "anomaly_map.csv")
            heat = bundle.heatmap.decode(features, ano_out.tokens)[0].numpy()
            save_overlay_png(sample.image, heat, dest / "heatmap_overlay.png")
            (dest / "template.txt").write_text(
                render_template("single", SINGLE_QUESTION))
            summary = {"label": sample.label, "answer": sample.answer,
                       "map_mean": float(amap.mean()),
                       "heatmap_mean": float(heat.mean())}
    with open(dest / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    print(f"inspection artifacts written to {dest}")
    return 0


def main(argv=None) -> int:
    torch.set_num_threads(max(1, os.cpu_count() or 1))
    np.seterr(all="warn")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        handler = {"gen-data": cmd_gen_data, "train": cmd_train,
                   "eval": cmd_eval, "inspect": cmd_inspect}[args.command]
        return handler(args)
    except UserError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception:
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
