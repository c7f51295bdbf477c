"""Command-line entry point: ``tgpolab {gen-corpus,train,eval,compare}``.

Every subcommand accepts ``--config FILE`` plus ``--key value`` for any
config key. Exit status is 0 on success, 1 for invalid configuration or
usage, and 2 when the run itself fails.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from collections import Counter
from typing import Sequence

import numpy as np

from . import config as cfgmod
from .config import RunConfig
from .optim import Variant
from .trainer import (
    CORPUS,
    EVAL,
    evaluate,
    load_checkpoint,
    read_metrics,
    reward_auc,
    run_training,
    save_checkpoint,
    substream,
    write_metrics,
)
from .vqaenv import generate_corpus, read_corpus, write_corpus

log = logging.getLogger("tgpolab")

METRICS_FILE = "metrics.csv"
CHECKPOINT_FILE = "checkpoint.txt"
CONFIG_FILE = "config.txt"

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# -- subcommands -------------------------------------------------------------------


def cmd_gen_corpus(cfg: RunConfig) -> dict:
    """Write the train and eval corpora; returns per-kind counts for each split."""
    os.makedirs(cfg.out_dir, exist_ok=True)
    counts = {}
    for split, (path, size) in enumerate(((cfg.train_path, cfg.corpus_size), (cfg.eval_path, cfg.eval_size))):
        items = generate_corpus(substream(cfg.seed, CORPUS, split), cfg.env, size, cfg.temporal_ratio)
        write_corpus(path, items)
        counts[os.path.basename(path)] = dict(sorted(Counter(i.kind.value for i in items).items()))
    return counts


def _load_corpora(cfg: RunConfig):
    missing = [p for p in (cfg.train_path, cfg.eval_path) if not os.path.exists(p)]
    if missing:
        raise FileNotFoundError(f"corpus not found: {', '.join(missing)} (run gen-corpus first)")
    return read_corpus(cfg.train_path), read_corpus(cfg.eval_path)


def cmd_train(cfg: RunConfig, corpora=None) -> dict:
    train, ev = corpora or _load_corpora(cfg)
    os.makedirs(cfg.out_dir, exist_ok=True)
    with open(os.path.join(cfg.out_dir, CONFIG_FILE), "w", encoding="utf-8") as fh:
        fh.write(cfgmod.dump(cfg))
    result = run_training(cfgmod.train_config(cfg), train, ev)
    metrics_path = os.path.join(cfg.out_dir, METRICS_FILE)
    write_metrics(metrics_path, result.metrics, cfg)
    save_checkpoint(result.state, os.path.join(cfg.out_dir, CHECKPOINT_FILE))
    final = result.final_eval
    return {
        "metrics": metrics_path,
        "steps": len(result.metrics),
        "final_eval": None if final is None else _eval_dict(final),
    }


def cmd_eval(cfg: RunConfig, checkpoint: str | None = None) -> dict:
    path = checkpoint or os.path.join(cfg.out_dir, CHECKPOINT_FILE)
    step, seed, params = load_checkpoint(path)
    ev = read_corpus(cfg.eval_path)
    out = {"checkpoint": path, "step": step, **_eval_dict(evaluate(params, ev, substream(seed, EVAL)))}
    os.makedirs(cfg.out_dir, exist_ok=True)
    with open(os.path.join(cfg.out_dir, "eval.json"), "w", encoding="utf-8") as fh:
        json.dump(out, fh, indent=2)
        fh.write("\n")
    return out


def _eval_dict(ev) -> dict:
    out = {"ordered": ev.ordered, "shuffled": ev.shuffled, "gap": ev.gap}
    for kind, sub in ev.by_kind.items():
        out[kind] = {"ordered": sub.ordered, "shuffled": sub.shuffled, "gap": sub.gap}
    return out


def curve_auc(rows, column: str) -> float:
    """AUC of one metrics column over the steps where it is logged."""
    pts = [(r.step, getattr(r, column)) for r in rows if getattr(r, column) is not None]
    return reward_auc(pts)


def cmd_compare(cfg: RunConfig, variants: Sequence[str], seeds: Sequence[int]) -> dict:
    """Train every (variant, seed) cell and summarize from the written logs.

    AUC is computed on the eval_ordered curve read back from each cell's CSV,
    so the summary always agrees with the trainer logs.
    """
    variants = [Variant(v).value for v in variants]
    if len(variants) < 2:
        raise UsageError("compare needs at least two variants")
    if not seeds:
        raise UsageError("compare needs at least one seed")
    corpora = _load_corpora(cfg)
    cells = {}
    for n, v in enumerate(variants):
        label = v if variants.count(v) == 1 else f"{v}-{variants[:n].count(v) + 1}"
        per_seed = []
        for s in seeds:
            cell_dir = os.path.join(cfg.out_dir, "compare", f"{label}-seed{s}")
            cell = cfgmod.train_config(cfg, variant=v, seed=int(s), out_dir=cell_dir)
            try:
                info = cmd_train(cell, corpora)
            except Exception as exc:
                raise RuntimeError(f"compare cell variant={v} seed={s} failed: {exc}") from exc
            rows = read_metrics(info["metrics"])
            fe = info["final_eval"]
            per_seed.append(
                {
                    "seed": int(s),
                    "auc": curve_auc(rows, "eval_ordered") if len(rows) > 1 else None,
                    "train_auc": curve_auc(rows, "mean_reward") if len(rows) > 1 else None,
                    "final_gap": fe["gap"] if fe else None,
                    "final_temporal_ordered": fe.get("temporal", {}).get("ordered") if fe else None,
                }
            )
            log.info("%s seed %s: gap=%s", label, s, per_seed[-1]["final_gap"])
        cells[label] = per_seed
    summary = {"steps": cfg.max_steps, "eval_every": cfg.eval_every, "seeds": [int(s) for s in seeds], "variants": {}}
    for v, per_seed in cells.items():
        summary["variants"][v] = {
            "mean_auc": _mean(c["auc"] for c in per_seed),
            "mean_train_auc": _mean(c["train_auc"] for c in per_seed),
            "mean_final_gap": _mean(c["final_gap"] for c in per_seed),
            "mean_final_temporal_ordered": _mean(c["final_temporal_ordered"] for c in per_seed),
            "runs": per_seed,
        }
    if len(cells) == 2:
        a, b = cells
        ga = [c["final_gap"] for c in cells[a]]
        gb = [c["final_gap"] for c in cells[b]]
        summary["gap_wins"] = {f"{b}>{a}": sum(y > x for x, y in zip(ga, gb) if x is not None and y is not None)}
    with open(os.path.join(cfg.out_dir, "compare.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2)
        fh.write("\n")
    return summary


def _mean(values):
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def format_table(summary: dict) -> str:
    head = ("variant", "mean_auc", "train_auc", "final_gap", "temporal_ord")
    body = []
    for v, s in summary["variants"].items():
        body.append((v, *(_cell(s[k]) for k in ("mean_auc", "mean_train_auc", "mean_final_gap", "mean_final_temporal_ordered"))))
    widths = [max(len(r[i]) for r in (head, *body)) for i in range(len(head))]
    lines = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths))) for r in (head, *body)]
    lines.insert(1, "  ".join("-" * w for w in widths))
    for pair, wins in summary.get("gap_wins", {}).items():
        lines.append(f"gap wins {pair}: {wins}/{len(summary['seeds'])}")
    return "\n".join(lines)


def _cell(x) -> str:
    return "-" if x is None else f"{x:.4f}"


# -- argument handling ---------------------------------------------------------------


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    group = p.add_argument_group("config keys")
    for key, typ in cfgmod.field_types().items():
        default = getattr(RunConfig, key)
        group.add_argument(f"--{key}", dest=f"cfg_{key}", metavar=typ.__name__.upper(), help=f"default: {default}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tgpolab", description="Temporal-calibration RL on a toy video QA task")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    _add_config_flags(sub.add_parser("gen-corpus", help="write train and eval corpora"))
    _add_config_flags(sub.add_parser("train", help="train one variant, write metrics and checkpoint"))
    p = sub.add_parser("eval", help="evaluate a checkpoint on the eval corpus")
    p.add_argument("--checkpoint", help=f"default: <out_dir>/{CHECKPOINT_FILE}")
    _add_config_flags(p)
    p = sub.add_parser("compare", help="train several variants over several seeds")
    p.add_argument("--variants", default="grpo,tgpo_grpo", help="comma-separated (default: grpo,tgpo_grpo)")
    p.add_argument("--seeds", default="0,1,2,3,4", help="comma-separated (default: 0,1,2,3,4)")
    _add_config_flags(p)
    return parser


def _config_from_args(args) -> RunConfig:
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    return cfgmod.build(overrides, args.config)


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = _config_from_args(args)
        if args.command == "compare":
            variants = [v.strip() for v in args.variants.split(",") if v.strip()]
            for v in variants:
                Variant(v)
            seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    except (UsageError, ValueError, OSError) as exc:
        print(f"tgpolab: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        if args.command == "gen-corpus":
            for name, counts in cmd_gen_corpus(cfg).items():
                print(f"{name}: " + ", ".join(f"{k}={n}" for k, n in counts.items()))
        elif args.command == "train":
            info = cmd_train(cfg)
            print(json.dumps(info, indent=2))
        elif args.command == "eval":
            print(json.dumps(cmd_eval(cfg, args.checkpoint), indent=2))
        else:
            summary = cmd_compare(cfg, variants, seeds)
            print(json.dumps(summary, indent=2))
            print(format_table(summary))
    except UsageError as exc:
        print(f"tgpolab: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:
        print(f"tgpolab: {args.command} failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
