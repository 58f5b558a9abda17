"""Command-line entry point: ``semrel <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import data as D


def _run_config(args):
    from .train import RunConfig

    if args.config:
        cfg = RunConfig.from_file(args.config)
    else:
        cfg = RunConfig(synth=D.SynthSpec())
    over = {}
    if getattr(args, "seed", None) is not None:
        over["seeds"] = [args.seed]
    if getattr(args, "seeds", None):
        over["seeds"] = args.seeds
    if getattr(args, "out", None):
        over["out_dir"] = args.out
    for name in ("epochs", "lam", "tau", "lr"):
        if getattr(args, name, None) is not None:
            over[name] = getattr(args, name)
    return replace(cfg, **over) if over else cfg


def cmd_train(args) -> int:
    from .train import train
    from .train.report import metrics_table

    cfg = _run_config(args)
    result = train(cfg)
    print(metrics_table(result.mean, f"{cfg.variant.label} (mean over seeds {cfg.seeds})"))
    if result.mean_rank_agreement:
        print("rank agreement:", json.dumps({k: round(v, 4) for k, v in result.mean_rank_agreement.items()}))
    if cfg.out_dir:
        print(f"reports written to {cfg.out_dir}")
    return 0


def cmd_eval(args) -> int:
    from .srr import Variant
    from .train import evaluate, load_data, rank_agreement
    from .train.report import dump_json, load_checkpoint, metrics_table, write_confusion_csv

    params, meta = load_checkpoint(args.checkpoint)
    if args.config:
        cfg = _run_config(args)
    elif "config" in meta:
        from .train import RunConfig

        cfg = RunConfig.from_json(meta["config"])
    else:
        raise SystemExit("eval needs --config when the checkpoint has no metadata")
    data = load_data(cfg)
    if args.split not in data.splits:
        raise SystemExit(f"split {args.split!r} not in dataset (have {sorted(data.splits)})")
    variant = Variant(meta.get("variant", cfg.variant.kind), meta.get("drop_relation", cfg.variant.drop_relation))
    split = data.splits[args.split]
    rep = evaluate(params, split, data.K, variant)
    print(metrics_table({args.split: rep}))
    out = {"split": args.split, "metrics": rep.to_json()}
    if variant.has_importance and split.relevance is not None:
        out["rank_agreement"] = rank_agreement(params, split, variant)
        print(f"rank agreement: {out['rank_agreement']:.4f}")
    if args.out:
        d = Path(args.out)
        d.mkdir(parents=True, exist_ok=True)
        dump_json(out, d / f"eval_{args.split}.json")
        write_confusion_csv(rep, data.labels, d / f"confusion_{args.split}.csv")
    return 0


def cmd_synth(args) -> int:
    spec = D.SynthSpec()
    if args.config:
        obj = json.loads(Path(args.config).read_text(encoding="utf-8"))
        spec = D.SynthSpec.from_json(obj.get("synth", obj))
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    splits = D.synthesize(spec)
    path = D.write_dataset(splits, args.out, name=f"synth-seed{spec.seed}", K=spec.K)
    print(f"wrote {sum(len(v) for v in splits.values())} records, manifest {path}")
    print(f"digest {D.dataset_digest(splits)}")
    return 0


def _ranked_records(args):
    if args.rankings:
        from .extraction import RankRecord
        from .extraction.pipeline import _read_jsonl

        rows = _read_jsonl(Path(args.rankings))
        return [RankRecord(r["sample_id"], tuple(r["order"]), r.get("flag")) for r in rows], None
    if args.data:
        m = D.load_manifest(args.data)
        splits = D.load(args.data)
    else:
        cfg = _run_config(args)
        if cfg.data:
            m = D.load_manifest(cfg.data)
            splits = D.load(cfg.data)
        else:
            splits, m = D.synthesize(cfg.synth), None
    names = args.split or ["train"]
    records = [r for name in names for r in splits[name]]
    slots = m.fine_slots if m else None
    return records, slots


def cmd_rank_stats(args) -> int:
    records, slots = _ranked_records(args)
    table = D.rank_stats(records, slots)
    text = D.format_rank_table(table)
    print(text, end="")
    if args.out:
        d = Path(args.out)
        d.mkdir(parents=True, exist_ok=True)
        (d / "rank_stats.txt").write_text(text, encoding="utf-8")
        n = len(next(iter(table.values())))
        lines = ["slot," + ",".join(f"rank{i + 1}" for i in range(n))]
        lines += [s + "," + ",".join(map(str, c)) for s, c in table.items()]
        (d / "rank_stats.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return 0


def cmd_ablate(args) -> int:
    from .train import ablate
    from .train.report import ablation_table

    cfg = _run_config(args)
    result = ablate(cfg, args.settings)
    print(ablation_table(result))
    return 0


def cmd_pipeline(args) -> int:
    from .extraction import PipelineConfig, run_pipeline

    cfg = PipelineConfig.from_file(args.config)
    if args.out:
        cfg.out_dir = args.out
    if args.seed is not None:
        cfg.seed = args.seed
    steps = {"discover": ("discover",), "describe": ("describe",), "rank": ("rank",), "run-all": ("discover", "describe", "rank")}
    result = run_pipeline(cfg, mock_dir=args.mock, resume=args.resume, steps=steps[args.command])
    if "discover" in steps[args.command]:
        print("selected aspects:", ", ".join(f"{a.name} ({a.abbreviation}, {a.frequency})" for a in result.selected))
    if result.descriptions:
        flagged = [d.sample_id for d in result.descriptions if d.flagged]
        print(f"described {len(result.descriptions)} samples" + (f", flagged: {flagged}" if flagged else ""))
    if result.rank_table:
        print(D.format_rank_table(result.rank_table), end="")
    print(f"requests: {result.requests}, cache hits: {result.cache_hits}, outputs in {cfg.out_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="semrel", description="Ranking-supervised semantic relation reasoning.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def train_flags(sp):
        sp.add_argument("--config", help="RunConfig JSON (default: synthetic planted data)")
        sp.add_argument("--seed", type=int, help="run a single seed")
        sp.add_argument("--seeds", type=int, nargs="+", help="run these seeds and average")
        sp.add_argument("--out", help="output directory for reports, figures and checkpoint")
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--lam", type=float, help="ranking loss weight")
        sp.add_argument("--tau", type=float, help="soft-sort temperature")
        sp.add_argument("--lr", type=float)

    sp = sub.add_parser("train", help="train and report")
    train_flags(sp)
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a saved checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--config")
    sp.add_argument("--split", default="test")
    sp.add_argument("--out")
    sp.set_defaults(fn=cmd_eval, seed=None)

    sp = sub.add_parser("synth", help="write a synthetic planted dataset")
    sp.add_argument("--config", help="SynthSpec JSON (or a RunConfig with a 'synth' entry)")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_synth)

    sp = sub.add_parser("rank-stats", help="Rank@k counts per slot")
    src = sp.add_mutually_exclusive_group()
    src.add_argument("--data", help="dataset manifest")
    src.add_argument("--rankings", help="rankings.jsonl from the extraction pipeline")
    src.add_argument("--config", help="RunConfig JSON")
    sp.add_argument("--split", nargs="+", help="splits to count (default train)")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out")
    sp.set_defaults(fn=cmd_rank_stats)

    sp = sub.add_parser("ablate", help="train the full model and its ablations")
    train_flags(sp)
    sp.add_argument("--settings", nargs="+", help="ablation names (default: all)")
    sp.set_defaults(fn=cmd_ablate)

    for name, help_ in [
        ("discover", "step 1: discover and select aspects"),
        ("describe", "step 2: per-aspect descriptions"),
        ("rank", "step 3: label-conditioned rankings"),
        ("run-all", "all three steps"),
    ]:
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", required=True, help="pipeline config JSON")
        sp.add_argument("--mock", metavar="FIXTURE_DIR", help="replay scripted responses instead of calling the endpoint")
        sp.add_argument("--resume", action="store_true", help="repair a cache left torn by an interrupted run")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out")
        sp.set_defaults(fn=cmd_pipeline)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (ValueError, FileNotFoundError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
