"""Command-line entry point.

Commands: synth, train, eval, probe, ablate, sweep.
Exit codes: 0 success, 1 internal failure, 2 usage/config error.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from . import data as D
from . import evaluation as E
from .config import ConfigError, RunConfig
from .model import AbmilDims, abmil_init, load_checkpoint, save_checkpoint
from .training import TrainingAbort, evaluate, fit, fit_abmil

USAGE_ERROR = 2
INTERNAL_ERROR = 1


def _load_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, train=replace(cfg.train, seed=args.seed))
    return cfg


def _prepare_out(path: str, force: bool) -> Path:
    out = Path(path)
    if out.exists() and any(out.iterdir()) and not force:
        raise ConfigError(f"output directory {out} exists and is not empty (use --force)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_dataset(cfg: RunConfig):
    if cfg.dataset_dir is None:
        raise ConfigError("config has no [data] dataset_dir")
    manifest = Path(cfg.dataset_dir) / "manifest.jsonl"
    if not manifest.exists():
        raise ConfigError(f"dataset manifest not found: {manifest}")
    return {split: D.load_split(manifest, split) for split in D.SPLITS}


def cmd_synth(args) -> int:
    cfg = _load_config(args)
    out = _prepare_out(args.out, args.force)
    bags = D.generate_synthetic_dataset(cfg.synth, cfg.train.seed)
    splits = D.assign_splits(len(bags), cfg.train.seed)
    bag_dir = out / "bags"
    bag_dir.mkdir(exist_ok=True)
    entries = []
    for bag, split in zip(bags, splits):
        rel = f"bags/{bag.bag_id}.srmb"
        D.save_bag(bag, out / rel)
        entries.append({"id": bag.bag_id, "path": rel, "label": bag.bag_label, "split": split})
    D.write_manifest(entries, out / "manifest.jsonl")
    cfg = replace(cfg, dataset_dir=str(out))
    cfg.write_resolved(out / "resolved.cfg")
    print(f"wrote {len(bags)} bags to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = _prepare_out(args.out, args.force)
    splits = _load_dataset(cfg)
    state, log = fit(splits["train"], splits["val"], cfg.train, cfg.dims)
    save_checkpoint(state, out / "checkpoint.gmck")
    log.to_jsonl(out / "trainlog.jsonl")
    cfg.write_resolved(out / "resolved.cfg")
    best = log.entries[log.best_epoch]
    print(f"best epoch {log.best_epoch}: val_auc={best['val_auc']:.4f} val_acc={best['val_accuracy']:.4f}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    out = _prepare_out(args.out, args.force)
    splits = _load_dataset(cfg)
    state = load_checkpoint(args.checkpoint)
    if state.dims != cfg.dims:
        raise ConfigError(f"checkpoint dims {state.dims} do not match config {cfg.dims}")
    report = {}
    for split in ("val", "test"):
        graphs = [D.build_graph(b) for b in splits[split]]
        report[split] = evaluate(graphs, state)
        print(f"{split}: acc={report[split]['accuracy']:.4f} auc={report[split]['auc']:.4f}")
    E.write_json(report, out / "metrics.json")
    E.write_csv([{"split": k, **v} for k, v in report.items()], out / "metrics.csv")
    cfg.write_resolved(out / "resolved.cfg")
    return 0


def cmd_probe(args) -> int:
    cfg = _load_config(args)
    out = _prepare_out(args.out, args.force)
    splits = _load_dataset(cfg)
    state = load_checkpoint(args.checkpoint)
    baseline = abmil_init(
        AbmilDims(feature_dim=cfg.synth.feature_dim, num_classes=cfg.synth.num_classes),
        cfg.train.seed,
    )
    baseline, _ = fit_abmil(splits["train"], splits["val"], baseline, cfg.train)
    rows = E.probe_comparison(
        splits["train"], splits["test"], state, baseline, seed=cfg.train.seed
    )
    E.write_json(rows, out / "probe.json")
    E.write_csv(rows, out / "probe.csv")
    cfg.write_resolved(out / "resolved.cfg")
    for row in rows:
        print(
            f"{row['representation']}: acc={row['accuracy']:.4f} "
            f"recall={row['recall']:.4f} f1={row['f1']:.4f}"
        )
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    out = _prepare_out(args.out, args.force)
    splits = _load_dataset(cfg)
    seeds = [int(s) for s in args.seeds.split(",")]
    rows = E.run_ablation(splits["train"], splits["val"], splits["test"], cfg.dims, cfg.train, seeds)
    E.write_json(rows, out / "ablation.json")
    E.write_csv(rows, out / "ablation.csv")
    cfg.write_resolved(out / "resolved.cfg")
    for row in rows:
        print(
            f"{row['combo']}: acc {row['acc_mean']:.4f} ({row['acc_min']:.4f},{row['acc_max']:.4f})"
            f"  auc {row['auc_mean']:.4f} ({row['auc_min']:.4f},{row['auc_max']:.4f})"
        )
    return 0


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    out = _prepare_out(args.out, args.force)
    splits = _load_dataset(cfg)
    ratios = [float(r) for r in args.ratios.split(",")]
    seeds = [int(s) for s in args.seeds.split(",")]
    rows = E.run_mask_sweep(splits["train"], splits["val"], splits["test"], cfg.dims, cfg.train,
                            ratios, seeds)
    E.write_json(rows, out / "sweep.json")
    E.write_csv(rows, out / "sweep.csv")
    cfg.write_resolved(out / "resolved.cfg")
    for row in rows:
        print(f"ratio {row['ratio']}: acc {row['acc_mean']:.4f} auc {row['auc_mean']:.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gridmil", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False):
        p.add_argument("--config", required=True, help="run configuration file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--force", action="store_true", help="allow a non-empty output directory")
        if checkpoint:
            p.add_argument("--checkpoint", required=True, help="model checkpoint path")

    common(sub.add_parser("synth", help="generate a synthetic dataset"))
    common(sub.add_parser("train", help="train a model"))
    common(sub.add_parser("eval", help="evaluate a checkpoint"), checkpoint=True)
    common(sub.add_parser("probe", help="instance-level KNN embedding probe"), checkpoint=True)
    p_ab = sub.add_parser("ablate", help="loss-combination ablation grid")
    common(p_ab)
    p_ab.add_argument("--seeds", default="0,1,2,3,4", help="comma-separated seeds")
    p_sw = sub.add_parser("sweep", help="mask-ratio sweep")
    common(p_sw)
    p_sw.add_argument("--ratios", default="0,0.3,0.5,0.7,0.9", help="comma-separated mask ratios")
    p_sw.add_argument("--seeds", default="0", help="comma-separated seeds")
    return parser


_COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "probe": cmd_probe,
    "ablate": cmd_ablate,
    "sweep": cmd_sweep,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, D.DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except (TrainingAbort, D.GenerationError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return INTERNAL_ERROR


if __name__ == "__main__":
    sys.exit(main())
