"""Experiment command line.

Commands: synth, train, evaluate, ablate, report.  A single JSON config file
drives everything; flags override file values.  Exit codes: 0 success,
1 config error, 2 missing input, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import (
    ALL_PAIRS,
    ConfigError,
    ExperimentConfig,
    config_to_dict,
    default_config,
    load_config,
    parse_variant,
    variant_label,
)
from .evaluation import ablation_table, evaluate
from .experiment import as_source_role, cell_seed, run_cell
from .features import featurize
from .model import ArchConfig, Model, load_checkpoint, save_checkpoint
from .signals import load_dataset, make_domain_dataset, save_dataset
from .training import finetune_target, pretrain_source, write_history_csv

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_MISSING_INPUT = 2
EXIT_NUMERICAL = 3


def _load_config_with_overrides(args: argparse.Namespace) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else default_config()
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "out", None) is not None:
        cfg = replace(cfg, out_dir=str(args.out))
    train = cfg.train
    if getattr(args, "lr", None) is not None:
        train = replace(train, lr=args.lr)
    if getattr(args, "epochs", None) is not None:
        pre, fine = args.epochs
        train = replace(train, pretrain_epochs=pre, finetune_epochs=fine)
    return replace(cfg, train=train)


def _dataset_dir(cfg: ExperimentConfig, subset: str) -> Path:
    return Path(cfg.out_dir) / "datasets" / subset


def _load_domain(cfg: ExperimentConfig, subset: str):
    path = _dataset_dir(cfg, subset)
    if not (path / "manifest.json").is_file():
        raise FileNotFoundError(
            f"dataset for subset {subset} not found at {path}; run `vibdiag synth` first"
        )
    return load_dataset(path)


def _featurized(cfg: ExperimentConfig, subset: str):
    return featurize(_load_domain(cfg, subset), cfg.stft.stft, cfg.stft.floor_eps)


def cmd_synth(args: argparse.Namespace) -> int:
    cfg = _load_config_with_overrides(args)
    for subset in sorted(cfg.synth.subsets):
        synth_cfg = cfg.synth.subset_synth_config(subset)
        profile = cfg.synth.subsets[subset].profile
        train = make_domain_dataset(
            subset,
            cfg.synth.counts,
            cfg.synth.labeled_fraction_target,
            synth_cfg,
            cfg.seed,
            profile=profile,
            geometry=cfg.synth.geometry,
            split="train",
        )
        test = make_domain_dataset(
            subset,
            cfg.synth.test_counts,
            1.0,
            synth_cfg,
            cfg.seed,
            profile=profile,
            geometry=cfg.synth.geometry,
            split="test",
        )
        out = save_dataset(train.extend(test), _dataset_dir(cfg, subset))
        n_train = sum(1 for r in train.records)
        print(f"subset {subset}: wrote {len(train) + len(test)} samples "
              f"({n_train} train, {len(test)} test) to {out}")
    return EXIT_OK


def _parse_pair(pair: str) -> tuple[str, str]:
    if len(pair) != 3 or pair[1] != "2" or pair[0] not in "ABC" or pair[2] not in "ABC":
        raise ConfigError(f"bad pair {pair!r}; expected e.g. A2B")
    return pair[0], pair[2]


def _train_one(cfg: ExperimentConfig, pair: str, variant: str, out_dir: Path):
    source_id, target_id = _parse_pair(pair)
    head_mode, norm_method = parse_variant(variant)
    arch = replace(cfg.arch, head_mode=head_mode, norm_method=norm_method)
    model = Model(arch)
    train_cfg = replace(cfg.train, seed=cell_seed(cfg.seed, pair, variant))

    src = as_source_role(_featurized(cfg, source_id))
    tgt = _featurized(cfg, target_id)
    pre = pretrain_source(model, src, train_cfg)
    fine = finetune_target(model, pre.params, src, tgt, train_cfg)

    tag = f"{pair}_{variant}"
    ckpt = save_checkpoint(
        out_dir / f"ckpt_{tag}",
        fine.params,
        meta={
            "pair": pair,
            "variant": variant,
            "seed": train_cfg.seed,
            "head_mode": head_mode,
            "norm_method": norm_method,
            "arch": {
                "conv_channels": [b.out_channels for b in arch.conv_blocks],
                "kernel": arch.conv_blocks[0].kernel,
                "stride": arch.conv_blocks[0].stride,
                "feature_dim": arch.feature_dim,
            },
        },
    )
    history = write_history_csv(out_dir / f"history_{tag}.csv", pre.history + fine.history)
    report = evaluate(model, fine.params, tgt, split="test")
    return ckpt, history, report


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _load_config_with_overrides(args)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt, history, report = _train_one(cfg, args.pair, args.variant, out_dir)
    print(f"checkpoint: {ckpt}")
    print(f"history:    {history}")
    print(f"target test macro F1: {report.overall_macro_f1:.4f}")
    return EXIT_OK


def _arch_from_meta(cfg: ExperimentConfig, meta: dict) -> ArchConfig:
    arch = replace(cfg.arch, head_mode=meta["head_mode"], norm_method=meta["norm_method"])
    if "arch" in meta:
        from .model import ConvBlockSpec

        a = meta["arch"]
        blocks = tuple(ConvBlockSpec(c, a["kernel"], a["stride"]) for c in a["conv_channels"])
        arch = replace(arch, conv_blocks=blocks, feature_dim=a["feature_dim"])
    return arch


def cmd_evaluate(args: argparse.Namespace) -> int:
    cfg = _load_config_with_overrides(args)
    ckpt_path = Path(args.checkpoint)
    mp, meta = load_checkpoint(ckpt_path)
    pair = args.pair or meta.get("pair")
    if pair is None:
        raise ConfigError("no --pair given and checkpoint meta carries none")
    _, target_id = _parse_pair(pair)
    model = Model(_arch_from_meta(cfg, meta))
    tgt = _featurized(cfg, target_id)
    report = evaluate(model, mp, tgt, split=args.split)
    payload = {"pair": pair, "variant": meta.get("variant"), **report.to_dict()}
    text = json.dumps(payload, indent=2, sort_keys=True)
    if args.report_out:
        Path(args.report_out).write_text(text)
    print(text)
    return EXIT_OK


def _run_ablation_cell(cfg: ExperimentConfig, pair: str, variant: str, feats) -> dict:
    result = run_cell(cfg, feats, pair, variant)
    return {
        "pair": pair,
        "variant": variant,
        "seed": result.seed,
        "best_pretrain_epoch": result.pretrain.best_epoch,
        "best_finetune_epoch": result.finetune.best_epoch,
        **result.report.to_dict(),
    }


def _cell_worker(payload):
    cfg_dict, pair, variant = payload
    from .config import config_from_dict

    cfg = config_from_dict(cfg_dict)
    feats = {sid: _featurized(cfg, sid) for sid in {pair[0], pair[2]}}
    return _run_ablation_cell(cfg, pair, variant, feats)


def cmd_ablate(args: argparse.Namespace) -> int:
    cfg = _load_config_with_overrides(args)
    if args.epochs is None:
        # Desk-scale grid budget; --paper-epochs restores the full protocol.
        epochs = (100, 100) if args.paper_epochs else (30, 30)
        cfg = replace(
            cfg, train=replace(cfg.train, pretrain_epochs=epochs[0], finetune_epochs=epochs[1])
        )
    pairs = list(args.pairs.split(",")) if args.pairs else list(cfg.ablation.pairs)
    for p in pairs:
        _parse_pair(p)
    if args.variants:
        variants = args.variants.split(",")
        table1 = [v for v in cfg.ablation.table1_variants if v in variants]
        table2 = [v for v in cfg.ablation.table2_variants if v in variants]
    else:
        variants = sorted(set(cfg.ablation.table1_variants) | set(cfg.ablation.table2_variants))
        table1 = list(cfg.ablation.table1_variants)
        table2 = list(cfg.ablation.table2_variants)
    for v in variants:
        parse_variant(v)

    out_dir = Path(cfg.out_dir) / "ablation"
    out_dir.mkdir(parents=True, exist_ok=True)
    cells = [(pair, variant) for pair in pairs for variant in variants]
    results: dict[tuple[str, str], dict] = {}

    if args.parallel > 1:
        cfg_dict = config_to_dict(cfg)
        with ProcessPoolExecutor(max_workers=args.parallel) as pool:
            for (pair, variant), res in zip(
                cells, pool.map(_cell_worker, [(cfg_dict, p, v) for p, v in cells])
            ):
                results[(pair, variant)] = res
    else:
        subsets = sorted({p[0] for p in pairs} | {p[2] for p in pairs})
        feats = {sid: _featurized(cfg, sid) for sid in subsets}
        for pair, variant in cells:
            try:
                results[(pair, variant)] = _run_ablation_cell(cfg, pair, variant, feats)
            except (FloatingPointError, ValueError) as exc:
                print(f"cell {pair}/{variant} failed: {exc}", file=sys.stderr)
                results[(pair, variant)] = {
                    "pair": pair,
                    "variant": variant,
                    "failed": str(exc),
                    "overall_macro_f1": float("nan"),
                }

    for (pair, variant), res in results.items():
        (out_dir / f"cell_{pair}_{variant}.json").write_text(
            json.dumps(res, indent=2, sort_keys=True)
        )
    _write_tables(out_dir, results, pairs, table1, table2)
    print(f"ablation results under {out_dir}")
    return EXIT_OK


def _write_tables(out_dir: Path, results: dict, pairs, table1_variants, table2_variants) -> None:
    def scores_for(variants, axis):
        return (
            {
                (pair, variant_label(v, axis)): results[(pair, v)]["overall_macro_f1"]
                for pair in pairs
                for v in variants
                if (pair, v) in results and "failed" not in results[(pair, v)]
            },
            [variant_label(v, axis) for v in variants],
        )

    if table1_variants:
        scores, cols = scores_for(table1_variants, "head")
        (out_dir / "table1.csv").write_text(ablation_table(scores, pairs, cols))
    if table2_variants:
        scores, cols = scores_for(table2_variants, "norm")
        (out_dir / "table2.csv").write_text(ablation_table(scores, pairs, cols))


def cmd_report(args: argparse.Namespace) -> int:
    cfg = _load_config_with_overrides(args)
    out_dir = Path(cfg.out_dir) / "ablation"
    cell_files = sorted(out_dir.glob("cell_*.json"))
    if not cell_files:
        raise FileNotFoundError(f"no ablation cell results under {out_dir}")
    results = {}
    for f in cell_files:
        res = json.loads(f.read_text())
        results[(res["pair"], res["variant"])] = res
    pairs = [p for p in ALL_PAIRS if any(k[0] == p for k in results)]
    table1 = [v for v in cfg.ablation.table1_variants if any(k[1] == v for k in results)]
    table2 = [v for v in cfg.ablation.table2_variants if any(k[1] == v for k in results)]
    _write_tables(out_dir, results, pairs, table1, table2)
    for name in ("table1.csv", "table2.csv"):
        path = out_dir / name
        if path.is_file():
            print(f"--- {name} ---")
            print(path.read_text(), end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vibdiag",
        description="Compound-fault diagnosis experiments on synthetic vibration data",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", type=Path, default=None, help="JSON config file")
        p.add_argument("--seed", type=int, default=None, help="master seed override")
        p.add_argument("--out", type=Path, default=None, help="output directory override")
        p.add_argument("--lr", type=float, default=None, help="learning rate override")
        p.add_argument(
            "--epochs",
            type=int,
            nargs=2,
            metavar=("PRETRAIN", "FINETUNE"),
            default=None,
            help="epoch budget override",
        )

    p_synth = sub.add_parser("synth", help="synthesize the A/B/C domain datasets")
    common(p_synth)
    p_synth.set_defaults(func=cmd_synth)

    p_train = sub.add_parser("train", help="pretrain + fine-tune one domain pair")
    common(p_train)
    p_train.add_argument("--pair", required=True, help="domain pair, e.g. A2B")
    p_train.add_argument("--variant", default="moc_fln", help="head_norm token, e.g. moc_fln")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("evaluate", help="score a checkpoint on a target split")
    common(p_eval)
    p_eval.add_argument("--checkpoint", required=True, type=Path)
    p_eval.add_argument("--pair", default=None, help="override the checkpoint's pair")
    p_eval.add_argument("--split", default="test", choices=("train", "test"))
    p_eval.add_argument("--report-out", type=Path, default=None)
    p_eval.set_defaults(func=cmd_evaluate)

    p_abl = sub.add_parser("ablate", help="run the head-structure and normalization grids")
    common(p_abl)
    p_abl.add_argument("--pairs", default=None, help="comma-separated pair filter, e.g. A2C")
    p_abl.add_argument("--variants", default=None, help="comma-separated variant filter")
    p_abl.add_argument("--parallel", type=int, default=1, help="concurrent grid cells")
    p_abl.add_argument(
        "--paper-epochs",
        action="store_true",
        help="use the full 100+100 epoch protocol instead of the 30+30 grid budget",
    )
    p_abl.set_defaults(func=cmd_ablate)

    p_rep = sub.add_parser("report", help="rebuild ablation tables from cell results")
    common(p_rep)
    p_rep.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"missing input: {exc}", file=sys.stderr)
        return EXIT_MISSING_INPUT
    except FloatingPointError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
