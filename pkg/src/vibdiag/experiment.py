"""End-to-end experiment plumbing shared by the CLI and the test suite.

A domain dataset holds a train partition (partially labeled, per the target
protocol) and a fully labeled test partition.  When a subset plays the source
role its train samples are all treated as labeled; target roles respect the
stored labeled flags.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .config import ExperimentConfig, parse_variant
from .evaluation import EvalReport, evaluate
from .features import FeatureDataset, featurize
from .model import ArchConfig, Model, ModelParams
from .signals import DomainDataset, make_domain_dataset, mix_seed
from .training import TrainConfig, TrainResult, finetune_target, pretrain_source

__all__ = [
    "build_domain",
    "build_all_domains",
    "featurize_domains",
    "as_source_role",
    "CellResult",
    "run_cell",
    "cell_seed",
]


def build_domain(cfg: ExperimentConfig, subset: str, seed: int | None = None) -> DomainDataset:
    """Train partition plus fully labeled test partition for one subset."""
    seed = cfg.seed if seed is None else seed
    synth_cfg = cfg.synth.subset_synth_config(subset)
    profile = cfg.synth.subsets[subset].profile
    train = make_domain_dataset(
        subset,
        cfg.synth.counts,
        cfg.synth.labeled_fraction_target,
        synth_cfg,
        seed,
        profile=profile,
        geometry=cfg.synth.geometry,
        split="train",
    )
    test = make_domain_dataset(
        subset,
        cfg.synth.test_counts,
        1.0,
        synth_cfg,
        seed,
        profile=profile,
        geometry=cfg.synth.geometry,
        split="test",
    )
    return train.extend(test)


def build_all_domains(cfg: ExperimentConfig, seed: int | None = None) -> dict[str, DomainDataset]:
    return {sid: build_domain(cfg, sid, seed) for sid in sorted(cfg.synth.subsets)}


def featurize_domains(
    cfg: ExperimentConfig, domains: dict[str, DomainDataset]
) -> dict[str, FeatureDataset]:
    return {
        sid: featurize(ds, cfg.stft.stft, cfg.stft.floor_eps) for sid, ds in domains.items()
    }


def as_source_role(fd: FeatureDataset) -> FeatureDataset:
    """Source domains are fully labeled: lift the partial-labeling flags."""
    labeled = fd.labeled.copy()
    labeled[fd.split == "train"] = True
    return FeatureDataset(
        subset=fd.subset,
        x=fd.x,
        levels=fd.levels,
        joint=fd.joint,
        labeled=labeled,
        split=fd.split,
    )


def cell_seed(master_seed: int, pair: str, variant: str) -> int:
    """Stable per-cell seed independent of grid traversal order."""
    pair_code = int.from_bytes(pair.encode(), "little")
    variant_code = int.from_bytes(variant.encode(), "little")
    return mix_seed(master_seed, pair_code, variant_code)


@dataclass
class CellResult:
    pair: str
    variant: str
    seed: int
    pretrain: TrainResult
    finetune: TrainResult
    report: EvalReport
    pretrain_report: EvalReport

    @property
    def score(self) -> float:
        return self.report.overall_macro_f1


def run_cell(
    cfg: ExperimentConfig,
    feats: dict[str, FeatureDataset],
    pair: str,
    variant: str,
    seed: int | None = None,
    train_cfg: TrainConfig | None = None,
) -> CellResult:
    """Pretrain on the source, fine-tune on the target, score the target test split."""
    source_id, target_id = pair[0], pair[2]
    head_mode, norm_method = parse_variant(variant)
    arch = replace(cfg.arch, head_mode=head_mode, norm_method=norm_method)
    model = Model(arch)
    if train_cfg is None:
        train_cfg = cfg.train
    if seed is None:
        seed = cell_seed(cfg.seed, pair, variant)
    train_cfg = replace(train_cfg, seed=seed)

    src = as_source_role(feats[source_id])
    tgt = feats[target_id]
    pre = pretrain_source(model, src, train_cfg)
    fine = finetune_target(model, pre.params, src, tgt, train_cfg)
    report = evaluate(model, fine.params, tgt, split="test")
    pre_report = evaluate(model, pre.params, tgt, split="test")
    return CellResult(
        pair=pair,
        variant=variant,
        seed=train_cfg.seed,
        pretrain=pre,
        finetune=fine,
        report=report,
        pretrain_report=pre_report,
    )
