"""Experiment configuration: one JSON document, strictly validated.

Unknown keys are rejected with their full path so config typos fail loudly.
Command-line flags override file values; the file overrides built-in defaults.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

from .features import DEFAULT_FLOOR_EPS, StftConfig
from .losses import MkMmdConfig
from .model import ArchConfig, ConvBlockSpec
from .signals import (
    DEFAULT_SUBSET_PROFILES,
    DEFAULT_TORQUE_MODULATION,
    BearingGeometry,
    RpmProfile,
    SynthConfig,
    TorqueModulation,
    profile_from_dict,
    synth_config_from_dict,
    _profile_to_dict,
    _synth_config_to_dict,
)
from .training import TrainConfig

__all__ = [
    "ConfigError",
    "SubsetConfig",
    "SynthSection",
    "StftSection",
    "AblationSection",
    "ExperimentConfig",
    "default_config",
    "load_config",
    "config_from_dict",
    "config_to_dict",
    "parse_variant",
    "variant_label",
    "SUBSET_IDS",
    "ALL_PAIRS",
]

SUBSET_IDS = ("A", "B", "C")
ALL_PAIRS = ("A2B", "A2C", "B2A", "B2C", "C2A", "C2B")

TABLE1_VARIANTS = ("mcc_fln", "moc_fln")
TABLE2_VARIANTS = ("moc_bn", "moc_ln", "moc_tln", "moc_in", "moc_fln")


class ConfigError(ValueError):
    """Invalid or unknown configuration content; message carries the key path."""


def parse_variant(token: str) -> tuple[str, str]:
    """'moc_fln' -> ('MOC', 'FLN'); validates both parts."""
    parts = token.lower().split("_")
    if len(parts) != 2:
        raise ConfigError(f"variant {token!r} must look like 'moc_fln'")
    head, norm = parts[0].upper(), parts[1].upper()
    if head not in ("MCC", "MOC"):
        raise ConfigError(f"variant {token!r}: unknown head mode {head!r}")
    if norm not in ("BN", "LN", "TLN", "IN", "FLN"):
        raise ConfigError(f"variant {token!r}: unknown normalization {norm!r}")
    return head, norm


def variant_label(token: str, axis: str) -> str:
    head, norm = parse_variant(token)
    return head if axis == "head" else norm


@dataclass(frozen=True)
class SubsetConfig:
    profile: RpmProfile
    torque_modulation: TorqueModulation | None = None


@dataclass(frozen=True)
class SynthSection:
    base: SynthConfig = field(default_factory=SynthConfig)
    geometry: BearingGeometry = field(default_factory=BearingGeometry)
    subsets: dict[str, SubsetConfig] = field(
        default_factory=lambda: {
            "A": SubsetConfig(DEFAULT_SUBSET_PROFILES["A"], DEFAULT_TORQUE_MODULATION),
            "B": SubsetConfig(DEFAULT_SUBSET_PROFILES["B"]),
            "C": SubsetConfig(DEFAULT_SUBSET_PROFILES["C"]),
        }
    )
    counts: tuple[int, int] = (100, 10)  # (normal_n, fault_n), train partition
    test_counts: tuple[int, int] = (4, 4)  # balanced held-out partition
    labeled_fraction_source: float = 1.0
    labeled_fraction_target: float = 0.1

    def subset_synth_config(self, subset: str) -> SynthConfig:
        sub = self.subsets[subset]
        return replace(self.base, torque_modulation=sub.torque_modulation)


@dataclass(frozen=True)
class StftSection:
    stft: StftConfig = field(default_factory=StftConfig)
    floor_eps: float = DEFAULT_FLOOR_EPS


@dataclass(frozen=True)
class AblationSection:
    pairs: tuple[str, ...] = ALL_PAIRS
    table1_variants: tuple[str, ...] = TABLE1_VARIANTS
    table2_variants: tuple[str, ...] = TABLE2_VARIANTS

    def __post_init__(self) -> None:
        for p in self.pairs:
            if len(p) != 3 or p[1] != "2" or p[0] not in SUBSET_IDS or p[2] not in SUBSET_IDS:
                raise ConfigError(f"bad pair {p!r}; expected e.g. 'A2B'")
        for v in self.table1_variants + self.table2_variants:
            parse_variant(v)


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    synth: SynthSection = field(default_factory=SynthSection)
    stft: StftSection = field(default_factory=StftSection)
    arch: ArchConfig = field(default_factory=ArchConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ablation: AblationSection = field(default_factory=AblationSection)


def default_config() -> ExperimentConfig:
    return ExperimentConfig()


# ---------------------------------------------------------------------------
# dict <-> config with strict unknown-key checking


def _check_keys(d: dict, allowed: set[str], path: str) -> None:
    unknown = set(d) - allowed
    if unknown:
        key = sorted(unknown)[0]
        raise ConfigError(f"unknown config key: {path}.{key}" if path else f"unknown config key: {key}")


def _synth_from_dict(d: dict, path: str) -> SynthSection:
    allowed = {
        "sample_rate_hz",
        "duration_s",
        "noise_std",
        "resonance_hz",
        "resonance_decay_s",
        "unbalance_amp",
        "misalignment_amp",
        "irf_amp",
        "orf_amp",
        "geometry",
        "subsets",
        "counts",
        "test_counts",
        "labeled_fraction_source",
        "labeled_fraction_target",
    }
    _check_keys(d, allowed, path)
    defaults = SynthSection()
    base_keys = {
        k: d[k]
        for k in (
            "sample_rate_hz",
            "duration_s",
            "noise_std",
            "resonance_hz",
            "resonance_decay_s",
            "unbalance_amp",
            "misalignment_amp",
            "irf_amp",
            "orf_amp",
        )
        if k in d
    }
    base = replace(defaults.base, **base_keys)
    geometry = defaults.geometry
    if "geometry" in d:
        _check_keys(
            d["geometry"],
            {"n_balls", "ball_diameter_mm", "pitch_diameter_mm", "contact_angle_rad"},
            f"{path}.geometry",
        )
        geometry = BearingGeometry(**d["geometry"])
    subsets = dict(defaults.subsets)
    for sid, sd in d.get("subsets", {}).items():
        if sid not in SUBSET_IDS:
            raise ConfigError(f"unknown config key: {path}.subsets.{sid}")
        _check_keys(sd, {"profile", "torque_modulation"}, f"{path}.subsets.{sid}")
        profile = (
            profile_from_dict(sd["profile"]) if "profile" in sd else subsets[sid].profile
        )
        tm = subsets[sid].torque_modulation
        if "torque_modulation" in sd:
            tmd = sd["torque_modulation"]
            tm = (
                None
                if tmd is None
                else TorqueModulation(segment_s=tmd["segment_s"], gain_range=tuple(tmd["gain_range"]))
            )
        subsets[sid] = SubsetConfig(profile=profile, torque_modulation=tm)
    counts = tuple(d.get("counts", defaults.counts))
    test_counts = tuple(d.get("test_counts", defaults.test_counts))
    if isinstance(d.get("counts"), dict):
        counts = (d["counts"]["normal_n"], d["counts"]["fault_n"])
    if isinstance(d.get("test_counts"), dict):
        test_counts = (d["test_counts"]["normal_n"], d["test_counts"]["fault_n"])
    return SynthSection(
        base=base,
        geometry=geometry,
        subsets=subsets,
        counts=counts,
        test_counts=test_counts,
        labeled_fraction_source=d.get("labeled_fraction_source", defaults.labeled_fraction_source),
        labeled_fraction_target=d.get("labeled_fraction_target", defaults.labeled_fraction_target),
    )


def _arch_from_dict(d: dict, path: str) -> ArchConfig:
    allowed = {"head_mode", "norm_method", "conv_channels", "kernel", "stride", "feature_dim"}
    _check_keys(d, allowed, path)
    defaults = ArchConfig()
    kernel = d.get("kernel", 3)
    stride = d.get("stride", 2)
    if "conv_channels" in d:
        blocks = tuple(ConvBlockSpec(c, kernel, stride) for c in d["conv_channels"])
    else:
        blocks = defaults.conv_blocks
    return ArchConfig(
        head_mode=d.get("head_mode", defaults.head_mode).upper(),
        norm_method=d.get("norm_method", defaults.norm_method).upper(),
        conv_blocks=blocks,
        feature_dim=d.get("feature_dim", blocks[-1].out_channels),
    )


def _train_from_dict(d: dict, path: str) -> TrainConfig:
    allowed = {
        "pretrain_epochs",
        "finetune_epochs",
        "lr",
        "batch_size",
        "beta1",
        "beta2",
        "adam_eps",
        "lambda_mmd",
        "lambda_em",
        "validation_fraction",
        "dtype",
        "mmd",
    }
    _check_keys(d, allowed, path)
    kwargs = {k: v for k, v in d.items() if k != "mmd"}
    if "mmd" in d:
        _check_keys(d["mmd"], {"bandwidth_multipliers", "base_bandwidth", "estimator"}, f"{path}.mmd")
        md = dict(d["mmd"])
        if "bandwidth_multipliers" in md:
            md["bandwidth_multipliers"] = tuple(md["bandwidth_multipliers"])
        kwargs["mmd"] = MkMmdConfig(**md)
    return TrainConfig(**kwargs)


def config_from_dict(d: dict) -> ExperimentConfig:
    _check_keys(d, {"seed", "out_dir", "synth", "stft", "arch", "train", "ablation"}, "")
    defaults = ExperimentConfig()
    stft_sec = defaults.stft
    if "stft" in d:
        _check_keys(d["stft"], {"n_fft", "hop", "window", "floor_eps"}, "stft")
        sd = dict(d["stft"])
        floor_eps = sd.pop("floor_eps", DEFAULT_FLOOR_EPS)
        base = StftConfig()
        stft_sec = StftSection(
            stft=StftConfig(
                n_fft=sd.get("n_fft", base.n_fft),
                hop=sd.get("hop", base.hop),
                window=sd.get("window", base.window),
            ),
            floor_eps=floor_eps,
        )
    ablation = defaults.ablation
    if "ablation" in d:
        _check_keys(d["ablation"], {"pairs", "table1_variants", "table2_variants"}, "ablation")
        ad = d["ablation"]
        ablation = AblationSection(
            pairs=tuple(ad.get("pairs", ALL_PAIRS)),
            table1_variants=tuple(ad.get("table1_variants", TABLE1_VARIANTS)),
            table2_variants=tuple(ad.get("table2_variants", TABLE2_VARIANTS)),
        )
    try:
        return ExperimentConfig(
            seed=d.get("seed", 0),
            out_dir=d.get("out_dir", defaults.out_dir),
            synth=_synth_from_dict(d.get("synth", {}), "synth"),
            stft=stft_sec,
            arch=_arch_from_dict(d.get("arch", {}), "arch"),
            train=_train_from_dict(d.get("train", {}), "train"),
            ablation=ablation,
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


def config_to_dict(cfg: ExperimentConfig) -> dict:
    synth = _synth_config_to_dict(cfg.synth.base)
    synth.pop("torque_modulation")
    synth.update(
        {
            "geometry": {
                "n_balls": cfg.synth.geometry.n_balls,
                "ball_diameter_mm": cfg.synth.geometry.ball_diameter_mm,
                "pitch_diameter_mm": cfg.synth.geometry.pitch_diameter_mm,
                "contact_angle_rad": cfg.synth.geometry.contact_angle_rad,
            },
            "subsets": {
                sid: {
                    "profile": _profile_to_dict(sub.profile),
                    "torque_modulation": (
                        None
                        if sub.torque_modulation is None
                        else {
                            "segment_s": sub.torque_modulation.segment_s,
                            "gain_range": list(sub.torque_modulation.gain_range),
                        }
                    ),
                }
                for sid, sub in cfg.synth.subsets.items()
            },
            "counts": {"normal_n": cfg.synth.counts[0], "fault_n": cfg.synth.counts[1]},
            "test_counts": {
                "normal_n": cfg.synth.test_counts[0],
                "fault_n": cfg.synth.test_counts[1],
            },
            "labeled_fraction_source": cfg.synth.labeled_fraction_source,
            "labeled_fraction_target": cfg.synth.labeled_fraction_target,
        }
    )
    return {
        "seed": cfg.seed,
        "out_dir": cfg.out_dir,
        "synth": synth,
        "stft": {
            "n_fft": cfg.stft.stft.n_fft,
            "hop": cfg.stft.stft.hop,
            "window": cfg.stft.stft.window,
            "floor_eps": cfg.stft.floor_eps,
        },
        "arch": {
            "head_mode": cfg.arch.head_mode,
            "norm_method": cfg.arch.norm_method,
            "conv_channels": [b.out_channels for b in cfg.arch.conv_blocks],
            "kernel": cfg.arch.conv_blocks[0].kernel,
            "stride": cfg.arch.conv_blocks[0].stride,
            "feature_dim": cfg.arch.feature_dim,
        },
        "train": {
            "pretrain_epochs": cfg.train.pretrain_epochs,
            "finetune_epochs": cfg.train.finetune_epochs,
            "lr": cfg.train.lr,
            "batch_size": cfg.train.batch_size,
            "beta1": cfg.train.beta1,
            "beta2": cfg.train.beta2,
            "adam_eps": cfg.train.adam_eps,
            "lambda_mmd": cfg.train.lambda_mmd,
            "lambda_em": cfg.train.lambda_em,
            "validation_fraction": cfg.train.validation_fraction,
            "dtype": cfg.train.dtype,
            "mmd": {
                "bandwidth_multipliers": list(cfg.train.mmd.bandwidth_multipliers),
                "base_bandwidth": cfg.train.mmd.base_bandwidth,
                "estimator": cfg.train.mmd.estimator,
            },
        },
        "ablation": {
            "pairs": list(cfg.ablation.pairs),
            "table1_variants": list(cfg.ablation.table1_variants),
            "table2_variants": list(cfg.ablation.table2_variants),
        },
    }


def load_config(path: str | Path) -> ExperimentConfig:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"config file not found: {p}")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config root must be a JSON object")
    return config_from_dict(data)
