"""STFT feature extraction into the [batch, channel, frequency, time] layout.

The single accelerometer channel gives C = 1.  Tensors are float64 end to end;
normalization and the network operate on log-magnitude spectrograms.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .signals import DomainDataset, Signal

__all__ = [
    "StftConfig",
    "FeatureDataset",
    "stft",
    "log_magnitude",
    "batch_features",
    "featurize",
    "cache_features",
    "load_cached_features",
]

DEFAULT_FLOOR_EPS = 1e-6


@dataclass(frozen=True)
class StftConfig:
    n_fft: int = 256
    hop: int = 128
    window: str = "hann"

    def __post_init__(self) -> None:
        if self.n_fft < 2 or (self.n_fft & (self.n_fft - 1)) != 0:
            raise ValueError("n_fft must be a power of two")
        if not 0 < self.hop <= self.n_fft:
            raise ValueError("hop must satisfy 0 < hop <= n_fft")
        if self.window != "hann":
            raise ValueError(f"unsupported window {self.window!r}")

    @property
    def n_bins(self) -> int:
        return self.n_fft // 2 + 1

    def n_frames(self, n_samples: int) -> int:
        if n_samples < self.n_fft:
            raise ValueError("signal shorter than one frame")
        return (n_samples - self.n_fft) // self.hop + 1


def hann_window(n: int) -> np.ndarray:
    """Periodic Hann window (DFT-even convention)."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def stft(signal: Signal, cfg: StftConfig) -> np.ndarray:
    """One-sided magnitude STFT, shape (F, T) with F = n_fft/2 + 1.

    Frame t covers samples [t*hop, t*hop + n_fft); no padding, trailing
    samples that do not fill a frame are dropped.
    """
    x = np.asarray(signal.samples, dtype=np.float64)
    n_frames = cfg.n_frames(len(x))
    frames = np.lib.stride_tricks.sliding_window_view(x, cfg.n_fft)[:: cfg.hop][:n_frames]
    spec = np.abs(np.fft.rfft(frames * hann_window(cfg.n_fft), axis=1))
    return np.ascontiguousarray(spec.T)


def log_magnitude(spec: np.ndarray, floor_eps: float = DEFAULT_FLOOR_EPS) -> np.ndarray:
    """Elementwise ln(spec + floor_eps); monotone and finite for spec >= 0."""
    if floor_eps <= 0:
        raise ValueError("floor_eps must be positive")
    return np.log(spec + floor_eps)


def batch_features(
    signals: list[Signal],
    cfg: StftConfig,
    floor_eps: float = DEFAULT_FLOOR_EPS,
) -> np.ndarray:
    """Stack per-signal log-magnitude STFTs into (B, 1, F, T).

    All signals must share length and sample rate.  An empty batch yields
    shape (0, 1, F, 0) since the frame count is undefined without a signal.
    """
    if not signals:
        return np.zeros((0, 1, cfg.n_bins, 0), dtype=np.float64)
    lengths = {len(s.samples) for s in signals}
    if len(lengths) != 1:
        raise ValueError(f"heterogeneous signal lengths: {sorted(lengths)}")
    rates = {s.sample_rate_hz for s in signals}
    if len(rates) != 1:
        raise ValueError("heterogeneous sample rates")
    specs = [log_magnitude(stft(s, cfg), floor_eps) for s in signals]
    return np.stack(specs, axis=0)[:, None, :, :]


@dataclass
class FeatureDataset:
    """Featurized view of a domain dataset, ready for training and evaluation."""

    subset: str
    x: np.ndarray  # (N, 1, F, T) float64
    levels: np.ndarray  # (N, 4) int64, columns (irf, orf, mis, unb)
    joint: np.ndarray  # (N,) int64 joint class index
    labeled: np.ndarray  # (N,) bool
    split: np.ndarray  # (N,) unicode, "train" or "test"

    def __len__(self) -> int:
        return self.x.shape[0]

    def indices(self, split: str | None = None, labeled: bool | None = None) -> np.ndarray:
        mask = np.ones(len(self), dtype=bool)
        if split is not None:
            mask &= self.split == split
        if labeled is not None:
            mask &= self.labeled == labeled
        return np.flatnonzero(mask)


def featurize(
    dataset: DomainDataset,
    cfg: StftConfig,
    floor_eps: float = DEFAULT_FLOOR_EPS,
) -> FeatureDataset:
    from .model import joint_from_levels  # local import avoids a cycle at import time

    sigs = [dataset.signal(i) for i in range(len(dataset))]
    x = batch_features(sigs, cfg, floor_eps)
    levels = np.array([rec.condition.levels() for rec in dataset.records], dtype=np.int64)
    joint = np.array([joint_from_levels(rec.condition) for rec in dataset.records], dtype=np.int64)
    labeled = np.array([rec.labeled for rec in dataset.records], dtype=bool)
    split = np.array([rec.split for rec in dataset.records])
    return FeatureDataset(
        subset=dataset.subset, x=x, levels=levels, joint=joint, labeled=labeled, split=split
    )


def cache_features(
    dataset_dir: str | Path,
    dataset: DomainDataset,
    cfg: StftConfig,
    floor_eps: float = DEFAULT_FLOOR_EPS,
) -> Path:
    """Write per-sample feature tensors under <dataset_dir>/features/.

    Raw little-endian float32 with a JSON sidecar recording the STFT settings.
    """
    out = Path(dataset_dir) / "features"
    out.mkdir(parents=True, exist_ok=True)
    shape = None
    for i in range(len(dataset)):
        spec = log_magnitude(stft(dataset.signal(i), cfg), floor_eps)
        shape = spec.shape
        (out / f"sample_{i:05d}.f32").write_bytes(
            np.ascontiguousarray(spec, dtype="<f4").tobytes()
        )
    sidecar = {
        "n_fft": cfg.n_fft,
        "hop": cfg.hop,
        "window": cfg.window,
        "floor_eps": floor_eps,
        "shape": list(shape) if shape is not None else None,
        "n_samples": len(dataset),
    }
    (out / "stft_config.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    return out


def load_cached_features(dataset_dir: str | Path) -> tuple[np.ndarray, StftConfig, float]:
    """Read a features/ cache back as (B, 1, F, T) float32-exact tensors."""
    feat_dir = Path(dataset_dir) / "features"
    sidecar = json.loads((feat_dir / "stft_config.json").read_text())
    cfg = StftConfig(n_fft=sidecar["n_fft"], hop=sidecar["hop"], window=sidecar["window"])
    shape = tuple(sidecar["shape"])
    tensors = []
    for i in range(sidecar["n_samples"]):
        raw = (feat_dir / f"sample_{i:05d}.f32").read_bytes()
        tensors.append(np.frombuffer(raw, dtype="<f4").reshape(shape))
    x = (
        np.stack(tensors, axis=0)[:, None, :, :]
        if tensors
        else np.zeros((0, 1) + shape, dtype=np.float32)
    )
    return x, cfg, float(sidecar["floor_eps"])
