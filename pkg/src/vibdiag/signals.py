"""Synthetic vibration signals for compound-fault severity experiments.

A signal is built additively from the classic rotating-machinery signatures:
an unbalance tone at 1x shaft speed, a misalignment tone at 2x shaft speed
(with a weaker 1x companion), inner/outer-race impulse trains exciting a
decaying structural resonance, and Gaussian sensor noise.  Time-varying shaft
speed is handled with phase accumulators, so tones sweep and impact rates
track the instantaneous rotation frequency.

Three operating subsets (A: sinusoidal rpm with randomized torque gain,
B: triangular rpm, C: constant rpm) provide the domain-shift axis.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

__all__ = [
    "BearingGeometry",
    "SinusoidalRpm",
    "TriangularRpm",
    "ConstantRpm",
    "RpmProfile",
    "FaultCondition",
    "TorqueModulation",
    "SynthConfig",
    "Signal",
    "SampleRecord",
    "DomainDataset",
    "DEFAULT_GEOMETRY",
    "DEFAULT_SUBSET_PROFILES",
    "IRF_LEVELS_MM",
    "ORF_LEVELS_MM",
    "MIS_LEVELS_MM",
    "UNB_LEVELS_G",
    "N_CONDITIONS",
    "bpfi",
    "bpfo",
    "rpm_at",
    "synthesize",
    "all_conditions",
    "sample_seed",
    "mix_seed",
    "make_domain_dataset",
    "save_dataset",
    "load_dataset",
]

# Severity tables: level index -> physical magnitude.
IRF_LEVELS_MM = (0.0, 0.2)
ORF_LEVELS_MM = (0.0, 0.2)
MIS_LEVELS_MM = (0.0, 0.15, 0.3)
UNB_LEVELS_G = (0.0, 10.034, 18.070)

N_CONDITIONS = len(IRF_LEVELS_MM) * len(ORF_LEVELS_MM) * len(MIS_LEVELS_MM) * len(UNB_LEVELS_G)

# Misalignment also leaks energy into 1x at this fraction of its 2x amplitude.
MISALIGNMENT_ONE_X_RATIO = 0.3

_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class BearingGeometry:
    """Deep-groove ball bearing geometry used by the defect-frequency formulas."""

    n_balls: int = 9
    ball_diameter_mm: float = 7.90
    pitch_diameter_mm: float = 38.5
    contact_angle_rad: float = 0.0

    def __post_init__(self) -> None:
        if self.n_balls < 1:
            raise ValueError("n_balls must be >= 1")
        if not 0.0 < self.ball_diameter_mm < self.pitch_diameter_mm:
            raise ValueError("require 0 < ball_diameter_mm < pitch_diameter_mm")
        if not 0.0 <= self.contact_angle_rad < math.pi / 2:
            raise ValueError("contact_angle_rad must be in [0, pi/2)")


def bpfi(geom: BearingGeometry, fr_hz):
    """Ball pass frequency, inner race: (n/2) * (1 + (d/D) cos theta) * fr."""
    ratio = geom.ball_diameter_mm / geom.pitch_diameter_mm
    return 0.5 * geom.n_balls * (1.0 + ratio * math.cos(geom.contact_angle_rad)) * fr_hz


def bpfo(geom: BearingGeometry, fr_hz):
    """Ball pass frequency, outer race: (n/2) * (1 - (d/D) cos theta) * fr."""
    ratio = geom.ball_diameter_mm / geom.pitch_diameter_mm
    return 0.5 * geom.n_balls * (1.0 - ratio * math.cos(geom.contact_angle_rad)) * fr_hz


@dataclass(frozen=True)
class SinusoidalRpm:
    mean_rpm: float
    amplitude_rpm: float
    period_s: float
    phase_rad: float = 0.0

    def __post_init__(self) -> None:
        if self.mean_rpm - self.amplitude_rpm <= 0:
            raise ValueError("sinusoidal profile must keep rpm positive")
        if self.period_s <= 0:
            raise ValueError("period_s must be positive")


@dataclass(frozen=True)
class TriangularRpm:
    min_rpm: float
    max_rpm: float
    period_s: float

    def __post_init__(self) -> None:
        if self.min_rpm <= 0:
            raise ValueError("min_rpm must be positive")
        if self.min_rpm >= self.max_rpm:
            raise ValueError("require min_rpm < max_rpm")
        if self.period_s <= 0:
            raise ValueError("period_s must be positive")


@dataclass(frozen=True)
class ConstantRpm:
    rpm: float

    def __post_init__(self) -> None:
        if self.rpm <= 0:
            raise ValueError("rpm must be positive")


RpmProfile = SinusoidalRpm | TriangularRpm | ConstantRpm


def rpm_at(profile: RpmProfile, t):
    """Instantaneous rpm at time(s) ``t`` (scalar or array, seconds)."""
    t = np.asarray(t, dtype=np.float64)
    if isinstance(profile, ConstantRpm):
        return np.broadcast_to(np.float64(profile.rpm), t.shape).copy() if t.ndim else float(profile.rpm)
    if isinstance(profile, SinusoidalRpm):
        out = profile.mean_rpm + profile.amplitude_rpm * np.sin(
            2.0 * np.pi * t / profile.period_s + profile.phase_rad
        )
        return out if t.ndim else float(out)
    if isinstance(profile, TriangularRpm):
        # Symmetric triangle starting at min_rpm, peaking at half period.
        u = np.mod(t / profile.period_s, 1.0)
        tri = 1.0 - np.abs(2.0 * u - 1.0)
        out = profile.min_rpm + (profile.max_rpm - profile.min_rpm) * tri
        return out if t.ndim else float(out)
    raise TypeError(f"unknown rpm profile type: {type(profile)!r}")


def max_rpm(profile: RpmProfile) -> float:
    if isinstance(profile, ConstantRpm):
        return profile.rpm
    if isinstance(profile, SinusoidalRpm):
        return profile.mean_rpm + profile.amplitude_rpm
    return profile.max_rpm


@dataclass(frozen=True)
class FaultCondition:
    """Discrete severity levels for the four fault dimensions."""

    irf_level: int = 0
    orf_level: int = 0
    mis_level: int = 0
    unb_level: int = 0

    def __post_init__(self) -> None:
        if not 0 <= self.irf_level < len(IRF_LEVELS_MM):
            raise ValueError("irf_level out of range")
        if not 0 <= self.orf_level < len(ORF_LEVELS_MM):
            raise ValueError("orf_level out of range")
        if not 0 <= self.mis_level < len(MIS_LEVELS_MM):
            raise ValueError("mis_level out of range")
        if not 0 <= self.unb_level < len(UNB_LEVELS_G):
            raise ValueError("unb_level out of range")

    @property
    def irf_mm(self) -> float:
        return IRF_LEVELS_MM[self.irf_level]

    @property
    def orf_mm(self) -> float:
        return ORF_LEVELS_MM[self.orf_level]

    @property
    def mis_mm(self) -> float:
        return MIS_LEVELS_MM[self.mis_level]

    @property
    def unb_g(self) -> float:
        return UNB_LEVELS_G[self.unb_level]

    def levels(self) -> tuple[int, int, int, int]:
        return (self.irf_level, self.orf_level, self.mis_level, self.unb_level)

    @property
    def is_normal(self) -> bool:
        return self.levels() == (0, 0, 0, 0)


def all_conditions() -> list[FaultCondition]:
    """All 36 conditions in canonical (irf, orf, mis, unb) lexicographic order."""
    out = []
    for irf in range(len(IRF_LEVELS_MM)):
        for orf in range(len(ORF_LEVELS_MM)):
            for mis in range(len(MIS_LEVELS_MM)):
                for unb in range(len(UNB_LEVELS_G)):
                    out.append(FaultCondition(irf, orf, mis, unb))
    return out


@dataclass(frozen=True)
class TorqueModulation:
    """Piecewise-constant random gain applied to the mechanical components."""

    segment_s: float = 0.25
    gain_range: tuple[float, float] = (0.7, 1.3)

    def __post_init__(self) -> None:
        if self.segment_s <= 0:
            raise ValueError("segment_s must be positive")
        lo, hi = self.gain_range
        if not 0 < lo <= hi:
            raise ValueError("gain_range must satisfy 0 < lo <= hi")


@dataclass(frozen=True)
class SynthConfig:
    sample_rate_hz: float = 4096.0
    duration_s: float = 1.0
    noise_std: float = 0.1
    resonance_hz: float = 1200.0
    resonance_decay_s: float = 0.002
    unbalance_amp: float = 0.5
    misalignment_amp: float = 0.4
    irf_amp: float = 0.8
    orf_amp: float = 0.8
    torque_modulation: TorqueModulation | None = None

    def __post_init__(self) -> None:
        for name in ("sample_rate_hz", "duration_s", "resonance_hz", "resonance_decay_s"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("noise_std", "unbalance_amp", "misalignment_amp", "irf_amp", "orf_amp"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.resonance_hz >= self.sample_rate_hz / 2:
            raise ValueError("resonance_hz must be below Nyquist")

    @property
    def n_samples(self) -> int:
        return int(round(self.sample_rate_hz * self.duration_s))


@dataclass(frozen=True)
class Signal:
    """Uniformly sampled waveform.  Samples are float32, the sensor analogue."""

    samples: np.ndarray
    sample_rate_hz: float

    def __post_init__(self) -> None:
        if self.sample_rate_hz <= 0:
            raise ValueError("sample_rate_hz must be positive")

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate_hz


def splitmix64(x: int) -> int:
    """One round of the splitmix64 finalizer (public-domain constants)."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def mix_seed(*parts: int) -> int:
    """Deterministic 64-bit mix of integer parts, order-sensitive."""
    acc = 0x243F6A8885A308D3  # pi fractional bits; arbitrary nonzero start
    for p in parts:
        acc = splitmix64(acc ^ (int(p) & _MASK64))
    return acc


def sample_seed(master_seed: int, condition_index: int, sample_index: int) -> int:
    """Per-sample seed, independent of generation order."""
    return mix_seed(master_seed, condition_index, sample_index)


def _fault_frequencies_hz(geom: BearingGeometry, fr_max_hz: float) -> dict[str, float]:
    return {
        "1x": fr_max_hz,
        "2x": 2.0 * fr_max_hz,
        "bpfi": bpfi(geom, fr_max_hz),
        "bpfo": bpfo(geom, fr_max_hz),
    }


def _impulse_indices(rate_hz: np.ndarray, fs: float) -> np.ndarray:
    """Sample indices where the running integral of ``rate_hz`` crosses an integer."""
    psi = np.cumsum(rate_hz) / fs
    return np.flatnonzero(np.diff(np.floor(psi)) > 0) + 1


def synthesize(
    profile: RpmProfile,
    cond: FaultCondition,
    geom: BearingGeometry,
    cfg: SynthConfig,
    seed: int,
) -> Signal:
    """Generate one labeled vibration sample; deterministic in all inputs."""
    fs = cfg.sample_rate_hz
    n = cfg.n_samples
    fr_max = max_rpm(profile) / 60.0
    worst = max(_fault_frequencies_hz(geom, fr_max).values())
    if worst >= fs / 2:
        raise ValueError(
            f"fault frequency {worst:.1f} Hz at max rpm exceeds Nyquist ({fs / 2:.1f} Hz)"
        )

    t = np.arange(n, dtype=np.float64) / fs
    fr = np.asarray(rpm_at(profile, t), dtype=np.float64) / 60.0
    shaft_phase = 2.0 * np.pi * np.cumsum(fr) / fs

    rng = np.random.default_rng(seed)
    # Fixed draw order: torque gains first (when configured), then noise.
    gain = None
    if cfg.torque_modulation is not None:
        tm = cfg.torque_modulation
        seg_len = max(1, int(round(tm.segment_s * fs)))
        n_seg = -(-n // seg_len)
        gains = rng.uniform(tm.gain_range[0], tm.gain_range[1], size=n_seg)
        gain = np.repeat(gains, seg_len)[:n]

    mech = np.zeros(n, dtype=np.float64)
    if cond.unb_level > 0:
        mech += cond.unb_level * cfg.unbalance_amp * np.sin(shaft_phase)
    if cond.mis_level > 0:
        amp = cond.mis_level * cfg.misalignment_amp
        mech += amp * np.sin(2.0 * shaft_phase)
        mech += MISALIGNMENT_ONE_X_RATIO * amp * np.sin(shaft_phase)

    burst_len = max(1, int(round(5.0 * cfg.resonance_decay_s * fs)))
    tb = np.arange(burst_len, dtype=np.float64) / fs
    burst = np.exp(-tb / cfg.resonance_decay_s) * np.sin(2.0 * np.pi * cfg.resonance_hz * tb)

    if cond.irf_level > 0:
        # Inner-race impacts ride the load zone: amplitude follows shaft phase.
        for idx in _impulse_indices(bpfi(geom, fr), fs):
            amp = cond.irf_level * cfg.irf_amp * 0.5 * (1.0 + np.cos(shaft_phase[idx]))
            stop = min(n, idx + burst_len)
            mech[idx:stop] += amp * burst[: stop - idx]
    if cond.orf_level > 0:
        for idx in _impulse_indices(bpfo(geom, fr), fs):
            stop = min(n, idx + burst_len)
            mech[idx:stop] += cond.orf_level * cfg.orf_amp * burst[: stop - idx]

    if gain is not None:
        mech *= gain
    x = mech + rng.normal(0.0, cfg.noise_std, size=n)
    return Signal(samples=x.astype(np.float32), sample_rate_hz=fs)


DEFAULT_GEOMETRY = BearingGeometry()

# Subset profiles: A sweeps upward with randomized torque gain, B ramps through a
# lower band, C holds a constant speed.  Ranges chosen so 1x and 2x tones stay
# resolvable on the default STFT grid while the bands still shift across subsets.
DEFAULT_SUBSET_PROFILES: dict[str, RpmProfile] = {
    "A": SinusoidalRpm(mean_rpm=2400.0, amplitude_rpm=600.0, period_s=4.0, phase_rad=0.0),
    "B": TriangularRpm(min_rpm=1800.0, max_rpm=3000.0, period_s=4.0),
    "C": ConstantRpm(rpm=2400.0),
}
DEFAULT_TORQUE_MODULATION = TorqueModulation()

# Record-stream tags mixed into per-partition seeds.
_SPLIT_TAGS = {"train": 0, "test": 1}


@dataclass(frozen=True)
class SampleRecord:
    condition: FaultCondition
    labeled: bool
    split: str
    seed: int
    file: str | None = None


@dataclass
class DomainDataset:
    """All samples generated for one operating-condition subset."""

    subset: str
    sample_rate_hz: float
    profile: RpmProfile
    geometry: BearingGeometry
    synth_config: SynthConfig
    records: list[SampleRecord]
    signals: np.ndarray  # (N, L) float32, rows parallel to records

    def __len__(self) -> int:
        return len(self.records)

    def signal(self, i: int) -> Signal:
        return Signal(samples=self.signals[i], sample_rate_hz=self.sample_rate_hz)

    def extend(self, other: "DomainDataset") -> "DomainDataset":
        if other.subset != self.subset or other.sample_rate_hz != self.sample_rate_hz:
            raise ValueError("can only merge partitions of the same subset")
        return DomainDataset(
            subset=self.subset,
            sample_rate_hz=self.sample_rate_hz,
            profile=self.profile,
            geometry=self.geometry,
            synth_config=self.synth_config,
            records=self.records + other.records,
            signals=np.concatenate([self.signals, other.signals], axis=0),
        )


def _labeled_count(fraction: float, n: int) -> int:
    if fraction >= 1.0:
        return n
    # Guard against float dust in fraction * n before ceiling.
    return max(1, math.ceil(fraction * n - 1e-9))


def make_domain_dataset(
    subset: str,
    counts: tuple[int, int],
    labeled_fraction: float,
    cfg: SynthConfig,
    seed: int,
    *,
    profile: RpmProfile | None = None,
    geometry: BearingGeometry = DEFAULT_GEOMETRY,
    split: str = "train",
) -> DomainDataset:
    """Generate ``normal_n`` normal samples plus ``fault_n`` per faulty condition.

    The first ceil(labeled_fraction * n) samples of each condition (at least one)
    are marked labeled.  Per-sample seeds mix (seed, split tag, condition index,
    sample index), so generation order and parallelism cannot change the data.
    """
    if subset not in DEFAULT_SUBSET_PROFILES:
        raise ValueError(f"unknown subset {subset!r}; expected one of A, B, C")
    if split not in _SPLIT_TAGS:
        raise ValueError(f"unknown split {split!r}")
    normal_n, fault_n = counts
    if normal_n <= 0 or fault_n <= 0:
        raise ValueError("counts must be positive")
    if not 0.0 < labeled_fraction <= 1.0:
        raise ValueError("labeled_fraction must be in (0, 1]")
    if profile is None:
        profile = DEFAULT_SUBSET_PROFILES[subset]

    part_seed = mix_seed(seed, _SPLIT_TAGS[split])
    conditions = all_conditions()
    records: list[SampleRecord] = []
    signals: list[np.ndarray] = []
    for cond_idx, cond in enumerate(conditions):
        n = normal_n if cond.is_normal else fault_n
        n_labeled = _labeled_count(labeled_fraction, n)
        for i in range(n):
            s = sample_seed(part_seed, cond_idx, i)
            sig = synthesize(profile, cond, geometry, cfg, s)
            records.append(
                SampleRecord(condition=cond, labeled=i < n_labeled, split=split, seed=s)
            )
            signals.append(sig.samples)
    return DomainDataset(
        subset=subset,
        sample_rate_hz=cfg.sample_rate_hz,
        profile=profile,
        geometry=geometry,
        synth_config=cfg,
        records=records,
        signals=np.stack(signals, axis=0),
    )


# ---------------------------------------------------------------------------
# On-disk format: manifest.json + one little-endian float32 raw file per sample.

def _profile_to_dict(profile: RpmProfile) -> dict:
    if isinstance(profile, SinusoidalRpm):
        return {
            "kind": "sinusoidal",
            "mean_rpm": profile.mean_rpm,
            "amplitude_rpm": profile.amplitude_rpm,
            "period_s": profile.period_s,
            "phase_rad": profile.phase_rad,
        }
    if isinstance(profile, TriangularRpm):
        return {
            "kind": "triangular",
            "min_rpm": profile.min_rpm,
            "max_rpm": profile.max_rpm,
            "period_s": profile.period_s,
        }
    return {"kind": "constant", "rpm": profile.rpm}


def profile_from_dict(d: dict) -> RpmProfile:
    kind = d.get("kind")
    body = {k: v for k, v in d.items() if k != "kind"}
    if kind == "sinusoidal":
        return SinusoidalRpm(**body)
    if kind == "triangular":
        return TriangularRpm(**body)
    if kind == "constant":
        return ConstantRpm(**body)
    raise ValueError(f"unknown profile kind {kind!r}")


def _synth_config_to_dict(cfg: SynthConfig) -> dict:
    d = {
        "sample_rate_hz": cfg.sample_rate_hz,
        "duration_s": cfg.duration_s,
        "noise_std": cfg.noise_std,
        "resonance_hz": cfg.resonance_hz,
        "resonance_decay_s": cfg.resonance_decay_s,
        "unbalance_amp": cfg.unbalance_amp,
        "misalignment_amp": cfg.misalignment_amp,
        "irf_amp": cfg.irf_amp,
        "orf_amp": cfg.orf_amp,
        "torque_modulation": None,
    }
    if cfg.torque_modulation is not None:
        d["torque_modulation"] = {
            "segment_s": cfg.torque_modulation.segment_s,
            "gain_range": list(cfg.torque_modulation.gain_range),
        }
    return d


def synth_config_from_dict(d: dict) -> SynthConfig:
    body = dict(d)
    tm = body.pop("torque_modulation", None)
    if tm is not None:
        tm = TorqueModulation(segment_s=tm["segment_s"], gain_range=tuple(tm["gain_range"]))
    return SynthConfig(**body, torque_modulation=tm)


def save_dataset(dataset: DomainDataset, out_dir: str | Path) -> Path:
    """Write manifest.json plus one raw float32 file per sample.  Bit-exact."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    recs = []
    for i, rec in enumerate(dataset.records):
        fname = f"sample_{i:05d}.f32"
        (out / fname).write_bytes(np.ascontiguousarray(dataset.signals[i], dtype="<f4").tobytes())
        recs.append(
            {
                "file": fname,
                "levels": list(rec.condition.levels()),
                "labeled": rec.labeled,
                "split": rec.split,
                "seed": rec.seed,
            }
        )
    manifest = {
        "format_version": 1,
        "subset": dataset.subset,
        "sample_rate_hz": dataset.sample_rate_hz,
        "profile": _profile_to_dict(dataset.profile),
        "geometry": {
            "n_balls": dataset.geometry.n_balls,
            "ball_diameter_mm": dataset.geometry.ball_diameter_mm,
            "pitch_diameter_mm": dataset.geometry.pitch_diameter_mm,
            "contact_angle_rad": dataset.geometry.contact_angle_rad,
        },
        "synth_config": _synth_config_to_dict(dataset.synth_config),
        "records": recs,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return out


def load_dataset(in_dir: str | Path) -> DomainDataset:
    src = Path(in_dir)
    manifest_path = src / "manifest.json"
    if not manifest_path.is_file():
        raise FileNotFoundError(f"no manifest.json under {src}")
    manifest = json.loads(manifest_path.read_text())
    geometry = BearingGeometry(**manifest["geometry"])
    cfg = synth_config_from_dict(manifest["synth_config"])
    records: list[SampleRecord] = []
    signals: list[np.ndarray] = []
    for rec in manifest["records"]:
        raw = (src / rec["file"]).read_bytes()
        signals.append(np.frombuffer(raw, dtype="<f4"))
        records.append(
            SampleRecord(
                condition=FaultCondition(*rec["levels"]),
                labeled=bool(rec["labeled"]),
                split=rec["split"],
                seed=int(rec["seed"]),
                file=rec["file"],
            )
        )
    return DomainDataset(
        subset=manifest["subset"],
        sample_rate_hz=float(manifest["sample_rate_hz"]),
        profile=profile_from_dict(manifest["profile"]),
        geometry=geometry,
        synth_config=cfg,
        records=records,
        signals=np.stack(signals, axis=0) if signals else np.zeros((0, 0), dtype=np.float32),
    )
