"""Two-phase training: supervised source pretraining, then target fine-tuning
with the composite adaptation loss.  Adam with bias correction, fixed learning
rate, per-epoch validation, lowest-validation-loss checkpoint selection.

Everything is seeded and single-threaded: a fixed (seed, config, data) triple
reproduces histories and selected parameters bit for bit.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .features import FeatureDataset
from .losses import MkMmdConfig, supervised_cce_grad, total_finetune_loss
from .model import Model, ModelParams
from .signals import mix_seed

__all__ = [
    "TrainConfig",
    "AdamState",
    "adam_init",
    "adam_step",
    "TrainResult",
    "pretrain_source",
    "finetune_target",
    "write_history_csv",
    "HISTORY_FIELDS",
]

# Tags mixed into derived stream seeds.
_TAG_INIT = 101
_TAG_PRETRAIN_VAL = 102
_TAG_PRETRAIN_SHUFFLE = 103
_TAG_FINETUNE_VAL = 104
_TAG_FT_SRC = 105
_TAG_FT_TL = 106
_TAG_FT_TU = 107


@dataclass(frozen=True)
class TrainConfig:
    pretrain_epochs: int = 100
    finetune_epochs: int = 100
    lr: float = 1e-3
    batch_size: int = 32
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lambda_mmd: float = 1.0
    lambda_em: float = 0.1
    seed: int = 0
    validation_fraction: float = 0.2
    dtype: str = "float32"  # training compute dtype; gradient checks use float64
    mmd: MkMmdConfig = field(default_factory=MkMmdConfig)

    def __post_init__(self) -> None:
        if self.pretrain_epochs < 1 or self.finetune_epochs < 1:
            raise ValueError("epoch counts must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 < self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must be in (0, 1)")
        if np.dtype(self.dtype) not in (np.dtype(np.float32), np.dtype(np.float64)):
            raise ValueError("dtype must be float32 or float64")


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0


def adam_init(params: dict[str, np.ndarray]) -> AdamState:
    return AdamState(
        m={k: np.zeros_like(p) for k, p in params.items()},
        v={k: np.zeros_like(p) for k, p in params.items()},
    )


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    cfg: TrainConfig,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """In-place Adam update with bias correction; rejects non-finite gradients."""
    state.t += 1
    t = state.t
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    for name, p in params.items():
        g = grads[name]
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for parameter {name!r} at step {t}")
        m = state.m[name]
        v = state.v[name]
        m += (1.0 - cfg.beta1) * (g - m)
        v += (1.0 - cfg.beta2) * (g * g - v)
        p -= cfg.lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_eps)
        if not np.isfinite(p).all():
            raise FloatingPointError(f"non-finite parameter {name!r} after step {t}")
    return params, state


def stratified_split(
    indices: np.ndarray, classes: np.ndarray, fraction: float, seed: int
) -> tuple[np.ndarray, np.ndarray]:
    """Hold out ~fraction of ``indices`` for validation, stratified by class.

    Per-class quotas use largest-remainder rounding toward a global target of
    round(fraction * n), so singleton classes only lose their sample when the
    quota arithmetic demands it.  Returns (train_idx, val_idx), both sorted.
    """
    rng = np.random.default_rng(seed)
    n = len(indices)
    if n < 2:
        return np.sort(indices), np.array([], dtype=indices.dtype)
    target = int(round(fraction * n))
    target = min(max(target, 1), n - 1)
    uniq = np.unique(classes)
    quotas = {}
    remainders = []
    for c in uniq:
        exact = fraction * int((classes == c).sum())
        quotas[c] = int(math.floor(exact))
        remainders.append((exact - quotas[c], c))
    short = target - sum(quotas.values())
    # Break remainder ties randomly but reproducibly.
    order = rng.permutation(len(remainders))
    ranked = sorted(
        (remainders[i] for i in order), key=lambda rc: rc[0], reverse=True
    )
    for _, c in ranked[: max(short, 0)]:
        quotas[c] += 1
    val_parts = []
    for c in uniq:
        members = indices[classes == c]
        take = min(quotas[c], len(members))
        if take > 0:
            val_parts.append(rng.choice(members, size=take, replace=False))
    val = np.sort(np.concatenate(val_parts)) if val_parts else np.array([], dtype=indices.dtype)
    train = np.sort(np.setdiff1d(indices, val))
    return train, val


class _BatchCycler:
    """Cycles a sample pool in seeded shuffled order, reshuffling per pass."""

    def __init__(self, indices: np.ndarray, batch_size: int, seed: int):
        self.indices = np.asarray(indices)
        self.batch_size = min(batch_size, len(self.indices))
        self.rng = np.random.default_rng(seed)
        self._order = self.rng.permutation(self.indices)
        self._pos = 0

    def next_batch(self) -> np.ndarray:
        if len(self.indices) == 0:
            return self.indices
        if self._pos + self.batch_size > len(self._order):
            self._order = self.rng.permutation(self.indices)
            self._pos = 0
        batch = self._order[self._pos : self._pos + self.batch_size]
        self._pos += self.batch_size
        return batch


@dataclass
class TrainResult:
    params: ModelParams
    history: list[dict]
    best_epoch: int


HISTORY_FIELDS = [
    "phase",
    "epoch",
    "cce_src",
    "cce_tgt_labeled",
    "mmd",
    "em",
    "total",
    "val_loss",
    "selected",
]


def _cast_features(data: FeatureDataset, dtype: np.dtype) -> FeatureDataset:
    if data.x.dtype == dtype:
        return data
    return FeatureDataset(
        subset=data.subset,
        x=data.x.astype(dtype),
        levels=data.levels,
        joint=data.joint,
        labeled=data.labeled,
        split=data.split,
    )


def _validation_cce(model: Model, mp: ModelParams, data: FeatureDataset, idx: np.ndarray) -> float:
    out, _ = model.forward(mp, data.x[idx], mode="infer")
    loss, _ = supervised_cce_grad(out.logits, data.levels[idx], model.arch.head_mode)
    return loss


def _select_best(history: list[dict]) -> int:
    """Argmin of validation loss; ties go to the earliest epoch."""
    best, best_loss = 0, math.inf
    for i, row in enumerate(history):
        v = row["val_loss"]
        if v is not None and not math.isnan(v) and v < best_loss:
            best, best_loss = i, v
    return best


def pretrain_source(model: Model, src: FeatureDataset, cfg: TrainConfig) -> TrainResult:
    """Minimize CCE on the labeled source training split; return the params
    with the lowest validation CCE."""
    src = _cast_features(src, np.dtype(cfg.dtype))
    pool = src.indices(split="train", labeled=True)
    if len(pool) == 0:
        raise ValueError("source dataset has no labeled training samples")
    train_idx, val_idx = stratified_split(
        pool, src.joint[pool], cfg.validation_fraction, mix_seed(cfg.seed, _TAG_PRETRAIN_VAL)
    )
    mp = Model(model.arch).init_params(mix_seed(cfg.seed, _TAG_INIT)).astype(cfg.dtype)
    opt = adam_init(mp.params)
    rng = np.random.default_rng(mix_seed(cfg.seed, _TAG_PRETRAIN_SHUFFLE))

    history: list[dict] = []
    best = mp.copy()
    best_loss = math.inf
    for epoch in range(cfg.pretrain_epochs):
        perm = rng.permutation(train_idx)
        losses = []
        for start in range(0, len(perm), cfg.batch_size):
            batch = perm[start : start + cfg.batch_size]
            out, cache = model.forward(mp, src.x[batch], mode="train")
            loss, dlog = supervised_cce_grad(out.logits, src.levels[batch], model.arch.head_mode)
            grads = model.backward(mp, cache, dlog)
            adam_step(mp.params, grads, opt, cfg)
            losses.append(loss)
        val = _validation_cce(model, mp, src, val_idx) if len(val_idx) else float("nan")
        history.append(
            {
                "phase": "pretrain",
                "epoch": epoch,
                "cce_src": float(np.mean(losses)),
                "cce_tgt_labeled": None,
                "mmd": None,
                "em": None,
                "total": float(np.mean(losses)),
                "val_loss": val,
                "selected": False,
            }
        )
        if not math.isnan(val) and val < best_loss:
            best_loss = val
            best = mp.copy()
    if math.isinf(best_loss):  # no usable validation split: keep final params
        best = mp.copy()
    best_epoch = _select_best(history)
    history[best_epoch]["selected"] = True
    return TrainResult(params=best, history=history, best_epoch=best_epoch)


def finetune_target(
    model: Model,
    params0: ModelParams,
    src: FeatureDataset,
    tgt: FeatureDataset,
    cfg: TrainConfig,
) -> TrainResult:
    """Adapt pretrained params to the target domain.

    Each step draws one source batch (CCE), one target-labeled batch (CCE,
    when available), and one target-unlabeled batch (entropy term); MK-MMD
    aligns pooled features between the source batch and all target samples
    drawn that step.  Validation is CCE on a held-out target-labeled split.
    """
    src = _cast_features(src, np.dtype(cfg.dtype))
    tgt = _cast_features(tgt, np.dtype(cfg.dtype))
    src_pool = src.indices(split="train", labeled=True)
    if len(src_pool) == 0:
        raise ValueError("source dataset has no labeled training samples")
    src_train, _ = stratified_split(
        src_pool, src.joint[src_pool], cfg.validation_fraction, mix_seed(cfg.seed, _TAG_PRETRAIN_VAL)
    )
    tl_pool = tgt.indices(split="train", labeled=True)
    tu_pool = tgt.indices(split="train", labeled=False)
    if len(tu_pool) == 0:
        raise ValueError("target dataset has no unlabeled training samples")

    if len(tl_pool) > 0:
        tl_train, tl_val = stratified_split(
            tl_pool, tgt.joint[tl_pool], cfg.validation_fraction, mix_seed(cfg.seed, _TAG_FINETUNE_VAL)
        )
    else:
        warnings.warn(
            "target domain has no labeled samples; checkpoint selection falls back "
            "to the final epoch",
            stacklevel=2,
        )
        tl_train = tl_val = np.array([], dtype=np.int64)

    mp = params0.astype(cfg.dtype)  # astype copies, params0 stays untouched
    opt = adam_init(mp.params)
    rng_src = np.random.default_rng(mix_seed(cfg.seed, _TAG_FT_SRC))
    tl_stream = _BatchCycler(tl_train, cfg.batch_size, mix_seed(cfg.seed, _TAG_FT_TL))
    tu_stream = _BatchCycler(tu_pool, cfg.batch_size, mix_seed(cfg.seed, _TAG_FT_TU))

    history: list[dict] = []
    best = mp.copy()
    best_loss = math.inf
    for epoch in range(cfg.finetune_epochs):
        perm = rng_src.permutation(src_train)
        sums = {"cce_src": 0.0, "cce_tgt_labeled": 0.0, "mmd": 0.0, "em": 0.0, "total": 0.0}
        n_steps = 0
        for start in range(0, len(perm), cfg.batch_size):
            sb = perm[start : start + cfg.batch_size]
            tl = tl_stream.next_batch()
            tu = tu_stream.next_batch()
            terms, grads = total_finetune_loss(
                model,
                mp,
                src.x[sb],
                src.levels[sb],
                tgt.x[tl] if len(tl) else None,
                tgt.levels[tl] if len(tl) else None,
                tgt.x[tu],
                lambda_mmd=cfg.lambda_mmd,
                lambda_em=cfg.lambda_em,
                mmd_cfg=cfg.mmd,
            )
            adam_step(mp.params, grads, opt, cfg)
            for k in sums:
                sums[k] += terms[k]
            n_steps += 1
        val = _validation_cce(model, mp, tgt, tl_val) if len(tl_val) else float("nan")
        row = {k: s / n_steps for k, s in sums.items()}
        row.update(
            {"phase": "finetune", "epoch": epoch, "val_loss": val, "selected": False}
        )
        history.append(row)
        if not math.isnan(val) and val < best_loss:
            best_loss = val
            best = mp.copy()
    if math.isinf(best_loss):
        best = mp.copy()  # final params; warning already emitted when unlabeled-only
    best_epoch = _select_best(history)
    history[best_epoch]["selected"] = True
    return TrainResult(params=best, history=history, best_epoch=best_epoch)


def write_history_csv(path: str | Path, history: list[dict]) -> Path:
    """Emit epoch rows as CSV; absent loss terms are left blank."""
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS)
        writer.writeheader()
        for row in history:
            rec = {}
            for k in HISTORY_FIELDS:
                v = row.get(k)
                if isinstance(v, float):
                    v = repr(v)
                rec[k] = "" if v is None else v
            writer.writerow(rec)
    return out
