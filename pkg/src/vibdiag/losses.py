"""Training losses: categorical cross-entropy, entropy minimization, MK-MMD.

MK-MMD uses a bank of Gaussian kernels exp(-||a - b||^2 / (2 * sigma_i^2))
with sigma_i^2 = multiplier_i * base bandwidth, averaged with uniform weights.
The base bandwidth defaults to the median of pairwise squared distances over
the pooled sample; gradients treat it as a constant, the usual convention.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import Model, ModelParams

__all__ = [
    "MkMmdConfig",
    "softmax",
    "cce",
    "cce_grad",
    "entropy_min",
    "entropy_min_grad",
    "supervised_cce_grad",
    "head_labels",
    "mk_mmd",
    "mk_mmd_grad",
    "total_finetune_loss",
]


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cce(logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean over the batch of -ln softmax(logits)[label]."""
    return cce_grad(logits, labels)[0]


def cce_grad(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    labels = np.asarray(labels)
    b, k = logits.shape
    if b == 0:
        raise ValueError("empty batch")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError("labels out of range")
    p = softmax(logits)
    rows = np.arange(b)
    loss = float(-np.log(p[rows, labels]).mean())
    dlogits = p.copy()
    dlogits[rows, labels] -= 1.0
    return loss, dlogits / b


def entropy_min(blocks: tuple[np.ndarray, ...] | list[np.ndarray]) -> float:
    """Mean Shannon entropy of the softmax outputs, summed across heads."""
    return entropy_min_grad(blocks)[0]


def entropy_min_grad(
    blocks: tuple[np.ndarray, ...] | list[np.ndarray],
) -> tuple[float, tuple[np.ndarray, ...]]:
    total = 0.0
    grads = []
    for logits in blocks:
        b = logits.shape[0]
        if b == 0:
            raise ValueError("empty batch")
        p = softmax(logits)
        logp = np.log(p)
        ent = -(p * logp).sum(axis=1)  # (B,)
        total += float(ent.mean())
        # dH/dz_j = -p_j (ln p_j + H) per row
        grads.append(-p * (logp + ent[:, None]) / b)
    return total, tuple(grads)


def head_labels(levels: np.ndarray, head_mode: str) -> tuple[np.ndarray, ...]:
    """Per-head label vectors from (B, 4) severity levels."""
    from .model import joint_from_levels

    if head_mode == "MOC":
        return tuple(levels[:, i] for i in range(4))
    joint = np.array([joint_from_levels(tuple(row)) for row in levels], dtype=np.int64)
    return (joint,)


def supervised_cce_grad(
    logits: tuple[np.ndarray, ...], levels: np.ndarray, head_mode: str
) -> tuple[float, tuple[np.ndarray, ...]]:
    """CCE for either head structure; MOC sums unweighted across heads."""
    labels = head_labels(levels, head_mode)
    total = 0.0
    grads = []
    for block, lab in zip(logits, labels):
        loss, d = cce_grad(block, lab)
        total += loss
        grads.append(d)
    return total, tuple(grads)


@dataclass(frozen=True)
class MkMmdConfig:
    bandwidth_multipliers: tuple[float, ...] = (0.25, 0.5, 1.0, 2.0, 4.0)
    base_bandwidth: float | None = None  # None -> median heuristic per call
    estimator: str = "unbiased"

    def __post_init__(self) -> None:
        if not self.bandwidth_multipliers or any(m <= 0 for m in self.bandwidth_multipliers):
            raise ValueError("bandwidth multipliers must be positive")
        if self.base_bandwidth is not None and self.base_bandwidth <= 0:
            raise ValueError("base_bandwidth must be positive")
        if self.estimator not in ("biased", "unbiased"):
            raise ValueError("estimator must be 'biased' or 'unbiased'")

    @property
    def n_kernels(self) -> int:
        return len(self.bandwidth_multipliers)


def _pairwise_sq_dists(z: np.ndarray) -> np.ndarray:
    sq = (z * z).sum(axis=1)
    d = sq[:, None] + sq[None, :] - 2.0 * (z @ z.T)
    np.maximum(d, 0.0, out=d)
    return d


def _base_bandwidth(dists: np.ndarray, cfg: MkMmdConfig) -> float:
    if cfg.base_bandwidth is not None:
        return cfg.base_bandwidth
    n = dists.shape[0]
    iu = np.triu_indices(n, k=1)
    med = float(np.median(dists[iu])) if len(iu[0]) else 0.0
    # All-identical points give a zero median; fall back to a fixed bandwidth.
    return med if med > 0.0 else 1.0


def _coefficient_matrix(n: int, m: int, estimator: str) -> np.ndarray:
    a = np.zeros((n + m, n + m))
    if estimator == "biased":
        a[:n, :n] = 1.0 / (n * n)
        a[n:, n:] = 1.0 / (m * m)
    else:
        if n < 2 or m < 2:
            raise ValueError("unbiased estimator requires n, m >= 2")
        a[:n, :n] = 1.0 / (n * (n - 1))
        a[n:, n:] = 1.0 / (m * (m - 1))
        np.fill_diagonal(a, 0.0)
    a[:n, n:] = -1.0 / (n * m)
    a[n:, :n] = -1.0 / (n * m)
    return a


def mk_mmd(src: np.ndarray, tgt: np.ndarray, cfg: MkMmdConfig = MkMmdConfig()) -> float:
    """MMD^2 estimate between two feature samples under the kernel bank mean."""
    return mk_mmd_grad(src, tgt, cfg)[0]


def mk_mmd_grad(
    src: np.ndarray, tgt: np.ndarray, cfg: MkMmdConfig = MkMmdConfig()
) -> tuple[float, np.ndarray, np.ndarray]:
    src = np.asarray(src, dtype=np.float64)
    tgt = np.asarray(tgt, dtype=np.float64)
    if src.ndim != 2 or tgt.ndim != 2 or src.shape[1] != tgt.shape[1]:
        raise ValueError("expected (n, D) and (m, D) feature matrices")
    # Canonicalize the argument order so swapping the samples reproduces the
    # identical floating-point reduction (the estimator is symmetric; this
    # makes it exactly so).
    if (tgt.shape, tgt.tobytes()) < (src.shape, src.tobytes()):
        value, dt, ds = mk_mmd_grad(tgt, src, cfg)
        return value, ds, dt
    n, m = src.shape[0], tgt.shape[0]
    if n < 1 or m < 1:
        raise ValueError("need at least one sample per side")
    z = np.concatenate([src, tgt], axis=0)
    dists = _pairwise_sq_dists(z)
    base = _base_bandwidth(dists, cfg)
    coeff = _coefficient_matrix(n, m, cfg.estimator)

    value = 0.0
    dz = np.zeros_like(z)
    w = 1.0 / cfg.n_kernels
    for mult in cfg.bandwidth_multipliers:
        sigma_sq = mult * base
        k = np.exp(-dists / (2.0 * sigma_sq))
        mk = coeff * k
        value += w * float(mk.sum())
        # d/dz_i of sum_ij A_ij K_ij = -(2/sigma^2) * sum_j A_ij K_ij (z_i - z_j)
        row = mk.sum(axis=1)
        dz += w * (-2.0 / sigma_sq) * (row[:, None] * z - mk @ z)
    return value, dz[:n], dz[n:]


def total_finetune_loss(
    model: Model,
    mp: ModelParams,
    src_x: np.ndarray,
    src_levels: np.ndarray,
    tgt_labeled_x: np.ndarray | None,
    tgt_labeled_levels: np.ndarray | None,
    tgt_unlabeled_x: np.ndarray,
    lambda_mmd: float = 1.0,
    lambda_em: float = 0.1,
    mmd_cfg: MkMmdConfig = MkMmdConfig(),
    mode: str = "train",
) -> tuple[dict[str, float], dict[str, np.ndarray]]:
    """Composite adaptation loss and its parameter gradients.

    CCE(source) + CCE(target labeled, if any)
      + lambda_mmd * MMD^2(h_source, h_target all)
      + lambda_em * entropy(target unlabeled predictions)

    The target labeled batch may be absent (pure-UDA case).
    """
    head_mode = model.arch.head_mode
    out_s, cache_s = model.forward(mp, src_x, mode)
    cce_src, dlog_s = supervised_cce_grad(out_s.logits, src_levels, head_mode)

    has_labeled = tgt_labeled_x is not None and len(tgt_labeled_x) > 0
    if has_labeled:
        out_tl, cache_tl = model.forward(mp, tgt_labeled_x, mode)
        cce_tgt, dlog_tl = supervised_cce_grad(out_tl.logits, tgt_labeled_levels, head_mode)
    else:
        out_tl = cache_tl = None
        cce_tgt = 0.0

    out_tu, cache_tu = model.forward(mp, tgt_unlabeled_x, mode)
    em, dlog_tu = entropy_min_grad(out_tu.logits)

    h_tgt = np.concatenate([out_tl.h, out_tu.h], axis=0) if has_labeled else out_tu.h
    mmd, dh_src, dh_tgt = mk_mmd_grad(out_s.h, h_tgt, mmd_cfg)

    terms = {
        "cce_src": cce_src,
        "cce_tgt_labeled": cce_tgt,
        "mmd": mmd,
        "em": em,
    }
    terms["total"] = cce_src + cce_tgt + lambda_mmd * mmd + lambda_em * em

    grads = model.backward(mp, cache_s, dlog_s, dh=lambda_mmd * dh_src)
    n_tl = len(tgt_labeled_x) if has_labeled else 0
    if has_labeled:
        g_tl = model.backward(mp, cache_tl, dlog_tl, dh=lambda_mmd * dh_tgt[:n_tl])
        for k, v in g_tl.items():
            grads[k] += v
    dlog_tu_scaled = tuple(lambda_em * d for d in dlog_tu)
    g_tu = model.backward(mp, cache_tu, dlog_tu_scaled, dh=lambda_mmd * dh_tgt[n_tl:])
    for k, v in g_tu.items():
        grads[k] += v
    return terms, grads
