"""Five normalization schemes over [B, C, F, T] tensors, with exact gradients.

Statistics axes per method (population mean/variance, keepdims):

    BN   over (B, F, T)  per channel          running stats for inference
    LN   over (C, F, T)  per sample
    TLN  over  T         per (sample, channel, frequency bin)
    IN   over (F, T)     per (sample, channel)
    FLN  over  F         per (sample, channel, time frame)

FLN is the frequency-axis variant: for a fixed (b, c, t), all frequency bins
share one mean and variance, so each spectrogram column is standardized while
the across-frequency shape of the column is preserved up to an affine map.
All methods carry per-channel affine parameters gamma/beta.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "NORM_METHODS",
    "NormState",
    "create_norm_state",
    "norm_stats",
    "normalize_forward",
    "normalize_backward",
]

NORM_METHODS = ("BN", "LN", "TLN", "IN", "FLN")

_REDUCE_AXES: dict[str, tuple[int, ...]] = {
    "BN": (0, 2, 3),
    "LN": (1, 2, 3),
    "TLN": (3,),
    "IN": (2, 3),
    "FLN": (2,),
}

DEFAULT_EPS = 1e-5
DEFAULT_MOMENTUM = 0.1


def _check_method(method: str) -> None:
    if method not in _REDUCE_AXES:
        raise ValueError(f"unknown normalization method {method!r}; expected one of {NORM_METHODS}")


@dataclass
class NormState:
    """Learnable affine parameters plus BN's running statistics."""

    gamma: np.ndarray  # (C,)
    beta: np.ndarray  # (C,)
    eps: float = DEFAULT_EPS
    momentum: float = DEFAULT_MOMENTUM
    running_mean: np.ndarray | None = None  # (C,), BN only
    running_var: np.ndarray | None = None  # (C,), BN only
    mode: str = "train"

    def __post_init__(self) -> None:
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.gamma.shape != self.beta.shape or self.gamma.ndim != 1:
            raise ValueError("gamma and beta must be 1-d arrays of equal length")
        if self.mode not in ("train", "infer"):
            raise ValueError("mode must be 'train' or 'infer'")


def create_norm_state(
    method: str,
    channels: int,
    eps: float = DEFAULT_EPS,
    momentum: float = DEFAULT_MOMENTUM,
    mode: str = "train",
) -> NormState:
    _check_method(method)
    gamma = np.ones(channels, dtype=np.float64)
    beta = np.zeros(channels, dtype=np.float64)
    if method == "BN":
        return NormState(
            gamma=gamma,
            beta=beta,
            eps=eps,
            momentum=momentum,
            running_mean=np.zeros(channels, dtype=np.float64),
            running_var=np.ones(channels, dtype=np.float64),
            mode=mode,
        )
    return NormState(gamma=gamma, beta=beta, eps=eps, momentum=momentum, mode=mode)


def norm_stats(x: np.ndarray, method: str) -> tuple[np.ndarray, np.ndarray]:
    """Population mean and variance over the method's axes, keepdims shapes."""
    _check_method(method)
    if x.ndim != 4:
        raise ValueError(f"expected a (B, C, F, T) tensor, got shape {x.shape}")
    if min(x.shape) < 1:
        raise ValueError("all dims must be >= 1")
    if method == "BN" and x.shape[0] < 2:
        raise ValueError("BN batch statistics require B >= 2")
    axes = _REDUCE_AXES[method]
    mean = x.mean(axis=axes, keepdims=True)
    var = x.var(axis=axes, keepdims=True)
    return mean, var


@dataclass
class NormCache:
    method: str
    axes: tuple[int, ...]
    x_hat: np.ndarray
    inv_std: np.ndarray
    gamma: np.ndarray
    bn_infer: bool = False


def normalize_forward(x: np.ndarray, method: str, state: NormState) -> tuple[np.ndarray, NormCache]:
    """y = gamma[c] * (x - mean) / sqrt(var + eps) + beta[c].

    BN in train mode normalizes with batch statistics and folds them into the
    running estimates (in place on ``state``); in infer mode it uses the
    running estimates and is a pure per-channel affine map.
    """
    _check_method(method)
    if not np.isfinite(x).all():
        raise ValueError("input tensor contains non-finite values")
    if x.ndim != 4:
        raise ValueError(f"expected a (B, C, F, T) tensor, got shape {x.shape}")
    c = x.shape[1]
    if state.gamma.shape[0] != c:
        raise ValueError(f"affine parameters sized {state.gamma.shape[0]}, tensor has C={c}")

    gamma4 = state.gamma.reshape(1, c, 1, 1)
    beta4 = state.beta.reshape(1, c, 1, 1)

    if method == "BN" and state.mode == "infer":
        if state.running_mean is None or state.running_var is None:
            raise ValueError("BN inference requires running statistics")
        mean = state.running_mean.reshape(1, c, 1, 1)
        var = state.running_var.reshape(1, c, 1, 1)
        inv_std = 1.0 / np.sqrt(var + state.eps)
        x_hat = (x - mean) * inv_std
        y = gamma4 * x_hat + beta4
        return y, NormCache(method, (), x_hat, inv_std, state.gamma, bn_infer=True)

    mean, var = norm_stats(x, method)
    if method == "BN":
        m = state.momentum
        state.running_mean += m * (mean.reshape(c) - state.running_mean)
        state.running_var += m * (var.reshape(c) - state.running_var)
    inv_std = 1.0 / np.sqrt(var + state.eps)
    x_hat = (x - mean) * inv_std
    y = gamma4 * x_hat + beta4
    return y, NormCache(method, _REDUCE_AXES[method], x_hat, inv_std, state.gamma)


def normalize_backward(
    cache: NormCache, dy: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Exact gradients of normalize_forward: (dx, dgamma, dbeta)."""
    x_hat = cache.x_hat
    if dy.shape != x_hat.shape:
        raise ValueError(f"dy shape {dy.shape} does not match forward shape {x_hat.shape}")
    c = x_hat.shape[1]
    dbeta = dy.sum(axis=(0, 2, 3))
    dgamma = (dy * x_hat).sum(axis=(0, 2, 3))
    dx_hat = dy * cache.gamma.reshape(1, c, 1, 1)
    if cache.bn_infer:
        return dx_hat * cache.inv_std, dgamma, dbeta
    axes = cache.axes
    dx = cache.inv_std * (
        dx_hat
        - dx_hat.mean(axis=axes, keepdims=True)
        - x_hat * (dx_hat * x_hat).mean(axis=axes, keepdims=True)
    )
    return dx, dgamma, dbeta
