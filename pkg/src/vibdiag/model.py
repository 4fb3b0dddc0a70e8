"""Convolutional extractor with selectable head structure.

Per block: conv (3x3, stride 2, pad 1) -> normalization -> ReLU; global average
pooling over (F, T) yields the alignment features h; each head is an affine map
of h.  MCC uses a single 36-way head over the joint class space; MOC uses four
task-specific heads sized (2, 2, 3, 3) for (irf, orf, mis, unb) severity levels.

Forward/backward are implemented directly on numpy arrays so gradients can be
validated against finite differences at 64-bit precision.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .normalization import (
    DEFAULT_EPS,
    DEFAULT_MOMENTUM,
    NORM_METHODS,
    NormCache,
    NormState,
    normalize_backward,
    normalize_forward,
)
from .signals import FaultCondition, IRF_LEVELS_MM, MIS_LEVELS_MM, ORF_LEVELS_MM, UNB_LEVELS_G

__all__ = [
    "HEAD_NAMES",
    "MOC_HEAD_SIZES",
    "N_JOINT_CLASSES",
    "ArchConfig",
    "ModelParams",
    "ForwardOut",
    "Model",
    "joint_from_levels",
    "levels_from_joint",
    "save_checkpoint",
    "load_checkpoint",
]

HEAD_NAMES = ("irf", "orf", "mis", "unb")
MOC_HEAD_SIZES = (len(IRF_LEVELS_MM), len(ORF_LEVELS_MM), len(MIS_LEVELS_MM), len(UNB_LEVELS_G))
N_JOINT_CLASSES = MOC_HEAD_SIZES[0] * MOC_HEAD_SIZES[1] * MOC_HEAD_SIZES[2] * MOC_HEAD_SIZES[3]


def joint_from_levels(cond: FaultCondition | tuple[int, int, int, int]) -> int:
    """Mixed-radix joint class index: ((irf*2 + orf)*3 + mis)*3 + unb."""
    irf, orf, mis, unb = cond.levels() if isinstance(cond, FaultCondition) else cond
    if not (0 <= irf < 2 and 0 <= orf < 2 and 0 <= mis < 3 and 0 <= unb < 3):
        raise ValueError(f"levels out of range: {(irf, orf, mis, unb)}")
    return ((irf * 2 + orf) * 3 + mis) * 3 + unb


def levels_from_joint(index: int) -> FaultCondition:
    if not 0 <= index < N_JOINT_CLASSES:
        raise ValueError(f"joint index {index} out of range")
    unb = index % 3
    index //= 3
    mis = index % 3
    index //= 3
    orf = index % 2
    irf = index // 2
    return FaultCondition(irf, orf, mis, unb)


@dataclass(frozen=True)
class ConvBlockSpec:
    out_channels: int
    kernel: int = 3
    stride: int = 2


@dataclass(frozen=True)
class ArchConfig:
    head_mode: str = "MOC"
    norm_method: str = "FLN"
    conv_blocks: tuple[ConvBlockSpec, ...] = (
        ConvBlockSpec(16),
        ConvBlockSpec(32),
        ConvBlockSpec(64),
    )
    feature_dim: int = 64
    norm_eps: float = DEFAULT_EPS
    bn_momentum: float = DEFAULT_MOMENTUM

    def __post_init__(self) -> None:
        if self.head_mode not in ("MCC", "MOC"):
            raise ValueError("head_mode must be 'MCC' or 'MOC'")
        if self.norm_method not in NORM_METHODS:
            raise ValueError(f"norm_method must be one of {NORM_METHODS}")
        if not self.conv_blocks:
            raise ValueError("need at least one conv block")
        if self.feature_dim != self.conv_blocks[-1].out_channels:
            raise ValueError("feature_dim must equal the last block's out_channels (GAP features)")

    @property
    def head_sizes(self) -> tuple[int, ...]:
        return (N_JOINT_CLASSES,) if self.head_mode == "MCC" else MOC_HEAD_SIZES

    @property
    def head_names(self) -> tuple[str, ...]:
        return ("joint",) if self.head_mode == "MCC" else HEAD_NAMES


@dataclass
class ModelParams:
    """Named trainable tensors plus non-trainable buffers (BN running stats)."""

    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "ModelParams":
        return ModelParams(
            params={k: v.copy() for k, v in self.params.items()},
            buffers={k: v.copy() for k, v in self.buffers.items()},
        )

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(
            params={k: v.astype(dtype) for k, v in self.params.items()},
            buffers={k: v.astype(dtype) for k, v in self.buffers.items()},
        )

    def n_parameters(self) -> int:
        return sum(v.size for v in self.params.values())


@dataclass
class ForwardOut:
    h: np.ndarray  # (B, feature_dim) alignment features
    logits: tuple[np.ndarray, ...]  # one block (MCC) or four blocks (MOC)


def _conv_forward(x, w, b, stride, pad):
    batch, c_in, h_in, w_in = x.shape
    c_out, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (h_in + 2 * pad - kh) // stride + 1
    ow = (w_in + 2 * pad - kw) // stride + 1
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride][:, :, :oh, :ow]
    col = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5)).reshape(
        batch * oh * ow, c_in * kh * kw
    )
    y = col @ w.reshape(c_out, -1).T + b
    y = y.reshape(batch, oh, ow, c_out).transpose(0, 3, 1, 2)
    cache = (col, x.shape, w.shape, stride, pad, (oh, ow))
    return np.ascontiguousarray(y), cache


def _conv_backward(cache, w, dy):
    col, x_shape, w_shape, stride, pad, (oh, ow) = cache
    batch, c_in, h_in, w_in = x_shape
    c_out, _, kh, kw = w_shape
    dyc = np.ascontiguousarray(dy.transpose(0, 2, 3, 1)).reshape(batch * oh * ow, c_out)
    db = dyc.sum(axis=0)
    dw = (dyc.T @ col).reshape(w_shape)
    dcol = (dyc @ w.reshape(c_out, -1)).reshape(batch, oh, ow, c_in, kh, kw)
    dcol = dcol.transpose(0, 3, 1, 2, 4, 5)  # (B, C, OH, OW, kh, kw)
    dxp = np.zeros((batch, c_in, h_in + 2 * pad, w_in + 2 * pad), dtype=dcol.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += dcol[
                :, :, :, :, i, j
            ]
    return dxp[:, :, pad : pad + h_in, pad : pad + w_in], dw, db


class Model:
    def __init__(self, arch: ArchConfig):
        self.arch = arch

    # -- parameters ---------------------------------------------------------

    def init_params(self, seed: int) -> ModelParams:
        """Fan-in-scaled uniform init for conv/head weights; identity affine."""
        rng = np.random.default_rng(seed)
        params: dict[str, np.ndarray] = {}
        buffers: dict[str, np.ndarray] = {}
        c_in = 1
        for i, blk in enumerate(self.arch.conv_blocks):
            fan_in = c_in * blk.kernel * blk.kernel
            limit = np.sqrt(6.0 / fan_in)
            params[f"conv{i}.w"] = rng.uniform(
                -limit, limit, size=(blk.out_channels, c_in, blk.kernel, blk.kernel)
            )
            params[f"conv{i}.b"] = np.zeros(blk.out_channels)
            params[f"norm{i}.gamma"] = np.ones(blk.out_channels)
            params[f"norm{i}.beta"] = np.zeros(blk.out_channels)
            if self.arch.norm_method == "BN":
                buffers[f"norm{i}.running_mean"] = np.zeros(blk.out_channels)
                buffers[f"norm{i}.running_var"] = np.ones(blk.out_channels)
            c_in = blk.out_channels
        limit = np.sqrt(6.0 / self.arch.feature_dim)
        for name, size in zip(self.arch.head_names, self.arch.head_sizes):
            params[f"head_{name}.w"] = rng.uniform(-limit, limit, size=(size, self.arch.feature_dim))
            params[f"head_{name}.b"] = np.zeros(size)
        return ModelParams(params=params, buffers=buffers)

    def _norm_state(self, mp: ModelParams, i: int, mode: str) -> NormState:
        return NormState(
            gamma=mp.params[f"norm{i}.gamma"],
            beta=mp.params[f"norm{i}.beta"],
            eps=self.arch.norm_eps,
            momentum=self.arch.bn_momentum,
            running_mean=mp.buffers.get(f"norm{i}.running_mean"),
            running_var=mp.buffers.get(f"norm{i}.running_var"),
            mode=mode,
        )

    # -- forward / backward -------------------------------------------------

    def forward(self, mp: ModelParams, x: np.ndarray, mode: str = "train"):
        """Returns (ForwardOut, cache).  BN in train mode updates running stats."""
        if x.ndim != 4 or x.shape[1] != 1:
            raise ValueError(f"expected input (B, 1, F, T), got {x.shape}")
        if mode not in ("train", "infer"):
            raise ValueError("mode must be 'train' or 'infer'")
        a = np.asarray(x)
        if a.dtype not in (np.float32, np.float64):
            a = a.astype(np.float64)
        param_dtype = mp.params[next(iter(mp.params))].dtype
        if a.dtype != param_dtype:
            a = a.astype(param_dtype)
        block_caches = []
        for i, blk in enumerate(self.arch.conv_blocks):
            y, conv_cache = _conv_forward(
                a, mp.params[f"conv{i}.w"], mp.params[f"conv{i}.b"], blk.stride, blk.kernel // 2
            )
            z, norm_cache = normalize_forward(y, self.arch.norm_method, self._norm_state(mp, i, mode))
            mask = z > 0
            a = z * mask
            block_caches.append((conv_cache, norm_cache, mask))
        pool_shape = a.shape
        h = a.mean(axis=(2, 3))
        logits = tuple(
            h @ mp.params[f"head_{name}.w"].T + mp.params[f"head_{name}.b"]
            for name in self.arch.head_names
        )
        cache = (block_caches, pool_shape, h)
        return ForwardOut(h=h, logits=logits), cache

    def backward(
        self,
        mp: ModelParams,
        cache,
        dlogits: tuple[np.ndarray, ...],
        dh: np.ndarray | None = None,
    ) -> dict[str, np.ndarray]:
        """Gradients w.r.t. every trainable tensor.

        ``dlogits`` seeds the loss gradient per head; ``dh`` adds gradient
        flowing directly into the pooled features (alignment losses).
        """
        block_caches, pool_shape, h = cache
        if len(dlogits) != len(self.arch.head_names):
            raise ValueError("dlogits block count does not match head count")
        grads: dict[str, np.ndarray] = {}
        dh_total = np.zeros_like(h) if dh is None else np.asarray(dh, dtype=h.dtype).copy()
        for name, dlog in zip(self.arch.head_names, dlogits):
            w = mp.params[f"head_{name}.w"]
            grads[f"head_{name}.w"] = dlog.T @ h
            grads[f"head_{name}.b"] = dlog.sum(axis=0)
            dh_total += dlog @ w
        _, _, fh, ft = pool_shape
        da = np.broadcast_to(dh_total[:, :, None, None], pool_shape) / (fh * ft)
        da = np.ascontiguousarray(da)
        for i in reversed(range(len(self.arch.conv_blocks))):
            conv_cache, norm_cache, mask = block_caches[i]
            dz = da * mask
            dy, dgamma, dbeta = normalize_backward(norm_cache, dz)
            grads[f"norm{i}.gamma"] = dgamma
            grads[f"norm{i}.beta"] = dbeta
            da, dw, db = _conv_backward(conv_cache, mp.params[f"conv{i}.w"], dy)
            grads[f"conv{i}.w"] = dw
            grads[f"conv{i}.b"] = db
        return grads

    # -- prediction ---------------------------------------------------------

    def predict_levels(self, out: ForwardOut) -> np.ndarray:
        """Severity levels (B, 4); argmax ties break toward the lowest index."""
        if self.arch.head_mode == "MOC":
            return np.stack([blk.argmax(axis=1) for blk in out.logits], axis=1)
        joint = out.logits[0].argmax(axis=1)
        return np.array([levels_from_joint(int(j)).levels() for j in joint], dtype=np.int64)

    def predict(self, out: ForwardOut) -> list[FaultCondition]:
        return [FaultCondition(*row) for row in self.predict_levels(out)]


# ---------------------------------------------------------------------------
# Checkpoint container: JSON index + raw little-endian float32 payload.

def save_checkpoint(path: str | Path, mp: ModelParams, meta: dict | None = None) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    payload = bytearray()
    index: dict = {"format_version": 1, "dtype": "<f4", "tensors": [], "meta": meta or {}}
    for group, tensors in (("params", mp.params), ("buffers", mp.buffers)):
        for name, arr in tensors.items():
            raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            index["tensors"].append(
                {
                    "group": group,
                    "name": name,
                    "shape": list(arr.shape),
                    "offset": len(payload),
                    "nbytes": len(raw),
                }
            )
            payload.extend(raw)
    (out / "tensors.bin").write_bytes(bytes(payload))
    (out / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True))
    return out


def load_checkpoint(path: str | Path) -> tuple[ModelParams, dict]:
    src = Path(path)
    index_path = src / "index.json"
    if not index_path.is_file():
        raise FileNotFoundError(f"no checkpoint index under {src}")
    index = json.loads(index_path.read_text())
    payload = (src / "tensors.bin").read_bytes()
    params: dict[str, np.ndarray] = {}
    buffers: dict[str, np.ndarray] = {}
    for entry in index["tensors"]:
        raw = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype="<f4").reshape(entry["shape"]).astype(np.float64)
        (params if entry["group"] == "params" else buffers)[entry["name"]] = arr
    return ModelParams(params=params, buffers=buffers), index.get("meta", {})
