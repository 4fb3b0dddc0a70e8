"""Macro F1 scoring over joint classes and per fault type, plus ablation tables."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .features import FeatureDataset
from .model import HEAD_NAMES, MOC_HEAD_SIZES, Model, ModelParams, N_JOINT_CLASSES

__all__ = [
    "confusion_matrix",
    "macro_f1",
    "per_class_f1",
    "EvalReport",
    "evaluate",
    "ablation_table",
]


def confusion_matrix(labels: np.ndarray, preds: np.ndarray, n_classes: int) -> np.ndarray:
    """Counts with rows = true class, columns = predicted class."""
    labels = np.asarray(labels)
    preds = np.asarray(preds)
    if labels.shape != preds.shape or labels.ndim != 1:
        raise ValueError("labels and preds must be equal-length vectors")
    if len(labels) == 0:
        raise ValueError("empty input")
    if labels.min() < 0 or labels.max() >= n_classes or preds.min() < 0 or preds.max() >= n_classes:
        raise ValueError("class indices out of range")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (labels, preds), 1)
    return cm


def per_class_f1(cm: np.ndarray) -> np.ndarray:
    """F1 per class; zero denominators (absent/never-predicted classes) give 0."""
    tp = np.diag(cm).astype(np.float64)
    pred_n = cm.sum(axis=0).astype(np.float64)
    true_n = cm.sum(axis=1).astype(np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(pred_n > 0, tp / pred_n, 0.0)
        recall = np.where(true_n > 0, tp / true_n, 0.0)
        denom = precision + recall
        f1 = np.where(denom > 0, 2.0 * precision * recall / denom, 0.0)
    return f1


def macro_f1(preds: np.ndarray, labels: np.ndarray, n_classes: int) -> float:
    """Unweighted mean of per-class F1 over all ``n_classes`` classes."""
    cm = confusion_matrix(labels, preds, n_classes)
    return float(per_class_f1(cm).mean())


@dataclass
class EvalReport:
    overall_macro_f1: float
    per_fault_f1: dict[str, float]  # keys irf, orf, mis, unb
    per_class_f1: list[float]  # length 36, joint classes
    n_samples: int

    def to_dict(self) -> dict:
        return {
            "overall_macro_f1": self.overall_macro_f1,
            "per_fault_f1": dict(self.per_fault_f1),
            "per_class_f1": list(self.per_class_f1),
            "n_samples": self.n_samples,
        }


def evaluate(
    model: Model,
    mp: ModelParams,
    data: FeatureDataset,
    split: str = "test",
    batch_size: int = 64,
) -> EvalReport:
    """Score predictions on a labeled split.

    The overall score is macro F1 over the 36 joint classes (head predictions
    are joint-encoded first); per-fault scores use each fault's own level space.
    """
    from .model import joint_from_levels

    idx = data.indices(split=split)
    if len(idx) == 0:
        raise ValueError(f"no samples in split {split!r}")
    pred_levels = []
    for start in range(0, len(idx), batch_size):
        batch = idx[start : start + batch_size]
        out, _ = model.forward(mp, data.x[batch], mode="infer")
        pred_levels.append(model.predict_levels(out))
    pred_levels = np.concatenate(pred_levels, axis=0)
    true_levels = data.levels[idx]

    pred_joint = np.array([joint_from_levels(tuple(r)) for r in pred_levels], dtype=np.int64)
    true_joint = data.joint[idx]
    overall = macro_f1(pred_joint, true_joint, N_JOINT_CLASSES)
    per_fault = {
        name: macro_f1(pred_levels[:, i], true_levels[:, i], MOC_HEAD_SIZES[i])
        for i, name in enumerate(HEAD_NAMES)
    }
    cm = confusion_matrix(true_joint, pred_joint, N_JOINT_CLASSES)
    return EvalReport(
        overall_macro_f1=overall,
        per_fault_f1=per_fault,
        per_class_f1=[float(v) for v in per_class_f1(cm)],
        n_samples=len(idx),
    )


def ablation_table(
    scores: dict[tuple[str, str], float],
    pairs: list[str],
    variants: list[str],
) -> str:
    """Render a CSV table: one row per domain pair, one column per variant,
    final row the arithmetic mean of each column.  Missing cells stay blank."""
    missing = [(p, v) for p in pairs for v in variants if (p, v) not in scores]
    if missing:
        warnings.warn(f"ablation table missing {len(missing)} cell(s): {missing}", stacklevel=2)
    lines = ["source_target," + ",".join(variants)]
    for pair in pairs:
        cells = []
        for v in variants:
            s = scores.get((pair, v))
            cells.append("" if s is None or np.isnan(s) else f"{s:.6f}")
        lines.append(pair + "," + ",".join(cells))
    avg_cells = []
    for v in variants:
        col = [scores[(p, v)] for p in pairs if (p, v) in scores and not np.isnan(scores[(p, v)])]
        avg_cells.append(f"{np.mean(col):.6f}" if col else "")
    lines.append("Average," + ",".join(avg_cells))
    return "\n".join(lines) + "\n"
