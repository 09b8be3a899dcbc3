"""
Evaluation metrics: average precision, mAP, accuracy and multi-run summaries.

AP is precision-at-each-positive with no interpolation. Ranking is by
descending score with ties kept in original index order.
"""

import logging
import math
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from app.core.errors import DimensionError, InputError
from app.core.schemas import EvalResult

logger = logging.getLogger(__name__)


def average_precision(scores: Sequence[float], labels: Sequence[int]) -> float:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if scores.shape != labels.shape:
        raise DimensionError(f"scores {scores.shape} vs labels {labels.shape}")
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise InputError("average precision needs at least one positive label")
    order = np.argsort(-scores, kind="stable")
    hits = labels[order]
    precision = np.cumsum(hits) / np.arange(1, len(hits) + 1)
    return float(precision[hits].sum() / n_pos)


def map_score(scores: np.ndarray, labels: np.ndarray) -> EvalResult:
    """Per-class AP over columns; classes with no positives are skipped and reported."""
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 2:
        raise DimensionError(f"score matrix {scores.shape} vs label matrix {labels.shape}")
    per_class: List[Optional[float]] = []
    skipped: List[int] = []
    for c in range(scores.shape[1]):
        if not labels[:, c].any():
            per_class.append(None)
            skipped.append(c)
            continue
        per_class.append(average_precision(scores[:, c], labels[:, c]))
    kept = [ap for ap in per_class if ap is not None]
    if skipped:
        logger.debug(f"skipped {len(skipped)} classes without positives: {skipped}")
    return EvalResult(
        per_class_ap=per_class,
        map=float(np.mean(kept)) if kept else 0.0,
        n_samples=int(scores.shape[0]),
        skipped_classes=skipped,
    )


def accuracy(logits: np.ndarray, label_indices: Sequence[int]) -> float:
    """Argmax match rate; np.argmax resolves ties to the lowest index."""
    logits = np.asarray(logits)
    label_indices = np.asarray(label_indices)
    if logits.ndim != 2 or len(logits) != len(label_indices):
        raise DimensionError(f"logits {logits.shape} vs {len(label_indices)} labels")
    if len(logits) == 0:
        return 0.0
    return float(np.mean(np.argmax(logits, axis=1) == label_indices))


def evaluate(scores: np.ndarray, labels: np.ndarray, multi_label: bool) -> EvalResult:
    """mAP always; accuracy as well for single-label tasks (labels as a one-hot matrix)."""
    result = map_score(scores, labels)
    if not multi_label:
        result.accuracy = accuracy(scores, np.argmax(labels, axis=1))
    return result


def run_stats(values: Sequence[float]) -> Tuple[float, float]:
    """Arithmetic mean and population standard deviation."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise InputError("run_stats needs at least one value")
    return float(arr.mean()), float(arr.std())


def format_stats(mean: float, std: float, decimals: int = 3) -> str:
    return f"{mean:.{decimals}f}±{std:.{decimals}f}"


def write_ap_csv(result: EvalResult, path: Union[str, Path], label_names: Optional[Sequence[str]] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n = len(result.per_class_ap)
    names = list(label_names) if label_names is not None else [str(i) for i in range(n)]
    frame = pd.DataFrame({
        "class_index": range(n),
        "label": names,
        "ap": [math.nan if ap is None else ap for ap in result.per_class_ap],
        "skipped": [ap is None for ap in result.per_class_ap],
    })
    frame.to_csv(path, index=False, float_format="%.6f")
    return path


def render_report(result: EvalResult, **extra) -> str:
    """Key-value report, one `key: value` per line."""
    lines = [f"n_samples: {result.n_samples}", f"mAP: {result.map:.6f}"]
    if result.accuracy is not None:
        lines.append(f"accuracy: {result.accuracy:.6f}")
    lines.append(f"skipped_classes: {','.join(map(str, result.skipped_classes)) or '-'}")
    lines.extend(f"{k}: {v}" for k, v in extra.items())
    return "\n".join(lines)
