"""
Training pipeline: loss, learning-rate schedules, balanced sampling, the
epoch loop, checkpoint weight averaging and output ensembling.

A run writes into its output directory:

    epoch_001.astc ...   one checkpoint per epoch
    averaged.astc        weight average of the last `average_last` epochs (all by default)
    best.astc            best epoch on the eval split, when one is given
    metrics.jsonl        one EpochRecord per line
"""

import logging
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Deque, Dict, List, Mapping, Optional, Sequence, Union

import numpy as np

from app.core import tensor as T
from app.core.augment import augment_batch
from app.core.checkpoint import save_params
from app.core.dataset import FeatureSet
from app.core.errors import AggregationError, ContractError, InputError, NumericError
from app.core.metrics import evaluate
from app.core.model import ASTParams, init_head, logits_batch, predict_scores, resize_for_config
from app.core.optim import OptimizerState, adam_step
from app.core.schemas import ASTConfig, EpochRecord, PositionalMode, RunConfig, TrainConfig
from app.core.tensor import Tape, Tensor

logger = logging.getLogger(__name__)

METRICS_FILE = "metrics.jsonl"


def bce_loss(probs: Tensor, targets: Tensor) -> Tensor:
    return T.binary_cross_entropy(probs, targets)


def lr_at(epoch: int, config: TrainConfig) -> float:
    """Learning rate for a 1-based epoch."""
    if epoch < 1:
        raise ContractError(f"epochs are 1-based, got {epoch}")
    s = config.schedule
    if s.kind == "constant" or epoch <= s.after:
        return config.initial_lr
    if s.kind == "halve_every":
        return config.initial_lr * s.factor ** ((epoch - s.after - 1) // s.every + 1)
    return config.initial_lr * s.factor ** (epoch - s.after)


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

def balanced_weights(label_matrix: np.ndarray) -> np.ndarray:
    """
    Per-sample weight = sum over its positive classes of 1 / class positive count,
    normalised to sum to 1. Classes with no positives contribute nothing.
    """
    positives = np.asarray(label_matrix) > 0
    empty = np.flatnonzero(~positives.any(axis=1))
    if len(empty):
        raise InputError(f"samples {empty.tolist()} have no positive label; balanced sampling needs one")
    counts = positives.sum(axis=0).astype(np.float64)
    inv = np.divide(1.0, counts, out=np.zeros_like(counts), where=counts > 0)
    weights = positives @ inv
    return weights / weights.sum()


def epoch_order(n: int, rng: np.random.Generator, weights: Optional[np.ndarray] = None) -> np.ndarray:
    """A shuffled pass over the data, or n weighted draws with replacement."""
    if weights is None:
        return rng.permutation(n)
    return rng.choice(n, size=n, replace=True, p=weights)


# ---------------------------------------------------------------------------
# Aggregation
# ---------------------------------------------------------------------------

def _as_arrays(p: Union[ASTParams, Mapping[str, np.ndarray]]) -> Dict[str, np.ndarray]:
    return p.arrays() if isinstance(p, ASTParams) else {k: np.asarray(v) for k, v in p.items()}


def _order_free_mean(stack: np.ndarray) -> np.ndarray:
    # sorting along the member axis makes the float64 sum independent of input order
    return np.sort(stack.astype(np.float64), axis=0).sum(axis=0) / stack.shape[0]


def weight_average(
    checkpoints: Sequence[Union[ASTParams, Mapping[str, np.ndarray]]],
    last: Optional[int] = None,
) -> ASTParams:
    """Elementwise mean per named tensor over the checkpoints (or only the last `last` of them)."""
    if not checkpoints:
        raise AggregationError("weight averaging needs at least one checkpoint")
    members = [_as_arrays(c) for c in checkpoints]
    if last is not None:
        members = members[-last:]
    names = list(members[0])
    for i, m in enumerate(members[1:], start=1):
        if set(m) != set(names):
            diff = sorted(set(m) ^ set(names))
            raise AggregationError(f"checkpoint {i} tensor names differ from checkpoint 0: {diff}")
        bad = [k for k in names if m[k].shape != members[0][k].shape]
        if bad:
            raise AggregationError(f"checkpoint {i} shapes differ for {bad}")
    averaged = {
        k: _order_free_mean(np.stack([m[k] for m in members])).astype(members[0][k].dtype)
        for k in names
    }
    logger.debug(f"averaged {len(members)} checkpoints ({len(names)} tensors)")
    return ASTParams.from_arrays(averaged)


def ensemble_predict(outputs: Sequence[np.ndarray]) -> np.ndarray:
    """Elementwise mean of member scores (post-sigmoid probabilities for multi-label)."""
    if not outputs:
        raise AggregationError("ensemble needs at least one member output")
    arrays = [np.asarray(o) for o in outputs]
    shapes = {a.shape for a in arrays}
    if len(shapes) != 1:
        raise AggregationError(f"ensemble members disagree on output shape: {sorted(shapes)}")
    return _order_free_mean(np.stack(arrays)).astype(np.float32)


# ---------------------------------------------------------------------------
# Fine-tuning from an audio-trained model
# ---------------------------------------------------------------------------

def reset_head(
    params: ASTParams,
    old: ASTConfig,
    new: ASTConfig,
    rng: Union[np.random.Generator, int] = 0,
    mode: PositionalMode = "bilinear",
) -> ASTParams:
    """Reuse a trained encoder for a new label set and input length: fresh head, resized positions."""
    rng = np.random.default_rng(rng) if isinstance(rng, int) else rng
    if (old.embed_dim, old.depth, old.heads, old.mlp_ratio) != (new.embed_dim, new.depth, new.heads, new.mlp_ratio):
        raise ContractError("reset_head keeps the encoder; embed_dim/depth/heads/mlp_ratio must match")
    out = resize_for_config(params, old, new.model_copy(update={"num_classes": old.num_classes}), mode)
    out = ASTParams(dict(out.tensors))
    for name, arr in init_head(new, rng).items():
        out[name] = Tensor(arr)
    out.validate(new)
    logger.info(f"reset head: {old.num_classes} -> {new.num_classes} classes, frames {old.target_frames} -> {new.target_frames}")
    return out


# ---------------------------------------------------------------------------
# Epoch loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    last: ASTParams
    averaged: ASTParams
    log: List[EpochRecord] = field(default_factory=list)
    checkpoints: List[Path] = field(default_factory=list)
    best_epoch: Optional[int] = None
    best: Optional[ASTParams] = None


def _batch_loss(x: np.ndarray, y: np.ndarray, params: ASTParams, config: ASTConfig, loss: str) -> Tensor:
    logits = logits_batch(x, params, config)
    targets = Tensor(y.astype(logits.dtype))
    if loss == "ce":
        return T.cross_entropy(logits, targets)
    return bce_loss(T.sigmoid(logits), targets)


def _eval_metric(result, multi_label: bool) -> float:
    return result.map if multi_label or result.accuracy is None else result.accuracy


def train(
    run: RunConfig,
    data: FeatureSet,
    params: ASTParams,
    out_dir: Optional[Union[str, Path]] = None,
    eval_data: Optional[FeatureSet] = None,
    label_names: Optional[Sequence[str]] = None,
) -> TrainResult:
    if len(data) == 0:
        raise InputError("training set is empty")
    config, tc = run.model, run.train
    if data.features.shape[1:] != (config.target_frames, config.n_mels):
        raise InputError(
            f"features are {data.features.shape[1]}x{data.features.shape[2]}, "
            f"model expects {config.target_frames}x{config.n_mels}"
        )
    if data.labels.shape[1] != config.num_classes:
        raise InputError(f"dataset has {data.labels.shape[1]} classes, model has {config.num_classes}")
    params.validate(config)

    out = Path(out_dir) if out_dir is not None else None
    meta = dict(labels=data.label_ids, label_names=list(label_names) if label_names else None,
                normalization=data.stats.model_dump())
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / METRICS_FILE).write_text("", encoding="utf-8")

    if tc.epochs == 0:
        result = TrainResult(last=params, averaged=params)
        if out is not None:
            result.checkpoints.append(save_params(out / "averaged.astc", params, config, epoch=0, **meta))
        logger.info("zero epochs requested; returning initial parameters")
        return result

    rng = np.random.default_rng(tc.seed)
    weights = balanced_weights(data.labels) if tc.balanced_sampling else None
    params = params.copy(requires_grad=True)
    state = OptimizerState.for_params(params, tc.adam_betas, tc.adam_eps)
    window: Deque[Dict[str, np.ndarray]] = deque(maxlen=tc.average_last)
    result = TrainResult(last=params, averaged=params)
    best_score = -math.inf

    for epoch in range(1, tc.epochs + 1):
        lr = lr_at(epoch, tc)
        order = epoch_order(len(data), rng, weights)
        losses = []
        for start in range(0, len(order), tc.batch_size):
            idx = order[start:start + tc.batch_size]
            x, y = augment_batch(data.features[idx], data.labels[idx], tc, rng)
            names = list(params)
            with Tape() as tape:
                loss = _batch_loss(x, y, params, config, tc.loss)
                grads = tape.gradients(loss, [params[n] for n in names])
            value = loss.item()
            if not math.isfinite(value):
                raise NumericError(f"non-finite loss {value} at epoch {epoch}, batch starting at {start} (lr={lr:g})")
            losses.append(value)
            params, state = adam_step(params, dict(zip(names, grads)), state, lr)

        record = EpochRecord(epoch=epoch, lr=lr, train_loss=float(np.mean(losses)))
        if eval_data is not None and len(eval_data):
            scores = predict_scores(eval_data.features, params, config)
            ev = evaluate(scores, eval_data.labels, config.multi_label)
            record.eval_map, record.eval_accuracy = ev.map, ev.accuracy
            score = _eval_metric(ev, config.multi_label)
            if score > best_score:
                best_score, result.best_epoch, result.best = score, epoch, params.copy(requires_grad=False)
        result.log.append(record)
        window.append({k: v.copy() for k, v in params.arrays().items()})
        logger.info(
            f"epoch {epoch}/{tc.epochs} lr={lr:.3g} loss={record.train_loss:.4f}"
            + (f" eval_map={record.eval_map:.4f}" if record.eval_map is not None else "")
        )
        if out is not None:
            with open(out / METRICS_FILE, "a", encoding="utf-8") as f:
                f.write(record.model_dump_json() + "\n")
            result.checkpoints.append(save_params(out / f"epoch_{epoch:03d}.astc", params, config, epoch=epoch, **meta))

    result.last = params.copy(requires_grad=False)
    result.averaged = weight_average(list(window))
    if out is not None:
        save_params(out / "averaged.astc", result.averaged, config, epoch=tc.epochs, averaged=len(window), **meta)
        if result.best is not None:
            save_params(out / "best.astc", result.best, config, epoch=result.best_epoch, **meta)
    return result
