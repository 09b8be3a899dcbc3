"""
Manifest-driven datasets.

A manifest is a CSV with columns `path,labels,split`; labels are label ids
separated by ';' and paths are relative to the manifest's directory. A label
map JSON maps id -> display name and fixes the class order.

Featurised corpora are cached in the named-tensor container format with
tensors `features` [B x frames x mels] and `labels` [B x C].
"""

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd

from app.core.checkpoint import Container, read_container, write_container
from app.core.errors import ContainerError, InputError
from app.core.frontend import (
    N_MELS,
    SAMPLE_RATE,
    Spectrogram,
    Waveform,
    corpus_stats,
    featurize_wave,
    normalize,
    read_wav,
    write_wav,
)
from app.core.schemas import NormalizationStats

logger = logging.getLogger(__name__)

LABEL_SEP = ";"
MANIFEST_COLUMNS = ["path", "labels", "split"]


@dataclass(frozen=True)
class ManifestRow:
    path: str
    labels: List[str]
    split: str = "train"


@dataclass
class Manifest:
    rows: List[ManifestRow]
    root: Path = field(default_factory=Path)

    def __len__(self) -> int:
        return len(self.rows)

    def resolve(self, row: ManifestRow) -> Path:
        p = Path(row.path)
        return p if p.is_absolute() else self.root / p

    def validate(self, label_map: Dict[str, str]) -> None:
        """Every label id must resolve in the label map and every audio file must exist."""
        for i, row in enumerate(self.rows):
            if not row.labels:
                raise InputError(f"manifest row {i} ({row.path}) has no labels")
            unknown = [lab for lab in row.labels if lab not in label_map]
            if unknown:
                raise InputError(f"manifest row {i} ({row.path}): unknown label ids {unknown}")
            if not self.resolve(row).exists():
                raise InputError(f"manifest row {i}: audio file {self.resolve(row)} does not exist")

    def label_matrix(self, label_ids: Sequence[str]) -> np.ndarray:
        index = {lab: j for j, lab in enumerate(label_ids)}
        out = np.zeros((len(self.rows), len(label_ids)), dtype=np.float32)
        for i, row in enumerate(self.rows):
            for lab in row.labels:
                out[i, index[lab]] = 1.0
        return out


def read_manifest(path: Union[str, Path]) -> Manifest:
    path = Path(path)
    if not path.exists():
        raise InputError(f"{path}: manifest not found")
    frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    missing = [c for c in MANIFEST_COLUMNS if c not in frame.columns]
    if missing:
        raise InputError(f"{path}: manifest is missing columns {missing}")
    rows = [
        ManifestRow(path=r.path, labels=[lab for lab in r.labels.split(LABEL_SEP) if lab], split=r.split or "train")
        for r in frame.itertuples(index=False)
    ]
    logger.debug(f"read {len(rows)} manifest rows from {path}")
    return Manifest(rows=rows, root=path.parent)


def write_manifest(manifest: Manifest, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(
        [(r.path, LABEL_SEP.join(r.labels), r.split) for r in manifest.rows],
        columns=MANIFEST_COLUMNS,
    )
    frame.to_csv(path, index=False, lineterminator="\n")
    return path


def read_label_map(path: Union[str, Path]) -> Dict[str, str]:
    path = Path(path)
    if not path.exists():
        raise InputError(f"{path}: label map not found")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise InputError(f"{path}: label map is not valid JSON ({e})") from e
    if not isinstance(data, dict) or not data:
        raise InputError(f"{path}: label map must be a non-empty object of id -> name")
    return {str(k): str(v) for k, v in data.items()}


def write_label_map(label_map: Dict[str, str], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(label_map, indent=2) + "\n", encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# Synthetic corpus
# ---------------------------------------------------------------------------

def class_frequencies(n_classes: int) -> np.ndarray:
    """Centre frequencies, log-spaced between 300 Hz and 6 kHz."""
    return np.geomspace(300.0, 6000.0, n_classes)


def _signature(k: int, freq: float, n: int, rng: np.random.Generator) -> np.ndarray:
    """Even classes: steady tone. Odd classes: 4 Hz bursts of noise band-limited around freq."""
    t = np.arange(n) / SAMPLE_RATE
    if k % 2 == 0:
        return 0.5 * np.sin(2.0 * np.pi * freq * t + rng.uniform(0.0, 2.0 * np.pi))
    spectrum = np.fft.rfft(rng.standard_normal(n))
    bins = np.fft.rfftfreq(n, 1.0 / SAMPLE_RATE)
    spectrum[np.abs(bins - freq) > 0.1 * freq] = 0.0
    band = np.fft.irfft(spectrum, n)
    band /= np.max(np.abs(band)) + 1e-12
    gate = (np.floor(t * 8.0) % 2 == 0).astype(np.float64)
    return 0.5 * band * gate


def synth_dataset(
    n_samples: int,
    n_classes: int,
    seed: int,
    out_dir: Union[str, Path],
    multi_label: bool = False,
    min_seconds: float = 1.0,
    max_seconds: float = 10.0,
    eval_fraction: float = 0.25,
    second_label_prob: float = 0.3,
) -> Manifest:
    """
    Write a deterministic corpus of PCM16 WAV clips plus `manifest.csv` and
    `labels.json` under out_dir. Sample i carries class i mod n_classes; in
    multi-label mode a second class is mixed in with probability
    second_label_prob.
    """
    if n_classes < 2:
        raise InputError(f"synthetic corpus needs at least 2 classes, got {n_classes}")
    if n_samples < 1:
        raise InputError(f"synthetic corpus needs at least 1 sample, got {n_samples}")
    if not 0 < min_seconds <= max_seconds:
        raise InputError(f"invalid duration range [{min_seconds}, {max_seconds}]")
    out_dir = Path(out_dir)
    (out_dir / "audio").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    freqs = class_frequencies(n_classes)
    label_ids = [f"c{k:02d}" for k in range(n_classes)]
    label_map = {
        lid: (f"tone_{int(round(f))}hz" if k % 2 == 0 else f"burst_{int(round(f))}hz")
        for k, (lid, f) in enumerate(zip(label_ids, freqs))
    }
    n_eval = int(round(eval_fraction * n_samples))
    eval_idx = set(rng.permutation(n_samples)[:n_eval].tolist())

    rows: List[ManifestRow] = []
    for i in range(n_samples):
        seconds = round(float(rng.uniform(min_seconds, max_seconds)), 1)
        n = int(seconds * SAMPLE_RATE)
        classes = [i % n_classes]
        if multi_label and rng.random() < second_label_prob:
            other = int(rng.integers(0, n_classes - 1))
            classes.append(other + (other >= classes[0]))
        samples = 0.01 * rng.standard_normal(n)
        for k in classes:
            samples = samples + _signature(k, float(freqs[k]), n, rng) / len(classes)
        name = f"audio/clip_{i:04d}.wav"
        write_wav(out_dir / name, Waveform(samples.astype(np.float32)))
        rows.append(ManifestRow(name, [label_ids[k] for k in sorted(classes)], "eval" if i in eval_idx else "train"))

    manifest = Manifest(rows=rows, root=out_dir)
    write_manifest(manifest, out_dir / "manifest.csv")
    write_label_map(label_map, out_dir / "labels.json")
    logger.info(f"synthesised {n_samples} clips over {n_classes} classes in {out_dir}")
    return manifest


# ---------------------------------------------------------------------------
# Featurised corpus
# ---------------------------------------------------------------------------

@dataclass
class FeatureSet:
    """Normalised spectrograms with aligned label matrix and split tags."""
    features: np.ndarray
    labels: np.ndarray
    splits: List[str]
    label_ids: List[str]
    stats: NormalizationStats
    paths: List[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.features)

    @property
    def target_frames(self) -> int:
        return int(self.features.shape[1])

    def subset(self, split: str) -> "FeatureSet":
        idx = [i for i, s in enumerate(self.splits) if s == split]
        return FeatureSet(
            features=self.features[idx],
            labels=self.labels[idx],
            splits=[self.splits[i] for i in idx],
            label_ids=list(self.label_ids),
            stats=self.stats,
            paths=[self.paths[i] for i in idx] if self.paths else [],
        )


def _featurize_one(path: Path, target_frames: int, n_mels: int) -> np.ndarray:
    return featurize_wave(read_wav(path), target_frames, n_mels).values


def featurize_manifest(
    manifest: Manifest,
    label_map: Dict[str, str],
    target_frames: int,
    n_mels: int = N_MELS,
    stats: Optional[NormalizationStats] = None,
    workers: int = 4,
) -> FeatureSet:
    """
    Log-mel + pad/trim every clip (concurrently, results kept in manifest
    order), then normalise with the given statistics or, if none are given,
    statistics of the train split.
    """
    manifest.validate(label_map)
    paths = [manifest.resolve(r) for r in manifest.rows]
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        raw = list(pool.map(lambda p: _featurize_one(p, target_frames, n_mels), paths))
    splits = [r.split for r in manifest.rows]
    if stats is None:
        train = [v for v, s in zip(raw, splits) if s == "train"] or raw
        mean, std = corpus_stats(train)
        stats = NormalizationStats(mean=mean, std=std)
    features = np.stack([normalize(Spectrogram(v), stats.mean, stats.std).values for v in raw])
    label_ids = list(label_map)
    logger.info(f"featurised {len(raw)} clips to {target_frames}x{n_mels} (mean={stats.mean:.4f}, std={stats.std:.4f})")
    return FeatureSet(
        features=features,
        labels=manifest.label_matrix(label_ids),
        splits=splits,
        label_ids=label_ids,
        stats=stats,
        paths=[r.path for r in manifest.rows],
    )


def save_cache(path: Union[str, Path], fs: FeatureSet, label_names: Optional[Sequence[str]] = None) -> Path:
    meta = {
        "kind": "features",
        "splits": fs.splits,
        "label_ids": fs.label_ids,
        "paths": fs.paths,
        "normalization": fs.stats.model_dump(),
    }
    if label_names is not None:
        meta["label_names"] = list(label_names)
    return write_container(path, Container({"features": fs.features, "labels": fs.labels}, meta))


def load_cache(path: Union[str, Path]) -> FeatureSet:
    c = read_container(path)
    if c.metadata.get("kind") != "features" or not {"features", "labels"} <= set(c.tensors):
        raise ContainerError(f"{path}: not a feature cache")
    return FeatureSet(
        features=c.tensors["features"],
        labels=c.tensors["labels"],
        splits=list(c.metadata["splits"]),
        label_ids=list(c.metadata["label_ids"]),
        stats=NormalizationStats(**c.metadata["normalization"]),
        paths=list(c.metadata.get("paths", [])),
    )
