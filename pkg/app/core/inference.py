"""Scoring single clips with a trained checkpoint (CLI `predict` and the HTTP surface)."""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import numpy as np

from app.core.checkpoint import load_params
from app.core.errors import ContainerError
from app.core.frontend import Waveform, featurize_wave, normalize
from app.core.model import ASTParams, predict_scores
from app.core.schemas import ASTConfig, ClassScore, NormalizationStats, PredictResponse

logger = logging.getLogger(__name__)


@dataclass
class LoadedModel:
    params: ASTParams
    config: ASTConfig
    metadata: Dict[str, Any]

    @classmethod
    def from_path(cls, path: Union[str, Path]) -> "LoadedModel":
        params, config, meta = load_params(path)
        logger.info(f"loaded {path}: {config.num_classes} classes, {config.target_frames} frames")
        return cls(params, config, meta)

    @property
    def label_ids(self) -> List[str]:
        ids = self.metadata.get("labels")
        return list(ids) if ids else [str(i) for i in range(self.config.num_classes)]

    @property
    def label_names(self) -> List[str]:
        names = self.metadata.get("label_names")
        return list(names) if names else self.label_ids

    @property
    def normalization(self) -> NormalizationStats:
        stats = self.metadata.get("normalization")
        if stats is None:
            raise ContainerError("checkpoint carries no normalization statistics; it cannot score raw audio")
        return NormalizationStats(**stats)

    def scores(self, wave: Waveform) -> np.ndarray:
        stats = self.normalization
        spec = normalize(featurize_wave(wave, self.config.target_frames, self.config.n_mels), stats.mean, stats.std)
        return predict_scores(spec.values[None], self.params, self.config)[0]

    def predict(self, wave: Waveform, top_k: Optional[int] = None) -> PredictResponse:
        scores = self.scores(wave)
        order = np.argsort(-scores, kind="stable")
        if top_k is not None:
            order = order[:top_k]
        ids, names = self.label_ids, self.label_names
        ranked = [ClassScore(label_id=ids[i], name=names[i], score=float(scores[i])) for i in order]
        return PredictResponse(
            scores=ranked,
            top_label=ids[int(order[0])],
            multi_label=self.config.multi_label,
            frames=self.config.target_frames,
        )
