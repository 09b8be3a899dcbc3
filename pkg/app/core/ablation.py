"""
Ablation sweeps over patch overlap, patch shape, positional-embedding
adaptation and the vision-pretrained start against a from-scratch one.

Each sweep trains one desk-scale model per row and renders a table whose
rows and `# Patches` column follow the reference layout. The patch count is
computed for the reference 128 x 1024 input; the score columns come from the
run at the configured frame count.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Union

import pandas as pd

from app.core.dataset import FeatureSet
from app.core.errors import ConfigurationError
from app.core.metrics import evaluate, format_stats, run_stats
from app.core.model import ASTParams, init_params, predict_scores
from app.core.patchify import num_patches
from app.core.schemas import AdaptMode, ASTConfig, PatchGrid, RunConfig
from app.core.training import train
from app.core.vit_adapt import ViTCheckpoint, adapt_checkpoint, synth_vit_checkpoint

logger = logging.getLogger(__name__)

REFERENCE_SHAPE = (128, 1024)
SWEEPS = ("overlap", "patch", "posembed", "pretrain")


@dataclass(frozen=True)
class Variant:
    label: str
    grid: PatchGrid
    mode: AdaptMode = "bilinear"
    pretrained: bool = True
    scratch: bool = False


def overlap_variants() -> List[Variant]:
    return [
        Variant("No Overlap", PatchGrid.square(16, 0)),
        Variant("Overlap-2", PatchGrid.square(16, 2)),
        Variant("Overlap-4", PatchGrid.square(16, 4)),
        Variant("Overlap-6 (Used)", PatchGrid.square(16, 6)),
    ]


def patch_variants() -> List[Variant]:
    # only 16x16 matches the vision source patch; the other shapes train from scratch
    return [
        Variant("128×2", PatchGrid(patch_f=128, patch_t=2, stride_f=128, stride_t=2), pretrained=False, scratch=True),
        Variant("16×16 (Used)", PatchGrid.square(16, 0), pretrained=True, scratch=True),
        Variant("32×32", PatchGrid.square(32, 0), pretrained=False, scratch=True),
    ]


def posembed_variants(grid: PatchGrid) -> List[Variant]:
    return [
        Variant("Reinitialize", grid, mode="reinit"),
        Variant("Nearest Neighbor Interpolation", grid, mode="nearest"),
        Variant("Bilinear Interpolation (Used)", grid, mode="bilinear"),
    ]


def pretrain_variants(grid: PatchGrid) -> List[Variant]:
    return [
        Variant("No Pretrain", grid, pretrained=False, scratch=True),
        Variant("Vision Pretrain (Used)", grid),
    ]


@dataclass
class AblationResult:
    sweep: str
    table: pd.DataFrame
    raw: Dict[str, Dict[str, List[float]]] = field(default_factory=dict)

    def render(self) -> str:
        return self.table.to_string(index=False)

    def to_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.table.to_csv(path, index=False)
        return path


def _variant_config(run: RunConfig, grid: PatchGrid, seed: int) -> RunConfig:
    raw = run.model_dump()
    raw["model"]["grid"] = grid.model_dump()
    raw["seed"] = seed
    return RunConfig.model_validate(raw)


def _score(params: ASTParams, config: ASTConfig, data: FeatureSet) -> float:
    ev = evaluate(predict_scores(data.features, params, config), data.labels, config.multi_label)
    return ev.map if config.multi_label or ev.accuracy is None else ev.accuracy


def _source_for(config: ASTConfig, source: Optional[ViTCheckpoint], seed: int) -> ViTCheckpoint:
    if source is not None:
        return source
    return synth_vit_checkpoint(
        embed_dim=config.embed_dim, depth=config.depth, heads=config.heads, grid=24, patch=16,
        n_special=2, mlp_ratio=config.mlp_ratio, num_classes=10, seed=seed,
    )


def run_sweep(
    sweep: str,
    run: RunConfig,
    train_data: FeatureSet,
    eval_data: Optional[FeatureSet] = None,
    source: Optional[ViTCheckpoint] = None,
    seeds: Sequence[int] = (0,),
    progress: Optional[Callable[[str], None]] = None,
) -> AblationResult:
    """
    Train every row of a sweep for each seed and tabulate the final
    weight-averaged model's score on eval_data (train_data if no eval split).
    """
    if sweep == "overlap":
        variants, columns = overlap_variants(), [("mAP", True)]
    elif sweep == "patch":
        variants, columns = patch_variants(), [("w/o Pretrain", False), ("w/ Pretrain", True)]
    elif sweep == "posembed":
        variants, columns = posembed_variants(run.model.grid), [("mAP", True)]
    elif sweep == "pretrain":
        # one column; each row picks its own initialisation
        variants, columns = pretrain_variants(run.model.grid), [("mAP", None)]
    else:
        raise ConfigurationError(f"unknown sweep {sweep!r}; choose from {SWEEPS}")
    scored = eval_data if eval_data is not None and len(eval_data) else train_data

    rows, raw = [], {}
    for v in variants:
        row: Dict[str, object] = {"setting": v.label}
        if sweep in ("overlap", "patch"):
            row["# Patches"] = num_patches(*REFERENCE_SHAPE, v.grid)
        raw[v.label] = {}
        for column, flag in columns:
            pretrained = v.pretrained if flag is None else flag
            if (pretrained and not v.pretrained) or (not pretrained and not v.scratch):
                row[column] = "-"
                continue
            scores = []
            for seed in seeds:
                cfg = _variant_config(run, v.grid, seed)
                if pretrained:
                    params, _ = adapt_checkpoint(_source_for(cfg.model, source, seed), cfg.model, v.mode, rng=seed)
                else:
                    params = init_params(cfg.model, seed)
                result = train(cfg, train_data, params)
                scores.append(_score(result.averaged, cfg.model, scored))
            raw[v.label][column] = scores
            mean, std = run_stats(scores)
            row[column] = format_stats(mean, std) if len(scores) > 1 else f"{mean:.3f}"
            if progress is not None:
                progress(f"{sweep}: {v.label} [{column}] {row[column]}")
        logger.info(f"ablation {sweep}: {v.label} done")
        rows.append(row)
    return AblationResult(sweep=sweep, table=pd.DataFrame(rows), raw=raw)
