"""
Pydantic models for configuration, records and HTTP bodies.

Building a model directly raises pydantic's ValidationError (a ValueError) on bad
geometry or ranges. config.build_run_config, config.load_run_config and the CLI
re-raise it as ConfigurationError with the offending field path.
"""

from typing import Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, Field, model_validator


LossKind = Literal["bce", "ce"]
PositionalMode = Literal["bilinear", "nearest"]
AdaptMode = Literal["bilinear", "nearest", "reinit"]
TaskPreset = Literal["audioset-like", "audioset-full", "esc-like", "speechcommands-like"]


class PatchGrid(BaseModel):
    """Patch/stride geometry. Counts are derived per spectrogram extent (see patchify)."""
    patch_f: int = Field(default=16, ge=1, description="Mel bins per patch")
    patch_t: int = Field(default=16, ge=1, description="Frames per patch")
    stride_f: int = Field(default=10, ge=1, description="Step along frequency (patch_f - overlap)")
    stride_t: int = Field(default=10, ge=1, description="Step along time (patch_t - overlap)")

    @model_validator(mode="after")
    def _stride_within_patch(self):
        if self.stride_f > self.patch_f or self.stride_t > self.patch_t:
            raise ValueError(
                f"stride ({self.stride_f}x{self.stride_t}) must not exceed patch "
                f"({self.patch_f}x{self.patch_t}); overlap cannot be negative"
            )
        return self

    @classmethod
    def square(cls, patch: int = 16, overlap: int = 6) -> "PatchGrid":
        return cls(patch_f=patch, patch_t=patch, stride_f=patch - overlap, stride_t=patch - overlap)

    @property
    def patch_size(self) -> int:
        return self.patch_f * self.patch_t

    @property
    def overlap(self) -> Tuple[int, int]:
        return self.patch_f - self.stride_f, self.patch_t - self.stride_t

    def label(self) -> str:
        return f"{self.patch_f}x{self.patch_t}/s{self.stride_f}x{self.stride_t}"


class ASTConfig(BaseModel):
    embed_dim: int = Field(default=768, ge=1)
    depth: int = Field(default=12, ge=0)
    heads: int = Field(default=12, ge=1)
    mlp_ratio: int = Field(default=4, ge=1)
    grid: PatchGrid = Field(default_factory=PatchGrid)
    num_classes: int = Field(default=527, ge=1)
    multi_label: bool = True
    target_frames: int = Field(default=1024, ge=1)
    n_mels: int = Field(default=128, ge=1)
    dropout: float = Field(default=0.0, description="Reserved; only 0.0 is supported")

    @model_validator(mode="after")
    def _check(self):
        if self.embed_dim % self.heads != 0:
            raise ValueError(f"embed_dim {self.embed_dim} is not divisible by heads {self.heads}")
        if self.dropout != 0.0:
            raise ValueError("dropout is reserved and must be 0.0")
        if self.grid.patch_f > self.n_mels or self.grid.patch_t > self.target_frames:
            raise ValueError(
                f"patch {self.grid.patch_f}x{self.grid.patch_t} does not fit "
                f"spectrogram {self.n_mels}x{self.target_frames}"
            )
        return self

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    @property
    def grid_shape(self) -> Tuple[int, int]:
        from app.core.patchify import patch_counts
        return patch_counts(self.n_mels, self.target_frames, self.grid)

    @property
    def num_patches(self) -> int:
        n_f, n_t = self.grid_shape
        return n_f * n_t


class ScheduleConfig(BaseModel):
    """
    Learning-rate schedule.

    halve_every: lr halves every `every` epochs once `after` epochs are done.
    geometric:   lr is multiplied by `factor` every epoch once `after` epochs are done.
    """
    name: str = "schedule.balanced_audioset"
    kind: Literal["halve_every", "geometric", "constant"] = "halve_every"
    after: int = Field(default=10, ge=0)
    every: int = Field(default=5, ge=1)
    factor: float = Field(default=0.5, gt=0.0, le=1.0)


class TrainConfig(BaseModel):
    batch_size: int = Field(default=12, ge=1)
    epochs: int = Field(default=25, ge=0)
    initial_lr: float = Field(default=5e-5, gt=0.0)
    schedule: ScheduleConfig = Field(default_factory=ScheduleConfig)
    mixup_ratio: float = Field(default=0.5, ge=0.0, le=1.0)
    mixup_alpha: float = Field(default=10.0, gt=0.0)
    time_mask_max: int = Field(default=192, ge=0)
    freq_mask_max: int = Field(default=48, ge=0)
    noise: bool = False
    balanced_sampling: bool = False
    loss: LossKind = "bce"
    seed: int = 0
    average_last: Optional[int] = Field(default=None, ge=1, description="Average the last k epoch checkpoints; None = all")
    adam_betas: Tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8


class NormalizationStats(BaseModel):
    mean: float = 0.0
    std: float = 0.5

    @model_validator(mode="after")
    def _positive_std(self):
        if not self.std > 0:
            raise ValueError("normalization std must be > 0")
        return self


class RunPaths(BaseModel):
    manifest: Optional[str] = None
    label_map: Optional[str] = None
    cache: Optional[str] = None
    init_checkpoint: Optional[str] = None
    out_dir: str = "runs/default"


class RunConfig(BaseModel):
    preset: TaskPreset = "audioset-like"
    model: ASTConfig = Field(default_factory=ASTConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    normalization: Optional[NormalizationStats] = None
    paths: RunPaths = Field(default_factory=RunPaths)
    init: Literal["scratch", "checkpoint"] = "scratch"
    adapt_mode: AdaptMode = "bilinear"
    seed: int = 0

    @model_validator(mode="after")
    def _consistent(self):
        self.train.seed = self.seed
        if self.train.time_mask_max > self.model.target_frames:
            raise ValueError("time_mask_max exceeds target_frames")
        if self.train.freq_mask_max > self.model.n_mels:
            raise ValueError("freq_mask_max exceeds n_mels")
        return self


class EpochRecord(BaseModel):
    epoch: int
    lr: float
    train_loss: float
    eval_map: Optional[float] = None
    eval_accuracy: Optional[float] = None


class EvalResult(BaseModel):
    per_class_ap: List[Optional[float]] = Field(default_factory=list, description="AP per class; None for skipped classes")
    map: float = 0.0
    accuracy: Optional[float] = None
    n_samples: int = 0
    skipped_classes: List[int] = Field(default_factory=list)


class TensorChange(BaseModel):
    source_name: Optional[str]
    target_name: str
    before: Optional[List[int]]
    after: List[int]
    action: str


class AdaptationReport(BaseModel):
    mode: AdaptMode
    source_grid: int
    target_grid: Tuple[int, int]
    cut_offset: int
    special_tokens: int
    changes: List[TensorChange] = Field(default_factory=list)

    def render(self) -> str:
        lines = [
            f"mode: {self.mode}",
            f"source grid: {self.source_grid}x{self.source_grid} (+{self.special_tokens} special)",
            f"target grid: {self.target_grid[0]}x{self.target_grid[1]}",
            f"frequency cut offset: {self.cut_offset}",
        ]
        for c in self.changes:
            lines.append(f"  {c.target_name:<28} {str(c.before):>20} -> {str(c.after):<16} {c.action}"
                         + (f" (from {c.source_name})" if c.source_name and c.source_name != c.target_name else ""))
        return "\n".join(lines)


class ClassScore(BaseModel):
    label_id: str
    name: str
    score: float


class PredictResponse(BaseModel):
    scores: List[ClassScore]
    top_label: str
    multi_label: bool
    frames: int


class GeometryResponse(BaseModel):
    n_f: int
    n_t: int
    num_patches: int
    overlap: Tuple[int, int]
