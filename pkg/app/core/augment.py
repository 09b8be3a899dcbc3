"""
Training-time augmentation: mixup, time/frequency masking, random noise.

All randomness comes from the numpy Generator passed in, so a seeded run
draws the same pairs, lambdas and mask positions every time.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from app.core.errors import ContractError
from app.core.schemas import TrainConfig

logger = logging.getLogger(__name__)


@dataclass
class MixupResult:
    specs: np.ndarray
    targets: np.ndarray
    mixed: np.ndarray       # indices of samples that were mixed
    partners: np.ndarray    # partner index per mixed sample
    lambdas: np.ndarray     # weight of the sample itself


@dataclass(frozen=True)
class MaskRecord:
    t0: int
    t_width: int
    f0: int
    f_width: int


def mixup(
    specs: np.ndarray,
    targets: np.ndarray,
    ratio: float,
    alpha: float,
    rng: np.random.Generator,
    lam: Optional[float] = None,
) -> MixupResult:
    """
    Mix round(ratio * B) samples, each with a uniformly drawn partner other than
    itself: x <- lam * x + (1 - lam) * x_partner, same for targets, lam ~ Beta(alpha, alpha).
    Partners are taken from the unmixed batch.
    """
    B = len(specs)
    n_mix = int(np.floor(ratio * B + 0.5))
    empty = np.zeros(0, dtype=int)
    if n_mix == 0:
        return MixupResult(specs, targets, empty, empty, np.zeros(0))
    if B < 2:
        raise ContractError("mixup needs a batch of at least 2 samples")
    chosen = np.sort(rng.choice(B, size=n_mix, replace=False))
    partners = rng.integers(0, B - 1, size=n_mix)
    partners = partners + (partners >= chosen)
    lambdas = np.full(n_mix, lam, dtype=np.float64) if lam is not None else rng.beta(alpha, alpha, size=n_mix)

    out_x = specs.copy()
    out_y = targets.astype(np.float32, copy=True)
    for i, j, l in zip(chosen, partners, lambdas):
        out_x[i] = l * specs[i] + (1.0 - l) * specs[j]
        out_y[i] = l * targets[i] + (1.0 - l) * targets[j]
    return MixupResult(out_x, out_y, chosen, partners, lambdas)


def apply_masks(spec: np.ndarray, t0: int, t_width: int, f0: int, f_width: int) -> np.ndarray:
    """Zero frames [t0, t0+t_width) and bins [f0, f0+f_width) of a frames x mels matrix."""
    out = spec.copy()
    out[t0:t0 + t_width, :] = 0.0
    out[:, f0:f0 + f_width] = 0.0
    return out


def spec_mask(
    spec: np.ndarray,
    time_mask_max: int,
    freq_mask_max: int,
    rng: np.random.Generator,
) -> Tuple[np.ndarray, MaskRecord]:
    """One time mask and one frequency mask; widths uniform in [0, max], starts uniform over the valid range."""
    frames, mels = spec.shape
    if time_mask_max > frames or freq_mask_max > mels:
        raise ContractError(f"mask maxima ({time_mask_max}, {freq_mask_max}) exceed spectrogram {frames}x{mels}")
    tw = int(rng.integers(0, time_mask_max + 1))
    t0 = int(rng.integers(0, frames - tw + 1))
    fw = int(rng.integers(0, freq_mask_max + 1))
    f0 = int(rng.integers(0, mels - fw + 1))
    record = MaskRecord(t0, tw, f0, fw)
    return apply_masks(spec, t0, tw, f0, fw), record


def add_noise(spec: np.ndarray, rng: np.random.Generator, scale: float = 0.1, max_shift: int = 10) -> np.ndarray:
    """Uniform noise with a random level in [0, scale) plus a random circular time shift."""
    level = rng.random() * scale
    noisy = spec + rng.random(spec.shape) * level
    shift = int(rng.integers(-max_shift, max_shift + 1))
    return np.roll(noisy, shift, axis=0).astype(spec.dtype)


def augment_batch(
    specs: np.ndarray,
    targets: np.ndarray,
    config: TrainConfig,
    rng: np.random.Generator,
) -> Tuple[np.ndarray, np.ndarray]:
    """mixup -> per-sample masking -> optional noise, in that order. A single-sample batch is not mixed."""
    x, y = specs, targets
    if len(specs) >= 2:
        mixed = mixup(specs, targets, config.mixup_ratio, config.mixup_alpha, rng)
        x, y = mixed.specs, mixed.targets
    if config.time_mask_max or config.freq_mask_max:
        x = np.stack([spec_mask(s, config.time_mask_max, config.freq_mask_max, rng)[0] for s in x])
    if config.noise:
        x = np.stack([add_noise(s, rng) for s in x])
    return x.astype(np.float32), y.astype(np.float32)
