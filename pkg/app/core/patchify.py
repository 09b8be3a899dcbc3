"""
Spectrogram patchification.

Counts follow floor((D - P) / S) + 1 per axis with the uncovered residue
dropped. For a 128 x 1024 input this gives the published sequence lengths:

    16x16 stride 16 -> 8 x 64  = 512
    16x16 stride 14 -> 9 x 73  = 657
    16x16 stride 12 -> 10 x 85 = 850
    16x16 stride 10 -> 12 x 101 = 1212
    128x2 stride 128x2 -> 1 x 512 = 512
    32x32 stride 32 -> 4 x 32  = 128

Patches are ordered frequency-major (index = f_idx * n_t + t_idx) and each is
flattened row-major with frequency rows and time columns.
"""

from typing import Tuple, Union

import numpy as np

from app.core.errors import GeometryError
from app.core.frontend import Spectrogram
from app.core.schemas import PatchGrid


def patch_counts(d_f: int, d_t: int, grid: PatchGrid) -> Tuple[int, int]:
    if d_f < grid.patch_f or d_t < grid.patch_t:
        raise GeometryError(
            f"patch {grid.patch_f}x{grid.patch_t} is larger than the {d_f}x{d_t} spectrogram"
        )
    n_f = (d_f - grid.patch_f) // grid.stride_f + 1
    n_t = (d_t - grid.patch_t) // grid.stride_t + 1
    return n_f, n_t


def num_patches(d_f: int, d_t: int, grid: PatchGrid) -> int:
    n_f, n_t = patch_counts(d_f, d_t, grid)
    return n_f * n_t


def extract_patches(s: Union[Spectrogram, np.ndarray], grid: PatchGrid) -> np.ndarray:
    """
    Return an [N x (patch_f * patch_t)] matrix of flattened patches.

    Accepts a Spectrogram or a frames x mels array; a leading batch axis
    (B x frames x mels) yields B x N x P.
    """
    values = s.values if isinstance(s, Spectrogram) else np.asarray(s)
    if values.ndim == 3:
        return np.stack([extract_patches(v, grid) for v in values])
    fm = values.T  # mels x frames: frequency is the first axis
    n_f, n_t = patch_counts(fm.shape[0], fm.shape[1], grid)
    windows = np.lib.stride_tricks.sliding_window_view(fm, (grid.patch_f, grid.patch_t))
    windows = windows[: (n_f - 1) * grid.stride_f + 1 : grid.stride_f,
                      : (n_t - 1) * grid.stride_t + 1 : grid.stride_t]
    return np.ascontiguousarray(windows.reshape(n_f * n_t, grid.patch_size))


def reassemble(patches: np.ndarray, grid: PatchGrid, n_f: int, n_t: int) -> np.ndarray:
    """Inverse of extract_patches for non-overlapping grids: rebuild the covered mels x frames region."""
    if grid.overlap != (0, 0):
        raise GeometryError("reassembly is only lossless for non-overlapping grids")
    blocks = patches.reshape(n_f, n_t, grid.patch_f, grid.patch_t)
    return blocks.transpose(0, 2, 1, 3).reshape(n_f * grid.patch_f, n_t * grid.patch_t)
