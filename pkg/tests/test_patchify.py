import numpy as np
import pytest

from app.core.errors import GeometryError
from app.core.frontend import Spectrogram
from app.core.patchify import extract_patches, num_patches, patch_counts, reassemble
from app.core.schemas import PatchGrid


@pytest.mark.parametrize(
    "grid, expected",
    [
        (PatchGrid.square(16, 0), 512),
        (PatchGrid.square(16, 2), 657),
        (PatchGrid.square(16, 4), 850),
        (PatchGrid.square(16, 6), 1212),
        (PatchGrid(patch_f=128, patch_t=2, stride_f=128, stride_t=2), 512),
        (PatchGrid.square(32, 0), 128),
    ],
)
def test_reference_sequence_lengths(grid, expected):
    assert num_patches(128, 1024, grid) == expected


def test_default_grid_counts():
    assert patch_counts(128, 1024, PatchGrid()) == (12, 101)


def test_patch_larger_than_spectrogram():
    with pytest.raises(GeometryError):
        patch_counts(8, 100, PatchGrid.square(16, 0))


def test_stride_larger_than_patch_is_rejected():
    with pytest.raises(ValueError):
        PatchGrid(patch_f=16, patch_t=16, stride_f=17, stride_t=16)


def test_patch_order_is_frequency_major():
    # value encodes (mel, frame) so each patch's origin can be read back
    frames, mels = 32, 16
    values = np.fromfunction(lambda t, f: f * 1000 + t, (frames, mels))
    grid = PatchGrid.square(8, 0)
    patches = extract_patches(Spectrogram(values), grid)
    assert patches.shape == (2 * 4, 64)
    # patch index 1 is frequency row 0, time column 1 -> starts at mel 0, frame 8
    assert patches[1, 0] == 0 * 1000 + 8
    # patch index 4 is frequency row 1 -> starts at mel 8, frame 0
    assert patches[4, 0] == 8 * 1000 + 0
    # flattened row-major: frequency rows, time columns
    assert patches[0, 1] == 1
    assert patches[0, 8] == 1000


def test_overlapping_patches_share_cells():
    values = np.random.default_rng(0).normal(size=(26, 16))
    patches = extract_patches(values, PatchGrid(patch_f=16, patch_t=16, stride_f=10, stride_t=10))
    assert patches.shape == (2, 256)
    first = patches[0].reshape(16, 16)
    second = patches[1].reshape(16, 16)
    np.testing.assert_array_equal(first[:, 10:], second[:, :6])


def test_batch_axis():
    batch = np.random.default_rng(1).normal(size=(3, 40, 16))
    out = extract_patches(batch, PatchGrid.square(8, 0))
    assert out.shape == (3, 10, 64)
    np.testing.assert_array_equal(out[2], extract_patches(batch[2], PatchGrid.square(8, 0)))


def test_reassemble_inverts_non_overlapping_extraction():
    values = np.random.default_rng(2).normal(size=(40, 16))
    grid = PatchGrid.square(8, 0)
    patches = extract_patches(values, grid)
    np.testing.assert_array_equal(reassemble(patches, grid, 2, 5), values.T)


def test_residue_is_dropped():
    values = np.ones((45, 16))
    grid = PatchGrid.square(8, 0)
    assert patch_counts(16, 45, grid) == (2, 5)
    assert extract_patches(values, grid).shape == (10, 64)


def test_patch_covering_the_input_is_the_flattened_input():
    values = np.random.default_rng(3).normal(size=(16, 16))
    patches = extract_patches(values, PatchGrid.square(16, 0))
    assert patches.shape == (1, 256)
    np.testing.assert_array_equal(patches[0], values.T.ravel())


def test_constant_spectrogram_gives_identical_rows():
    patches = extract_patches(np.full((64, 32), 2.5), PatchGrid.square(16, 6))
    assert np.all(patches == 2.5)


def test_patch_rows_only_see_their_window():
    values = np.random.default_rng(4).normal(size=(40, 16))
    grid = PatchGrid.square(8, 0)
    before = extract_patches(values, grid)
    changed = values.copy()
    changed[39, 15] += 100.0  # last frame, last mel: only the final patch covers it
    after = extract_patches(changed, grid)
    np.testing.assert_array_equal(after[:-1], before[:-1])
    assert not np.array_equal(after[-1], before[-1])


def test_count_is_non_increasing_in_stride():
    counts = [num_patches(128, 1024, PatchGrid(patch_f=16, patch_t=16, stride_f=s, stride_t=s)) for s in range(1, 17)]
    assert counts == sorted(counts, reverse=True)
