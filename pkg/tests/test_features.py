import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from v2lab.core import DimensionError, Mask
from v2lab.features import (
    FeatureFormatError, FeatureGrid, encode_patches, load_feature_grid, patch_coverage,
    project_mask_to_grid, save_feature_grid,
)
from helpers import small_grid


def test_encoding_is_deterministic_and_unit_norm(rng):
    img = rng.random((30, 22, 3))
    a, b = encode_patches(img, 4), encode_patches(img.copy(), 4)
    assert a == b
    assert (a.rows, a.cols, a.dim) == (8, 6, 64)
    np.testing.assert_allclose(np.linalg.norm(a.flat(), axis=1), 1.0, atol=1e-6)


def test_repeated_tile_gives_identical_descriptors(rng):
    tile = rng.random((8, 8, 3))
    img = rng.random((32, 32, 3))
    img[0:8, 8:16] = tile
    img[16:24, 24:32] = tile
    g = encode_patches(img, 8)
    np.testing.assert_array_equal(g.data[:, 0, 1], g.data[:, 2, 3])
    assert not np.array_equal(g.data[:, 0, 1], g.data[:, 0, 0])


def test_flat_grey_image_is_still_normalizable():
    g = encode_patches(np.full((16, 16, 3), 0.5), 4)
    assert np.isfinite(g.data).all()


def test_image_smaller_than_patch_raises():
    with pytest.raises(DimensionError):
        encode_patches(np.zeros((3, 3, 3)), 4)


def test_grid_roundtrip(tmp_path, rng):
    g = small_grid(rng, 5, 3, 4)
    save_feature_grid(g, tmp_path / "g.v2fg")
    assert load_feature_grid(tmp_path / "g.v2fg") == g


def test_grid_file_errors(tmp_path, rng):
    g = small_grid(rng, 5, 3, 4)
    p = tmp_path / "g.v2fg"
    save_feature_grid(g, p)
    raw = p.read_bytes()
    (tmp_path / "short").write_bytes(raw[:-4])
    with pytest.raises(FeatureFormatError, match="payload length"):
        load_feature_grid(tmp_path / "short")
    (tmp_path / "magic").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FeatureFormatError, match="magic"):
        load_feature_grid(tmp_path / "magic")
    (tmp_path / "head").write_bytes(raw[:10])
    with pytest.raises(FeatureFormatError, match="header"):
        load_feature_grid(tmp_path / "head")


def test_full_and_empty_mask_projection(rng):
    g = small_grid(rng, 4, 4, 4, patch_size=16)
    assert list(project_mask_to_grid(Mask(np.ones((64, 64), bool)), g)) == list(range(16))
    assert project_mask_to_grid(Mask.empty(64, 64), g).size == 0


def test_single_full_patch_projects_to_its_index(rng):
    g = small_grid(rng, 4, 4, 4, patch_size=16)
    m = np.zeros((64, 64), bool)
    m[16:32, 32:48] = True  # row 1, col 2
    cov = patch_coverage(Mask(m), 16, 4, 4)
    assert cov[1, 2] == 1.0 and cov.sum() == 1.0
    assert list(project_mask_to_grid(Mask(m), g)) == [1 * 4 + 2]


def test_projection_shape_mismatch(rng):
    with pytest.raises(DimensionError):
        project_mask_to_grid(Mask.empty(10, 10), small_grid(rng, 4, 4, 4))


@settings(max_examples=50, deadline=None)
@given(arrays(bool, (10, 13)), st.floats(0.01, 1.0), st.floats(0.01, 1.0))
def test_raising_threshold_never_adds_patches(m, t1, t2):
    lo, hi = sorted((t1, t2))
    g = FeatureGrid(np.ones((2, 3, 4), np.float32), 4, 10, 13)
    a = set(project_mask_to_grid(Mask(m), g, lo))
    b = set(project_mask_to_grid(Mask(m), g, hi))
    assert b <= a


@settings(max_examples=30, deadline=None)
@given(arrays(bool, (10, 13)))
def test_coverage_matches_pixel_count_oracle(m):
    cov = patch_coverage(Mask(m), 4, 3, 4)
    for r in range(3):
        for c in range(4):
            block = m[4 * r : 4 * r + 4, 4 * c : 4 * c + 4]
            assert cov[r, c] == pytest.approx(block.mean())
