from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from v2lab.core import Mask, PointSet, mask_centroid
from v2lab.synth_data import (
    GenerationError, SceneConfig, affine_matrix, generate_dataset, generate_pair, generate_single_view,
    invert_affine, load_pair, read_key_values, save_pair, scene_config_from_dict, scene_config_to_dict,
    warp_mask, warp_points,
)

IDENTITY = affine_matrix()


def test_identity_config_gives_identical_views():
    cfg = SceneConfig(rotation_range=0, scale_range=1.0, translation_range=0, photometric_jitter=0, seed=3)
    p = generate_pair(cfg)
    np.testing.assert_array_equal(p.transform, IDENTITY)
    np.testing.assert_array_equal(p.query_image, p.target_image)
    assert p.query_mask == p.target_mask


def test_pure_translation_moves_centroid():
    t = affine_matrix(translation=(10, 4))
    p = generate_pair(SceneConfig(seed=11, min_visible_fraction=1.0), transform=t)
    cq, ct = mask_centroid(p.query_mask), mask_centroid(p.target_mask)
    assert (ct.x - cq.x, ct.y - cq.y) == pytest.approx((10, 4))


def test_same_seed_is_bit_identical():
    a = generate_pair(SceneConfig(seed=5))
    b = generate_pair(SceneConfig(seed=5))
    assert a == b and a.to_bytes() == b.to_bytes()
    assert generate_pair(SceneConfig(seed=6)).to_bytes() != a.to_bytes()


def test_warp_points_examples():
    pts = PointSet(np.array([[1.0, 0.0], [2.0, 3.0]]))
    assert np.array_equal(warp_points(pts, IDENTITY).xy, pts.xy)
    np.testing.assert_allclose(warp_points(PointSet([[1.0, 0.0]]), affine_matrix(90)).xy, [[0, 1]], atol=1e-12)
    np.testing.assert_allclose(warp_points(PointSet([[2.0, 3.0]]), affine_matrix(translation=(5, -1))).xy, [[7, 2]])


@settings(max_examples=40, deadline=None)
@given(st.floats(-30, 30), st.floats(0.7, 1.4), st.floats(-10, 10), st.floats(-10, 10))
def test_invert_affine_roundtrip(rot, scale, tx, ty):
    t = affine_matrix(rot, scale, (tx, ty), (31.5, 31.5))
    pts = PointSet(np.random.default_rng(0).uniform(0, 64, size=(10, 2)))
    back = warp_points(warp_points(pts, t), invert_affine(t))
    np.testing.assert_allclose(back.xy, pts.xy, atol=1e-9)


def test_target_mask_is_warped_query_mask():
    for seed in range(5):
        p = generate_pair(SceneConfig(seed=seed))
        assert warp_mask(p.query_mask, p.transform) == p.target_mask
        assert p.target_mask.area() >= 0.5 * p.query_mask.area()
        assert p.query_image.shape == (64, 64, 3) and p.query_image.min() >= 0 and p.query_image.max() <= 1


def test_unreachable_visibility_raises():
    far = affine_matrix(translation=(200, 0))
    with pytest.raises(GenerationError):
        generate_pair(SceneConfig(seed=1), transform=far, max_attempts=3)


def test_single_view_masks_are_disjoint():
    img, masks = generate_single_view(SceneConfig(seed=4))
    assert img.shape == (64, 64, 3)
    stack = np.stack([m.data for m in masks]).astype(int)
    assert stack.sum(0).max() <= 1
    assert not masks[0].is_empty()


def test_dataset_splits_differ_and_are_reproducible():
    cfg = SceneConfig(seed=2)
    tr = generate_dataset(cfg, 3, "train")
    te = generate_dataset(cfg, 3, "test")
    assert [p.to_bytes() for p in tr] == [p.to_bytes() for p in generate_dataset(cfg, 3, "train")]
    assert all(a.to_bytes() != b.to_bytes() for a, b in zip(tr, te))


def test_pair_disk_roundtrip(tmp_path):
    p = generate_pair(SceneConfig(seed=8))
    save_pair(p, tmp_path / "p")
    names = sorted(f.name for f in (tmp_path / "p").iterdir())
    assert names == ["meta.txt", "query.ppm", "query_mask.pgm", "target.ppm", "target_mask.pgm", "transform.txt"]
    assert len((tmp_path / "p" / "transform.txt").read_text().split()) == 6
    q = load_pair(tmp_path / "p")
    assert q.query_mask == p.query_mask and q.target_mask == p.target_mask
    np.testing.assert_allclose(q.transform, p.transform, atol=1e-6)
    np.testing.assert_allclose(q.query_image, p.query_image, atol=0.5 / 255 + 1e-9)
    assert read_key_values(tmp_path / "p" / "meta.txt")["seed"] == str(p.seed)


def test_config_dict_roundtrip_and_unknown_key():
    cfg = SceneConfig(n_objects=2, translation_range=3.5)
    d = {k: str(v) for k, v in scene_config_to_dict(cfg).items()}
    assert scene_config_from_dict(d) == cfg
    with pytest.raises(KeyError, match="bogus"):
        scene_config_from_dict({"bogus": "1"})
