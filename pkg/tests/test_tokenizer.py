from __future__ import annotations

import numpy as np
import pytest

from groundtok.tokenizer import (
    EncoderConfig,
    TokenGrid,
    bilinear_sample,
    build_pyramid,
    make_constant_image,
    make_noise_image,
    merge_2x2,
    project,
    resample_bilinear,
    toy_encode,
    unmerge_2x2,
)


def small_cfg(**kw) -> EncoderConfig:
    defaults = dict(patch_size=14, depth=4, dim=8, seed=11)
    defaults.update(kw)
    return EncoderConfig(**defaults)


def test_encode_default_geometry_1024_tokens():
    image = make_noise_image(448, 448, 3, seed=1)
    grids = toy_encode(image, small_cfg())
    assert len(grids) == 4
    for grid in grids:
        assert (grid.rows, grid.cols, grid.dim) == (32, 32, 8)
        assert grid.token_count == 1024


def test_encode_small_image():
    image = make_noise_image(28, 28, 3, seed=2)
    grids = toy_encode(image, small_cfg())
    assert all((g.rows, g.cols) == (2, 2) for g in grids)


def test_encode_deterministic():
    image = make_noise_image(56, 56, 3, seed=3)
    a = toy_encode(image, small_cfg())
    b = toy_encode(image, small_cfg())
    for ga, gb in zip(a, b):
        assert np.array_equal(ga.data, gb.data)
    c = toy_encode(image, small_cfg(seed=12))
    assert not np.array_equal(a[0].data, c[0].data)


def test_encode_patch_mismatch():
    image = make_noise_image(450, 448, 3, seed=4)
    with pytest.raises(ValueError, match="patch mismatch"):
        toy_encode(image, small_cfg())


def test_encoder_config_validation():
    with pytest.raises(ValueError):
        EncoderConfig(depth=3)
    with pytest.raises(ValueError):
        EncoderConfig(dim=0)


def test_pyramid_shapes():
    image = make_noise_image(448, 448, 3, seed=5)
    grids = toy_encode(image, small_cfg())
    pyramid = build_pyramid(grids, (2.0, 1.0, 0.5, 0.25))
    sizes = [(lv.grid.rows, lv.grid.cols) for lv in pyramid]
    assert sizes == [(64, 64), (32, 32), (16, 16), (8, 8)]


def test_pyramid_identity_scale():
    grid = TokenGrid(np.arange(2 * 3 * 4, dtype=float).reshape(2, 3, 4))
    out = resample_bilinear(grid, 2, 3)
    assert np.array_equal(out.data, grid.data)


def test_pyramid_preserves_constants():
    grid = TokenGrid(np.full((8, 8, 2), 3.25))
    for scale in (2.0, 1.0, 0.5, 0.25):
        out = resample_bilinear(grid, max(1, round(8 * scale)), max(1, round(8 * scale)))
        assert np.all(out.data == 3.25)


def test_pyramid_validation():
    grid = TokenGrid(np.zeros((4, 4, 1)))
    with pytest.raises(ValueError):
        build_pyramid([grid, grid], (1.0, 1.0))  # not strictly decreasing
    with pytest.raises(ValueError):
        build_pyramid([grid], (-1.0,))
    with pytest.raises(ValueError):
        build_pyramid([grid, grid], (1.0,))  # length mismatch


def test_bilinear_center_of_2x2():
    data = np.array([[[1.0], [2.0]], [[3.0], [4.0]]])
    assert bilinear_sample(data, np.array(1.0), np.array(1.0)) == pytest.approx(2.5)


def test_merge_counts_and_width():
    grid = TokenGrid(np.random.default_rng(0).normal(size=(32, 32, 8)))
    merged = merge_2x2(grid)
    assert (merged.rows, merged.cols, merged.dim) == (16, 16, 32)
    assert merged.token_count == grid.token_count // 4


def test_merge_block_order():
    # 2x2 grid of distinct one-dim tokens a, b, c, d row-major.
    grid = TokenGrid(np.array([[[1.0], [2.0]], [[3.0], [4.0]]]))
    merged = merge_2x2(grid)
    assert merged.data.shape == (1, 1, 4)
    assert merged.data[0, 0].tolist() == [1.0, 2.0, 3.0, 4.0]


def test_merge_roundtrip_bitwise():
    rng = np.random.default_rng(9)
    grid = TokenGrid(rng.normal(size=(6, 10, 5)))
    assert np.array_equal(unmerge_2x2(merge_2x2(grid)).data, grid.data)


def test_merge_odd_grid_rejected():
    with pytest.raises(ValueError, match="grid not mergeable"):
        merge_2x2(TokenGrid(np.zeros((3, 4, 2))))


def test_project_shape_and_determinism():
    rng = np.random.default_rng(4)
    tokens = rng.normal(size=(256, 32))
    out = project(tokens, 16, seed=21)
    assert out.shape == (256, 16)
    assert np.array_equal(out, project(tokens, 16, seed=21))
    assert not np.array_equal(out, project(tokens, 16, seed=22))


def test_project_linear_mode_zero_maps_to_zero():
    zero = np.zeros((5, 12))
    assert np.all(project(zero, 7, seed=3, linear_only=True) == 0.0)


def test_project_accepts_token_grid():
    grid = TokenGrid(np.ones((4, 4, 6)))
    assert project(grid, 3, seed=0).shape == (16, 3)
