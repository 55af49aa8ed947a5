"""Deterministic toy image encoder, feature pyramid, 2D token merge, projection.

The encoder stands in for a pretrained backbone: it patchifies the image,
embeds each patch, and runs a fixed number of seeded channel-mixing layers,
returning one token grid per layer. Only the shape/layer contract matters
downstream; weights are generated from the seed by the named generator in
:mod:`groundtok.rng`, so equal (input, config) gives bitwise-equal output.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import make_rng

# Image arrays are float64 numpy arrays of shape (height, width, channels).
ImageArray = np.ndarray

DEFAULT_IMAGE_SIZE = 448
DEFAULT_PATCH_SIZE = 14

# Pyramid scale factors: four levels feed proposal generation, three feed
# region encoding (ViTDet-style construction).
PROPOSER_SCALES = (2.0, 1.0, 0.5, 0.25)
ENCODER_SCALES = (1.0, 0.5, 0.25)


@dataclass(frozen=True)
class EncoderConfig:
    patch_size: int = DEFAULT_PATCH_SIZE
    depth: int = 6
    dim: int = 64
    seed: int = 0

    def __post_init__(self) -> None:
        if self.patch_size < 1:
            raise ValueError(f"patch_size must be >= 1, got {self.patch_size}")
        if self.depth < 4:
            raise ValueError(f"depth must be >= 4 (last-4 layers are tapped), got {self.depth}")
        if self.dim < 1:
            raise ValueError(f"dim must be >= 1, got {self.dim}")


class TokenGrid:
    """A rows x cols grid of feature tokens, each of width dim."""

    __slots__ = ("data",)

    def __init__(self, data: np.ndarray):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim != 3:
            raise ValueError(f"token grid must be (rows, cols, dim), got shape {arr.shape}")
        self.data = arr

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def dim(self) -> int:
        return self.data.shape[2]

    @property
    def token_count(self) -> int:
        return self.rows * self.cols

    def tokens(self) -> np.ndarray:
        """Row-major (rows*cols, dim) view of the grid."""
        return self.data.reshape(self.token_count, self.dim)


@dataclass(frozen=True)
class PyramidLevel:
    scale: float
    grid: TokenGrid


class FeaturePyramid:
    """Ordered pyramid levels, highest spatial resolution first."""

    def __init__(self, levels: list[PyramidLevel]):
        if not levels:
            raise ValueError("pyramid needs at least one level")
        scales = [lv.scale for lv in levels]
        if any(s <= 0 for s in scales):
            raise ValueError(f"scale factors must be positive: {scales}")
        if any(a <= b for a, b in zip(scales, scales[1:])):
            raise ValueError(f"scale factors must be strictly decreasing: {scales}")
        sizes = [lv.grid.token_count for lv in levels]
        if any(a < b for a, b in zip(sizes, sizes[1:])):
            raise ValueError("levels must be ordered from highest to lowest resolution")
        self.levels = list(levels)

    def __len__(self) -> int:
        return len(self.levels)

    def __iter__(self):
        return iter(self.levels)


def make_noise_image(height: int, width: int, channels: int, seed: int) -> ImageArray:
    rng = make_rng(seed, "image-noise")
    return rng.uniform(0.0, 1.0, size=(height, width, channels))


def make_constant_image(height: int, width: int, channels: int, value: float) -> ImageArray:
    return np.full((height, width, channels), float(value), dtype=np.float64)


def toy_encode(image: ImageArray, cfg: EncoderConfig) -> list[TokenGrid]:
    """Patchify and run the seeded mixing stack; returns one grid per layer.

    The image height and width must both be divisible by ``cfg.patch_size``.
    Output grids are (H/patch) x (W/patch) x cfg.dim; there are exactly
    ``cfg.depth`` of them, in layer order.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3:
        raise ValueError(f"image must be (H, W, C), got shape {img.shape}")
    height, width, channels = img.shape
    p = cfg.patch_size
    if height % p != 0 or width % p != 0:
        raise ValueError(f"patch mismatch: image {height}x{width} not divisible by patch size {p}")

    rows, cols = height // p, width // p
    patches = img.reshape(rows, p, cols, p, channels)
    patches = patches.transpose(0, 2, 1, 3, 4).reshape(rows, cols, p * p * channels)

    rng = make_rng(cfg.seed, "encoder")
    fan_in = p * p * channels
    w_embed = rng.normal(0.0, 1.0, size=(fan_in, cfg.dim)) / np.sqrt(fan_in)
    b_embed = rng.normal(0.0, 0.1, size=cfg.dim)
    x = np.tanh(patches @ w_embed + b_embed)

    grids: list[TokenGrid] = []
    for _ in range(cfg.depth):
        w = rng.normal(0.0, 1.0, size=(cfg.dim, cfg.dim)) / np.sqrt(cfg.dim)
        b = rng.normal(0.0, 0.1, size=cfg.dim)
        x = np.tanh(x @ w + b)
        grids.append(TokenGrid(x.copy()))
    return grids


def bilinear_sample(data: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Bilinear samples of a (rows, cols, dim) grid at continuous points.

    Uses half-pixel centers (pixel (r, c) has its center at (r+0.5, c+0.5))
    and replicates edge values outside the grid. The lerp formulation keeps
    constant grids exactly constant. ``ys``/``xs`` may have any common
    shape; the result has that shape plus the channel axis.
    """
    rows, cols, _ = data.shape
    v = np.asarray(ys, dtype=np.float64) - 0.5
    u = np.asarray(xs, dtype=np.float64) - 0.5

    r0 = np.floor(v)
    c0 = np.floor(u)
    fy = (v - r0)[..., None]
    fx = (u - c0)[..., None]

    r0i = np.clip(r0.astype(np.int64), 0, rows - 1)
    r1i = np.clip(r0.astype(np.int64) + 1, 0, rows - 1)
    c0i = np.clip(c0.astype(np.int64), 0, cols - 1)
    c1i = np.clip(c0.astype(np.int64) + 1, 0, cols - 1)

    v00 = data[r0i, c0i]
    v01 = data[r0i, c1i]
    v10 = data[r1i, c0i]
    v11 = data[r1i, c1i]

    top = v00 + fx * (v01 - v00)
    bottom = v10 + fx * (v11 - v10)
    return top + fy * (bottom - top)


def resample_bilinear(grid: TokenGrid, out_rows: int, out_cols: int) -> TokenGrid:
    """Resample a grid to a new spatial size with half-pixel-center bilinear."""
    if out_rows < 1 or out_cols < 1:
        raise ValueError(f"output size must be positive, got {out_rows}x{out_cols}")
    if out_rows == grid.rows and out_cols == grid.cols:
        return TokenGrid(grid.data.copy())
    ys = (np.arange(out_rows, dtype=np.float64) + 0.5) * (grid.rows / out_rows)
    xs = (np.arange(out_cols, dtype=np.float64) + 0.5) * (grid.cols / out_cols)
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return TokenGrid(bilinear_sample(grid.data, yy, xx))


def build_pyramid(layer_grids: list[TokenGrid], scales: tuple[float, ...]) -> FeaturePyramid:
    """Rescale the last-k layer grids into a hierarchical pyramid.

    ``layer_grids`` are paired with ``scales`` one-to-one; scales must be
    strictly decreasing and positive, so the output is ordered from highest
    to lowest resolution.
    """
    if len(layer_grids) != len(scales):
        raise ValueError(f"{len(layer_grids)} grids but {len(scales)} scales")
    levels = []
    for grid, scale in zip(layer_grids, scales):
        if scale <= 0:
            raise ValueError(f"scale must be positive, got {scale}")
        out_rows = max(1, round(grid.rows * scale))
        out_cols = max(1, round(grid.cols * scale))
        levels.append(PyramidLevel(scale, resample_bilinear(grid, out_rows, out_cols)))
    return FeaturePyramid(levels)


def merge_2x2(grid: TokenGrid) -> TokenGrid:
    """Concatenate every 2x2 token block into one token of 4x the width.

    Block order is fixed: top-left, top-right, bottom-left, bottom-right.
    Lossless; :func:`unmerge_2x2` recovers the input bitwise.
    """
    if grid.rows % 2 != 0 or grid.cols % 2 != 0:
        raise ValueError(f"grid not mergeable: {grid.rows}x{grid.cols} has odd side")
    r2, c2, d = grid.rows // 2, grid.cols // 2, grid.dim
    blocks = grid.data.reshape(r2, 2, c2, 2, d).transpose(0, 2, 1, 3, 4)
    return TokenGrid(blocks.reshape(r2, c2, 4 * d))


def unmerge_2x2(grid: TokenGrid) -> TokenGrid:
    """Inverse of :func:`merge_2x2`."""
    if grid.dim % 4 != 0:
        raise ValueError(f"grid width {grid.dim} is not a multiple of 4")
    r2, c2, d = grid.rows, grid.cols, grid.dim // 4
    blocks = grid.data.reshape(r2, c2, 2, 2, d).transpose(0, 2, 1, 3, 4)
    return TokenGrid(blocks.reshape(r2 * 2, c2 * 2, d))


def project(
    tokens: TokenGrid | np.ndarray,
    out_dim: int,
    seed: int,
    linear_only: bool = False,
) -> np.ndarray:
    """Two-layer seeded MLP mapping (N, d_in) tokens to (N, out_dim).

    ``linear_only`` drops the nonlinearity and biases (test mode: zero
    input maps to zero output).
    """
    if out_dim < 1:
        raise ValueError(f"out_dim must be >= 1, got {out_dim}")
    x = tokens.tokens() if isinstance(tokens, TokenGrid) else np.asarray(tokens, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"tokens must be (N, d_in), got shape {x.shape}")
    d_in = x.shape[1]

    rng = make_rng(seed, "project")
    w1 = rng.normal(0.0, 1.0, size=(d_in, out_dim)) / np.sqrt(d_in)
    b1 = rng.normal(0.0, 0.1, size=out_dim)
    w2 = rng.normal(0.0, 1.0, size=(out_dim, out_dim)) / np.sqrt(out_dim)
    b2 = rng.normal(0.0, 0.1, size=out_dim)

    if linear_only:
        return (x @ w1) @ w2
    return np.tanh(x @ w1 + b1) @ w2 + b2
