"""Patch feature grids: a deterministic synthetic encoder and the ``.v2fg`` file format."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .core import DimensionError, Mask

BACKEND_SEED = 20251119
DEFAULT_DIM = 64
MAGIC = b"V2FG"
VERSION = 1
_HEADER = struct.Struct("<4s7I")


class FeatureFormatError(ValueError):
    pass


@dataclass(eq=False)
class FeatureGrid:
    """Patch descriptors of one view, ``data`` shaped (dim, rows, cols)."""

    data: np.ndarray
    patch_size: int
    orig_height: int
    orig_width: int

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise DimensionError(f"feature grid must be (dim, rows, cols), got {self.data.shape}")
        if self.rows * self.patch_size < self.orig_height or self.cols * self.patch_size < self.orig_width:
            raise DimensionError("patch grid does not cover the image")
        if not np.isfinite(self.data).all():
            raise ValueError("feature grid contains non-finite values")

    @property
    def dim(self) -> int:
        return self.data.shape[0]

    @property
    def rows(self) -> int:
        return self.data.shape[1]

    @property
    def cols(self) -> int:
        return self.data.shape[2]

    @property
    def n_patches(self) -> int:
        return self.rows * self.cols

    def flat(self) -> np.ndarray:
        """(rows*cols, dim) descriptors in row-major patch order."""
        return self.data.reshape(self.dim, -1).T

    def patch_rc(self, idx) -> np.ndarray:
        """Flat patch indices -> (row, col) pairs."""
        idx = np.asarray(idx, dtype=np.int64)
        return np.stack([idx // self.cols, idx % self.cols], axis=-1)

    def __eq__(self, other):
        if not isinstance(other, FeatureGrid):
            return NotImplemented
        return (
            (self.patch_size, self.orig_height, self.orig_width) == (other.patch_size, other.orig_height, other.orig_width)
            and np.array_equal(self.data, other.data)
        )


@lru_cache(maxsize=None)
def projection_matrix(in_dim: int, out_dim: int, seed: int = BACKEND_SEED) -> np.ndarray:
    rng = np.random.default_rng([seed, in_dim, out_dim])
    m = rng.standard_normal((out_dim, in_dim)) / np.sqrt(out_dim)
    m.setflags(write=False)
    return m


def encode_patches(
    image: np.ndarray, patch_size: int, dim: int = DEFAULT_DIM, seed: int = BACKEND_SEED
) -> FeatureGrid:
    """Project each raw pixel block through one fixed random matrix and L2-normalize.

    The descriptor depends only on the block's pixels, never on its position.
    A constant input component keeps flat mid-grey blocks away from the zero vector.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise DimensionError(f"unsupported image shape {img.shape}")
    if img.shape[2] == 1:
        img = np.repeat(img, 3, axis=2)
    h, w, _ = img.shape
    if patch_size < 1 or h < patch_size or w < patch_size:
        raise DimensionError(f"image {h}x{w} smaller than one {patch_size}px patch")
    rows, cols = -(-h // patch_size), -(-w // patch_size)
    # clipped edge patches are padded with mid-grey, which centres to zero
    padded = np.full((rows * patch_size, cols * patch_size, 3), 0.5)
    padded[:h, :w] = img
    blocks = (
        padded.reshape(rows, patch_size, cols, patch_size, 3)
        .transpose(0, 2, 1, 3, 4)
        .reshape(rows * cols, -1)
        - 0.5
    )
    blocks = np.hstack([blocks, np.full((rows * cols, 1), 0.1)])
    proj = blocks @ projection_matrix(blocks.shape[1], dim, seed).T
    proj /= np.linalg.norm(proj, axis=1, keepdims=True)
    return FeatureGrid(proj.T.reshape(dim, rows, cols), patch_size, h, w)


def patch_coverage(mask: Mask, patch_size: int, rows: int, cols: int) -> np.ndarray:
    """Fraction of foreground pixels inside each (possibly clipped) patch, shape (rows, cols)."""
    h, w = mask.shape
    fg = np.zeros((rows * patch_size, cols * patch_size))
    valid = np.zeros_like(fg)
    fg[:h, :w] = mask.data
    valid[:h, :w] = 1.0

    def pool(a):
        return a.reshape(rows, patch_size, cols, patch_size).sum(axis=(1, 3))

    return pool(fg) / np.maximum(pool(valid), 1.0)


def project_mask_to_grid(mask: Mask, grid: FeatureGrid, threshold: float = 0.5) -> np.ndarray:
    """Sorted flat indices of patches whose foreground fraction is >= ``threshold`` (and > 0)."""
    if mask.shape != (grid.orig_height, grid.orig_width):
        raise DimensionError(f"mask {mask.shape} does not match grid image {(grid.orig_height, grid.orig_width)}")
    cov = patch_coverage(mask, grid.patch_size, grid.rows, grid.cols).ravel()
    return np.flatnonzero((cov >= threshold) & (cov > 0))


def save_feature_grid(grid: FeatureGrid, path) -> None:
    header = _HEADER.pack(MAGIC, VERSION, grid.dim, grid.rows, grid.cols, grid.patch_size, grid.orig_height, grid.orig_width)
    Path(path).write_bytes(header + grid.data.astype("<f4").tobytes())


def load_feature_grid(path) -> FeatureGrid:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FeatureFormatError(f"{path}: header truncated at offset {len(raw)} (need {_HEADER.size} bytes)")
    magic, version, dim, rows, cols, ps, oh, ow = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise FeatureFormatError(f"{path}: bad magic {magic!r} at offset 0")
    if version != VERSION:
        raise FeatureFormatError(f"{path}: unsupported version {version} at offset 4")
    expected = 4 * dim * rows * cols
    payload = len(raw) - _HEADER.size
    if payload != expected:
        raise FeatureFormatError(
            f"{path}: payload length {payload} != {expected} bytes (payload starts at offset {_HEADER.size})"
        )
    data = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(dim, rows, cols)
    return FeatureGrid(data.astype(np.float32), ps, oh, ow)
