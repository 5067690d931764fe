"""Attention-driven non-uniform resampling and its inverse.

Rows and columns are sampled independently: each axis gets a density from
the attention marginal, floored by a uniform share ``lam``, and output pixel
centres are pushed through the inverse cumulative density. High-attention
bands therefore receive more output pixels.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class SamplerGrid:
    """Source coordinates (pixel-centre units) for every output row and column.

    ``row_cdf``/``col_cdf`` hold the cumulative density at source pixel
    edges ``0..n`` and are what :func:`attention_restore` inverts.
    """

    rows: np.ndarray
    cols: np.ndarray
    row_cdf: np.ndarray
    col_cdf: np.ndarray

    @property
    def source_shape(self):
        return self.row_cdf.size - 1, self.col_cdf.size - 1

    @property
    def output_shape(self):
        return self.rows.size, self.cols.size


def _axis(marginal, n_out, lam):
    n = marginal.size
    total = marginal.sum()
    if total > 0:
        dens = lam / n + (1 - lam) * marginal / total
    else:
        dens = np.full(n, 1.0 / n)
    cdf = np.concatenate([[0.0], np.cumsum(dens)])
    cdf /= cdf[-1]
    targets = (np.arange(n_out) + 0.5) / n_out
    edges = np.interp(targets, cdf, np.arange(n + 1, dtype=np.float64))
    return edges - 0.5, cdf


def _lerp_axis(img, coords, axis):
    # constant input stays bit-exact: a + t * (b - a) with b == a
    n = img.shape[axis]
    coords = np.clip(coords, 0, n - 1)
    i0 = np.floor(coords).astype(np.int64)
    i1 = np.minimum(i0 + 1, n - 1)
    t = coords - i0
    a = np.take(img, i0, axis=axis)
    b = np.take(img, i1, axis=axis)
    shape = [1] * img.ndim
    shape[axis] = -1
    return a + t.reshape(shape) * (b - a)


def build_grid(attn, out_shape=None, lam: float = 0.25) -> SamplerGrid:
    attn = np.asarray(attn, dtype=np.float64)
    if np.any(attn < 0):
        raise ValueError("attention must be non-negative")
    h, w = attn.shape
    oh, ow = out_shape or (h, w)
    rows, row_cdf = _axis(attn.sum(axis=1), oh, lam)
    cols, col_cdf = _axis(attn.sum(axis=0), ow, lam)
    return SamplerGrid(rows, cols, row_cdf, col_cdf)


def apply_grid(img, grid: SamplerGrid) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.shape[:2] != grid.source_shape:
        raise ValueError(f"image {img.shape[:2]} does not match grid source {grid.source_shape}")
    return _lerp_axis(_lerp_axis(img, grid.rows, 0), grid.cols, 1)


def attention_sample(frame, attn, out_shape=None, lam: float = 0.25):
    """Resample ``frame`` so that high-attention rows/columns are magnified.

    Returns the resampled image and the grid needed to undo it.
    """
    grid = build_grid(attn, out_shape, lam)
    return apply_grid(frame, grid), grid


def attention_restore(sampled, grid: SamplerGrid) -> np.ndarray:
    """Map a prediction made on a sampled image back onto the original pixel grid."""
    sampled = np.asarray(sampled, dtype=np.float64)
    if sampled.shape[:2] != grid.output_shape:
        raise ValueError(f"map {sampled.shape[:2]} does not match grid output {grid.output_shape}")
    h, w = grid.source_shape
    oh, ow = grid.output_shape
    # original pixel centre -> cumulative density -> output pixel-centre coordinate
    r = np.interp(np.arange(h) + 0.5, np.arange(h + 1), grid.row_cdf) * oh - 0.5
    c = np.interp(np.arange(w) + 0.5, np.arange(w + 1), grid.col_cdf) * ow - 0.5
    return _lerp_axis(_lerp_axis(sampled, r, 0), c, 1)


def sample_mask(mask, grid: SamplerGrid) -> np.ndarray:
    return apply_grid(np.asarray(mask, dtype=np.float64), grid)


__all__ = ["SamplerGrid", "attention_sample", "attention_restore", "build_grid",
           "apply_grid", "sample_mask"]
