"""Geometry-aware anchor prompts.

Query-mask patches are matched to their most similar target patches, the
matched target locations are thinned to a minimum spacing, outliers are
dropped, and the surviving location(s) are expressed in canonical image
coordinates. Nothing here is learned.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import DimensionError, Mask, MatchSet, Point2D, PointSet
from .features import FeatureGrid, project_mask_to_grid


class EmptyForegroundError(ValueError):
    pass


@dataclass(frozen=True)
class AnchorConfig:
    tau_strat: float = 2.0
    n_points: int = 1
    outlier_mad_k: float = 3.0
    foreground_threshold: float = 0.5
    # (height, width) of the canonical frame; None keeps the original image frame
    canonical_size: Optional[tuple[int, int]] = None

    def __post_init__(self):
        if self.tau_strat < 0:
            raise ValueError("tau_strat must be >= 0")
        if self.n_points < 1:
            raise ValueError("n_points must be >= 1")


@dataclass
class Heatmap:
    """Cosine similarities, rows = query patches, cols = target patches."""

    data: np.ndarray

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]


@dataclass
class AnchorPrompt:
    points: PointSet
    labels: np.ndarray = field(default=None)

    def __post_init__(self):
        if len(self.points) < 1:
            raise ValueError("anchor prompt needs at least one point")
        if self.labels is None:
            self.labels = np.ones(len(self.points), dtype=np.int64)


@dataclass
class AnchorTrace:
    """Intermediate products of one anchor run, kept for diagnostics and back-projection."""

    foreground: np.ndarray
    matches: MatchSet
    target_points: PointSet
    kept: np.ndarray

    @property
    def stratified(self) -> PointSet:
        return PointSet(self.target_points.xy[self.kept], "patch-grid")


def _unit_rows(flat: np.ndarray, which: str) -> np.ndarray:
    norms = np.linalg.norm(flat, axis=1)
    bad = np.flatnonzero(norms == 0)
    if bad.size:
        raise ValueError(f"zero-norm descriptor at {which} patch {int(bad[0])}")
    return flat / norms[:, None]


def similarity_heatmap(fq: FeatureGrid, ft: FeatureGrid) -> Heatmap:
    if fq.dim != ft.dim:
        raise DimensionError(f"descriptor dims differ: {fq.dim} vs {ft.dim}")
    q = _unit_rows(fq.flat().astype(np.float64), "query")
    t = _unit_rows(ft.flat().astype(np.float64), "target")
    return Heatmap(np.clip(q @ t.T, -1.0, 1.0))


def best_matches(h: Heatmap, foreground) -> MatchSet:
    fg = np.asarray(foreground, dtype=np.int64).ravel()
    if fg.size == 0:
        raise EmptyForegroundError("no foreground patches to match")
    if fg.min() < 0 or fg.max() >= h.rows:
        raise IndexError("foreground index outside the query grid")
    rows = h.data[fg]
    # np.argmax returns the first maximum, i.e. the smallest target index on ties
    j = np.argmax(rows, axis=1)
    return MatchSet(fg, j, rows[np.arange(len(fg)), j])


def stratify_indices(xy: np.ndarray, scores: np.ndarray, tau: float) -> np.ndarray:
    """Greedy min-distance thinning in descending score order; returns kept indices in scan order."""
    xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    kept: list[int] = []
    for i in order:
        if not kept or np.all(np.hypot(*(xy[kept] - xy[i]).T) > tau):
            kept.append(int(i))
    return np.asarray(kept, dtype=np.int64)


def stratify_points(pts: PointSet, scores, tau: float) -> PointSet:
    if len(pts) == 0:
        raise ValueError("cannot stratify an empty point set")
    return PointSet(pts.xy[stratify_indices(pts.xy, scores, tau)], pts.frame)


def robust_center(pts: PointSet, mad_k: float = 3.0) -> Point2D:
    """Centroid after a per-axis median +- k*MAD outlier filter.

    An axis with zero MAD keeps only points exactly at its median. If nothing
    survives, the per-axis median is returned.
    """
    xy = pts.xy
    if len(xy) == 0:
        raise ValueError("cannot centre an empty point set")
    med = np.median(xy, axis=0)
    dev = np.abs(xy - med)
    mad = np.median(dev, axis=0)
    keep = np.all(dev <= mad_k * mad, axis=1)
    if not keep.any():
        return Point2D(float(med[0]), float(med[1]), pts.frame)
    c = xy[keep].mean(axis=0)
    return Point2D(float(c[0]), float(c[1]), pts.frame)


def to_canonical_coords(pts: PointSet, grid: FeatureGrid, canonical_size: Optional[tuple[int, int]] = None) -> PointSet:
    """Patch (col, row) -> pixel centre in the canonical frame.

    x = (col + 0.5) * patch_size * W_canon / orig_width, likewise for y.
    """
    if pts.frame != "patch-grid":
        raise ValueError(f"expected patch-grid points, got {pts.frame}")
    xy = pts.xy
    if xy.size and (
        xy[:, 0].min() < 0 or xy[:, 1].min() < 0 or xy[:, 0].max() > grid.cols - 1 or xy[:, 1].max() > grid.rows - 1
    ):
        raise IndexError("patch coordinate outside the feature grid")
    ch, cw = canonical_size or (grid.orig_height, grid.orig_width)
    sx = grid.patch_size * cw / grid.orig_width
    sy = grid.patch_size * ch / grid.orig_height
    return PointSet(np.stack([(xy[:, 0] + 0.5) * sx, (xy[:, 1] + 0.5) * sy], axis=1), "canonical")


def trace_anchor(fq: FeatureGrid, ft: FeatureGrid, mq: Mask, cfg: AnchorConfig) -> AnchorTrace:
    """Run projection, matching and stratification; no point selection yet."""
    fg = project_mask_to_grid(mq, fq, cfg.foreground_threshold)
    if fg.size == 0:
        raise EmptyForegroundError("mask covers no patch of the query grid")
    matches = best_matches(similarity_heatmap(fq, ft), fg)
    rc = ft.patch_rc(matches.target_idx)
    target_points = PointSet(rc[:, ::-1].astype(np.float64), "patch-grid")
    kept = stratify_indices(target_points.xy, matches.scores, cfg.tau_strat)
    return AnchorTrace(fg, matches, target_points, kept)


def generate_anchor_prompt(fq: FeatureGrid, ft: FeatureGrid, mq: Mask, cfg: AnchorConfig = AnchorConfig()) -> AnchorPrompt:
    """Match, stratify, then place the prompt point(s) in the target view.

    A single point is the outlier-filtered centroid of all matched target
    locations; several points are the first ``n_points`` stratified matches
    in descending score order.
    """
    trace = trace_anchor(fq, ft, mq, cfg)
    if cfg.n_points == 1:
        c = robust_center(trace.target_points, cfg.outlier_mad_k)
        chosen = PointSet([[c.x, c.y]], "patch-grid")
    else:
        chosen = PointSet(trace.stratified.xy[: cfg.n_points], "patch-grid")
    return AnchorPrompt(to_canonical_coords(chosen, ft, cfg.canonical_size))
