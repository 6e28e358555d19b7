"""Post-hoc cyclic consistency selection between expert predictions.

Each candidate target mask is mapped back to the query view with the anchor
pipeline run in reverse; the expert whose back-projected points land closest
to the query mask wins. Nothing here is trained.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
from scipy.spatial import cKDTree

from .anchor import AnchorConfig, EmptyForegroundError, generate_anchor_prompt, to_canonical_coords, trace_anchor
from .core import Mask, PointSet, compute_iou
from .decoder import MaskDecoder, decode_mask, encode_point_prompt
from .features import FeatureGrid

K_REF = 32


def pccs_anchor_config() -> AnchorConfig:
    """Back-projection keeps every distinct matched patch: stratifying with a zero
    radius only drops repeated matches, so no evidence is thinned away."""
    return AnchorConfig(tau_strat=0.0)


@dataclass(frozen=True)
class CyclicScore:
    expert_id: int
    mean_dist: float
    n_points: int

    def __post_init__(self):
        if not self.mean_dist >= 0:
            raise ValueError("mean_dist must be >= 0")


@dataclass
class SelectionContext:
    """Everything the selector needs about one pair besides the candidates."""

    feat_q: FeatureGrid
    feat_t: FeatureGrid
    mq: Mask
    anchor_cfg: AnchorConfig = field(default_factory=pccs_anchor_config)
    k_ref: int = K_REF
    seed: int = 0
    decoder: Optional[MaskDecoder] = None


@dataclass
class Selection:
    expert_id: int
    scores: list
    warning: bool = False


def back_project(feat_t: FeatureGrid, feat_q: FeatureGrid, m_pred: Mask, cfg: Optional[AnchorConfig] = None) -> PointSet:
    """Stratified matches of a target-view mask in the query view, canonical coordinates.

    Raises EmptyForegroundError when the mask covers no target patch.
    """
    cfg = cfg or pccs_anchor_config()
    trace = trace_anchor(feat_t, feat_q, m_pred, cfg)
    return to_canonical_coords(trace.stratified, feat_q, cfg.canonical_size)


def sample_reference_points(mq: Mask, k_ref: int = K_REF, seed: int = 0) -> np.ndarray:
    """``k_ref`` distinct foreground pixel centres (all of them if fewer), seeded."""
    if mq.is_empty():
        raise ValueError("query mask is empty")
    ys, xs = np.nonzero(mq.data)
    rng = np.random.default_rng(seed)
    pick = rng.choice(len(xs), size=min(k_ref, len(xs)), replace=False)
    return np.stack([xs[pick] + 0.5, ys[pick] + 0.5], axis=1)


def cyclic_score(back_pts: PointSet, mq: Mask, k_ref: int = K_REF, seed: int = 0, refs: Optional[np.ndarray] = None) -> float:
    """Mean distance from each back-projected point to its nearest reference point (pixels)."""
    if len(back_pts) == 0:
        return math.inf
    if refs is None:
        refs = sample_reference_points(mq, k_ref, seed)
    d, _ = cKDTree(refs).query(back_pts.xy)
    return float(np.mean(d))


def _score_all(predictions: Sequence[tuple[int, Mask]], ctx: SelectionContext) -> list[CyclicScore]:
    refs = sample_reference_points(ctx.mq, ctx.k_ref, ctx.seed)
    scores = []
    for eid, m in predictions:
        try:
            pts = back_project(ctx.feat_t, ctx.feat_q, m, ctx.anchor_cfg)
            scores.append(CyclicScore(eid, cyclic_score(pts, ctx.mq, refs=refs), max(len(pts), 1)))
        except EmptyForegroundError:
            scores.append(CyclicScore(eid, math.inf, 1))
    return scores


def _pick(values: dict, minimize: bool) -> tuple[int, bool]:
    finite = {k: v for k, v in values.items() if math.isfinite(v)}
    if not finite:
        first = min(values)
        warnings.warn("no candidate could be scored; falling back to the first expert", stacklevel=3)
        return first, True
    best = min(finite, key=lambda k: ((finite[k] if minimize else -finite[k]), k))
    return best, False


def select_expert(predictions: Sequence[tuple[int, Mask]], ctx: SelectionContext) -> Selection:
    """Argmin cyclic distance; ties go to the lowest expert id."""
    if not predictions:
        raise ValueError("need at least one prediction")
    scores = _score_all(predictions, ctx)
    best, warn = _pick({s.expert_id: s.mean_dist for s in scores}, minimize=True)
    return Selection(best, scores, warn)


def cycle_mask_select(predictions: Sequence[tuple[int, Mask]], ctx: SelectionContext) -> Selection:
    """Baseline: decode a query-view mask from each back-projected prompt and keep the best IoU with M_q.

    The returned scores hold 1 - IoU so that lower is better, as for select_expert.
    """
    if not predictions:
        raise ValueError("need at least one prediction")
    if ctx.decoder is None:
        raise ValueError("the cycle-mask selector needs a point decoder")
    h, w = ctx.mq.shape
    ious, scores = {}, []
    for eid, m in predictions:
        try:
            prompt = generate_anchor_prompt(ctx.feat_t, ctx.feat_q, m, ctx.anchor_cfg)
        except EmptyForegroundError:
            ious[eid] = -math.inf
            scores.append(CyclicScore(eid, math.inf, 1))
            continue
        with torch.no_grad():
            logits = decode_mask(ctx.feat_q, encode_point_prompt(prompt, (h, w), ctx.decoder.dim), ctx.decoder)
        iou = compute_iou(Mask(logits.numpy() > 0), ctx.mq)
        ious[eid] = iou
        scores.append(CyclicScore(eid, 1.0 - iou, len(prompt.points)))
    best, warn = _pick(ious, minimize=False)
    return Selection(best, scores, warn)
