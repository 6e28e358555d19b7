"""Training objectives: cross-view contrastive loss and the CE + Dice mask loss."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F


@dataclass(frozen=True)
class LossWeights:
    lambda_v: float = 1.0
    lambda_s: float = 1.0
    lambda_m: float = 10.0
    temperature: float = 0.07
    warmup_contrastive_steps: int = 4000
    warmup_lambda_v: float = 100.0
    ce_weight: float = 1.0
    dice_weight: float = 1.0
    dice_smooth: float = 1.0

    def __post_init__(self):
        if min(self.lambda_v, self.lambda_s, self.lambda_m, self.warmup_lambda_v) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")

    def effective_lambda_v(self, step: int) -> float:
        return self.warmup_lambda_v if step < self.warmup_contrastive_steps else self.lambda_v


# Alternative CE/Dice weighting (2:0.5) used by the larger reference setup.
ALT_MASK_WEIGHTS = {"ce_weight": 2.0, "dice_weight": 0.5}


def _cosine_matrix(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    na, nb = a.norm(dim=-1), b.norm(dim=-1)
    if (na == 0).any() or (nb == 0).any():
        raise ValueError("zero-norm feature vector in contrastive loss")
    return (a / na[:, None]) @ (b / nb[:, None]).T


def contrastive_loss(vc: torch.Tensor, vt: torch.Tensor, temperature: float = 0.07, target_negatives: bool = False):
    """Symmetric InfoNCE over in-batch negatives, averaged over the N pairs.

    Row i pairs vc[i] with vt[i]. The second direction anchors on vt[i] and
    normalizes over sim(vt[i], vc[k]). ``target_negatives=True`` instead
    normalizes over sim(vt[i], vt[k]) (target-target similarities); that
    variant is not zero for N=1 unless vc[0] and vt[0] are parallel.
    """
    if vc.shape != vt.shape or vc.ndim != 2 or vc.shape[0] < 1:
        raise ValueError(f"expected two (N, D) batches, got {tuple(vc.shape)} and {tuple(vt.shape)}")
    s_ct = _cosine_matrix(vc, vt) / temperature
    idx = torch.arange(vc.shape[0])
    l_c = F.cross_entropy(s_ct, idx, reduction="none")
    if target_negatives:
        s_tt = _cosine_matrix(vt, vt) / temperature
        l_t = torch.logsumexp(s_tt, dim=1) - s_ct.diagonal()
    else:
        l_t = F.cross_entropy(s_ct.T, idx, reduction="none")
    return (l_c + l_t).mean()


def _as_target(gt, like: torch.Tensor) -> torch.Tensor:
    t = torch.as_tensor(getattr(gt, "data", gt), dtype=like.dtype, device=like.device)
    if t.shape != like.shape:
        raise ValueError(f"prediction {tuple(like.shape)} and mask {tuple(t.shape)} differ in shape")
    return t


def ce_loss(logits: torch.Tensor, gt) -> torch.Tensor:
    """Mean pixel-wise binary cross-entropy; leading dims are averaged too."""
    return F.binary_cross_entropy_with_logits(logits, _as_target(gt, logits))


def dice_loss(logits: torch.Tensor, gt, smooth: float = 1.0) -> torch.Tensor:
    """1 - (2|P.G| + s)/(|P| + |G| + s) on sigmoid probabilities, per mask, then averaged."""
    t = _as_target(gt, logits)
    p = torch.sigmoid(logits)
    dims = (-2, -1)
    d = 1 - (2 * (p * t).sum(dims) + smooth) / (p.sum(dims) + t.sum(dims) + smooth)
    return d.mean()


def mask_loss(logits: torch.Tensor, gt, weights: LossWeights = LossWeights()) -> torch.Tensor:
    return weights.ce_weight * ce_loss(logits, gt) + weights.dice_weight * dice_loss(logits, gt, weights.dice_smooth)


def total_loss(v_hat_c, v_t, logits_c, m_t, logits_t, weights: LossWeights, step: int):
    """Weighted sum of the contrastive, structural and mask terms.

    Returns (total, components) with components keyed loss_v, loss_s, loss_m.
    Any term passed as ``None`` contributes zero.
    """
    ref = next(t for t in (logits_t, logits_c, v_hat_c) if t is not None)
    zero = ref.new_zeros(())
    loss_v = contrastive_loss(v_hat_c, v_t, weights.temperature) if v_hat_c is not None else zero
    loss_s = mask_loss(logits_c, m_t, weights) if logits_c is not None else zero
    loss_m = mask_loss(logits_t, m_t, weights) if logits_t is not None else zero
    total = weights.effective_lambda_v(step) * loss_v + weights.lambda_s * loss_s + weights.lambda_m * loss_m
    return total, {"loss_v": loss_v, "loss_s": loss_s, "loss_m": loss_m}


def combine_components(components: dict, weights: LossWeights, step: int):
    """Weighted sum of precomputed component values."""
    return (
        weights.effective_lambda_v(step) * components["loss_v"]
        + weights.lambda_s * components["loss_s"]
        + weights.lambda_m * components["loss_m"]
    )
