"""Visual prompt matcher: maps a query-view region to the target view.

Two branches share a mask encoder. The feature branch lets a fused query
embedding attend over the query-view patch features, with a mask-derived
spatial gate suppressing background. The structural branch FiLM-modulates a
latent prior of the query mask and decodes a cross-view mask estimate.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .core import Mask
from .features import FeatureGrid
from .nn_utils import MLP, Attention, pad_to_grid, patch_fraction, stage_strides


class NonFiniteError(FloatingPointError):
    pass


def _check_finite(t: torch.Tensor, what: str) -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise NonFiniteError(f"non-finite values in {what}")
    return t


@dataclass(frozen=True)
class MatcherConfig:
    dim: int = 64
    n_layers: int = 2
    heads: int = 1
    mlp_ratio: int = 4
    patch_size: int = 4
    channels: tuple[int, int] = (8, 16)
    foreground_threshold: float = 0.5
    mask_threshold: float = 0.5


def mask_pool(feats: torch.Tensor, masks: torch.Tensor, patch_size: int, threshold: float = 0.5):
    """Mean patch descriptor over foreground patches.

    feats: (B, D, rows, cols); masks: (B, H, W) in {0, 1}.
    Returns (pooled (B, D), n_foreground (B,)). Rows with no foreground patch pool to zero.
    """
    rows, cols = feats.shape[-2:]
    frac = patch_fraction(masks.to(feats.dtype), rows, cols, patch_size)
    w = ((frac >= threshold) & (frac > 0)).to(feats.dtype)
    n = w.sum(dim=(1, 2))
    pooled = torch.einsum("bdhw,bhw->bd", feats, w) / n.clamp_min(1.0)[:, None]
    return pooled, n


def mask_pool_grid(feat: FeatureGrid, m: Mask, threshold: float = 0.5) -> torch.Tensor:
    """Region feature of one view; raises if the mask selects no patch."""
    pooled, n = mask_pool(
        torch.as_tensor(feat.data, dtype=torch.float64)[None],
        torch.as_tensor(m.data, dtype=torch.float64)[None],
        feat.patch_size,
        threshold,
    )
    if n.item() == 0:
        raise ValueError("mask selects no foreground patch")
    return pooled[0]


class ConvMaskEncoder(nn.Module):
    """Three strided conv stages: (B, H, W) mask -> (B, D, rows, cols) latent map."""

    def __init__(self, dim: int, patch_size: int, channels=(8, 16)):
        super().__init__()
        widths = [1, *channels, dim]
        strides = stage_strides(patch_size)
        self.patch_size = patch_size
        self.convs = nn.ModuleList(
            nn.Conv2d(widths[i], widths[i + 1], 3, padding=1) if s == 1 else nn.Conv2d(widths[i], widths[i + 1], s, stride=s)
            for i, s in enumerate(strides)
        )

    def forward(self, masks: torch.Tensor, rows: int, cols: int) -> torch.Tensor:
        x = pad_to_grid(masks, rows, cols, self.patch_size)
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i < len(self.convs) - 1:
                x = F.gelu(x)
        return x


class ConvMaskDecoder(nn.Module):
    """Transposed-conv stack: (B, D, rows, cols) latent -> (B, rows*ps, cols*ps) logits."""

    def __init__(self, dim: int, patch_size: int, channels=(8, 16)):
        super().__init__()
        widths = [dim, *reversed(channels), 1]
        strides = list(reversed(stage_strides(patch_size)))
        layers = []
        for i, s in enumerate(strides):
            if s == 1:
                layers.append(nn.Conv2d(widths[i], widths[i + 1], 3, padding=1))
            else:
                layers.append(nn.ConvTranspose2d(widths[i], widths[i + 1], s, stride=s))
        self.layers = nn.ModuleList(layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.gelu(x)
        return x.squeeze(1)


class CrossAttentionLayer(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.attn = Attention(dim, heads)
        self.mlp = MLP(dim, mlp_ratio * dim)

    def forward(self, x, feats, gate):
        x = x + self.attn(x, feats, feats, gate=gate)
        return x + self.mlp(x)


class VPMatcher(nn.Module):
    def __init__(self, cfg: MatcherConfig = MatcherConfig()):
        super().__init__()
        d = cfg.dim
        self.cfg = cfg
        self.mask_encoder = ConvMaskEncoder(d, cfg.patch_size, cfg.channels)
        self.gate = nn.Conv2d(d, 1, 1)
        self.layers = nn.ModuleList(CrossAttentionLayer(d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.n_layers))
        self.prior_encoder = ConvMaskEncoder(d, cfg.patch_size, cfg.channels)
        self.film = MLP(d, d, 2 * d)
        self.mask_decoder = ConvMaskDecoder(d, cfg.patch_size, cfg.channels)
        self.prompt_skip = nn.Linear(2 * d, d)
        self.prompt_mlp = MLP(2 * d, d, d)
        self.reset_conditioning()

    def reset_conditioning(self):
        """Start from the identity structural path and an open gate."""
        nn.init.zeros_(self.film.fc2.weight)
        nn.init.zeros_(self.film.fc2.bias)
        nn.init.zeros_(self.gate.weight)
        nn.init.constant_(self.gate.bias, 6.0)

    # --- feature mapping --------------------------------------------------------

    def spatial_gate(self, fmask_map: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.gate(fmask_map)).flatten(1)

    def feature_mapping(self, p_f, feats, gate):
        """p_f: (B, D) fused embedding; feats: (B, D, rows, cols); gate: (B, rows*cols) or None."""
        x = p_f[:, None, :]
        tokens = feats.flatten(2).transpose(1, 2)
        for layer in self.layers:
            x = layer(x, tokens, gate)
        return _check_finite(x[:, 0], "feature mapping")

    def attention_weights(self, p_f, feats, gate, layer: int = 0):
        """Renormalized gated attention of the first query step, (B, heads, 1, rows*cols)."""
        tokens = feats.flatten(2).transpose(1, 2)
        x = p_f[:, None, :]
        for i, lay in enumerate(self.layers):
            if i == layer:
                return lay.attn.weights(x, tokens, gate=gate)
            x = lay(x, tokens, gate)
        raise IndexError(layer)

    # --- structural mapping ---------------------------------------------------------

    def modulation(self, v_q):
        gamma, beta = self.film(v_q).chunk(2, dim=-1)
        return gamma, beta

    def structural_latent(self, m_prior, v_q, fmask_map):
        gamma, beta = self.modulation(v_q)
        return m_prior * (1 + torch.tanh(gamma))[:, :, None, None] + beta[:, :, None, None] + fmask_map

    def structural_mapping(self, masks, v_q, rows, cols, fmask_map=None):
        """Returns (cross-view mask logits (B, H, W), modulated latent)."""
        if fmask_map is None:
            fmask_map = self.mask_encoder(masks, rows, cols)
        m_prior = self.prior_encoder(masks, rows, cols)
        latent = _check_finite(self.structural_latent(m_prior, v_q, fmask_map), "structural latent")
        h, w = masks.shape[-2:]
        logits = self.mask_decoder(latent)[:, :h, :w]
        return _check_finite(logits, "structural logits"), latent

    # --- prompt assembly --------------------------------------------------------------

    def assemble_prompt(self, v_c, v_c_prime):
        x = torch.cat([v_c, v_c_prime], dim=-1)
        return self.prompt_skip(x) + self.prompt_mlp(x)

    def forward(self, feats_q: torch.Tensor, masks_q: torch.Tensor, use_gate: bool = True):
        """
        feats_q: (B, D, rows, cols) query-view features; masks_q: (B, H, W).
        Returns (v_hat_c (B, D), cross-view mask logits (B, H, W), visual prompt (B, D)).
        """
        cfg = self.cfg
        rows, cols = feats_q.shape[-2:]
        masks_q = masks_q.to(feats_q.dtype)
        v_q, n_fg = mask_pool(feats_q, masks_q, cfg.patch_size, cfg.foreground_threshold)
        if (n_fg == 0).any():
            raise ValueError("query mask selects no foreground patch")
        fmask_map = self.mask_encoder(masks_q, rows, cols)
        p_f = v_q + fmask_map.mean(dim=(2, 3))
        gate = self.spatial_gate(fmask_map) if use_gate else None
        v_hat = self.feature_mapping(p_f, feats_q, gate)

        logits_c, _ = self.structural_mapping(masks_q, v_q, rows, cols, fmask_map)
        m_c = (torch.sigmoid(logits_c) > cfg.mask_threshold).to(feats_q.dtype)
        # pooled with the query-view features, as the matcher is defined
        v_c_prime, n_c = mask_pool(feats_q, m_c, cfg.patch_size, cfg.foreground_threshold)
        v_c_prime = torch.where((n_c > 0)[:, None], v_c_prime, v_hat)
        prompt = _check_finite(self.assemble_prompt(v_hat, v_c_prime), "visual prompt")
        return v_hat, logits_c, prompt


def vpmatcher_forward(feat_q: FeatureGrid, mq: Mask, params: VPMatcher):
    """Single-example wrapper returning (v_hat_c (D,), mask logits (H, W), visual prompt (D,))."""
    p = next(params.parameters())
    feats = torch.as_tensor(feat_q.data, dtype=p.dtype)[None]
    masks = torch.as_tensor(mq.data, dtype=p.dtype)[None]
    v, logits, prompt = params(feats, masks)
    return v[0], logits[0], prompt[0]
