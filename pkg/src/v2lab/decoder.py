"""Prompt encoder and a small prompt-conditioned mask decoder.

The decoder is a two-way transformer in the style of promptable segmenters:
prompt tokens and a learned mask token attend to the target-view patch
features, the features attend back to the tokens, and the mask token is
turned into per-pixel logits over upsampled features.

Token order is part of the contract: fused prompts carry the anchor tokens
first, then the visual token.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .anchor import AnchorPrompt
from .features import FeatureGrid
from .nn_utils import MLP, Attention, grid_positions, sinusoidal_encoding

KINDS = ("point", "visual")


@dataclass
class PromptEmbedding:
    """Prompt tokens (n, D) with one kind tag per token."""

    tokens: torch.Tensor
    kinds: tuple[str, ...]

    def __post_init__(self):
        if self.tokens.ndim != 2 or self.tokens.shape[0] < 1:
            raise ValueError("prompt needs at least one (D,) token")
        if len(self.kinds) != self.tokens.shape[0]:
            raise ValueError("one kind tag per token required")
        if any(k not in KINDS for k in self.kinds):
            raise ValueError(f"unknown token kind in {self.kinds}")
        if not torch.isfinite(self.tokens).all():
            raise ValueError("prompt tokens must be finite")

    def __len__(self) -> int:
        return self.tokens.shape[0]

    def __add__(self, other: "PromptEmbedding") -> "PromptEmbedding":
        return PromptEmbedding(torch.cat([self.tokens, other.tokens.to(self.tokens.dtype)]), self.kinds + other.kinds)

    def kind_ids(self) -> torch.Tensor:
        return torch.tensor([KINDS.index(k) for k in self.kinds], dtype=torch.long)


def encode_points(xy: torch.Tensor, image_dims: tuple[int, int], dim: int) -> torch.Tensor:
    """Canonical pixel coordinates (..., 2) -> sinusoidal tokens (..., dim)."""
    h, w = image_dims
    scale = torch.tensor([w, h], dtype=xy.dtype, device=xy.device)
    return sinusoidal_encoding(xy / scale, dim)


def encode_point_prompt(p: AnchorPrompt, image_dims: tuple[int, int], dim: int = 64) -> PromptEmbedding:
    """One positional token per anchor point; the decoder adds the point-kind embedding."""
    h, w = image_dims
    xy = p.points.xy
    if (xy < 0).any() or (xy[:, 0] > w).any() or (xy[:, 1] > h).any():
        raise ValueError(f"anchor point outside the {w}x{h} canonical frame")
    tokens = encode_points(torch.as_tensor(xy, dtype=torch.float32), image_dims, dim)
    return PromptEmbedding(tokens, ("point",) * len(xy))


def encode_visual_prompt(v: torch.Tensor) -> PromptEmbedding:
    v = torch.as_tensor(v)
    return PromptEmbedding(v.reshape(1, -1), ("visual",))


class TwoWayBlock(nn.Module):
    def __init__(self, dim: int, heads: int = 1, mlp_ratio: int = 2):
        super().__init__()
        self.self_attn = Attention(dim, heads)
        self.norm1 = nn.LayerNorm(dim)
        self.token_to_image = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = MLP(dim, mlp_ratio * dim)
        self.norm3 = nn.LayerNorm(dim)
        self.image_to_token = Attention(dim, heads)
        self.norm4 = nn.LayerNorm(dim)

    def forward(self, tokens, token_pe, image, image_pe, token_valid):
        q = tokens + token_pe
        tokens = self.norm1(tokens + self.self_attn(q, q, tokens, key_valid=token_valid))
        q = tokens + token_pe
        tokens = self.norm2(tokens + self.token_to_image(q, image + image_pe, image))
        tokens = self.norm3(tokens + self.mlp(tokens))
        q = tokens + token_pe
        image = self.norm4(image + self.image_to_token(image + image_pe, q, tokens, key_valid=token_valid))
        return tokens, image


class MaskDecoder(nn.Module):
    """Prompt tokens + target features -> mask logits at image resolution."""

    def __init__(self, feat_dim: int = 64, dim: int = 64, n_blocks: int = 2, heads: int = 4, mlp_ratio: int = 2):
        super().__init__()
        self.dim = dim
        self.feat_proj = nn.Conv2d(feat_dim, dim, 1)
        self.kind_embed = nn.Embedding(len(KINDS), dim)
        self.mask_token = nn.Parameter(torch.randn(dim) * 0.02)
        self.blocks = nn.ModuleList(TwoWayBlock(dim, heads, mlp_ratio) for _ in range(n_blocks))
        self.final_attn = Attention(dim, heads)
        self.final_norm = nn.LayerNorm(dim)
        self.up1 = nn.ConvTranspose2d(dim, dim // 4, 2, stride=2)
        self.up_norm = nn.GroupNorm(1, dim // 4)
        self.up2 = nn.ConvTranspose2d(dim // 4, dim // 4, 2, stride=2)
        self.hyper = MLP(dim, dim, dim // 4)
        # per-pixel detail recovered from the raw descriptors (high-resolution skip)
        self.detail = nn.Conv2d(feat_dim, dim // 4 * 16, 1)

    def forward(
        self,
        feats: torch.Tensor,
        tokens: torch.Tensor,
        kinds: torch.Tensor,
        token_valid: torch.Tensor | None = None,
        patch_size: int = 4,
        out_hw: tuple[int, int] | None = None,
    ) -> torch.Tensor:
        """
        feats: (B, F, rows, cols) target-view patch features
        tokens: (B, n, D) prompt tokens; kinds: (B, n) indices into KINDS
        token_valid: (B, n) bool, False for padding tokens
        returns (B, H, W) logits
        """
        b, _, rows, cols = feats.shape
        out_hw = out_hw or (rows * patch_size, cols * patch_size)
        image = self.feat_proj(feats).flatten(2).transpose(1, 2)
        image_pe = sinusoidal_encoding(
            grid_positions(rows, cols, patch_size, out_hw[0], out_hw[1], feats.dtype).to(feats.device), self.dim
        ).expand(b, -1, -1)

        prompt = tokens + self.kind_embed(kinds)
        mask_tok = self.mask_token.to(feats.dtype).expand(b, 1, -1)
        toks = torch.cat([mask_tok, prompt], dim=1)
        token_pe = torch.cat([torch.zeros_like(mask_tok), tokens], dim=1)
        if token_valid is None:
            valid = torch.ones(toks.shape[:2], dtype=torch.bool, device=feats.device)
        else:
            valid = torch.cat([torch.ones(b, 1, dtype=torch.bool, device=feats.device), token_valid], dim=1)

        for blk in self.blocks:
            toks, image = blk(toks, token_pe, image, image_pe, valid)
        q = toks + token_pe
        toks = self.final_norm(toks + self.final_attn(q, image + image_pe, image))

        fmap = image.transpose(1, 2).reshape(b, self.dim, rows, cols)
        up = self.up2(F.gelu(self.up_norm(self.up1(fmap))))
        detail = F.pixel_shuffle(self.detail(feats), 4)
        up = F.gelu(up + detail)
        target = (rows * patch_size, cols * patch_size)
        if up.shape[-2:] != target:
            up = F.interpolate(up, size=target, mode="bilinear", align_corners=False)
        logits = torch.einsum("bc,bchw->bhw", self.hyper(toks[:, 0]), up)
        return logits[:, : out_hw[0], : out_hw[1]]


def decode_mask(feat_t: FeatureGrid, prompt: PromptEmbedding, params: MaskDecoder) -> torch.Tensor:
    """Single-example convenience wrapper: (H, W) logits for one prompt."""
    p = next(params.parameters())
    feats = torch.as_tensor(feat_t.data, dtype=p.dtype)[None]
    tokens = prompt.tokens.to(p.dtype)[None]
    return params(
        feats, tokens, prompt.kind_ids()[None], patch_size=feat_t.patch_size, out_hw=(feat_t.orig_height, feat_t.orig_width)
    )[0]


def batch_prompts(prompts: Sequence[PromptEmbedding], dtype=torch.float32):
    """Pad a list of prompts to (B, n_max, D) tokens, (B, n_max) kinds and validity."""
    n = max(len(p) for p in prompts)
    d = prompts[0].tokens.shape[1]
    tokens = torch.zeros(len(prompts), n, d, dtype=dtype)
    kinds = torch.zeros(len(prompts), n, dtype=torch.long)
    valid = torch.zeros(len(prompts), n, dtype=torch.bool)
    for i, p in enumerate(prompts):
        tokens[i, : len(p)] = p.tokens.to(dtype)
        kinds[i, : len(p)] = p.kind_ids()
        valid[i, : len(p)] = True
    return tokens, kinds, valid


def logits_to_numpy(logits: torch.Tensor) -> np.ndarray:
    return logits.detach().cpu().numpy()
