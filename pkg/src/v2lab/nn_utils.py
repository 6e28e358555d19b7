"""Small torch building blocks shared by the matcher and the decoder."""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn


class Attention(nn.Module):
    """Multi-head dot-product attention with separate q/k/v/out projections."""

    def __init__(self, dim: int, heads: int = 1):
        super().__init__()
        if dim % heads:
            raise ValueError("dim must be divisible by heads")
        self.heads = heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def _split(self, x):
        b, n, d = x.shape
        return x.view(b, n, self.heads, d // self.heads).transpose(1, 2)

    def weights(self, q, k, key_valid=None, gate=None):
        """Attention weights (B, heads, Nq, Nk); ``gate`` (B, Nk) rescales and renormalizes."""
        q, k = self._split(self.q_proj(q)), self._split(self.k_proj(k))
        logits = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
        if key_valid is not None:
            logits = logits.masked_fill(~key_valid[:, None, None, :], float("-inf"))
        attn = logits.softmax(dim=-1)
        if gate is not None:
            attn = attn * gate[:, None, None, :]
            attn = attn / attn.sum(dim=-1, keepdim=True)
        return attn

    def forward(self, q, k, v, key_valid=None, gate=None):
        attn = self.weights(q, k, key_valid, gate)
        out = attn @ self._split(self.v_proj(v))
        b, h, n, dh = out.shape
        return self.out_proj(out.transpose(1, 2).reshape(b, n, h * dh))


class MLP(nn.Module):
    def __init__(self, dim: int, hidden: int, out: int | None = None):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, out or dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


def stage_strides(patch_size: int, n_stages: int = 3) -> list[int]:
    """Split a power-of-two downsampling factor over ``n_stages`` convs, late stages first."""
    if patch_size < 1 or patch_size & (patch_size - 1):
        raise ValueError(f"patch_size must be a power of two, got {patch_size}")
    strides = [1] * n_stages
    k = int(math.log2(patch_size))
    i = n_stages - 1
    while k:
        strides[i] *= 2
        k -= 1
        i = i - 1 if i > 0 else n_stages - 1
    return strides


def sinusoidal_encoding(xy: torch.Tensor, dim: int, max_freq: float = 16.0) -> torch.Tensor:
    """Encode normalized (x, y) in [0, 1] as sin/cos features of geometric frequencies."""
    nf = dim // 4
    if nf < 1:
        raise ValueError("encoding dim must be >= 4")
    freqs = math.pi * max_freq ** (torch.arange(nf, dtype=xy.dtype, device=xy.device) / max(nf - 1, 1))
    ang_x = xy[..., :1] * freqs
    ang_y = xy[..., 1:2] * freqs
    enc = torch.cat([ang_x.sin(), ang_x.cos(), ang_y.sin(), ang_y.cos()], dim=-1)
    if enc.shape[-1] < dim:
        enc = F.pad(enc, (0, dim - enc.shape[-1]))
    return enc


def grid_positions(rows: int, cols: int, patch_size: int, height: int, width: int, dtype=torch.float32) -> torch.Tensor:
    """Normalized pixel-centre coordinates of every patch, (rows*cols, 2) in row-major order."""
    r = (torch.arange(rows, dtype=dtype) + 0.5) * patch_size / height
    c = (torch.arange(cols, dtype=dtype) + 0.5) * patch_size / width
    rr, cc = torch.meshgrid(r, c, indexing="ij")
    return torch.stack([cc.reshape(-1), rr.reshape(-1)], dim=-1)


def pad_to_grid(mask: torch.Tensor, rows: int, cols: int, patch_size: int) -> torch.Tensor:
    """Zero-pad (B, H, W) masks to the patch-grid extent, returning (B, 1, rows*ps, cols*ps)."""
    h, w = mask.shape[-2:]
    return F.pad(mask, (0, cols * patch_size - w, 0, rows * patch_size - h)).unsqueeze(1)


def patch_fraction(mask: torch.Tensor, rows: int, cols: int, patch_size: int) -> torch.Tensor:
    """Foreground fraction per patch over the valid (unpadded) pixels, (B, rows, cols)."""
    h, w = mask.shape[-2:]
    fg = F.avg_pool2d(pad_to_grid(mask, rows, cols, patch_size), patch_size)
    valid = F.avg_pool2d(pad_to_grid(torch.ones_like(mask[:1]), rows, cols, patch_size), patch_size)
    return (fg / valid.clamp_min(1e-12)).squeeze(1)
